import dataclasses
import json
import logging

import pytest

from conftest import SMALL_PRE
from ecgdg import synth
from ecgdg.dsp import PreprocessConfig
from ecgdg.errors import EmptySource, InvalidConfig, LabelMapMismatch
from ecgdg.experiment import (ExperimentConfig, Settings, evaluate_run, is_preprocessed,
                              load_run_reports, load_settings, run_experiment, train_variant)
from ecgdg.harness import build_report
from ecgdg.model import ModelConfig
from ecgdg.trainer import TrainConfig

SMALL_MODEL = dict(stem_channels=8, stem_kernel=7, stage_channels=(8, 16),
                   blocks_per_stage=(1, 1), tap_projection_channels=4)


@pytest.fixture(scope="module")
def prior_data(tmp_path_factory):
    """S1/S2 carry classes 0-1, P carries classes 1-2, X carries classes 4-5."""
    out = tmp_path_factory.mktemp("prior")
    lm = synth.synthetic_label_map(6)
    specs = [synth.SynthDomainSpec(name, class_priors=p, cooccurrence=0.0, record_count=30, seed=k)
             for k, (name, p) in enumerate([("S1", (0.5, 0.5, 0, 0, 0, 0)),
                                            ("S2", (0.5, 0.5, 0, 0, 0, 0)),
                                            ("P", (0, 0.5, 0.5, 0, 0, 0)),
                                            ("X", (0, 0, 0, 0, 0.5, 0.5))])]
    synth.generate_dataset(specs, lm, out)
    return out


def _settings(data, **exp):
    base = dict(data=str(data), sources=("S1", "S2"), targets=("P", "X"), seed=3)
    base.update(exp)
    return Settings(experiment=ExperimentConfig(**base),
                    preprocess=PreprocessConfig(**SMALL_PRE),
                    model=ModelConfig(**SMALL_MODEL),
                    train=TrainConfig(epochs=2, lr_decay_epoch=2, batch_size=16))


def test_settings_layering(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nepochs = 5\nlr_decay_epoch = 4\nbatch_size = 8\n[experiment]\nseed = 4\n")
    s = load_settings(ini, overrides={"train": {"epochs": "7"}})
    assert (s.train.epochs, s.train.lr_decay_epoch, s.train.batch_size, s.experiment.seed) == (7, 4, 8, 4)
    assert load_settings() == Settings()
    again = tmp_path / "again.ini"
    again.write_text(s.text())
    assert load_settings(again) == s


def test_settings_reject_unknowns(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nepochz = 5\n")
    with pytest.raises(InvalidConfig):
        load_settings(ini)
    ini.write_text("[trainer]\nepochs = 5\n")
    with pytest.raises(InvalidConfig):
        load_settings(ini)


def test_source_target_overlap_rejected():
    with pytest.raises(InvalidConfig):
        ExperimentConfig(sources=("A",), targets=("A",))
    with pytest.raises(InvalidConfig):
        ExperimentConfig(variants=("resnet",))


def test_missing_domain(prior_data, tmp_path):
    s = _settings(prior_data, sources=("NOPE",), targets=())
    with pytest.raises(EmptySource):
        train_variant(s, tmp_path / "run")


def test_run_dir_contents_and_resume(prior_data, tmp_path):
    s = _settings(prior_data)
    run = train_variant(s, tmp_path / "run")
    for name in ("config.txt", "labels.txt", "splits.json", "log.csv", "best.ckpt", "state.json"):
        assert (run / name).exists()
    assert json.loads((run / "state.json").read_text())["complete"]
    splits = json.loads((run / "splits.json").read_text())
    assert sorted(splits["sources"]) == ["S1", "S2"]
    stamp = (run / "best.ckpt").stat().st_mtime_ns
    train_variant(s, run)
    assert (run / "best.ckpt").stat().st_mtime_ns == stamp
    # a changed configuration retrains
    train_variant(dataclasses.replace(s, train=TrainConfig(epochs=1, lr_decay_epoch=1, batch_size=16)), run)
    assert len((run / "log.csv").read_text().splitlines()) == 2


def test_evaluate_skips_disjoint_target(prior_data, tmp_path, caplog):
    run = train_variant(_settings(prior_data), tmp_path / "run")
    with caplog.at_level(logging.WARNING, logger="ecgdg.experiment"):
        reports = evaluate_run(run)
    tags = [r.eval_tag for r in reports]
    assert tags == ["intra", "ood", "ood:P"]
    assert "X shares no scored classes" in caplog.text
    assert "P: evaluating on 1 shared classes" in caplog.text
    assert (run / "report.csv").exists()


def test_report_mismatched_label_maps(prior_data, tmp_path):
    a = train_variant(_settings(prior_data, targets=("P",)), tmp_path / "a")
    evaluate_run(a)
    b = tmp_path / "b"
    b.mkdir()
    for name in ("config.txt", "report.csv"):
        (b / name).write_text((a / name).read_text())
    (b / "labels.txt").write_text("".join((a / "labels.txt").read_text().splitlines(True)[:5]))
    reports, lm = load_run_reports([a])
    assert len(build_report(reports).column_groups()) == 2
    with pytest.raises(LabelMapMismatch):
        load_run_reports([a, b])


def test_run_experiment_reproducible(synth_data, tmp_path):
    data, _ = synth_data
    s = Settings(experiment=ExperimentConfig(data=str(data), sources=("D1",), targets=("D2",),
                                             seed=5, deterministic=True),
                 preprocess=PreprocessConfig(**SMALL_PRE), model=ModelConfig(**SMALL_MODEL),
                 train=TrainConfig(epochs=2, lr_decay_epoch=2, batch_size=16))
    first = run_experiment(s, tmp_path / "a")
    second = run_experiment(s, tmp_path / "b")
    for name in ("report.csv", "report.txt"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    for variant in ("multiscale", "baseline"):
        assert (first / variant / "splits.json").exists()
        assert (first / variant / "config.txt").read_text() == (second / variant / "config.txt").read_text()
    table = (first / "report.txt").read_text()
    assert "multiscale" in table and "baseline" in table
    assert (first / "config.txt").read_text() == s.text()


def test_run_experiment_needs_targets(synth_data, tmp_path):
    data, _ = synth_data
    s = Settings(experiment=ExperimentConfig(data=str(data), sources=("D1",)))
    with pytest.raises(InvalidConfig):
        run_experiment(s, tmp_path)


def test_preprocessed_marker(tmp_path):
    from ecgdg.config import to_section, write_ini
    cfg = PreprocessConfig(**SMALL_PRE)
    assert not is_preprocessed(tmp_path, cfg)
    write_ini(tmp_path / "preprocessed.ini", {"preprocess": to_section(cfg)})
    assert is_preprocessed(tmp_path, cfg)
    assert not is_preprocessed(tmp_path, PreprocessConfig())
