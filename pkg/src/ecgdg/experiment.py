"""Experiment orchestration: filter scored labels, split sources, train each
model variant, evaluate on the source test split (intra) and on every target
domain (ood), and write comparison reports.

A run directory holds one trained variant::

    config.txt   effective configuration (INI key=value sections)
    labels.txt   ordered scored classes
    splits.json  source train/val/test ids and target ids
    log.csv      epoch, train_loss, val_loss, lr, seconds
    best.ckpt    best-validation parameters (EDGW)
    state.json   completion marker used to resume
    report.csv   per-class metrics written by evaluation
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as _config
from .autodiff import read_checkpoint
from .dsp import PreprocessConfig, build_filters, preprocess_record
from .errors import EmptySource, EmptySplit, InvalidConfig, LabelMapMismatch
from .harness import (INTRA, OOD, ClassReport, ComparisonTable, SplitPlan, build_report,
                      compute_class_metrics, filter_scored, make_splits, read_report_csv)
from .labels import LabelMap, load_label_map, read_labels_txt
from .model import BASELINE, MULTISCALE, ModelConfig, ModelGraph, build_model
from .records import DatasetManifest, load_record, manifest_path
from .trainer import Dataset, TrainConfig, evaluate_split, set_deterministic, train

logger = logging.getLogger(__name__)

PREPROCESSED_MARKER = "preprocessed.ini"
SECTIONS = ("experiment", "preprocess", "model", "train")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    data: str = ""
    label_map: str = ""
    merge_equivalent: bool = True
    sources: tuple[str, ...] = ()
    targets: tuple[str, ...] = ()
    variants: tuple[str, ...] = (MULTISCALE, BASELINE)
    seed: int = 0
    omit_unrecognized: bool = False
    threshold: Optional[float] = None
    deterministic: bool = False

    def __post_init__(self):
        bad = set(self.variants) - {MULTISCALE, BASELINE}
        if bad:
            raise InvalidConfig(f"unknown model variants: {sorted(bad)}")
        overlap = set(self.sources) & set(self.targets)
        if overlap:
            raise InvalidConfig(f"domains cannot be both source and target: {sorted(overlap)}")


@dataclass(frozen=True)
class Settings:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def sections(self) -> dict[str, dict[str, str]]:
        return {name: _config.to_section(getattr(self, name)) for name in SECTIONS}

    def text(self) -> str:
        lines = []
        for name, body in self.sections().items():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in body.items())
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, overrides: dict[str, dict[str, str]]) -> "Settings":
        unknown = set(overrides) - set(SECTIONS)
        if unknown:
            raise InvalidConfig(f"unknown config section(s): {sorted(unknown)}")
        changes = {}
        for name, values in overrides.items():
            if values:
                changes[name] = _config.from_section(type(getattr(self, name)), values,
                                                     base=getattr(self, name), section=name)
        return dataclasses.replace(self, **changes)


def load_settings(path=None, overrides: Optional[dict] = None,
                  base: Optional[Settings] = None) -> Settings:
    """``base`` (defaults when omitted), then the INI file at ``path``, then
    ``overrides``; later layers win."""
    settings = base or Settings()
    if path is not None:
        parser = _config.read_ini(path)
        _config.check_sections(parser, SECTIONS)
        settings = settings.with_overrides({s: _config.section_dict(parser, s) for s in SECTIONS})
    if overrides:
        settings = settings.with_overrides(overrides)
    return settings


def resolve_label_map(exp: ExperimentConfig) -> LabelMap:
    if exp.label_map:
        return load_label_map(exp.label_map, exp.merge_equivalent)
    candidate = Path(exp.data) / "labels.csv" if exp.data else None
    if candidate is not None and candidate.exists():
        return load_label_map(candidate, exp.merge_equivalent)
    return load_label_map(None, exp.merge_equivalent)


def finalize(settings: Settings, label_map: LabelMap, variant: Optional[str] = None) -> Settings:
    """Tie model width to the label map and propagate the run seed."""
    model = dataclasses.replace(settings.model, num_classes=len(label_map),
                                variant=variant or settings.model.variant)
    train_cfg = dataclasses.replace(settings.train, seed=settings.experiment.seed,
                                    deterministic=settings.experiment.deterministic
                                    or settings.train.deterministic)
    return dataclasses.replace(settings, model=model, train=train_cfg)


# ------------------------------------------------------------- domain data

@dataclass
class DomainData:
    name: str
    ids: tuple[str, ...]
    x: np.ndarray  # (n, 12, L) float32, preprocessed
    labels: tuple[tuple[str, ...], ...]

    def select(self, ids: Sequence[str]) -> "DomainData":
        pos = {i: k for k, i in enumerate(self.ids)}
        idx = [pos[i] for i in ids]
        return DomainData(self.name, tuple(ids), self.x[idx], tuple(self.labels[k] for k in idx))

    def dataset(self, label_map: LabelMap) -> Dataset:
        y = np.stack([label_map.encode(lbl) for lbl in self.labels]) if self.labels else \
            np.zeros((0, len(label_map)), dtype=np.float32)
        return Dataset(self.x, y, self.ids)


def is_preprocessed(data_dir, cfg: PreprocessConfig) -> bool:
    marker = Path(data_dir) / PREPROCESSED_MARKER
    if not marker.exists():
        return False
    parser = _config.read_ini(marker)
    stored = _config.from_section(PreprocessConfig, _config.section_dict(parser, "preprocess"))
    return stored == cfg


def load_domain(data_dir, name: str, label_map: LabelMap, cfg: PreprocessConfig) -> DomainData:
    """Load one domain's manifest, keep scored labels, preprocess signals."""
    path = manifest_path(data_dir, name)
    if not path.exists():
        raise EmptySource(f"no manifest for domain {name} at {path}")
    manifest = DatasetManifest.load(path)
    entries, _ = filter_scored(manifest.entries, label_map)
    if not entries:
        raise EmptySource(f"domain {name} has no records with scored labels")
    already = is_preprocessed(data_dir, cfg)
    filters = None if already else build_filters(cfg)
    xs, ids, labels = [], [], []
    for entry in entries:
        rec = load_record(entry)
        if not already:
            rec = preprocess_record(rec, cfg, filters)
        xs.append(np.asarray(rec.leads, dtype=np.float32))
        ids.append(entry.id)
        labels.append(tuple(entry.labels))
    return DomainData(name, tuple(ids), np.stack(xs), tuple(labels))


def restrict_to_classes(data: DomainData, allowed: set, label_map: LabelMap) -> DomainData:
    """Drop label codes outside ``allowed`` and records left without labels."""
    keep_ids, keep_labels, keep_idx = [], [], []
    for k, (rid, lbl) in enumerate(zip(data.ids, data.labels)):
        kept = tuple(c for c in lbl if label_map.canonical(c) in allowed)
        if kept:
            keep_ids.append(rid)
            keep_labels.append(kept)
            keep_idx.append(k)
    return DomainData(data.name, tuple(keep_ids), data.x[keep_idx], tuple(keep_labels))


def _present_classes(datas: Sequence[DomainData], label_map: LabelMap) -> set:
    return {label_map.canonical(c) for d in datas for lbl in d.labels for c in lbl} - {None}


# --------------------------------------------------------------- training

def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def train_variant(settings: Settings, run_dir, label_map: Optional[LabelMap] = None,
                  domains: Optional[dict[str, DomainData]] = None) -> Path:
    """Train one model variant into ``run_dir``; resumes if already complete."""
    exp = settings.experiment
    if not exp.sources:
        raise InvalidConfig("no source domains configured")
    label_map = label_map or resolve_label_map(exp)
    settings = finalize(settings, label_map)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    state_path = run_dir / "state.json"
    config_text = settings.text()
    if state_path.exists() and (run_dir / "config.txt").exists() \
            and (run_dir / "config.txt").read_text() == config_text \
            and json.loads(state_path.read_text()).get("complete") \
            and (run_dir / "best.ckpt").exists():
        logger.info("run %s already complete, reusing checkpoint", run_dir)
        return run_dir
    set_deterministic(settings.train.deterministic)
    domains = domains if domains is not None else {}
    for name in exp.sources:
        if name not in domains:
            domains[name] = load_domain(exp.data, name, label_map, settings.preprocess)
    plan = make_splits({n: domains[n].ids for n in exp.sources}, exp.seed,
                       {n: domains[n].ids for n in exp.targets if n in domains})
    (run_dir / "config.txt").write_text(config_text)
    (run_dir / "labels.txt").write_text(label_map.lines())
    _write_json(run_dir / "splits.json", plan.to_dict())
    train_set = _pooled(domains, plan, "train", label_map)
    val_set = _pooled(domains, plan, "val", label_map)
    if len(val_set) == 0:
        raise EmptySplit("validation split is empty; sources are too small")
    model = build_model(settings.model, seed=settings.train.seed)
    state = train(model, train_set, val_set, settings.train, run_dir)
    _write_json(state_path, {"complete": True, "epochs": state.epoch,
                             "best_epoch": state.best_epoch, "best_val_loss": state.best_val_loss,
                             "stopped_early": state.stopped_early,
                             "parameters": model.parameter_count()})
    return run_dir


def _pooled(domains: dict[str, DomainData], plan: SplitPlan, part: str,
            label_map: LabelMap) -> Dataset:
    parts = [domains[d].select(plan.sources[d][part]) for d in plan.sources]
    parts = [p for p in parts if p.ids]
    if not parts:
        return Dataset(np.zeros((0, 12, 1), dtype=np.float32),
                       np.zeros((0, len(label_map)), dtype=np.float32))
    x = np.concatenate([p.x for p in parts])
    y = np.concatenate([p.dataset(label_map).y for p in parts])
    ids = tuple(i for p in parts for i in p.ids)
    return Dataset(x, y, ids)


# ------------------------------------------------------------- evaluation

def load_run(run_dir) -> tuple[Settings, LabelMap, ModelGraph, SplitPlan]:
    run_dir = Path(run_dir)
    settings = load_settings(run_dir / "config.txt")
    exp = settings.experiment
    label_map = resolve_label_map(exp)
    if read_labels_txt(run_dir / "labels.txt") != label_map.codes:
        raise LabelMapMismatch(f"{run_dir}: labels.txt disagrees with the configured label map")
    model = build_model(settings.model, seed=settings.train.seed or 0)
    plan = SplitPlan.from_dict(json.loads((run_dir / "splits.json").read_text()))
    return settings, label_map, model, plan


def evaluate_run(run_dir, targets: Optional[Sequence[str]] = None,
                 threshold: Optional[float] = None,
                 domains: Optional[dict[str, DomainData]] = None) -> list[ClassReport]:
    """Intra report on the pooled source test split, a pooled ood report and
    one ``ood:<domain>`` report per target. Writes ``report.csv``."""
    run_dir = Path(run_dir)
    settings, label_map, model, plan = load_run(run_dir)
    exp = settings.experiment
    set_deterministic(settings.train.deterministic)
    targets = list(exp.targets if targets is None else targets)
    threshold = exp.threshold if threshold is None else threshold
    variant = settings.model.variant
    domains = domains if domains is not None else {}
    for name in list(plan.sources) + targets:
        if name not in domains:
            domains[name] = load_domain(exp.data, name, label_map, settings.preprocess)
    ckpt = run_dir / "best.ckpt"

    reports = []
    test = _pooled(domains, plan, "test", label_map)
    if len(test):
        res = evaluate_split(model, test, ckpt, threshold=threshold)
        reports.append(compute_class_metrics(res.predictions, test.y, label_map, INTRA, variant))
    else:
        logger.warning("source test split is empty; no intra report")
        model.params.restore(read_checkpoint(ckpt))

    source_classes = _present_classes([domains[d] for d in plan.sources], label_map)
    pooled_pred, pooled_true = [], []
    per_target = []
    for name in targets:
        data = domains[name]
        target_classes = _present_classes([data], label_map)
        shared = source_classes & target_classes
        if not shared:
            logger.warning("target %s shares no scored classes with the sources; skipped", name)
            continue
        if shared != target_classes:
            logger.warning("target %s: evaluating on %d shared classes (%d unseen in sources)",
                           name, len(shared), len(target_classes - shared))
        data = restrict_to_classes(data, shared, label_map)
        ds = data.dataset(label_map)
        res = evaluate_split(model, ds, threshold=threshold)
        pooled_pred.append(res.predictions)
        pooled_true.append(ds.y)
        per_target.append(compute_class_metrics(res.predictions, ds.y, label_map,
                                                f"{OOD}:{name}", variant))
    if pooled_pred:
        reports.append(compute_class_metrics(np.concatenate(pooled_pred),
                                             np.concatenate(pooled_true), label_map, OOD, variant))
    reports.extend(per_target)
    if reports:
        (run_dir / "report.csv").write_text(build_report(reports).to_csv())
    return reports


def load_run_reports(run_dirs: Sequence) -> tuple[list[ClassReport], LabelMap]:
    """Read ``report.csv`` of several runs; their label maps must agree."""
    reports, first_codes, label_map = [], None, None
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        codes = read_labels_txt(run_dir / "labels.txt")
        if first_codes is None:
            first_codes = codes
            settings = load_settings(run_dir / "config.txt")
            label_map = resolve_label_map(settings.experiment)
        elif codes != first_codes:
            raise LabelMapMismatch(f"{run_dir} was trained with a different label map")
        reports.extend(read_report_csv(run_dir / "report.csv", label_map))
    return reports, label_map


def write_report(table: ComparisonTable, path) -> tuple[Path, Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    txt = path.with_suffix(".txt")
    path.write_text(table.to_csv())
    txt.write_text(table.to_text())
    return path, txt


def run_experiment(settings: Settings, out_dir) -> Path:
    """Train and evaluate every configured variant; write ``report.csv`` and
    ``report.txt`` in ``out_dir``. Reproducible from (config, seed)."""
    exp = settings.experiment
    if not exp.sources or not exp.targets:
        raise InvalidConfig("an experiment needs at least one source and one target domain")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(settings.text())
    label_map = resolve_label_map(exp)
    set_deterministic(exp.deterministic or settings.train.deterministic)
    domains: dict[str, DomainData] = {}
    for name in tuple(exp.sources) + tuple(exp.targets):
        domains[name] = load_domain(exp.data, name, label_map, settings.preprocess)
    reports = []
    for variant in exp.variants:
        run_settings = dataclasses.replace(settings, model=dataclasses.replace(settings.model,
                                                                               variant=variant))
        run_dir = train_variant(run_settings, out_dir / variant, label_map, domains)
        reports.extend(evaluate_run(run_dir, domains=domains))
    table = build_report(reports, exp.omit_unrecognized)
    write_report(table, out_dir / "report.csv")
    return out_dir
