"""``ecgdg`` command line: ingest, preprocess, synth, train, eval, report,
gradcheck and experiment subcommands.

Settings are layered defaults -> ``ECGDG_SEED`` -> ``--config`` file -> flags.
Exit status is 0 on success, 1 on a domain error (one ``error_code: message``
line on stderr) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from . import config as _config
from .dsp import PreprocessConfig, build_filters, preprocess_record
from .errors import EcgDgError, InvalidConfig, IoFailure
from .experiment import (PREPROCESSED_MARKER, Settings, evaluate_run, load_run_reports,
                         load_settings, run_experiment, train_variant, write_report)
from .harness import build_report
from .records import DatasetManifest, ManifestEntry, load_record, manifest_path, scan_dataset, \
    write_portable

logger = logging.getLogger("ecgdg")


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _env_seed() -> Optional[int]:
    raw = os.environ.get("ECGDG_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise InvalidConfig(f"ECGDG_SEED must be an integer, got {raw!r}") from exc


def _apply_thread_cap() -> None:
    raw = os.environ.get("ECGDG_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError as exc:
        raise InvalidConfig(f"ECGDG_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise InvalidConfig("ECGDG_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    threadpool_limits(n)


def _base_settings() -> Settings:
    seed = _env_seed()
    if seed is None:
        return Settings()
    return Settings().with_overrides({"experiment": {"seed": str(seed)}})


def _settings(args, experiment: dict) -> Settings:
    # run directories must stay usable from any working directory
    if experiment.get("data"):
        experiment["data"] = str(Path(experiment["data"]).resolve())
    overrides = {"experiment": {k: v for k, v in experiment.items() if v is not None}}
    return load_settings(getattr(args, "config", None), overrides, base=_base_settings())


# ------------------------------------------------------------ subcommands

def cmd_ingest(args) -> int:
    # several directories may form one domain (e.g. a corpus and its extension)
    scans = [scan_dataset(d, args.domain) for d in _csv_list(args.src)]
    if not scans:
        raise InvalidConfig("--src names no directory")
    entries = sorted((e for m in scans for e in m.entries), key=lambda e: e.id)
    dupes = sorted({a.id for a, b in zip(entries, entries[1:]) if a.id == b.id})
    if dupes:
        raise EcgDgError(f"record ids appear in more than one source directory: {', '.join(dupes)}")
    manifest = DatasetManifest(entries, scans[0].created_at,
                               sorted(s for m in scans for s in m.skipped))
    out = manifest_path(args.out, args.domain)
    manifest.save(out)
    for name, reason in manifest.skipped:
        print(f"skipped {name}: {reason}", file=sys.stderr)
    print(f"{args.domain}: {len(manifest.entries)} records -> {out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = PreprocessConfig()
    if args.config:
        parser = _config.read_ini(args.config)
        cfg = _config.from_section(PreprocessConfig, _config.section_dict(parser, "preprocess"),
                                   base=cfg, section="preprocess")
    flags = {"target_fs": args.target_fs, "target_len": args.target_len,
             "lp_cutoff": args.lp_cutoff, "notch_freq": args.notch_freq, "notch_q": args.notch_q,
             "lp_order": args.lp_order, "norm_range": args.norm_range,
             "hp_alternative": True if args.hp_alternative else None}
    cfg = _config.from_section(PreprocessConfig,
                               {k: _config.format_value(v) for k, v in flags.items()
                                if v is not None}, base=cfg, section="preprocess")
    filters = build_filters(cfg)
    out = Path(args.out)
    for domain in _csv_list(args.domains):
        src = DatasetManifest.load(manifest_path(args.data, domain))
        try:
            (out / domain).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoFailure(f"cannot create {out / domain}: {exc}") from exc
        entries = []
        for entry in src.entries:
            rec = preprocess_record(load_record(entry), cfg, filters)
            header, _ = write_portable(rec, out / domain)
            entries.append(ManifestEntry(entry.id, header.resolve(), domain, entry.labels,
                                         rec.fs, rec.num_samples))
        DatasetManifest(entries, "").save(manifest_path(out, domain))
        print(f"{domain}: {len(entries)} records preprocessed")
    labels = Path(args.data) / "labels.csv"
    try:
        if labels.exists():
            (out / "labels.csv").write_text(labels.read_text())
        _config.write_ini(out / PREPROCESSED_MARKER, {"preprocess": _config.to_section(cfg)})
    except OSError as exc:
        raise IoFailure(f"cannot write to {out}: {exc}") from exc
    return 0


def cmd_synth(args) -> int:
    from .synth import default_domain_specs, generate_dataset, load_spec_overrides, \
        synthetic_label_map
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    label_map = synthetic_label_map(args.classes)
    specs = default_domain_specs(args.domains, args.classes, args.per_domain, seed)
    if args.spec:
        specs = load_spec_overrides(specs, args.spec)
    manifests = generate_dataset(specs, label_map, args.out)
    total = sum(len(m.entries) for m in manifests.values())
    print(f"wrote {total} records in {len(manifests)} domains to {args.out}")
    return 0


def cmd_train(args) -> int:
    settings = _settings(args, {
        "data": args.data,
        "sources": ",".join(_csv_list(args.sources)) if args.sources else None,
        "targets": ",".join(_csv_list(args.targets)) if args.targets else None,
        "seed": None if args.seed is None else str(args.seed),
        "deterministic": "true" if args.deterministic else None,
    })
    if args.variant:
        settings = settings.with_overrides({"model": {"variant": args.variant}})
    if args.lr_schedule:
        settings = settings.with_overrides({"train": {"lr_schedule": args.lr_schedule}})
    run_dir = train_variant(settings, args.out)
    print(f"trained {settings.model.variant} -> {run_dir}")
    return 0


def cmd_eval(args) -> int:
    targets = _csv_list(args.targets) if args.targets is not None else None
    reports = evaluate_run(args.run, targets, args.threshold)
    table = build_report(reports, args.omit_unrecognized)
    csv_path, txt_path = write_report(table, args.report)
    print(table.to_text(), end="")
    print(f"report -> {csv_path}, {txt_path}")
    return 0


def cmd_report(args) -> int:
    reports, _ = load_run_reports(_csv_list(args.runs))
    table = build_report(reports, args.omit_unrecognized)
    if args.out:
        write_report(table, args.out)
    print(table.to_text(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_all
    results = run_all(args.seed)
    print(format_table(results), end="")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient_mismatch: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_experiment(args) -> int:
    settings = _settings(args, {
        "data": args.data,
        "seed": None if args.seed is None else str(args.seed),
        "deterministic": "true" if args.deterministic else None,
    })
    out = run_experiment(settings, args.out)
    print((out / "report.txt").read_text(), end="")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecgdg", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"ecgdg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("ingest", help="scan a record directory into a domain manifest")
    s.add_argument("--src", required=True, help="comma-separated directories of .hea/.edh records (not recursive), merged into one domain")
    s.add_argument("--domain", required=True, help="domain name stored in the manifest")
    s.add_argument("--out", required=True, help="data directory receiving <domain>.manifest.json")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("preprocess", help="resample, filter and normalize into a cache directory")
    s.add_argument("--data", required=True, help="data directory holding domain manifests")
    s.add_argument("--domains", required=True, help="comma-separated domain names")
    s.add_argument("--out", required=True, help="cache directory")
    s.add_argument("--config", help="INI file; its [preprocess] section is applied")
    s.add_argument("--target-fs", type=int, help="output sampling rate in Hz (default 500)")
    s.add_argument("--target-len", type=int, help="output length in samples (default 5000)")
    s.add_argument("--lp-cutoff", type=float, help="low-pass cutoff in Hz (default 20)")
    s.add_argument("--notch-freq", type=float, help="notch center in Hz (default 0.01)")
    s.add_argument("--notch-q", type=float, help="notch quality factor (default 0.707)")
    s.add_argument("--lp-order", type=int, help="Butterworth low-pass order (default 3)")
    s.add_argument("--norm-range", help="normalization range lo,hi (default -1,1); write --norm-range=-1,1 when lo is negative")
    s.add_argument("--hp-alternative", action="store_true",
                   help="use a 1st-order high-pass at --notch-freq instead of the notch")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("synth", help="generate a synthetic multi-domain dataset")
    s.add_argument("--out", required=True, help="output data directory")
    s.add_argument("--domains", type=int, default=4, help="number of domains (default 4)")
    s.add_argument("--classes", type=int, default=6, help="number of classes (default 6)")
    s.add_argument("--per-domain", type=int, default=200, help="records per domain (default 200)")
    s.add_argument("--seed", type=int, help="generator seed (default $ECGDG_SEED or 0)")
    s.add_argument("--spec", help="INI file with [D<n>] sections overriding domain parameters")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one model variant into a run directory")
    s.add_argument("--config", help="INI file with [experiment] [preprocess] [model] [train]")
    s.add_argument("--data", help="data or cache directory")
    s.add_argument("--sources", help="comma-separated source domains")
    s.add_argument("--targets", help="comma-separated target domains recorded in splits.json")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--seed", type=int, help="run seed (splits, init, shuffling, dropout)")
    s.add_argument("--deterministic", action="store_true", help="single-threaded, bit-stable math")
    s.add_argument("--variant", choices=("multiscale", "baseline"), help="model variant")
    s.add_argument("--lr-schedule", choices=("step", "exponential"),
                   help="single x0.1 step at lr_decay_epoch (default) or one factor per epoch from it")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a run on its source test split and target domains")
    s.add_argument("--run", required=True, help="run directory written by train")
    s.add_argument("--targets", help="comma-separated target domains (default: from the run)")
    s.add_argument("--report", required=True, help="output CSV path; a .txt table is written next to it")
    s.add_argument("--omit-unrecognized", action="store_true",
                   help="drop classes no model ever predicts")
    s.add_argument("--threshold", type=float, help="decision threshold (default 0.5)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="combine evaluated runs into one comparison table")
    s.add_argument("--runs", required=True, help="comma-separated run directories")
    s.add_argument("--out", help="output CSV path; a .txt table is written next to it")
    s.add_argument("--omit-unrecognized", action="store_true",
                   help="drop classes no model ever predicts")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and a tiny model")
    s.add_argument("--seed", type=int, default=0, help="input seed (default 0)")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("experiment", help="train and evaluate every variant, then report")
    s.add_argument("--config", required=True, help="INI experiment file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--data", help="data directory (overrides the config)")
    s.add_argument("--seed", type=int, help="run seed (overrides the config)")
    s.add_argument("--deterministic", action="store_true", help="single-threaded, bit-stable math")
    s.set_defaults(func=cmd_experiment)
    return p


def dispatch(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_thread_cap()
        return args.func(args)
    except EcgDgError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{IoFailure.code}: {exc}", file=sys.stderr)
        return 1


def main(argv: Optional[Sequence[str]] = None) -> None:
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
