"""Domain-generalization protocol: scored-label filtering, per-source
70/10/20 splits, per-class metrics, and intra vs out-of-distribution reports."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import EmptySource, InvalidConfig, LabelMapMismatch, ShapeMismatch
from .labels import LabelMap
from .records import DatasetManifest
from .rng import substream

logger = logging.getLogger(__name__)

SOURCE = "source"
TARGET = "target"
INTRA = "intra"
OOD = "ood"
REPORT_COLUMNS = ("class", "model", "eval_tag", "precision", "recall", "f1", "support",
                  "predicted_positives")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    role: str
    manifest: Optional[Path] = None

    def __post_init__(self):
        if self.role not in (SOURCE, TARGET):
            raise InvalidConfig(f"domain role must be source or target, got {self.role!r}")


def check_domains(domains: Sequence[DomainSpec]) -> None:
    names = [d.name for d in domains]
    if len(set(names)) != len(names):
        raise InvalidConfig("domain names must be unique")
    roles = {d.role for d in domains}
    if roles != {SOURCE, TARGET}:
        raise InvalidConfig("an experiment needs at least one source and one target domain")


# ---------------------------------------------------------------- filtering

def _with_labels(item, labels):
    if hasattr(item, "leads"):
        return item.replace(labels=labels)
    return dataclasses.replace(item, labels=labels)


def filter_scored(records: Iterable, label_map: LabelMap):
    """Keep only scored codes (mapped to their canonical code); drop records
    left without labels.

    Works on anything with ``labels`` and ``domain`` (records or manifest
    entries). Returns (kept, dropped count per domain).
    """
    if len(label_map) == 0:
        raise InvalidConfig("label map is empty")
    kept, dropped = [], Counter()
    for rec in records:
        scored = tuple(dict.fromkeys(c for c in (label_map.canonical(x) for x in rec.labels) if c))
        if not scored:
            dropped[rec.domain] += 1
            continue
        kept.append(rec if scored == tuple(rec.labels) else _with_labels(rec, scored))
    for domain, count in sorted(dropped.items()):
        logger.info("domain %s: dropped %d records with only unscored labels", domain, count)
    return kept, dict(dropped)


# ------------------------------------------------------------------- splits

def split_counts(n: int) -> tuple[int, int, int]:
    """(train, val, test) sizes: val = round(n/10), test = round(n/5) with
    halves rounded up, train takes the rest."""
    if n < 0:
        raise ValueError("n must be non-negative")
    val = (n + 5) // 10
    test = (2 * n + 5) // 10
    return n - val - test, val, test


@dataclass
class SplitPlan:
    sources: dict[str, dict[str, tuple[str, ...]]]
    targets: dict[str, tuple[str, ...]]
    seed: int

    def ids(self, part: str) -> list[tuple[str, str]]:
        """(domain, id) pairs of one partition across all sources."""
        return [(d, i) for d, parts in self.sources.items() for i in parts[part]]

    def to_dict(self) -> dict:
        return {"seed": self.seed,
                "sources": {d: {k: list(v) for k, v in p.items()} for d, p in self.sources.items()},
                "targets": {d: list(v) for d, v in self.targets.items()}}

    @classmethod
    def from_dict(cls, doc: dict) -> "SplitPlan":
        return cls({d: {k: tuple(v) for k, v in p.items()} for d, p in doc["sources"].items()},
                   {d: tuple(v) for d, v in doc["targets"].items()}, int(doc["seed"]))


def _ids_of(spec) -> tuple[str, list[str]]:
    if isinstance(spec, DomainSpec):
        if spec.manifest is None:
            raise InvalidConfig(f"domain {spec.name} has no manifest")
        return spec.name, [e.id for e in DatasetManifest.load(spec.manifest).entries]
    name, ids = spec
    return name, list(ids)


def make_splits(sources, seed: int, targets=()) -> SplitPlan:
    """Shuffle each source with its own seeded stream, then cut 70/10/20.

    ``sources``/``targets`` hold DomainSpecs or (name, ids) pairs (a mapping
    of name -> ids also works).
    """
    if isinstance(sources, Mapping):
        sources = list(sources.items())
    if isinstance(targets, Mapping):
        targets = list(targets.items())
    plan_sources, plan_targets = {}, {}
    for spec in sources:
        name, ids = _ids_of(spec)
        if not ids:
            raise EmptySource(f"source domain {name} has no records")
        ordered = sorted(ids)
        perm = substream(seed, "split", name).permutation(len(ordered))
        shuffled = [ordered[i] for i in perm]
        n_train, n_val, _ = split_counts(len(shuffled))
        plan_sources[name] = {
            "train": tuple(shuffled[:n_train]),
            "val": tuple(shuffled[n_train:n_train + n_val]),
            "test": tuple(shuffled[n_train + n_val:]),
        }
    for spec in targets:
        name, ids = _ids_of(spec)
        if name in plan_sources:
            raise InvalidConfig(f"domain {name} cannot be both source and target")
        plan_targets[name] = tuple(sorted(ids))
    return SplitPlan(plan_sources, plan_targets, seed)


# ------------------------------------------------------------------ metrics

@dataclass(frozen=True)
class ClassRow:
    code: str
    name: str
    precision: float
    recall: float
    f1: float
    support: int
    predicted_positives: int


@dataclass
class ClassReport:
    rows: list[ClassRow]
    eval_tag: str = INTRA
    model: str = ""

    def __post_init__(self):
        if not (self.eval_tag == INTRA or self.eval_tag == OOD or self.eval_tag.startswith(OOD + ":")):
            raise InvalidConfig(f"eval tag must be intra, ood or ood:<domain>, got {self.eval_tag!r}")

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(r.code for r in self.rows)

    def row(self, code_or_name: str) -> ClassRow:
        for r in self.rows:
            if code_or_name in (r.code, r.name):
                return r
        raise KeyError(code_or_name)


def safe_ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean with the 0/0 -> 0 convention."""
    return safe_ratio(2.0 * precision * recall, precision + recall)


def confusion_counts(predictions, truths) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = np.asarray(predictions).astype(bool)
    t = np.asarray(truths).astype(bool)
    if p.shape != t.shape or p.ndim != 2:
        raise ShapeMismatch(f"predictions {p.shape} and truths {t.shape} must be equal 2-d shapes")
    tp = (p & t).sum(axis=0)
    fp = (p & ~t).sum(axis=0)
    fn = (~p & t).sum(axis=0)
    return tp, fp, fn


def compute_class_metrics(predictions, truths, label_map: LabelMap, eval_tag: str = INTRA,
                          model: str = "") -> ClassReport:
    tp, fp, fn = confusion_counts(predictions, truths)
    if tp.shape[0] != len(label_map):
        raise ShapeMismatch(f"{tp.shape[0]} classes in predictions, {len(label_map)} in label map")
    rows = []
    for i, (code, name) in enumerate(zip(label_map.codes, label_map.names)):
        precision = safe_ratio(tp[i], tp[i] + fp[i])
        recall = safe_ratio(tp[i], tp[i] + fn[i])
        rows.append(ClassRow(code, name, float(precision), float(recall),
                             float(f1_score(precision, recall)),
                             int(tp[i] + fn[i]), int(tp[i] + fp[i])))
    return ClassReport(rows, eval_tag, model)


def micro_f1(predictions, truths) -> float:
    tp, fp, fn = (int(v.sum()) for v in confusion_counts(predictions, truths))
    return f1_score(safe_ratio(tp, tp + fp), safe_ratio(tp, tp + fn))


# ------------------------------------------------------------------ reports

def _tag_order(tag: str) -> tuple:
    return (0 if tag == INTRA else 1 if tag == OOD else 2, tag)


@dataclass
class ComparisonTable:
    """Per-class rows joined across (model, eval_tag) pairs."""

    reports: list[ClassReport]
    codes: list[str]
    names: dict[str, str]
    models: list[str]
    tags: list[str]
    deltas: dict[tuple[str, str], float] = field(default_factory=dict)

    def cell(self, model: str, tag: str, code: str) -> Optional[ClassRow]:
        for rep in self.reports:
            if rep.model == model and rep.eval_tag == tag:
                return rep.row(code)
        return None

    def column_groups(self, tags: Optional[Sequence[str]] = None) -> list[tuple[str, str]]:
        tags = [t for t in self.tags if t in (INTRA, OOD)] if tags is None else list(tags)
        return [(m, t) for t in tags for m in self.models if self.cell(m, t, self.codes[0]) is not None] \
            if self.codes else []

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for tag in self.tags:
            for model in self.models:
                for code in self.codes:
                    row = self.cell(model, tag, code)
                    if row is None:
                        continue
                    writer.writerow([row.name, model, tag, repr(row.precision), repr(row.recall),
                                     repr(row.f1), row.support, row.predicted_positives])
        return buf.getvalue()

    def to_text(self) -> str:
        sections = [self._render(self.column_groups(), "Per-class precision / recall / F1")]
        for tag in self.tags:
            if tag.startswith(OOD + ":"):
                sections.append(self._render(self.column_groups([tag]), f"Target {tag[4:]}"))
        if self.deltas:
            sections.append(self._render_deltas())
        return "\n\n".join(s for s in sections if s) + "\n"

    def _render(self, groups, title) -> str:
        if not groups:
            return ""
        name_w = max([len("Diagnosis")] + [len(self.names[c]) for c in self.codes])
        cell_w = 6
        group_w = 3 * cell_w + 2
        head1 = " " * name_w + " | " + " | ".join(f"{m} / {t}".center(group_w)[:group_w]
                                                  for m, t in groups)
        head2 = "Diagnosis".ljust(name_w) + " | " + " | ".join(
            " ".join(h.rjust(cell_w) for h in ("P", "R", "F1")) for _ in groups)
        lines = [title, head1, head2, "-" * len(head2)]
        for code in self.codes:
            cells = []
            for m, t in groups:
                r = self.cell(m, t, code)
                cells.append(" ".join(f"{v:.2f}".rjust(cell_w) for v in (r.precision, r.recall, r.f1)))
            lines.append(self.names[code].ljust(name_w) + " | " + " | ".join(cells))
        return "\n".join(lines)

    def _render_deltas(self) -> str:
        name_w = max([len("Diagnosis")] + [len(self.names[c]) for c in self.codes])
        lines = ["F1 change intra -> ood (! marks a drop of at least 0.05)",
                 "Diagnosis".ljust(name_w) + " | " + " | ".join(m.rjust(10) for m in self.models)]
        for code in self.codes:
            cells = []
            for m in self.models:
                d = self.deltas.get((m, code))
                cells.append("-".rjust(10) if d is None else
                             (f"{d:+.2f}" + (" !" if d <= -0.05 else "  ")).rjust(10))
            lines.append(self.names[code].ljust(name_w) + " | " + " | ".join(cells))
        return "\n".join(lines)


def build_report(reports: Sequence[ClassReport], omit_unrecognized: bool = False) -> ComparisonTable:
    """Join reports into one table.

    With ``omit_unrecognized``, classes that no model predicted positive in
    any evaluation are dropped.
    """
    reports = list(reports)
    if not reports:
        raise InvalidConfig("build_report needs at least one report")
    codes = list(reports[0].codes)
    for rep in reports[1:]:
        if list(rep.codes) != codes:
            raise LabelMapMismatch("reports were computed with different label maps")
    seen = set()
    for rep in reports:
        key = (rep.model, rep.eval_tag)
        if key in seen:
            raise InvalidConfig(f"duplicate report for model {rep.model!r}, tag {rep.eval_tag!r}")
        seen.add(key)
    names = {r.code: r.name for r in reports[0].rows}
    if omit_unrecognized:
        codes = [c for c in codes if any(rep.row(c).predicted_positives > 0 for rep in reports)]
    models = list(dict.fromkeys(rep.model for rep in reports))
    tags = sorted({rep.eval_tag for rep in reports}, key=_tag_order)
    table = ComparisonTable(reports, codes, names, models, tags)
    for m in models:
        intra = table.cell(m, INTRA, codes[0]) if codes else None
        ood = table.cell(m, OOD, codes[0]) if codes else None
        if intra is None or ood is None:
            continue
        for c in codes:
            table.deltas[(m, c)] = table.cell(m, OOD, c).f1 - table.cell(m, INTRA, c).f1
    return table


def read_report_csv(path, label_map: Optional[LabelMap] = None) -> list[ClassReport]:
    """Inverse of :meth:`ComparisonTable.to_csv`; class names map back to
    codes through ``label_map`` when given."""
    by_key: dict[tuple[str, str], list[ClassRow]] = {}
    name_to_code = dict(zip(label_map.names, label_map.codes)) if label_map else {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise InvalidConfig(f"{path}: unexpected report columns {reader.fieldnames}")
        for row in reader:
            name = row["class"]
            by_key.setdefault((row["model"], row["eval_tag"]), []).append(ClassRow(
                name_to_code.get(name, name), name, float(row["precision"]), float(row["recall"]),
                float(row["f1"]), int(row["support"]), int(row["predicted_positives"])))
    return [ClassReport(rows, tag, model) for (model, tag), rows in by_key.items()]
