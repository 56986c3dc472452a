"""Scored-label maps loaded from CSV (code, abbreviation, name, equivalent_codes)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidConfig, LabelMapMismatch

DEFAULT_LABEL_MAP = "scored_labels.csv"


@dataclass(frozen=True)
class LabelMap:
    codes: tuple[str, ...]
    names: tuple[str, ...]
    abbreviations: tuple[str, ...] = ()
    # alias code -> canonical code; only populated when merging is enabled
    aliases: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.codes:
            raise InvalidConfig("label map is empty")
        if len(set(self.codes)) != len(self.codes):
            raise InvalidConfig("label map codes must be unique")
        if len(self.names) != len(self.codes):
            raise InvalidConfig("label map needs one name per code")
        if not self.abbreviations:
            object.__setattr__(self, "abbreviations", self.codes)

    def __len__(self):
        return len(self.codes)

    def canonical(self, code: str) -> Optional[str]:
        code = self.aliases.get(code, code)
        return code if code in self._index else None

    @property
    def _index(self) -> dict:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {c: i for i, c in enumerate(self.codes)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def index(self, code: str) -> int:
        return self._index[self.canonical(code)]

    def encode(self, labels: Sequence[str]) -> np.ndarray:
        """Multi-hot vector; unscored codes are ignored."""
        row = np.zeros(len(self.codes), dtype=np.float32)
        for code in labels:
            canon = self.canonical(code)
            if canon is not None:
                row[self._index[canon]] = 1.0
        return row

    def subset(self, n: int) -> "LabelMap":
        return LabelMap(self.codes[:n], self.names[:n], self.abbreviations[:n],
                        {a: c for a, c in self.aliases.items() if c in self.codes[:n]})

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["code", "abbreviation", "name", "equivalent_codes"])
        for code, abbr, name in zip(self.codes, self.abbreviations, self.names):
            eq = ";".join(sorted(a for a, c in self.aliases.items() if c == code))
            writer.writerow([code, abbr, name, eq])
        return buf.getvalue()

    def lines(self) -> str:
        """``labels.txt`` rendering: one ``code<TAB>name`` per line, in order."""
        return "".join(f"{c}\t{n}\n" for c, n in zip(self.codes, self.names))

    def check_same(self, other: "LabelMap") -> None:
        if self.codes != other.codes:
            raise LabelMapMismatch("label maps differ in codes or order")


def parse_label_map(text: str, merge_equivalent: bool = True) -> LabelMap:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or "code" not in reader.fieldnames:
        raise InvalidConfig("label map CSV needs a 'code' column")
    codes, names, abbrs, aliases = [], [], [], {}
    for row in reader:
        code = (row.get("code") or "").strip()
        if not code:
            continue
        codes.append(code)
        abbrs.append((row.get("abbreviation") or code).strip())
        names.append((row.get("name") or code).strip())
        if merge_equivalent:
            for alias in (row.get("equivalent_codes") or "").replace(",", ";").split(";"):
                if alias.strip():
                    aliases[alias.strip()] = code
    return LabelMap(tuple(codes), tuple(names), tuple(abbrs), aliases)


def load_label_map(path=None, merge_equivalent: bool = True) -> LabelMap:
    """Load a label map CSV; ``None`` loads the packaged 24-class map."""
    if path is None:
        text = resources.files("ecgdg.data").joinpath(DEFAULT_LABEL_MAP).read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InvalidConfig(f"cannot read label map {path}: {exc}") from exc
    return parse_label_map(text, merge_equivalent)


def read_labels_txt(path) -> tuple[str, ...]:
    return tuple(line.split("\t")[0] for line in Path(path).read_text().splitlines() if line)
