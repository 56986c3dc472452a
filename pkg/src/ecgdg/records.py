"""ECG record ingestion: WFDB-style raw records, the portable float32 format,
and per-domain dataset manifests.

Raw records are a text header (``<id>.hea``) plus little-endian int16 samples
stored lead-major. Portable records are a key=value header (``<id>.edh``) plus
an ``EDG1`` binary (``<id>.edg``) holding float32 millivolts. Layouts are
documented in ``docs/format.md``.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import (
    EmptyDataset,
    EcgDgError,
    IoFailure,
    MalformedHeader,
    SizeMismatch,
    UnsupportedFormat,
    UnsupportedLeadCount,
)

logger = logging.getLogger(__name__)

NUM_LEADS = 12
RAW_SAMPLE_WIDTH = 2
PORTABLE_MAGIC = b"EDG1"
PORTABLE_PREAMBLE = struct.Struct("<4sHHII")  # magic, leads, reserved, fs, samples
RAW_SUFFIX = ".hea"
PORTABLE_HEADER_SUFFIX = ".edh"
PORTABLE_SIGNAL_SUFFIX = ".edg"
DEFAULT_LEAD_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF",
                      "V1", "V2", "V3", "V4", "V5", "V6")


@dataclass(frozen=True, eq=False)
class EcgRecord:
    """One 12-lead recording. ``leads`` has shape (12, num_samples) in mV."""

    id: str
    leads: np.ndarray
    fs: int
    labels: tuple[str, ...] = ()
    domain: str = ""
    age: Optional[str] = None
    sex: Optional[str] = None

    def __post_init__(self):
        leads = np.asarray(self.leads)
        if leads.ndim != 2 or leads.shape[0] != NUM_LEADS:
            raise UnsupportedLeadCount(
                f"record {self.id}: expected {NUM_LEADS} leads, got shape {leads.shape}")
        if leads.shape[1] <= 0:
            raise MalformedHeader(f"record {self.id}: no samples")
        if int(self.fs) != self.fs or self.fs <= 0:
            raise MalformedHeader(f"record {self.id}: invalid sampling rate {self.fs}")
        leads = leads.copy()
        leads.setflags(write=False)
        object.__setattr__(self, "leads", leads)
        object.__setattr__(self, "fs", int(self.fs))
        object.__setattr__(self, "labels", tuple(dict.fromkeys(self.labels)))

    @property
    def num_samples(self) -> int:
        return self.leads.shape[1]

    def replace(self, **changes) -> "EcgRecord":
        fields = dict(id=self.id, leads=self.leads, fs=self.fs, labels=self.labels,
                      domain=self.domain, age=self.age, sex=self.sex)
        fields.update(changes)
        return EcgRecord(**fields)

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (self.id == other.id and self.fs == other.fs
                and self.labels == other.labels and self.domain == other.domain
                and self.age == other.age and self.sex == other.sex
                and self.leads.shape == other.leads.shape
                and np.array_equal(self.leads, other.leads))

    __hash__ = None


@dataclass(frozen=True)
class LeadSpec:
    file: str
    fmt: str
    gain: float
    offset: float
    name: str = ""


@dataclass(frozen=True)
class Header:
    id: str
    num_leads: int
    fs: int
    num_samples: int
    leads: tuple[LeadSpec, ...]
    labels: tuple[str, ...]
    age: Optional[str] = None
    sex: Optional[str] = None

    @property
    def gains(self) -> np.ndarray:
        return np.array([ld.gain for ld in self.leads], dtype=np.float64)

    @property
    def offsets(self) -> np.ndarray:
        return np.array([ld.offset for ld in self.leads], dtype=np.float64)


def _parse_int(token: str, what: str) -> int:
    # WFDB allows "500/1000" (sampling/counter frequency) on the record line.
    head = token.split("/")[0]
    try:
        value = float(head)
    except ValueError:
        raise MalformedHeader(f"non-numeric {what}: {token!r}") from None
    if not np.isfinite(value) or value != int(value):
        raise MalformedHeader(f"non-integer {what}: {token!r}")
    return int(value)


def _parse_gain(token: str) -> tuple[float, Optional[float]]:
    """Parse ``1000``, ``1000/mV`` or ``1000(0)/mV`` into (gain, baseline)."""
    body = token.split("/")[0]
    baseline = None
    if "(" in body:
        body, _, rest = body.partition("(")
        try:
            baseline = float(rest.rstrip(")"))
        except ValueError:
            raise MalformedHeader(f"bad baseline in gain field {token!r}") from None
    try:
        gain = float(body)
    except ValueError:
        raise MalformedHeader(f"non-numeric gain {token!r}") from None
    if gain == 0:
        # WFDB convention: zero gain means the default of 200 adu/mV.
        gain = 200.0
    return gain, baseline


def _parse_lead_line(line: str) -> LeadSpec:
    tokens = line.split()
    if len(tokens) < 3:
        raise MalformedHeader(f"lead line needs at least file, format, gain: {line!r}")
    gain, baseline = _parse_gain(tokens[2])
    if len(tokens) == 4:
        # short layout: file format gain offset
        offset = float(tokens[3]) if baseline is None else baseline
        name = ""
    else:
        # WFDB layout: file format gain resolution adc_zero init checksum block name
        if baseline is not None:
            offset = baseline
        elif len(tokens) >= 5:
            offset = float(_parse_int(tokens[4], "adc zero"))
        else:
            offset = 0.0
        name = tokens[8] if len(tokens) >= 9 else ""
    return LeadSpec(file=tokens[0], fmt=tokens[1].split("x")[0].split(":")[0],
                    gain=gain, offset=offset, name=name)


def parse_header(text: str) -> Header:
    """Parse a WFDB-style header.

    Label codes come from a ``#Dx:`` comment (comma-separated); without one the
    label set is empty. The lead count is not validated here.
    """
    if not text or not text.strip():
        raise MalformedHeader("empty header")
    lines = [ln.strip() for ln in text.splitlines()]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    comments = [ln[1:].strip() for ln in lines if ln.startswith("#")]
    if not body:
        raise MalformedHeader("missing record line")
    first = body[0].split()
    if len(first) < 4:
        raise MalformedHeader(
            f"record line needs id, num_leads, fs, num_samples: {body[0]!r}")
    rec_id = first[0]
    num_leads = _parse_int(first[1], "num_leads")
    fs = _parse_int(first[2], "fs")
    num_samples = _parse_int(first[3], "num_samples")
    if num_leads <= 0 or fs <= 0 or num_samples <= 0:
        raise MalformedHeader(f"non-positive header field in {body[0]!r}")
    lead_lines = body[1:1 + num_leads]
    if len(lead_lines) < num_leads:
        raise MalformedHeader(f"expected {num_leads} lead lines, found {len(lead_lines)}")
    leads = tuple(_parse_lead_line(ln) for ln in lead_lines)

    labels: tuple[str, ...] = ()
    age = sex = None
    for c in comments:
        key, sep, value = c.partition(":")
        if not sep:
            continue
        key = key.strip().lower()
        value = value.strip()
        if key == "dx":
            labels = tuple(code.strip() for code in value.split(",") if code.strip())
        elif key == "age":
            age = value
        elif key == "sex":
            sex = value
    return Header(rec_id, num_leads, fs, num_samples, leads, labels, age, sex)


def _check_header_for_record(header: Header) -> None:
    if header.num_leads != NUM_LEADS:
        raise UnsupportedLeadCount(
            f"record {header.id}: {header.num_leads} leads, expected {NUM_LEADS}")
    for ld in header.leads:
        if ld.fmt != "16":
            raise UnsupportedFormat(f"record {header.id}: storage format {ld.fmt!r}, only 16 supported")


def _signal_path_for(header_path: Path, header: Header) -> Path:
    return header_path.with_name(header.leads[0].file)


def read_record(header_path, signal_path=None, domain: str = "") -> EcgRecord:
    """Read a raw record; amplitudes become (raw - offset) / gain millivolts."""
    header_path = Path(header_path)
    try:
        header = parse_header(header_path.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {header_path}: {exc}") from exc
    _check_header_for_record(header)
    signal_path = Path(signal_path) if signal_path else _signal_path_for(header_path, header)
    expected = header.num_leads * header.num_samples * RAW_SAMPLE_WIDTH
    try:
        raw = signal_path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {signal_path}: {exc}") from exc
    if len(raw) != expected:
        raise SizeMismatch(f"{signal_path.name}: {len(raw)} bytes, header implies {expected}")
    samples = np.frombuffer(raw, dtype="<i2").reshape(header.num_leads, header.num_samples)
    leads = (samples.astype(np.float64) - header.offsets[:, None]) / header.gains[:, None]
    return EcgRecord(header.id, leads, header.fs, header.labels, domain, header.age, header.sex)


def _comment_lines(record: EcgRecord) -> list[str]:
    lines = []
    if record.age is not None:
        lines.append(f"#Age: {record.age}")
    if record.sex is not None:
        lines.append(f"#Sex: {record.sex}")
    lines.append(f"#Dx: {','.join(record.labels)}")
    return lines


def write_wfdb(record: EcgRecord, directory, gain: float = 1000.0) -> tuple[Path, Path]:
    """Write ``record`` in the raw int16 layout (values clipped to int16 range)."""
    directory = Path(directory)
    header_path = directory / f"{record.id}{RAW_SUFFIX}"
    signal_path = directory / f"{record.id}.dat"
    raw = np.clip(np.rint(record.leads * gain), -32768, 32767).astype("<i2")
    lines = [f"{record.id} {NUM_LEADS} {record.fs} {record.num_samples}"]
    for i, name in enumerate(DEFAULT_LEAD_NAMES):
        lines.append(f"{signal_path.name} 16 {gain:g}(0)/mV 16 0 {int(raw[i, 0])} 0 0 {name}")
    lines.extend(_comment_lines(record))
    try:
        directory.mkdir(parents=True, exist_ok=True)
        header_path.write_text("\n".join(lines) + "\n")
        signal_path.write_bytes(raw.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {record.id} to {directory}: {exc}") from exc
    return header_path, signal_path


def write_portable(record: EcgRecord, directory) -> tuple[Path, Path]:
    """Write ``<id>.edh`` (text) and ``<id>.edg`` (EDG1 float32 binary)."""
    directory = Path(directory)
    header_path = directory / f"{record.id}{PORTABLE_HEADER_SUFFIX}"
    signal_path = directory / f"{record.id}{PORTABLE_SIGNAL_SUFFIX}"
    text = [
        "format=EDG1",
        f"id={record.id}",
        f"num_leads={NUM_LEADS}",
        f"fs={record.fs}",
        f"num_samples={record.num_samples}",
        f"domain={record.domain}",
        f"labels={','.join(record.labels)}",
    ]
    if record.age is not None:
        text.append(f"age={record.age}")
    if record.sex is not None:
        text.append(f"sex={record.sex}")
    preamble = PORTABLE_PREAMBLE.pack(PORTABLE_MAGIC, NUM_LEADS, 0, record.fs, record.num_samples)
    payload = np.ascontiguousarray(record.leads, dtype="<f4").tobytes()
    try:
        header_path.write_text("\n".join(text) + "\n")
        signal_path.write_bytes(preamble + payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {record.id} to {directory}: {exc}") from exc
    return header_path, signal_path


def _parse_portable_header(text: str) -> dict:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MalformedHeader(f"portable header line without '=': {line!r}")
        fields[key.strip()] = value.strip()
    if fields.get("format") != "EDG1":
        raise MalformedHeader("portable header lacks format=EDG1")
    for key in ("id", "num_leads", "fs", "num_samples"):
        if key not in fields:
            raise MalformedHeader(f"portable header missing {key}")
    for key in ("num_leads", "fs", "num_samples"):
        fields[key] = _parse_int(fields[key], key)
    labels = fields.get("labels", "")
    fields["labels"] = tuple(c for c in labels.split(",") if c)
    return fields


def read_portable(header_path, signal_path=None) -> EcgRecord:
    header_path = Path(header_path)
    try:
        fields = _parse_portable_header(header_path.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {header_path}: {exc}") from exc
    if fields["num_leads"] != NUM_LEADS:
        raise UnsupportedLeadCount(f"record {fields['id']}: {fields['num_leads']} leads")
    signal_path = Path(signal_path) if signal_path else header_path.with_suffix(PORTABLE_SIGNAL_SUFFIX)
    try:
        blob = signal_path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {signal_path}: {exc}") from exc
    n = fields["num_samples"]
    expected = PORTABLE_PREAMBLE.size + NUM_LEADS * n * 4
    if len(blob) != expected:
        raise SizeMismatch(f"{signal_path.name}: {len(blob)} bytes, header implies {expected}")
    magic, leads, _, fs, samples = PORTABLE_PREAMBLE.unpack_from(blob)
    if magic != PORTABLE_MAGIC:
        raise MalformedHeader(f"{signal_path.name}: bad magic {magic!r}")
    if (leads, fs, samples) != (NUM_LEADS, fields["fs"], n):
        raise MalformedHeader(f"{signal_path.name}: binary preamble disagrees with header")
    data = np.frombuffer(blob, dtype="<f4", offset=PORTABLE_PREAMBLE.size).reshape(NUM_LEADS, n)
    return EcgRecord(fields["id"], data.astype(np.float32), fields["fs"], fields["labels"],
                     fields.get("domain", ""), fields.get("age"), fields.get("sex"))


# ---------------------------------------------------------------- manifests

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: Path
    domain: str
    labels: tuple[str, ...]
    fs: int
    num_samples: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    created_at: str = ""
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise EcgDgError("manifest entry ids must be unique")

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        # created_at is provenance only
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.entries == other.entries and self.skipped == other.skipped

    @property
    def domains(self) -> set[str]:
        return {e.domain for e in self.entries}

    def check_domains(self, allowed: Iterable[str]) -> None:
        allowed = set(allowed)
        bad = sorted(self.domains - allowed)
        if bad:
            raise EcgDgError(f"manifest references unknown domains: {', '.join(bad)}")

    def save(self, path) -> Path:
        path = Path(path)
        base = path.parent.resolve()
        doc = {
            "created_at": self.created_at,
            "entries": [
                {
                    "id": e.id,
                    "path": _relative_to(Path(e.path).resolve(), base),
                    "domain": e.domain,
                    "labels": list(e.labels),
                    "fs": e.fs,
                    "num_samples": e.num_samples,
                }
                for e in self.entries
            ],
            "skipped": [list(s) for s in self.skipped],
        }
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(doc, indent=1) + "\n")
        except OSError as exc:
            raise IoFailure(f"cannot write manifest {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
        base = path.parent
        entries = [
            ManifestEntry(d["id"], (base / d["path"]).resolve(), d["domain"],
                          tuple(d["labels"]), int(d["fs"]), int(d["num_samples"]))
            for d in doc["entries"]
        ]
        return cls(entries, doc.get("created_at", ""), [tuple(s) for s in doc.get("skipped", [])])


def _relative_to(path: Path, base: Path) -> str:
    try:
        return str(path.relative_to(base))
    except ValueError:
        return str(path)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _entry_for(path: Path, domain: str) -> ManifestEntry:
    if path.suffix == RAW_SUFFIX:
        header = parse_header(path.read_text())
        _check_header_for_record(header)
        sig = _signal_path_for(path, header)
        expected = header.num_leads * header.num_samples * RAW_SAMPLE_WIDTH
    else:
        fields = _parse_portable_header(path.read_text())
        if fields["num_leads"] != NUM_LEADS:
            raise UnsupportedLeadCount(f"record {fields['id']}: {fields['num_leads']} leads")
        header = Header(fields["id"], NUM_LEADS, fields["fs"], fields["num_samples"], (),
                        fields["labels"])
        sig = path.with_suffix(PORTABLE_SIGNAL_SUFFIX)
        expected = PORTABLE_PREAMBLE.size + NUM_LEADS * header.num_samples * 4
    if not sig.exists():
        raise IoFailure(f"missing signal file {sig.name}")
    size = sig.stat().st_size
    if size != expected:
        raise SizeMismatch(f"{sig.name}: {size} bytes, header implies {expected}")
    return ManifestEntry(header.id, path.resolve(), domain, header.labels, header.fs,
                         header.num_samples)


def scan_dataset(directory, domain: str) -> DatasetManifest:
    """Enumerate raw and portable records in ``directory`` (non-recursive).

    Unusable files land in ``manifest.skipped`` as (file name, reason).
    Entries are ordered by record id.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise IoFailure(f"not a directory: {directory}")
    candidates = sorted(p for p in directory.iterdir()
                        if p.suffix in (RAW_SUFFIX, PORTABLE_HEADER_SUFFIX) and p.is_file())
    entries: dict[str, ManifestEntry] = {}
    skipped = []
    for path in candidates:
        try:
            entry = _entry_for(path, domain)
        except (EcgDgError, OSError, UnicodeDecodeError) as exc:
            code = getattr(exc, "code", type(exc).__name__)
            skipped.append((path.name, f"{code}: {exc}"))
            continue
        if entry.id in entries:
            skipped.append((path.name, f"duplicate_id: {entry.id}"))
            continue
        entries[entry.id] = entry
    for name, reason in skipped:
        logger.warning("skipped %s (%s)", name, reason)
    if not entries:
        raise EmptyDataset(f"no valid records in {directory}")
    ordered = [entries[k] for k in sorted(entries)]
    return DatasetManifest(ordered, _now(), sorted(skipped))


def load_record(entry: ManifestEntry) -> EcgRecord:
    """Load a manifest entry in whichever layout it was stored."""
    path = Path(entry.path)
    if path.suffix == RAW_SUFFIX:
        rec = read_record(path, domain=entry.domain)
    else:
        rec = read_portable(path)
    if rec.domain != entry.domain:
        rec = rec.replace(domain=entry.domain)
    return rec


def manifest_path(data_dir, domain: str) -> Path:
    return Path(data_dir) / f"{domain}.manifest.json"
