"""Synthetic multi-domain 12-lead ECG-like data.

Beats are sums of Gaussian bumps (P, Q, R, S, T) projected onto 12 leads by
fixed weights. Classes alter beat rate, QRS width, T polarity, P presence,
rhythm regularity or voltage; domains add their own sampling rate, gain,
baseline wander, noise, class priors and per-class morphology offsets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as _config
from .errors import InvalidConfig, IoFailure, UnknownClass
from .labels import LabelMap, load_label_map
from .records import (NUM_LEADS, DatasetManifest, EcgRecord, ManifestEntry, manifest_path,
                      write_portable)
from .rng import substream

logger = logging.getLogger(__name__)

ALLOWED_FS = (250, 257, 500, 1000)
BASE_RATE = 72.0


@dataclass(frozen=True)
class ClassMorphology:
    axis: str = "none"  # feature family; co-occurring classes use different axes
    rate: Optional[float] = None
    qrs_factor: float = 1.0
    t_polarity: float = 1.0
    p_amplitude: float = 1.0
    rr_irregularity: float = 0.0
    voltage: float = 1.0


_BASE_CLASSES = (
    ClassMorphology(),                                        # normal rhythm
    ClassMorphology(axis="rate", rate=125.0),                 # fast
    ClassMorphology(axis="qrs", qrs_factor=2.6),              # wide QRS
    ClassMorphology(axis="t", t_polarity=-1.0),               # inverted T
    ClassMorphology(axis="rate", rate=45.0),                  # slow
    ClassMorphology(axis="p", p_amplitude=0.0, rr_irregularity=0.25),  # irregular, no P
)


def class_morphologies(n: int) -> list[ClassMorphology]:
    """Morphology per synthetic class index; the first six are fixed."""
    out = list(_BASE_CLASSES[:n])
    for k in range(len(out), n):
        family = (k - len(_BASE_CLASSES)) % 4
        step = (k - len(_BASE_CLASSES)) // 4 + 1
        if family == 0:
            out.append(ClassMorphology(axis="rate", rate=95.0 + 6.0 * step))
        elif family == 1:
            out.append(ClassMorphology(axis="qrs", qrs_factor=1.6 + 0.2 * step))
        elif family == 2:
            out.append(ClassMorphology(axis="voltage", voltage=max(0.2, 0.5 - 0.05 * step)))
        else:
            out.append(ClassMorphology(axis="t", t_polarity=max(0.0, 0.3 - 0.05 * step)))
    return out


@dataclass(frozen=True)
class SynthDomainSpec:
    name: str
    fs: int = 500
    duration_s: float = 10.0
    amplitude_scale: float = 1.0
    wander_amplitude: float = 0.1
    wander_freq: float = 0.3
    noise_std: float = 0.02
    rate_jitter: float = 0.05
    # per-class offsets, indexed like the label map; empty means neutral
    rate_offsets: tuple[float, ...] = ()
    qrs_scales: tuple[float, ...] = ()
    t_scales: tuple[float, ...] = ()
    class_priors: tuple[float, ...] = ()
    cooccurrence: float = 0.2
    record_count: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.fs not in ALLOWED_FS:
            raise InvalidConfig(f"synthetic fs must be one of {ALLOWED_FS}, got {self.fs}")
        if self.record_count < 1:
            raise InvalidConfig("record_count must be >= 1")
        if self.duration_s <= 0:
            raise InvalidConfig("duration_s must be positive")
        if not 0.0 <= self.cooccurrence <= 1.0:
            raise InvalidConfig("cooccurrence must be a probability")
        if self.class_priors and (min(self.class_priors) < 0 or sum(self.class_priors) <= 0):
            raise InvalidConfig("class_priors must be non-negative with a positive sum")

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_s * self.fs))


def _offset(values: tuple, k: int, default: float) -> float:
    return values[k] if k < len(values) else default


def _lead_weights() -> np.ndarray:
    """Fixed (12, 5) projection of the P, Q, R, S, T components."""
    rng = substream(0, "synth", "lead-weights")
    w = rng.uniform(0.4, 1.2, size=(NUM_LEADS, 5))
    w[3] *= -1.0  # aVR sees the complex upside down
    w[1, 2] = 1.0  # lead II carries a unit R wave
    return w


_LEAD_WEIGHTS = _lead_weights()


def sample_labels(spec: SynthDomainSpec, n_classes: int, rng: np.random.Generator,
                  morph: Sequence[ClassMorphology]) -> list[int]:
    priors = np.asarray(spec.class_priors[:n_classes] if spec.class_priors else np.ones(n_classes),
                        dtype=np.float64)
    if len(priors) < n_classes:
        priors = np.concatenate([priors, np.zeros(n_classes - len(priors))])
    if priors.sum() <= 0:
        raise InvalidConfig(f"domain {spec.name}: class priors are all zero")
    priors = priors / priors.sum()
    primary = int(rng.choice(n_classes, p=priors))
    labels = [primary]
    co = rng.random()
    if co < spec.cooccurrence and morph[primary].axis != "none":
        candidates = [k for k in range(n_classes) if priors[k] > 0 and k != primary
                      and morph[k].axis not in ("none", morph[primary].axis)]
        if candidates:
            p = priors[candidates] / priors[candidates].sum()
            labels.append(int(candidates[rng.choice(len(candidates), p=p)]))
    return sorted(labels)


def _beat_train(rate: float, irregularity: float, duration: float, rng) -> np.ndarray:
    interval = 60.0 / rate
    t = rng.uniform(0.0, interval)
    times = []
    while t < duration:
        times.append(t)
        step = interval * (1.0 + irregularity * rng.standard_normal()) if irregularity else interval
        t += max(step, 0.25 * interval)
    return np.asarray(times)


def synthesize(spec: SynthDomainSpec, classes: Sequence[int], index: int,
               morph: Sequence[ClassMorphology]) -> np.ndarray:
    """(12, n) millivolt signal for a record of the given class indices."""
    rng = substream(spec.seed, "record", index)
    rate, qrs, tpol, pamp, irr, volt = BASE_RATE, 1.0, 1.0, 1.0, 0.0, 1.0
    for k in classes:
        m = morph[k]
        if m.rate is not None:
            rate = m.rate
        qrs *= m.qrs_factor
        tpol *= m.t_polarity
        pamp = min(pamp, m.p_amplitude)
        irr = max(irr, m.rr_irregularity)
        volt *= m.voltage
    for k in classes:
        rate += _offset(spec.rate_offsets, k, 0.0)
        qrs *= _offset(spec.qrs_scales, k, 1.0)
        tpol *= _offset(spec.t_scales, k, 1.0)
    jitter = spec.rate_jitter * rng.uniform(-1.0, 1.0) if spec.rate_jitter else 0.0
    rate = max(rate * (1.0 + jitter), 20.0)

    n = spec.num_samples
    t = np.arange(n) / spec.fs
    beats = _beat_train(rate, irr, spec.duration_s, rng)
    # (offset s, width s, amplitude) for P, Q, R, S, T
    comps = (
        (-0.16, 0.020, 0.12 * pamp),
        (-0.025 * qrs, 0.008 * qrs, -0.12),
        (0.0, 0.010 * qrs, 1.0),
        (0.025 * qrs, 0.010 * qrs, -0.25),
        (0.28, 0.050, 0.30 * tpol),
    )
    waves = np.zeros((5, n))
    for c, (off, width, amp) in enumerate(comps):
        if amp == 0.0:
            continue
        d = t[None, :] - (beats[:, None] + off)
        waves[c] = amp * np.exp(-0.5 * (d / width) ** 2).sum(axis=0)
    x = volt * (_LEAD_WEIGHTS @ waves)
    if spec.wander_amplitude:
        phase = rng.uniform(0, 2 * np.pi, size=(NUM_LEADS, 1))
        scale = rng.uniform(0.5, 1.0, size=(NUM_LEADS, 1))
        x = x + spec.wander_amplitude * scale * np.sin(2 * np.pi * spec.wander_freq * t + phase)
    if spec.noise_std:
        x = x + spec.noise_std * rng.standard_normal(x.shape)
    return spec.amplitude_scale * x


def generate_record(spec: SynthDomainSpec, class_codes: Sequence[str], label_map: LabelMap,
                    index: int = 0, morph: Optional[Sequence[ClassMorphology]] = None) -> EcgRecord:
    """Deterministic record for (spec.seed, index) carrying ``class_codes``."""
    morph = morph or class_morphologies(len(label_map))
    classes = []
    for code in class_codes:
        if code not in label_map.codes:
            raise UnknownClass(f"class code {code!r} is not in the synthetic label map")
        classes.append(label_map.codes.index(code))
    leads = synthesize(spec, sorted(classes), index, morph)
    return EcgRecord(f"{spec.name}_{index:05d}", leads, spec.fs,
                     tuple(label_map.codes[k] for k in sorted(classes)), spec.name)


def synthetic_label_map(n_classes: int) -> LabelMap:
    base = load_label_map(merge_equivalent=False)
    if not 1 <= n_classes <= len(base):
        raise InvalidConfig(f"number of synthetic classes must lie in [1, {len(base)}]")
    return base.subset(n_classes)


def default_domain_specs(n_domains: int, n_classes: int, per_domain: int, seed: int,
                         cooccurrence: float = 0.2) -> list[SynthDomainSpec]:
    """Domains D1..Dn. Odd-numbered extra domains drift further from D1/D2:
    other sampling rates, more wander and noise, shifted class morphology."""
    fs_cycle = (500, 500, 257, 250, 1000)
    specs = []
    for i in range(n_domains):
        rng = substream(seed, "domain-spec", i)
        shift = 0.0 if i < 2 else 1.0 + 0.5 * (i - 2)
        priors = rng.dirichlet(np.full(n_classes, 3.0)) + 0.05
        sign = 1.0 if i % 2 == 0 else -1.0
        specs.append(SynthDomainSpec(
            name=f"D{i + 1}",
            fs=fs_cycle[i % len(fs_cycle)],
            amplitude_scale=float(rng.uniform(0.6, 2.0)),
            wander_amplitude=0.1 + 0.25 * shift,
            wander_freq=float(rng.uniform(0.15, 0.5)),
            noise_std=0.02 + 0.05 * shift,
            rate_offsets=tuple(float(sign * 14.0 * shift) for _ in range(n_classes)),
            qrs_scales=tuple(float(1.0 + sign * 0.25 * shift) for _ in range(n_classes)),
            t_scales=tuple(float(max(0.2, 1.0 - 0.3 * shift)) for _ in range(n_classes)),
            class_priors=tuple(float(p) for p in priors / priors.sum()),
            cooccurrence=cooccurrence,
            record_count=per_domain,
            seed=int(rng.integers(0, 2**31 - 1)),
        ))
    return specs


def load_spec_overrides(specs: list[SynthDomainSpec], path) -> list[SynthDomainSpec]:
    """Apply ``[<domain name>]`` sections of an INI file to matching specs."""
    parser = _config.read_ini(path)
    names = {s.name for s in specs}
    _config.check_sections(parser, names)
    return [_config.from_section(SynthDomainSpec, _config.section_dict(parser, s.name), base=s,
                                 section=s.name) for s in specs]


def generate_domain(spec: SynthDomainSpec, label_map: LabelMap, out_dir) -> DatasetManifest:
    out_dir = Path(out_dir)
    morph = class_morphologies(len(label_map))
    rec_dir = out_dir / spec.name
    try:
        rec_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {rec_dir}: {exc}") from exc
    entries = []
    for i in range(spec.record_count):
        rng = substream(spec.seed, "labels", i)
        classes = sample_labels(spec, len(label_map), rng, morph)
        rec = generate_record(spec, [label_map.codes[k] for k in classes], label_map, i, morph)
        header, _ = write_portable(rec, rec_dir)
        entries.append(ManifestEntry(rec.id, header.resolve(), spec.name, rec.labels, rec.fs,
                                     rec.num_samples))
    manifest = DatasetManifest(entries, "")
    manifest.save(manifest_path(out_dir, spec.name))
    return manifest


def generate_dataset(specs: Sequence[SynthDomainSpec], label_map: LabelMap, out_dir
                     ) -> dict[str, DatasetManifest]:
    """Write every domain plus ``labels.csv`` and ``synth.ini`` into ``out_dir``."""
    if not specs:
        raise InvalidConfig("at least one domain spec is required")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "labels.csv").write_text(label_map.to_csv())
        _config.write_ini(out_dir / "synth.ini", {s.name: _config.to_section(s) for s in specs})
    except OSError as exc:
        raise IoFailure(f"cannot write to {out_dir}: {exc}") from exc
    manifests = {}
    for spec in specs:
        manifests[spec.name] = generate_domain(spec, label_map, out_dir)
        logger.info("domain %s: %d records at %d Hz", spec.name, spec.record_count, spec.fs)
    return manifests
