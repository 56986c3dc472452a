"""Signal conditioning: IIR design, filtering, rational resampling, length
fixing, min-max normalization and the per-record preprocessing chain
(resample -> fix length -> low-pass -> notch -> normalize)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import signal as _sps

from .errors import InvalidConfig, InvalidCutoff, InvalidRate, NonFiniteInput
from .records import NUM_LEADS, EcgRecord


@dataclass(frozen=True)
class IirFilter:
    b: tuple[float, ...]
    a: tuple[float, ...]
    design: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        b = tuple(float(x) for x in self.b)
        a = tuple(float(x) for x in self.a)
        if not a or a[0] == 0:
            raise InvalidConfig("a[0] must be non-zero")
        if a[0] != 1.0:
            b = tuple(x / a[0] for x in b)
            a = tuple(x / a[0] for x in a)
        if not all(math.isfinite(x) for x in b + a):
            raise InvalidConfig("filter coefficients must be finite")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)

    @property
    def poles(self) -> np.ndarray:
        return np.roots(self.a) if len(self.a) > 1 else np.zeros(0)

    @property
    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles) < 1.0))

    def response(self, freqs_hz, fs: float) -> np.ndarray:
        """Complex frequency response at ``freqs_hz``."""
        z = np.exp(1j * 2 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / fs)
        zi = 1.0 / z
        num = np.polyval(self.b[::-1], zi)
        den = np.polyval(self.a[::-1], zi)
        return num / den


def _check_cutoff(cutoff: float, fs: float) -> None:
    if not (fs > 0 and 0 < cutoff < fs / 2):
        raise InvalidCutoff(f"cutoff {cutoff} Hz must lie in (0, {fs / 2}) for fs={fs}")


def _bilinear_zpk(zeros, poles, gain, fs):
    """Map analog zeros/poles/gain to digital via s = 2 fs (z - 1)/(z + 1)."""
    zeros = np.asarray(zeros, dtype=np.complex128)
    poles = np.asarray(poles, dtype=np.complex128)
    k2 = 2.0 * fs
    zd = (k2 + zeros) / (k2 - zeros)
    pd = (k2 + poles) / (k2 - poles)
    # analog zeros at infinity land on z = -1
    zd = np.concatenate([zd, -np.ones(len(poles) - len(zeros))])
    gd = gain * np.real(np.prod(k2 - zeros) / np.prod(k2 - poles))
    return zd, pd, gd


def _butterworth_prototype(order: int) -> np.ndarray:
    k = np.arange(1, order + 1)
    return np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))


def design_butterworth_lowpass(order: int, cutoff: float, fs: float) -> IirFilter:
    """Butterworth low-pass via pre-warped bilinear transform, unity DC gain."""
    if order < 1 or int(order) != order:
        raise InvalidConfig(f"order must be a positive integer, got {order}")
    _check_cutoff(cutoff, fs)
    warped = 2.0 * fs * math.tan(math.pi * cutoff / fs)
    poles = warped * _butterworth_prototype(order)
    zd, pd, _ = _bilinear_zpk([], poles, 1.0, fs)
    b = np.real(np.poly(zd))
    a = np.real(np.poly(pd))
    b = b * (a.sum() / b.sum())
    return IirFilter(tuple(b), tuple(a),
                     {"kind": "butterworth_lowpass", "order": order, "cutoff": cutoff, "fs": fs})


def design_butterworth_highpass(order: int, cutoff: float, fs: float) -> IirFilter:
    """Butterworth high-pass, unity gain at Nyquist."""
    if order < 1 or int(order) != order:
        raise InvalidConfig(f"order must be a positive integer, got {order}")
    _check_cutoff(cutoff, fs)
    warped = 2.0 * fs * math.tan(math.pi * cutoff / fs)
    poles = warped / _butterworth_prototype(order)
    zd, pd, _ = _bilinear_zpk(np.zeros(order), poles, 1.0, fs)
    b = np.real(np.poly(zd))
    a = np.real(np.poly(pd))
    alt = (-1.0) ** np.arange(order + 1)
    b = b * ((a * alt).sum() / (b * alt).sum())
    return IirFilter(tuple(b), tuple(a),
                     {"kind": "butterworth_highpass", "order": order, "cutoff": cutoff, "fs": fs})


def design_notch(center: float, q: float, fs: float) -> IirFilter:
    """Second-order notch: bilinear map of (s^2 + w0^2)/(s^2 + s w0/q + w0^2)
    with w0 pre-warped so the zero sits exactly on ``center``."""
    _check_cutoff(center, fs)
    if not q > 0:
        raise InvalidCutoff(f"notch Q must be positive, got {q}")
    k = math.tan(math.pi * center / fs)
    k2 = k * k
    norm = 1.0 + k / q + k2
    b = (1.0 + k2, 2.0 * (k2 - 1.0), 1.0 + k2)
    a = (norm, 2.0 * (k2 - 1.0), 1.0 - k / q + k2)
    return IirFilter(tuple(x / norm for x in b), tuple(x / norm for x in a),
                     {"kind": "notch", "order": 2, "cutoff": center, "fs": fs, "q": q})


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("signal contains NaN or Inf")


def apply_filter(filt: IirFilter, x, axis: int = -1) -> np.ndarray:
    """Causal transposed direct-form II filtering from zero initial state."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise InvalidConfig("cannot filter an empty signal")
    _check_finite(x)
    return _sps.lfilter(np.asarray(filt.b), np.asarray(filt.a), x, axis=axis)


# ---------------------------------------------------------------- resampling

KAISER_BETA = 8.0
ZERO_CROSSINGS = 16
ANTIALIAS_FRACTION = 0.9


def _check_rate(fs) -> int:
    if isinstance(fs, bool) or int(fs) != fs or fs <= 0:
        raise InvalidRate(f"sampling rate must be a positive integer, got {fs}")
    return int(fs)


@dataclass(frozen=True)
class _Polyphase:
    up: int
    down: int
    half_width: int
    taps: np.ndarray  # indexed by j + half_width, j in [-half_width, half_width]


def _design_polyphase(fs_in: int, fs_out: int) -> _Polyphase:
    g = math.gcd(fs_in, fs_out)
    up, down = fs_out // g, fs_in // g
    fs_up = fs_in * up
    cutoff = ANTIALIAS_FRACTION * min(fs_in, fs_out) / 2.0
    spacing = fs_up / (2.0 * cutoff)  # upsampled samples per sinc zero crossing
    half = int(math.ceil(ZERO_CROSSINGS * spacing))
    j = np.arange(-half, half + 1, dtype=np.float64)
    window = np.kaiser(2 * half + 1, KAISER_BETA)
    taps = up * (2.0 * cutoff / fs_up) * np.sinc(2.0 * cutoff * j / fs_up) * window
    return _Polyphase(up, down, half, taps)


def resample(x, fs_in: int, fs_out: int, max_len: Optional[int] = None) -> np.ndarray:
    """Rational polyphase resampling along the last axis.

    Output length is ceil(n * fs_out / fs_in); output sample m sits at time
    m / fs_out (zero group delay). Ends are extended by odd reflection.
    ``max_len`` computes only a prefix of the output (same values).
    """
    fs_in, fs_out = _check_rate(fs_in), _check_rate(fs_out)
    x = np.asarray(x, dtype=np.float64)
    if fs_in == fs_out:
        return x.copy()
    _check_finite(x)
    n = x.shape[-1]
    if n == 0:
        raise InvalidConfig("cannot resample an empty signal")
    pp = _design_polyphase(fs_in, fs_out)
    up, down, half = pp.up, pp.down, pp.half_width
    n_out = -(-n * fs_out // fs_in)
    if max_len is not None:
        n_out = min(n_out, max_len)

    pad = half // up + 2
    if n > 1:
        idx = np.arange(1, pad + 1)
        lo = 2 * x[..., :1] - x[..., np.minimum(idx, n - 1)][..., ::-1]
        hi = 2 * x[..., -1:] - x[..., np.maximum(n - 1 - idx, 0)]
        xp = np.concatenate([lo, x, hi], axis=-1)
    else:
        xp = np.repeat(x, 2 * pad + 1, axis=-1)

    # output m at upsampled position t = m*down + pad*up; contributing inputs
    # are those n' with |t - n'*up| <= half
    m = np.arange(n_out)
    t = m * down + pad * up
    first = -((half - t) // up)  # ceil((t - half) / up)
    width = (2 * half) // up + 1
    cols = first[:, None] + np.arange(width)[None, :]
    j = t[:, None] - cols * up
    valid = np.abs(j) <= half
    weights = np.where(valid, pp.taps[np.clip(j + half, 0, 2 * half)], 0.0)
    cols = np.clip(cols, 0, xp.shape[-1] - 1)
    rows = xp.reshape(-1, xp.shape[-1])
    out = np.empty((rows.shape[0], n_out))
    for i, row in enumerate(rows):
        out[i] = np.einsum("mw,mw->m", row[cols], weights)
    return out.reshape(x.shape[:-1] + (n_out,))


def fix_length(x, target_len: int) -> np.ndarray:
    """Keep the first ``target_len`` samples or zero-pad at the end."""
    if target_len <= 0:
        raise InvalidConfig(f"target_len must be positive, got {target_len}")
    x = np.asarray(x)
    n = x.shape[-1]
    if n >= target_len:
        return x[..., :target_len].copy()
    pad = [(0, 0)] * (x.ndim - 1) + [(0, target_len - n)]
    return np.pad(x, pad)


def normalize(leads, value_range=(-1.0, 1.0)) -> np.ndarray:
    """Joint min-max map of the whole record onto ``value_range``.

    A constant record maps to the range midpoint.
    """
    x = np.asarray(leads, dtype=np.float64)
    _check_finite(x)
    lo, hi = float(value_range[0]), float(value_range[1])
    if not hi > lo:
        raise InvalidConfig(f"normalization range must be increasing, got {value_range}")
    xmin, xmax = x.min(), x.max()
    if xmax == xmin:
        return np.full_like(x, (lo + hi) / 2.0)
    # divide first: (xmax - xmin)/(xmax - xmin) is exactly 1, so max maps to hi exactly
    return lo + ((x - xmin) / (xmax - xmin)) * (hi - lo)


@dataclass(frozen=True)
class PreprocessConfig:
    target_fs: int = 500
    target_len: int = 5000
    lp_cutoff: float = 20.0
    lp_order: int = 3
    notch_freq: float = 0.01
    notch_q: float = 0.707
    norm_range: tuple[float, float] = (-1.0, 1.0)
    hp_alternative: bool = False

    def __post_init__(self):
        if self.target_fs <= 2 * self.lp_cutoff:
            raise InvalidConfig("target_fs must exceed twice the low-pass cutoff")
        if self.target_len <= 0:
            raise InvalidConfig("target_len must be positive")


def build_filters(cfg: PreprocessConfig) -> tuple[IirFilter, IirFilter]:
    lowpass = design_butterworth_lowpass(cfg.lp_order, cfg.lp_cutoff, cfg.target_fs)
    if cfg.hp_alternative:
        second = design_butterworth_highpass(1, cfg.notch_freq, cfg.target_fs)
    else:
        second = design_notch(cfg.notch_freq, cfg.notch_q, cfg.target_fs)
    return lowpass, second


def preprocess_record(record: EcgRecord, cfg: Optional[PreprocessConfig] = None,
                      filters: Optional[tuple[IirFilter, IirFilter]] = None) -> EcgRecord:
    cfg = cfg or PreprocessConfig()
    x = np.asarray(record.leads, dtype=np.float64)
    if x.shape[0] != NUM_LEADS:
        raise InvalidConfig(f"expected {NUM_LEADS} leads")
    _check_finite(x)
    lowpass, second = filters or build_filters(cfg)
    # only the first target_len resampled samples survive fix_length
    x = resample(x, record.fs, cfg.target_fs, max_len=cfg.target_len)
    x = fix_length(x, cfg.target_len)
    x = apply_filter(lowpass, x)
    x = apply_filter(second, x)
    x = normalize(x, cfg.norm_range)
    return record.replace(leads=x, fs=cfg.target_fs)
