"""Reference implementations used as test oracles.

Each one takes a different route from the package code: direct formulas,
nested loops, or brute-force counting. None import from ``ecgdg``.
"""

from __future__ import annotations

import math

import numpy as np


# --------------------------------------------------------------- filters

def butter_lowpass_cascade(order: int, cutoff: float, fs: float):
    """Butterworth low-pass as a product of bilinear-transformed sections.

    The analog prototype factors into one first-order section (odd orders)
    and biquads with Q_k = 1 / (2 sin((2k-1) pi / (2n))).
    """
    k = math.tan(math.pi * cutoff / fs)
    b, a = np.array([1.0]), np.array([1.0])
    if order % 2:
        d = 1.0 + k
        b = np.convolve(b, [k / d, k / d])
        a = np.convolve(a, [1.0, (k - 1.0) / d])
    for i in range(1, order // 2 + 1):
        q = 1.0 / (2.0 * math.sin((2 * i - 1) * math.pi / (2 * order)))
        d = 1.0 + k / q + k * k
        b = np.convolve(b, [k * k / d, 2 * k * k / d, k * k / d])
        a = np.convolve(a, [1.0, 2.0 * (k * k - 1.0) / d, (1.0 - k / q + k * k) / d])
    return b, a


def rbj_notch(center: float, q: float, fs: float):
    """Audio-EQ-cookbook notch biquad, normalized so a[0] = 1."""
    w0 = 2.0 * math.pi * center / fs
    alpha = math.sin(w0) / (2.0 * q)
    cw = math.cos(w0)
    a0 = 1.0 + alpha
    b = np.array([1.0, -2.0 * cw, 1.0]) / a0
    a = np.array([a0, -2.0 * cw, 1.0 - alpha]) / a0
    return b, a


def freq_response(b, a, freq: float, fs: float) -> complex:
    z = np.exp(-1j * 2.0 * math.pi * freq / fs)
    num = sum(bk * z ** k for k, bk in enumerate(b))
    den = sum(ak * z ** k for k, ak in enumerate(a))
    return num / den


def df2t(b, a, x):
    """Direct-form II transposed, one sample at a time."""
    b = [float(v) / a[0] for v in b]
    a = [float(v) / a[0] for v in a]
    n = max(len(a), len(b))
    b += [0.0] * (n - len(b))
    a += [0.0] * (n - len(a))
    state = [0.0] * n
    out = []
    for xn in x:
        yn = b[0] * xn + state[0]
        for i in range(1, n):
            state[i - 1] = b[i] * xn - a[i] * yn + (state[i] if i < n - 1 else 0.0)
        out.append(yn)
    return np.array(out)


# ------------------------------------------------------------- resampling

def sinc_interpolate(x, fs_in: float, fs_out: float, n_out: int):
    """Ideal band-limited reconstruction of ``x`` evaluated at the output grid."""
    n = np.arange(len(x))
    t = np.arange(n_out) * (fs_in / fs_out)
    return np.array([np.dot(x, np.sinc(tk - n)) for tk in t])


# ----------------------------------------------------------- convolution

def naive_conv1d(x, w, bias=None, stride=1, padding=0):
    n, c_in, length = x.shape
    c_out, _, k = w.shape
    xp = np.zeros((n, c_in, length + 2 * padding))
    xp[:, :, padding:padding + length] = x
    l_out = (length + 2 * padding - k) // stride + 1
    y = np.zeros((n, c_out, l_out))
    for i in range(n):
        for o in range(c_out):
            for t in range(l_out):
                acc = 0.0
                for c in range(c_in):
                    for j in range(k):
                        acc += w[o, c, j] * xp[i, c, t * stride + j]
                y[i, o, t] = acc + (bias[o] if bias is not None else 0.0)
    return y


# ---------------------------------------------------------------- metrics

def brute_force_metrics(pred, truth):
    """Per-class (precision, recall, f1) by visiting every cell."""
    n, c = len(pred), len(pred[0])
    out = []
    for j in range(c):
        tp = fp = fn = 0
        for i in range(n):
            p, t = bool(pred[i][j]), bool(truth[i][j])
            if p and t:
                tp += 1
            elif p:
                fp += 1
            elif t:
                fn += 1
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out.append((precision, recall, f1))
    return out


# ------------------------------------------------------------ shape trace

def conv_out(length: int, k: int, s: int, p: int) -> int:
    return (length + 2 * p - k) // s + 1


def expected_trace(length, stem_kernel=15, stem_stride=2, blocks=(2, 2, 2, 2), block_kernel=3):
    """Temporal length after the stem conv, the stem pool and every block."""
    out = []
    length = conv_out(length, stem_kernel, stem_stride, stem_kernel // 2)
    out.append(("stem.conv", length))
    length = conv_out(length, 3, 2, 1)
    out.append(("stem.pool", length))
    for s, nb in enumerate(blocks, start=1):
        for b in range(1, nb + 1):
            stride = 2 if (s > 1 and b == 1) else 1
            length = conv_out(length, block_kernel, stride, block_kernel // 2)
            out.append((f"s{s}.b{b}", length))
    return out


# ------------------------------------------------------------- optimizer

def scalar_adam(grad, theta0, lr, steps, beta1=0.9, beta2=0.999, eps=1e-8):
    theta, m, v = theta0, 0.0, 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad(theta)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        path.append(theta)
    return path
