"""1-D ResNet-18 with multi-scale tap pipelines.

Every basic block contributes two tap points: after its first convolution
(post bn+relu) and at its output (after the residual add and relu). Each
tapped feature map goes through 1x1 conv -> spatial dropout -> global average
pooling; the pooled vectors are concatenated and fed to a dense head. The
baseline variant shares the backbone and replaces the taps with a single
global average pool of the last stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import ParamSet, Tensor, ops
from .errors import InvalidConfig, ShapeMismatch
from .rng import substream

MULTISCALE = "multiscale"
BASELINE = "baseline"


@dataclass(frozen=True)
class ModelConfig:
    in_leads: int = 12
    num_classes: int = 24
    stem_kernel: int = 15
    stem_stride: int = 2
    stem_channels: int = 64
    block_kernel: int = 3
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2, 2)
    tap_projection_channels: int = 32
    dropout_rate: float = 0.1
    head_mode: str = "sigmoid"
    decision_threshold: float = 0.5
    # empty means "every block convolution"; otherwise ids like "s1.b1.c2"
    taps: tuple[str, ...] = ()
    variant: str = MULTISCALE
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.stage_channels) != len(self.blocks_per_stage) or not self.stage_channels:
            raise InvalidConfig("stage_channels and blocks_per_stage must have equal, non-zero length")
        if any(c < 1 for c in self.stage_channels) or any(b < 1 for b in self.blocks_per_stage):
            raise InvalidConfig("stage widths and block counts must be positive")
        if self.tap_projection_channels < 1:
            raise InvalidConfig("tap_projection_channels must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfig("dropout_rate must lie in [0, 1)")
        if self.head_mode not in ("sigmoid", "softmax"):
            raise InvalidConfig(f"head_mode must be sigmoid or softmax, got {self.head_mode!r}")
        if self.variant not in (MULTISCALE, BASELINE):
            raise InvalidConfig(f"variant must be {MULTISCALE} or {BASELINE}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig("dtype must be float32 or float64")
        if self.in_leads < 1 or self.num_classes < 1:
            raise InvalidConfig("in_leads and num_classes must be positive")
        if self.stem_kernel < 1 or self.stem_stride < 1 or self.block_kernel < 1:
            raise InvalidConfig("kernel sizes and strides must be positive")
        if self.block_kernel % 2 == 0:
            raise InvalidConfig("block_kernel must be odd")
        unknown = set(self.taps) - set(self.all_tap_points())
        if unknown:
            raise InvalidConfig(f"unknown tap points: {sorted(unknown)}")

    def all_tap_points(self) -> list[str]:
        return [f"s{s + 1}.b{b + 1}.c{c}"
                for s, nb in enumerate(self.blocks_per_stage)
                for b in range(nb) for c in (1, 2)]

    def tap_points(self) -> list[str]:
        if self.variant == BASELINE:
            return []
        return list(self.taps) if self.taps else self.all_tap_points()

    @property
    def loss_mode(self) -> str:
        return "softmax_ce" if self.head_mode == "softmax" else "sigmoid_bce"


def _he_uniform(rng, shape, fan_in, gain, dtype):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class _Block:
    prefix: str
    stride: int
    in_ch: int
    out_ch: int
    has_projection: bool


@dataclass
class ModelGraph:
    cfg: ModelConfig
    params: ParamSet
    seed: int
    blocks: list[_Block]
    taps: list[str]
    tap_inputs: dict[str, int]
    _calls: int = field(default=0, repr=False)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    @property
    def head_input_dim(self) -> int:
        if self.variant == BASELINE:
            return self.cfg.stage_channels[-1]
        return len(self.taps) * self.cfg.tap_projection_channels

    def parameter_count(self) -> int:
        return self.params.count()

    def backbone_names(self) -> list[str]:
        return [n for n in self.params.names() if not n.startswith(("tap.", "head."))]

    # ------------------------------------------------------------ forward

    def _conv_bn(self, x, name, stride, padding, training, relu=True):
        p = self.params
        x = ops.conv1d(x, p[f"{name}.conv.weight"], None, stride=stride, padding=padding)
        x = ops.batchnorm1d(x, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"],
                            p.buffers[f"{name}.bn.running_mean"],
                            p.buffers[f"{name}.bn.running_var"], training)
        return ops.relu(x) if relu else x

    def forward(self, batch, mode: str = "eval", dropout_key: Optional[int] = None,
                features: Optional[dict] = None) -> Tensor:
        """Logits (N, num_classes) for a (N, leads, L) batch.

        ``dropout_key`` pins the dropout masks (otherwise a per-call counter
        is used). ``features``, when given, receives stage outputs, tapped
        maps, pooled tap vectors, the head input and a layer shape trace.
        """
        cfg = self.cfg
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be train or eval, got {mode!r}")
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=cfg.dtype))
        if x.dtype != np.dtype(cfg.dtype):
            x = Tensor(x.data.astype(cfg.dtype), requires_grad=x.requires_grad)
        if x.ndim != 3 or x.shape[1] != cfg.in_leads:
            raise ShapeMismatch(f"expected (N, {cfg.in_leads}, L) input, got {x.shape}")
        training = mode == "train"
        # a single-record batch has no batch statistics; fall back to running ones
        bn_training = training and x.shape[0] > 1
        if dropout_key is None:
            dropout_key = self._calls
            self._calls += 1
        trace = [] if features is not None else None

        def note(name, t):
            if trace is not None:
                trace.append((name, t.shape))

        x = self._conv_bn(x, "stem", cfg.stem_stride, cfg.stem_kernel // 2, bn_training)
        note("stem.conv", x)
        x = ops.maxpool1d(x, 3, 2, 1)
        note("stem.pool", x)

        tapped: dict[str, Tensor] = {}
        stage_out = []
        for blk in self.blocks:
            identity = x
            h = self._conv_bn(x, f"{blk.prefix}.conv1", blk.stride, cfg.block_kernel // 2, bn_training)
            tapped[f"{blk.prefix}.c1"] = h
            note(f"{blk.prefix}.conv1", h)
            h = self._conv_bn(h, f"{blk.prefix}.conv2", 1, cfg.block_kernel // 2, bn_training,
                              relu=False)
            if blk.has_projection:
                identity = self._conv_bn(x, f"{blk.prefix}.down", blk.stride, 0, bn_training,
                                         relu=False)
            x = ops.relu(ops.add(h, identity))
            tapped[f"{blk.prefix}.c2"] = x
            note(f"{blk.prefix}.conv2", x)
            stage_out.append((blk.prefix, x))

        p = self.params
        pooled = []
        if self.variant == BASELINE:
            head_in = ops.global_avg_pool(x)
        else:
            for i, tap in enumerate(self.taps):
                t = ops.conv1d(tapped[tap], p[f"tap.{tap}.conv.weight"], p[f"tap.{tap}.conv.bias"])
                rng = substream(self.seed, "dropout", tap, dropout_key) if training else None
                t = ops.spatial_dropout(t, cfg.dropout_rate, training, rng)
                t = ops.global_avg_pool(t)
                note(f"tap.{tap}", t)
                pooled.append(t)
            head_in = ops.concat(pooled, axis=1)
        note("head.input", head_in)
        logits = ops.dense(head_in, p["head.weight"], p["head.bias"])
        note("head.logits", logits)

        if features is not None:
            features["trace"] = trace
            features["tapped"] = tapped
            features["pooled"] = pooled
            features["head_input"] = head_in
            features["blocks"] = stage_out
        return logits

    def __call__(self, batch, mode: str = "eval", **kw) -> Tensor:
        return self.forward(batch, mode, **kw)


def build_model(cfg: ModelConfig, seed: int = 0) -> ModelGraph:
    """Construct and initialize a model; deterministic given ``seed``."""
    dtype = np.dtype(cfg.dtype)
    params = ParamSet()

    def conv(name, c_out, c_in, k, gain):
        w = _he_uniform(substream(seed, "init", f"{name}.weight"), (c_out, c_in, k), c_in * k, gain, dtype)
        params.add(f"{name}.weight", w)

    def bn(name, ch):
        params.add(f"{name}.gamma", np.ones(ch, dtype=dtype))
        params.add(f"{name}.beta", np.zeros(ch, dtype=dtype))
        params.add_buffer(f"{name}.running_mean", np.zeros(ch, dtype=dtype))
        params.add_buffer(f"{name}.running_var", np.ones(ch, dtype=dtype))

    relu_gain = math.sqrt(2.0)
    conv("stem.conv", cfg.stem_channels, cfg.in_leads, cfg.stem_kernel, relu_gain)
    bn("stem.bn", cfg.stem_channels)

    blocks = []
    tap_inputs = {}
    in_ch = cfg.stem_channels
    for s, (width, nblocks) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage)):
        for b in range(nblocks):
            prefix = f"s{s + 1}.b{b + 1}"
            stride = 2 if (s > 0 and b == 0) else 1
            proj = stride != 1 or in_ch != width
            conv(f"{prefix}.conv1.conv", width, in_ch, cfg.block_kernel, relu_gain)
            bn(f"{prefix}.conv1.bn", width)
            conv(f"{prefix}.conv2.conv", width, width, cfg.block_kernel, relu_gain)
            bn(f"{prefix}.conv2.bn", width)
            if proj:
                conv(f"{prefix}.down.conv", width, in_ch, 1, 1.0)
                bn(f"{prefix}.down.bn", width)
            blocks.append(_Block(prefix, stride, in_ch, width, proj))
            tap_inputs[f"{prefix}.c1"] = width
            tap_inputs[f"{prefix}.c2"] = width
            in_ch = width

    taps = cfg.tap_points()
    proj_ch = cfg.tap_projection_channels
    for tap in taps:
        c_in = tap_inputs[tap]
        name = f"tap.{tap}.conv"
        w = _he_uniform(substream(seed, "init", f"{name}.weight"), (proj_ch, c_in, 1), c_in, 1.0, dtype)
        params.add(f"{name}.weight", w)
        params.add(f"{name}.bias", np.zeros(proj_ch, dtype=dtype))

    head_in = cfg.stage_channels[-1] if cfg.variant == BASELINE else len(taps) * proj_ch
    w = _he_uniform(substream(seed, "init", "head.weight"), (cfg.num_classes, head_in), head_in, 1.0, dtype)
    params.add("head.weight", w)
    params.add("head.bias", np.zeros(cfg.num_classes, dtype=dtype))
    return ModelGraph(cfg, params, seed, blocks, taps, tap_inputs)


def forward(model: ModelGraph, batch, mode: str = "eval", **kw) -> Tensor:
    return model.forward(batch, mode, **kw)


def forward_baseline(model: ModelGraph, batch, mode: str = "eval", **kw) -> Tensor:
    if model.variant != BASELINE:
        raise InvalidConfig("forward_baseline needs a model built with variant=baseline")
    return model.forward(batch, mode, **kw)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def probabilities(logits, head_mode: str) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if head_mode == "softmax":
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    return _sigmoid(z)


def predict(logits, head_mode: str = "sigmoid", threshold: float = 0.5) -> np.ndarray:
    """Binary (N, C) decisions. Softmax mode falls back to the argmax class
    when no probability clears the threshold."""
    prob = probabilities(logits, head_mode)
    out = (prob >= threshold).astype(np.int8)
    if head_mode == "softmax":
        empty = out.sum(axis=1) == 0
        if np.any(empty):
            out[empty, prob[empty].argmax(axis=1)] = 1
    return out
