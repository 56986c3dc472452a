"""Central finite-difference checks of the reverse-mode gradients.

Every check runs in float64. The scalar under test is ``sum(f(inputs) * R)``
for a fixed random projection ``R``, so every output element contributes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Tape, Tensor, ops
from .model import ModelConfig, build_model
from .rng import substream

STEP = 1e-4
TOLERANCE = 1e-4
SAMPLES = 20
# denominators below this are treated as this; keeps near-zero gradients
# from turning rounding noise into huge relative errors
FLOOR = 1e-7


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def relative_error(analytic: float, numeric: float, floor: float = FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(fn: Callable[[dict], Tensor], inputs: dict[str, np.ndarray], name: str,
                    seed: int = 0, samples: int = SAMPLES, step: float = STEP,
                    wrt: Optional[list[str]] = None) -> CheckResult:
    """Compare tape gradients of ``fn`` with central differences.

    ``fn`` maps a dict of Tensors to a Tensor. ``samples`` entries are drawn
    uniformly from the inputs named in ``wrt`` (all inputs by default); when
    they hold fewer entries, every entry is checked.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    wrt = list(arrays) if wrt is None else wrt
    rng = substream(seed, "gradcheck", name)
    probe = fn({k: Tensor(v) for k, v in arrays.items()})
    proj = rng.standard_normal(probe.shape)

    def scalar(arrs) -> float:
        out = fn({k: Tensor(v) for k, v in arrs.items()})
        return float(np.sum(out.data * proj))

    tensors = {k: Tensor(v, requires_grad=k in wrt) for k, v in arrays.items()}
    with Tape() as tape:
        loss = ops.sum(ops.mul(fn(tensors), Tensor(proj)))
    tape.backward(loss, [tensors[k] for k in wrt])

    slots = [(k, i) for k in wrt for i in range(arrays[k].size)]
    if len(slots) > samples:
        slots = [slots[j] for j in rng.choice(len(slots), size=samples, replace=False)]
    worst = 0.0
    for k, i in slots:
        flat = arrays[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        up = scalar(arrays)
        flat[i] = orig - step
        down = scalar(arrays)
        flat[i] = orig
        numeric = (up - down) / (2 * step)
        analytic = float(tensors[k].grad.reshape(-1)[i])
        worst = max(worst, relative_error(analytic, numeric))
    return CheckResult(name, worst, len(slots))


# ------------------------------------------------------------------ op suite

def _away_from_zero(rng, shape, margin=0.05):
    u = rng.uniform(-1.0, 1.0, size=shape)
    return np.sign(u) * (margin + np.abs(u))


def _distinct(rng, shape):
    # values separated by >= 0.01 so max-pool argmaxes never tie under a 1e-4 nudge
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * 0.01 - n * 0.005).reshape(shape)


def op_checks(seed: int = 0) -> list[tuple[str, Callable, dict]]:
    """(name, fn, inputs) for every differentiable op."""
    r = substream(seed, "gradcheck-inputs")
    g = r.standard_normal
    mask_seed = int(r.integers(1 << 31))
    bn_stats = (np.zeros(4), np.ones(4))

    def bn(training):
        def f(t):
            # fresh running buffers per call so repeated evaluations agree
            rm, rv = bn_stats[0].copy() + 0.1, bn_stats[1].copy() * 1.5
            return ops.batchnorm1d(t["x"], t["gamma"], t["beta"], rm, rv, training)
        return f

    targets_soft = (r.uniform(size=(4, 5)) > 0.5).astype(np.float64)
    targets_soft[:, 0] = 1.0
    targets_multi = (r.uniform(size=(4, 5)) > 0.5).astype(np.float64)
    return [
        ("add", lambda t: ops.add(t["a"], t["b"]), {"a": g((4, 6)), "b": g((6,))}),
        ("mul", lambda t: ops.mul(t["a"], t["b"]), {"a": g((4, 6)), "b": g((4, 1))}),
        ("neg", lambda t: ops.neg(t["a"]), {"a": g((5, 5))}),
        ("power", lambda t: ops.power(t["a"], 3.0), {"a": g((5, 5))}),
        ("relu", lambda t: ops.relu(t["a"]), {"a": _away_from_zero(r, (5, 6))}),
        ("sum", lambda t: ops.sum(t["a"], axis=1), {"a": g((4, 3, 5))}),
        ("mean", lambda t: ops.mean(t["a"], axis=(0, 2)), {"a": g((4, 3, 5))}),
        ("reshape", lambda t: ops.reshape(t["a"], (6, 5)), {"a": g((3, 10))}),
        ("index", lambda t: ops.index(t["a"], (slice(None), [0, 2, 2])), {"a": g((5, 4))}),
        ("conv1d", lambda t: ops.conv1d(t["x"], t["w"], t["b"], stride=2, padding=1),
         {"x": g((2, 3, 11)), "w": g((4, 3, 3)), "b": g((4,))}),
        ("conv1d_1x1", lambda t: ops.conv1d(t["x"], t["w"], t["b"]),
         {"x": g((2, 5, 7)), "w": g((3, 5, 1)), "b": g((3,))}),
        ("batchnorm1d_train", bn(True), {"x": g((3, 4, 6)), "gamma": g((4,)), "beta": g((4,))}),
        ("batchnorm1d_eval", bn(False), {"x": g((3, 4, 6)), "gamma": g((4,)), "beta": g((4,))}),
        ("maxpool1d", lambda t: ops.maxpool1d(t["x"], 3, 2, 1), {"x": _distinct(r, (2, 3, 10))}),
        ("global_avg_pool", lambda t: ops.global_avg_pool(t["x"]), {"x": g((3, 4, 7))}),
        ("dense", lambda t: ops.dense(t["x"], t["w"], t["b"]),
         {"x": g((4, 6)), "w": g((3, 6)), "b": g((3,))}),
        ("concat", lambda t: ops.concat([t["a"], t["b"]], axis=1),
         {"a": g((3, 4)), "b": g((3, 5))}),
        ("spatial_dropout",
         lambda t: ops.spatial_dropout(t["x"], 0.4, True, np.random.default_rng(mask_seed)),
         {"x": g((3, 5, 4))}),
        ("head_loss_softmax", lambda t: ops.head_loss(t["z"], targets_soft, "softmax_ce"),
         {"z": g((4, 5))}),
        ("head_loss_sigmoid", lambda t: ops.head_loss(t["z"], targets_multi, "sigmoid_bce"),
         {"z": g((4, 5))}),
    ]


def tiny_model_config() -> ModelConfig:
    """12 leads, channels 8/16, two blocks (one per stage), four taps."""
    return ModelConfig(in_leads=12, num_classes=3, stem_channels=8, stem_kernel=7,
                       stage_channels=(8, 16), blocks_per_stage=(1, 1),
                       tap_projection_channels=4, dtype="float64")


def model_check(seed: int = 0, samples: int = 40, length: int = 64) -> CheckResult:
    """Full multi-scale forward in train mode (batch statistics, pinned
    dropout) through the loss, against sampled parameters of every kind."""
    cfg = tiny_model_config()
    model = build_model(cfg, seed=seed)
    r = substream(seed, "gradcheck-model")
    x = r.standard_normal((3, cfg.in_leads, length))
    y = (r.uniform(size=(3, cfg.num_classes)) > 0.5).astype(np.float64)
    names = model.params.names()
    buffers = {k: v.copy() for k, v in model.params.buffers.items()}
    original = {n: model.params[n].data for n in names}

    # perturbing the data of the model's own tensors would leave the tape
    # pointing at them; swap in the caller's tensors instead
    def swapped(t):
        saved = {n: model.params.params[n] for n in names}
        try:
            for n in names:
                model.params.params[n] = t[n]
            for k, v in buffers.items():
                model.params.buffers[k][...] = v
            logits = model.forward(x, "train", dropout_key=0)
            return ops.head_loss(logits, y, cfg.loss_mode)
        finally:
            model.params.params.update(saved)

    result = check_gradients(swapped, dict(original), "model", seed, samples=samples)
    return CheckResult("model(tiny)", result.max_rel_error, result.checked)


def run_all(seed: int = 0, samples: int = SAMPLES) -> list[CheckResult]:
    results = [check_gradients(fn, inputs, name, seed, samples)
               for name, fn, inputs in op_checks(seed)]
    results.append(model_check(seed, samples=max(samples, 40)))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'checked':>7}  {'max_rel_error':>13}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.checked:>7}  {r.max_rel_error:>13.3e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
