"""Finite-difference check of every differentiable primitive and the assembled model."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses
from . import model as model_mod
from .numerics import functional as F
from .numerics import tensor as T
from .numerics.gradcheck import GradCheckReport, grad_check
from .numerics.tensor import Tensor

GRAD_TOL = 1e-4
GRAD_H = 1e-5


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape))


def _away_from(rng, shape, points, margin=1e-3, scale=2.0) -> Tensor:
    """Normal draws nudged at least ``margin`` away from each kink point."""
    x = rng.normal(0.0, scale, size=shape)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin) * 2
    return Tensor(x)


def _bn_train(x, g, b):
    st = F.RunningStats(x.shape[1])
    return F.batch_norm(x, g, b, st, "train", update_stats=False)


def _case(rng, fn, inputs):
    """Project ``fn``'s output onto a fixed random tensor so every output element matters."""
    with T.no_grad():
        shape = fn(*inputs).shape
    w = Tensor(rng.normal(size=shape))
    return (lambda *a: fn(*a) * w), inputs


# name -> builder(rng) -> (fn, inputs); every function reaches its primitive
# through the module attribute so a patched primitive is what gets checked
PRIMITIVES: dict[str, Callable] = {
    "add": lambda r: _case(r, lambda a, b: T.add(a, b), [_t(r, 2, 3, 4), _t(r, 3, 1)]),
    "mul": lambda r: _case(r, lambda a, b: T.mul(a, b), [_t(r, 2, 3, 4), _t(r, 1, 4)]),
    "div_scalar": lambda r: _case(r, lambda a: a / 3.0, [_t(r, 3, 4)]),
    "reduce_sum": lambda r: _case(r, lambda a: T.reduce_sum(a, axis=1), [_t(r, 2, 3, 4)]),
    "mean": lambda r: _case(r, lambda a: a.mean(axis=(2, 3)), [_t(r, 2, 3, 4, 5)]),
    "reshape": lambda r: _case(r, lambda a: T.reshape(a, (4, 6)), [_t(r, 2, 3, 4)]),
    "transpose": lambda r: _case(r, lambda a: T.transpose(a, (2, 0, 1)), [_t(r, 2, 3, 4)]),
    "conv2d": lambda r: _case(
        r, lambda x, w, b: F.conv2d(x, w, b, stride=2, padding=1), [_t(r, 2, 3, 6, 5), _t(r, 4, 3, 3, 3, scale=0.5), _t(r, 4)]
    ),
    "conv2d_1x1": lambda r: _case(r, lambda x, w, b: F.conv2d(x, w, b), [_t(r, 2, 3, 3, 4), _t(r, 5, 3, 1, 1), _t(r, 5)]),
    "linear": lambda r: _case(r, lambda x, w, b: F.linear(x, w, b), [_t(r, 3, 5), _t(r, 4, 5), _t(r, 4)]),
    "directional_pool_max_width": lambda r: _case(r, lambda x: F.directional_pool(x, "width", "max"), [_t(r, 2, 3, 4, 5)]),
    "directional_pool_avg_height": lambda r: _case(r, lambda x: F.directional_pool(x, "height", "avg"), [_t(r, 2, 3, 4, 5)]),
    "global_avg_pool": lambda r: _case(r, lambda x: F.global_avg_pool(x), [_t(r, 2, 3, 4, 5)]),
    "avg_pool2d": lambda r: _case(r, lambda x: F.avg_pool2d(x, 2), [_t(r, 2, 3, 4, 5)]),
    "sigmoid": lambda r: _case(r, lambda x: F.sigmoid(x), [_t(r, 3, 4, scale=3.0)]),
    "relu": lambda r: _case(r, lambda x: F.relu(x), [_away_from(r, (3, 4), [0.0])]),
    "h_swish": lambda r: _case(r, lambda x: F.h_swish(x), [_away_from(r, (4, 5), [-3.0, 3.0], scale=3.0)]),
    "softmax": lambda r: _case(r, lambda x: F.softmax(x, axis=-1), [_t(r, 3, 4)]),
    "log_softmax": lambda r: _case(r, lambda x: F.log_softmax(x, axis=-1), [_t(r, 3, 4)]),
    "clamped_log": lambda r: _case(r, lambda x: F.clamped_log(x), [Tensor(r.uniform(0.1, 2.0, size=(3, 4)))]),
    "batch_norm_2d": lambda r: _case(r, _bn_train, [_t(r, 5, 3), _t(r, 3), _t(r, 3)]),
    "batch_norm_4d": lambda r: _case(r, _bn_train, [_t(r, 2, 3, 2, 3), _t(r, 3), _t(r, 3)]),
    "concat": lambda r: _case(r, lambda a, b: F.concat([a, b], axis=1), [_t(r, 2, 2), _t(r, 2, 3)]),
    "split": lambda r: _case(r, lambda a: F.concat(F.split(a, [1, 3], axis=1)[::-1], axis=1), [_t(r, 2, 4)]),
    "take": lambda r: _case(r, lambda a: F.take(a, (slice(None), slice(0, 3))), [_t(r, 2, 4)]),
    "concat_hw": lambda r: _case(r, lambda hb, wb: F.concat_hw(hb, wb), [_t(r, 2, 3, 4, 1), _t(r, 2, 3, 1, 3)]),
    "split_hw": lambda r: _case(r, lambda j: T.mul(*F.split_hw(j, 4, 3)), [_t(r, 2, 3, 7, 1)]),
    "view_loss": lambda r: _view_loss_case(r, 4),
    "view_loss_3": lambda r: _view_loss_case(r, 3),
    "attr_loss": lambda r: _attr_loss_case(r),
}


def _view_loss_case(rng, num_views):
    labels = rng.integers(0, 4, size=6)
    labels[0] = 0  # keep at least one sample when right views are excluded
    return (lambda z: losses.view_loss(z, labels, num_views=num_views)), [_t(rng, 6, 4)]


def _attr_loss_case(rng):
    labels = rng.integers(0, 2, size=(5, 3))
    rates = rng.uniform(0.05, 0.95, size=3)
    return (lambda z: losses.attr_loss(z, labels, rates)), [_t(rng, 5, 3, scale=2.0)]


# ---------------------------------------------------------------------------
# assembled model
# ---------------------------------------------------------------------------

GRADCHECK_BACKBONE = model_mod.BackboneConfig(input_shape=(3, 16, 12), channels=(8, 8, 8), strides=(2, 1, 1), blocks=(1, 1, 1))


def gradcheck_model_config(**overrides) -> model_mod.ModelConfig:
    base = dict(backbone=GRADCHECK_BACKBONE, num_attrs=3, view_channels=4, view_hidden=4)
    return model_mod.ModelConfig(**{**base, **overrides})


def randomize_zero_layers(model: model_mod.VALAModel, rng) -> None:
    """Give the zero-initialised heads random weights so every path carries gradient."""
    for name, p in model.params.items():
        if not np.any(p.data) and not name.endswith(".beta"):
            # scaled by fan-in so wide heads stay out of sigmoid saturation
            fan_in = int(np.prod(p.shape[1:])) if p.data.ndim > 1 else 1
            p.data = rng.normal(0.0, 0.5 / np.sqrt(max(fan_in / 8, 1)), size=p.shape)


def invariant_params(cfg: model_mod.ModelConfig) -> set[str]:
    """Parameters the train-mode objective is exactly invariant to.

    Without the sigmoid attention the lift bias shifts every sample's pooled
    logit equally and the fusion batch norm removes it, so its gradient is an
    exact zero that finite differences can only resolve to rounding noise.
    """
    return {"head.f3.bias"} if cfg.attention == "none" else set()


def model_case(seed: int, config: model_mod.ModelConfig | None = None, coords_per_tensor: int = 2):
    """(fn, inputs, indices) checking the full objective w.r.t. a rotating subset of parameters."""
    rng = np.random.default_rng([seed, 7])
    cfg = config or gradcheck_model_config()
    m = model_mod.VALAModel(cfg, seed=seed)
    randomize_zero_layers(m, rng)
    n = 4
    x = rng.normal(size=(n, *cfg.backbone.input_shape))
    attrs = rng.integers(0, 2, size=(n, cfg.num_attrs))
    views = rng.integers(0, 4, size=n)
    rates = rng.uniform(0.1, 0.9, size=cfg.num_attrs)
    names = sorted(set(m.parameters()) - invariant_params(cfg))
    # rotate through parameter tensors so 100 seeds cover every tensor several times
    pick = [names[(seed * 5 + j) % len(names)] for j in range(5)]
    pick = list(dict.fromkeys(pick + ["head.f3.weight" if "head.f3.weight" in names else names[0]]))
    tensors = [m.parameters()[k] for k in pick]
    indices = []
    for t in tensors:
        flat = rng.choice(t.size, size=min(coords_per_tensor, t.size), replace=False)
        indices.append([np.unravel_index(int(i), t.shape) for i in flat])

    def fn(*_):
        out = m.forward(Tensor(x), mode="train", update_stats=False)
        total = losses.attr_loss(out.attr_logits, attrs, rates)
        if out.view_logits is not None:
            total = total + losses.view_loss(out.view_logits, views, cfg.num_views)
        return total

    return fn, tensors, indices, pick


@dataclass
class SuiteResult:
    reports: list[GradCheckReport] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    def failing(self) -> list[GradCheckReport]:
        return [r for r in self.reports if not r.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tol": GRAD_TOL,
            "seconds": round(self.seconds, 3),
            "ops": [r.to_dict() for r in self.reports],
            "failing": [r.name for r in self.failing()],
        }


def _merge(name: str, parts: list[GradCheckReport]) -> GradCheckReport:
    worst = max(parts, key=lambda r: r.max_rel_error)
    return GradCheckReport(
        name,
        max(r.max_rel_error for r in parts),
        sum(r.checked for r in parts),
        sum(r.skipped_kinks for r in parts),
        GRAD_TOL,
        worst.worst,
    )


MODEL_VARIANTS = ("vala", "baseline", "vf_3vp", "vf_4vp_rah", "vf_4vp_raw", "vfb_vpb_ra", "vf_4vp_rab")


def run_suite(
    seeds: range | list[int] = range(100),
    ops: list[str] | None = None,
    model_seeds: int | None = None,
    desk_seeds: int | None = None,
) -> SuiteResult:
    """Per-op reports aggregated over seeds (max error, summed counts).

    Every primitive runs once per seed.  The assembled model runs the full
    VALA configuration for every seed plus each ablation wiring on a
    rotating subset of seeds, first on a reduced backbone and then at the
    default (desk) shapes with one coordinate per parameter tensor.
    """
    t0 = time.perf_counter()
    seeds = list(seeds)
    ops = list(PRIMITIVES) if ops is None else ops
    reports = []
    for op in ops:
        parts = []
        for s in seeds:
            rng = np.random.default_rng([s, 11])
            fn, inputs = PRIMITIVES[op](rng)
            parts.append(grad_check(fn, inputs, h=GRAD_H, tol=GRAD_TOL, name=op))
        reports.append(_merge(op, parts))
    model_seeds = len(seeds) if model_seeds is None else model_seeds
    if model_seeds:
        per_variant: dict[str, list[GradCheckReport]] = {v: [] for v in MODEL_VARIANTS}
        for i, s in enumerate(seeds[:model_seeds]):
            variants = ["vala"]
            extra = MODEL_VARIANTS[1 + i % (len(MODEL_VARIANTS) - 1)]
            variants.append(extra)
            for v in variants:
                cfg = model_mod.variant_config(v, gradcheck_model_config())
                fn, tensors, idx, _ = model_case(s, cfg)
                per_variant[v].append(grad_check(fn, tensors, h=GRAD_H, tol=GRAD_TOL, name=f"model:{v}", indices=idx))
        reports += [_merge(f"model:{v}", parts) for v, parts in per_variant.items() if parts]
    desk_seeds = len(seeds) if desk_seeds is None else desk_seeds
    if desk_seeds:
        cfg = model_mod.variant_config("vala", model_mod.ModelConfig())
        parts = []
        for s in seeds[:desk_seeds]:
            fn, tensors, idx, _ = model_case(s, cfg, coords_per_tensor=1)
            parts.append(grad_check(fn, tensors, h=GRAD_H, tol=GRAD_TOL, name="model:vala_desk", indices=idx))
        reports.append(_merge("model:vala_desk", parts))
    return SuiteResult(reports, time.perf_counter() - t0)
