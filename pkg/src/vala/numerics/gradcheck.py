"""Central finite-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, record_kinks


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    checked: int
    skipped_kinks: int = 0
    tol: float = 1e-4
    worst: tuple | None = None

    @property
    def passed(self) -> bool:
        return bool(self.checked > 0 and self.max_rel_error < self.tol)

    def to_dict(self) -> dict:
        return {
            "op": self.name,
            "max_rel_error": float(self.max_rel_error),
            "checked": self.checked,
            "skipped_kinks": self.skipped_kinks,
            "passed": self.passed,
        }


@dataclass
class _Probe:
    tensor: Tensor
    indices: list[tuple] = field(default_factory=list)


def _values(out: Tensor) -> np.ndarray:
    return np.array(out.data, dtype=np.float64)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    name: str = "op",
    indices: Sequence[Sequence[tuple]] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``sum(fn(*inputs))`` with central differences.

    ``indices`` optionally restricts each input to a list of element indices
    (default: every element).  Perturbations whose two evaluations take
    different branches of a piecewise op (relu, max, h-swish) straddle a kink
    and are counted in ``skipped_kinks`` rather than compared.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    loss = out.sum() if out.size != 1 else out
    loss.backward()

    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    for k, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        sites = list(np.ndindex(*t.shape)) if indices is None else list(indices[k])
        for idx in sites:
            orig = t.data[idx]
            # divide by the step actually stored, not the nominal 2h
            xp, xm = orig + h, orig - h
            t.data[idx] = xp
            with record_kinks() as kp:
                fp = _values(fn(*inputs))
            t.data[idx] = xm
            with record_kinks() as km:
                fm = _values(fn(*inputs))
            t.data[idx] = orig
            if len(kp) != len(km) or any(not np.array_equal(a, b) for a, b in zip(kp, km)):
                skipped += 1
                continue
            # differencing outputs before summing keeps unaffected elements exactly zero
            numeric = float((fp - fm).sum()) / (xp - xm)
            err = relative_error(float(analytic[idx]), numeric)
            checked += 1
            if err > worst:
                worst, worst_at = err, (k, idx, float(analytic[idx]), numeric)
    return GradCheckReport(name, worst, checked, skipped, tol, worst_at)
