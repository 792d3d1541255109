"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Parameter, Tensor, backward, no_grad


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    max_abs_error: float
    grad_scale: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    results: list[ParamCheck] = field(default_factory=list)
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and all(r.passed for r in self.results)

    @property
    def failing(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    @property
    def worst(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    def lines(self) -> list[str]:
        if self.error:
            return [f"ERROR {self.error}"]
        return [
            f"{'ok  ' if r.passed else 'FAIL'} {r.name:40s} rel={r.max_rel_error:.3e} abs={r.max_abs_error:.3e}"
            for r in self.results
        ]


def analytic_grads(loss_fn: Callable[[], Tensor], params: Mapping[str, Parameter]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    return {k: p.grad.copy() for k, p in params.items()}


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Parameter],
    tolerance: float = 1e-5,
    h: float = 1e-5,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare analytic and central-difference gradients for every parameter.

    The relative error of a parameter is the largest elementwise deviation
    divided by the largest gradient magnitude of that parameter (the
    infinity norm of either gradient). Pass ``analytic`` to check
    externally supplied gradients instead of running backward.
    """
    report = GradCheckReport(tolerance=tolerance)
    for p in params.values():
        if p.dtype != np.float64:
            report.error = "gradient checking requires float64 parameters"
            return report

    with no_grad():
        base = float(loss_fn().item())
    if not math.isfinite(base):
        report.error = f"non-finite loss {base}"
        return report

    grads = dict(analytic) if analytic is not None else analytic_grads(loss_fn, params)

    for name, p in params.items():
        a = np.asarray(grads[name], dtype=np.float64)
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        with no_grad():
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = loss_fn().item()
                flat[k] = orig - h
                down = loss_fn().item()
                flat[k] = orig
                nflat[k] = (up - down) / (2 * h)
        if not np.all(np.isfinite(num)):
            report.error = f"non-finite numerical gradient for {name}"
            return report
        diff = np.abs(a - num)
        scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(num), initial=0.0)))
        max_abs = float(np.max(diff, initial=0.0))
        rel = max_abs / scale if scale > 0 else max_abs
        report.results.append(ParamCheck(name, rel, max_abs, scale, rel <= tolerance))
    return report
