"""Finite-difference verification of analytic gradients.

Runs in 64-bit: callers build their model/params with dtype float64. Central
differences with step 1e-5 give ~1e-10 truncation error on smooth functions,
so a relative tolerance of 1e-4 leaves a wide margin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, NonFiniteError

FD_STEP = 1e-5


@dataclass
class GradCheckReport:
    passed: bool
    tol: float
    max_rel_err: float
    worst_param: str = ""
    worst_index: tuple = ()
    per_param: dict[str, float] = field(default_factory=dict)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] gradcheck: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tol:.1e}) at {self.worst_param}{list(self.worst_index)}")


# Below this gradient magnitude the comparison is effectively absolute:
# central-difference noise (~1e-10 on O(1) objectives) would otherwise
# dominate the relative error of near-zero gradient elements.
REL_FLOOR = 1e-3


def _rel_err(a: float, f: float) -> float:
    if a == f:
        return 0.0
    return abs(a - f) / max(abs(a), abs(f), REL_FLOOR)


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor], tol: float = 1e-4,
               max_elems_per_param: int | None = None, step: float = FD_STEP) -> GradCheckReport:
    """Compare analytic gradients of the scalar f() against central finite
    differences, element by element.

    `f` must be a pure function of the current values in `params`. When
    max_elems_per_param is set, only an evenly strided subset of each
    parameter's elements is perturbed (gradients are still checked per
    tensor, just not exhaustively).
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 params; '{name}' is {p.data.dtype}")
        p.zero_grad()

    loss = f()
    if not np.isfinite(loss.data):
        raise NonFiniteError("objective is non-finite at the evaluation point")
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    report = GradCheckReport(passed=True, tol=tol, max_rel_err=0.0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_elems_per_param is not None and n > max_elems_per_param:
            idxs = np.linspace(0, n - 1, max_elems_per_param).astype(np.int64)
        else:
            idxs = np.arange(n)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f().data)
            flat[i] = orig - step
            f_minus = float(f().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            err = _rel_err(float(a_flat[i]), fd)
            if err > worst:
                worst = err
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst_param = name
                report.worst_index = tuple(int(k) for k in np.unravel_index(int(i), p.data.shape))
        report.per_param[name] = worst
        p.zero_grad()
    report.passed = report.max_rel_err <= tol
    return report
