"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_param: int = -1
    worst_coord: int = -1
    analytic: float = 0.0
    numeric: float = 0.0
    per_param: list = field(default_factory=list)

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_error:.3e} "
            f"(param {self.worst_param}, coord {self.worst_coord}, "
            f"analytic {self.analytic:.6e}, numeric {self.numeric:.6e})"
        )


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``f(params)`` against central differences.

    ``f`` must be a pure function of the param values: it is re-evaluated
    2*n times with coordinates nudged by +-h.  Relative error per
    coordinate is |a - n| / max(|a|, |n|, floor); the report carries the
    worst offender.
    """
    params = list(params)
    with Tape() as tape:
        out = f(params)
    analytic = backward(tape, out, params)

    report = GradCheckReport(passed=True, max_rel_error=0.0)
    for pi, p in enumerate(params):
        flat = p.value.reshape(-1)
        a_flat = analytic[pi].reshape(-1)
        errs = np.zeros(flat.size)
        for ci in range(flat.size):
            orig = flat[ci]
            flat[ci] = orig + h
            f_plus = float(f(params).value)
            flat[ci] = orig - h
            f_minus = float(f(params).value)
            flat[ci] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(a_flat[ci])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            errs[ci] = rel
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst_param = pi
                report.worst_coord = ci
                report.analytic = a
                report.numeric = numeric
        report.per_param.append(float(errs.max()) if errs.size else 0.0)
    report.passed = report.max_rel_error < tol
    return report
