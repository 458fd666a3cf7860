"""Finite-difference verification of the analytic gradients.

The probe contracts the operator output with a fixed vector ``u`` so a single
vector-Jacobian product can be compared against central differences of the
scalar ``sum(u * op(x))``. Differences run in float64 regardless of the dtype
the training path uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ops import GradPair, NonDifferentiableError


@dataclass
class GradCheckReport:
    op_name: str
    status: str  # "pass" | "fail" | "skipped"
    max_rel_error: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.status in ("pass", "skipped")


def grad_check(
    op: Callable[..., GradPair],
    args: Sequence,
    wrt: int = 0,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    upstream: np.ndarray | None = None,
    name: str | None = None,
) -> GradCheckReport:
    """Compare the analytic gradient of ``args[wrt]`` against central differences.

    The worst deviation is reported relative to the largest finite-difference
    magnitude, so near-zero Jacobian entries do not drown the check in noise.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    op_name = name or getattr(op, "__name__", "op")
    work = [
        np.asarray(a, dtype=np.float64) if isinstance(a, np.ndarray) else a for a in args
    ]
    target = work[wrt]
    if not isinstance(target, np.ndarray):
        raise ValueError(f"argument {wrt} is not a tensor")

    try:
        pair = op(*work)
        if upstream is None:
            rng = np.random.default_rng(0)
            upstream = rng.standard_normal(pair.value.shape)
        analytic = np.asarray(pair.grad(np.asarray(upstream, dtype=np.float64))[wrt])
    except NonDifferentiableError as exc:
        return GradCheckReport(op_name, "skipped", float("nan"), str(exc))

    numeric = np.zeros_like(target)
    flat_t = target.reshape(-1)
    flat_n = numeric.reshape(-1)
    for i in range(flat_t.size):
        orig = flat_t[i]
        flat_t[i] = orig + epsilon
        hi = float((op(*work).value * upstream).sum())
        flat_t[i] = orig - epsilon
        lo = float((op(*work).value * upstream).sum())
        flat_t[i] = orig
        flat_n[i] = (hi - lo) / (2.0 * epsilon)

    scale = max(float(np.abs(numeric).max(initial=0.0)), 1e-12)
    err = float(np.abs(analytic - numeric).max(initial=0.0)) / scale
    status = "pass" if err < tolerance else "fail"
    detail = "" if status == "pass" else f"worst relative error {err:.3e} >= {tolerance:.1e}"
    return GradCheckReport(op_name, status, err, detail)
