"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Graph, Tensor


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(f, theta: Tensor, eps: float = 1e-5, tol: float = 1e-5,
               denom_floor: float = 1e-3) -> GradCheckReport:
    """Compare the tape gradient of scalar f(theta) against central differences.

    f is called once under a fresh graph for the analytic gradient, then
    2*theta.size times without a graph for the numeric one. Relative error
    uses max(|analytic|, |numeric|, denom_floor) as denominator so entries
    with near-zero gradient are judged on absolute error at the floor scale.
    """
    if not theta.requires_grad:
        raise ValueError("theta must require grad")
    theta.zero_grad()
    with Graph() as g:
        out = f(theta)
        g.backward(out)
    analytic = theta.grad.copy()

    flat = theta.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        fp = float(f(theta).data)
        flat[i] = keep - eps
        fm = float(f(theta).data)
        flat[i] = keep
        numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(theta.shape)

    abs_err = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), denom_floor)
    rel_err = abs_err / denom
    return GradCheckReport(float(abs_err.max()), float(rel_err.max()), tol)
