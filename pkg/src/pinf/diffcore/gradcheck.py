"""Central finite-difference gradient checking harness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    ok: bool
    worst_rel: float
    worst_abs: float
    detail: str = ""


def numeric_gradient(fn, t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar fn() with respect to t's entries.

    fn must rebuild its graph from the current tensor data on every call.
    """
    grad = np.zeros(t.data.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn().item()
        flat[i] = orig - h
        f_minus = fn().item()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def check_gradients(
    fn,
    tensors: list[Tensor],
    h: float = 1e-5,
    rtol: float = 1e-6,
    atol: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients of fn() against central finite differences.

    Components where both gradients have magnitude below `atol` are compared
    absolutely (against atol); everything else relatively (against rtol).
    """
    table = backward(fn())
    worst_rel = 0.0
    worst_abs = 0.0
    detail = ""
    for t in tensors:
        analytic = table.get(t)
        if analytic is None:
            analytic = np.zeros(t.data.shape, dtype=np.float64)
        analytic = np.broadcast_to(analytic, t.data.shape)
        numeric = numeric_gradient(fn, t, h=h)
        denom = np.maximum(np.abs(analytic), np.abs(numeric))
        small = denom < atol
        diff = np.abs(analytic - numeric)
        if small.any():
            worst_abs = max(worst_abs, float(diff[small].max()))
        if (~small).any():
            rel = diff[~small] / denom[~small]
            m = float(rel.max())
            if m > worst_rel:
                worst_rel = m
                detail = f"worst rel {m:.3e} on tensor shape {t.shape}"
    ok = worst_rel <= rtol and worst_abs <= atol
    return GradCheckReport(ok=ok, worst_rel=worst_rel, worst_abs=worst_abs, detail=detail)
