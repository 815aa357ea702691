"""Central finite-difference verification of autodiff gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError
from .tensor import Tensor, no_grad

__all__ = ["GradCheckReport", "check_gradients"]


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    per_input: list[float]


def check_gradients(fn, inputs: list[Tensor], tolerance: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of a scalar-valued fn against central differences.

    Every coordinate of every input is perturbed by h = 1e-5 * max(1, |x|).
    Errors are relative: |analytic - numeric| / max(1, |analytic|, |numeric|).
    A coordinate whose error exceeds the tolerance is re-measured with a 10x
    smaller step: stepping across a relu or max-pool kink poisons one step
    size but not the next, while a genuinely wrong gradient fails at both.
    Inputs must be float64 tensors with requires_grad set; fn must not keep
    state that changes its value between calls.
    """
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError("check_gradients expects Tensor inputs")
        if t.data.dtype != np.float64:
            raise ValueError("gradient checking requires float64 inputs")
        if not t.requires_grad:
            raise ValueError("all checked inputs must require grad")
        t.zero_grad()

    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("check_gradients needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("non-finite value from function under gradient check")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def central(t: Tensor, j: int, orig: float, h: float) -> float:
        with no_grad():
            t.data.flat[j] = orig + h
            f_plus = float(fn(*inputs).data)
            t.data.flat[j] = orig - h
            f_minus = float(fn(*inputs).data)
        t.data.flat[j] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteError("non-finite value during finite differencing")
        return (f_plus - f_minus) / (2.0 * h)

    per_input: list[float] = []
    for t, ana in zip(inputs, analytic):
        ana_flat = ana.ravel()
        worst = 0.0
        for j in range(t.data.size):
            orig = float(t.data.flat[j])
            h = 1e-5 * max(1.0, abs(orig))
            a = float(ana_flat[j])
            numeric = central(t, j, orig, h)
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel >= tolerance:
                numeric = central(t, j, orig, h / 10.0)
                rel = min(rel, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
            if rel > worst:
                worst = rel
        per_input.append(worst)

    overall = max(per_input) if per_input else 0.0
    return GradCheckReport(max_rel_error=overall, passed=overall < tolerance, per_input=per_input)
