"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward


def numerical_grad(fn: Callable[[], float], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn`` wrt every entry of ``param`` (perturbed in place)."""
    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn()
        flat[i] = orig - step
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm error scaled by the larger gradient magnitude of the pair."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def check_gradients(
    build: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    names: Sequence[str] | None = None,
) -> dict[str, float]:
    """Compare autodiff and finite-difference gradients of the scalar ``build()``.

    Returns the relative error per parameter, keyed by name (or position).
    """
    for p in params:
        p.grad = None
    backward(build())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        return float(build().data)

    names = list(names) if names is not None else [str(i) for i in range(len(params))]
    report = {}
    for name, p, a in zip(names, params, analytic):
        report[name] = relative_error(a, numerical_grad(value, p, step))
    return report
