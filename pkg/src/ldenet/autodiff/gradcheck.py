"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .rng import Rng
from .tensor import NonFiniteError, Tensor, backward, detect_anomaly, no_grad


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_samples: int | None = 16,
    seed: int = 0,
    reduce: str = "tensor",
) -> float:
    """Compare ``backward`` against central differences.

    ``f`` is re-evaluated with each sampled coordinate of each parameter
    shifted by ``+-eps``. With ``reduce="tensor"`` (default) the error of a
    parameter is ``||a - n|| / max(||a||, ||n||, 1e-8)`` over its sampled
    coordinates; with ``reduce="coordinate"`` it is the same ratio taken per
    coordinate. Returns the largest error over all parameters.
    ``max_samples=None`` checks every coordinate.

    Per-coordinate ratios are dominated by float64 round-off for coordinates
    whose gradient is below roughly ``ulp(f) / eps``.
    """
    if reduce not in ("tensor", "coordinate"):
        raise ValueError(f"reduce must be 'tensor' or 'coordinate', got {reduce!r}")
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, got {p.dtype} for shape {p.shape}")
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
        p.requires_grad = True

    with detect_anomaly():
        loss = f()
        if loss.data.size != 1:
            raise ValueError("grad_check: f must return a scalar")
        backward(loss)

    rng = Rng(seed, "grad_check")
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        n = p.data.size
        if max_samples is None or n <= max_samples:
            coords = np.arange(n)
        else:
            coords = rng.integers(0, n, (max_samples,))
        flat = p.data.reshape(-1)
        a_vec, n_vec = [], []
        for ci in coords:
            orig = flat[ci]
            with no_grad(), detect_anomaly():
                flat[ci] = orig + eps
                fp = _scalar(f())
                flat[ci] = orig - eps
                fm = _scalar(f())
            flat[ci] = orig
            a_vec.append(float(analytic.reshape(-1)[ci]))
            n_vec.append((fp - fm) / (2.0 * eps))
        if reduce == "coordinate":
            errs = [relative_error(a, n) for a, n in zip(a_vec, n_vec)]
            worst = max([worst] + errs)
        else:
            a_arr, n_arr = np.asarray(a_vec), np.asarray(n_vec)
            diff = float(np.linalg.norm(a_arr - n_arr))
            worst = max(worst, diff / max(float(np.linalg.norm(a_arr)), float(np.linalg.norm(n_arr)), 1e-8))
    return worst


def _scalar(t: Tensor) -> float:
    v = float(t.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise NonFiniteError(t.op, "non-finite loss during finite differencing")
    return v
