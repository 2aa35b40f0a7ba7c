"""Box-constrained minimisation by projected gradient with backtracking.

Used both for the shooting-based nominal optimisation and for the convex
quadratic programs of the learning controller. Step lengths follow the
Barzilai-Borwein rule and are accepted by an Armijo test on the projected arc,
so the objective sequence is non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import OptimizerError


@dataclass
class PgResult:
    x: np.ndarray
    fun: float
    n_iter: int
    converged: bool
    grad_norm: float
    reason: str
    history: list[float] = field(default_factory=list)


def project_box(x, lower, upper) -> np.ndarray:
    return np.minimum(np.maximum(x, lower), upper)


def projected_gradient_norm(x, g, lower, upper) -> float:
    """Norm of ``x - P(x - g)``, zero exactly at a KKT point of the box problem."""
    return float(np.linalg.norm(x - project_box(x - g, lower, upper)))


def projected_gradient(
    fun: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    x0,
    lower,
    upper,
    *,
    tol: float = 1e-8,
    max_iters: int = 1000,
    step0: float = 1.0,
    stall_tol: float | None = None,
    stall_iters: int = 10,
    hessp: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    armijo: float = 1e-4,
    raise_on_fail: bool = False,
) -> PgResult:
    """Minimise ``fun`` over the box ``[lower, upper]``.

    Parameters
    ----------
    tol : float
        Stop when the projected gradient norm drops below this value.
    stall_tol, stall_iters : float, int
        Optional stop when the objective decreased by less than ``stall_tol``
        over the last ``stall_iters`` iterations.
    hessp : callable, optional
        Hessian-vector product ``hessp(x, d)``. When given the objective is
        treated as quadratic and the Armijo decrease is evaluated from the
        model ``g.d + d.H.d / 2``, which avoids cancellation near the optimum.
    raise_on_fail : bool
        Raise :class:`OptimizerError` if ``max_iters`` is reached without
        meeting ``tol``.
    """
    lower = np.broadcast_to(np.asarray(lower, dtype=float), np.shape(x0))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), np.shape(x0))
    x = project_box(np.array(x0, dtype=float), lower, upper)
    f = float(fun(x))
    if not np.isfinite(f):
        raise OptimizerError(f"objective is not finite at the initial point: {f}", iterate=x)
    g = np.asarray(grad(x), dtype=float)
    history = [f]
    alpha = step0
    reason = "max_iters"
    converged = False
    pgn = projected_gradient_norm(x, g, lower, upper)
    it = 0
    for it in range(1, max_iters + 1):
        if pgn < tol:
            converged, reason, it = True, "gradient", it - 1
            break
        if stall_tol is not None and len(history) > stall_iters:
            if history[-stall_iters - 1] - history[-1] < stall_tol:
                converged, reason, it = True, "stall", it - 1
                break
        accepted = False
        for _ in range(60):
            x_new = project_box(x - alpha * g, lower, upper)
            d = x_new - x
            if hessp is not None:
                decrease = float(g @ d + 0.5 * d @ hessp(x, d))
                f_new = f + decrease
            else:
                f_new = float(fun(x_new))
                decrease = f_new - f
            if not np.isfinite(f_new):
                raise OptimizerError(f"objective became non-finite at iteration {it}", iterate=x_new)
            if decrease <= armijo * float(g @ d):
                accepted = True
                break
            alpha *= 0.5
        if not accepted or not np.any(d):
            reason = "line_search"
            break
        if hessp is not None:
            f_new = float(fun(x_new))
        g_new = np.asarray(grad(x_new), dtype=float)
        s = d
        y = g_new - g
        sy = float(s @ y)
        alpha = float(s @ s) / sy if sy > 0 else 2.0 * alpha
        alpha = min(max(alpha, 1e-12), 1e12)
        x, f, g = x_new, f_new, g_new
        history.append(f)
        pgn = projected_gradient_norm(x, g, lower, upper)
    else:
        if pgn < tol:
            converged, reason = True, "gradient"
    if raise_on_fail and not converged:
        raise OptimizerError(
            f"projected gradient stopped ({reason}) after {it} iterations with gradient norm {pgn:.3e}",
            iterate=x, grad_norm=pgn)
    return PgResult(x, f, it, converged, pgn, reason, history)
