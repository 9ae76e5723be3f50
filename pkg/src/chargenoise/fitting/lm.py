"""Batched damped Gauss-Newton (Levenberg-Marquardt) least squares.

Many small, independent problems with the same model are solved in lockstep:
parameters are (B, P), data are (B, M). Every problem keeps its own damping
factor and stops on its own convergence test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

Model = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class LMResult:
    params: np.ndarray
    cost: np.ndarray
    initial_cost: np.ndarray
    n_iter: np.ndarray
    converged: np.ndarray
    jtj: np.ndarray
    n_points: int


def _take(a: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return a[idx] if a.ndim == 2 else a


def levenberg_marquardt(model: Model, jacobian: Model, x: np.ndarray, y: np.ndarray,
                        p0: np.ndarray, sigma: np.ndarray | None = None, scale: np.ndarray | None = None,
                        max_iter: int = 100, xtol: float = 1e-8, lam0: float = 1e-3) -> LMResult:
    """Minimise sum(((y - model(x, p)) / sigma)**2) for every row independently.

    ``x`` is (M,) shared by all rows or (B, M). ``scale`` (P,) or (B, P) sets the
    absolute size below which a parameter step counts as negligible; the test is
    ``|dp| < xtol * (|p| + scale)`` for every parameter.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    p = np.array(np.atleast_2d(p0), dtype=float)
    B, P = p.shape
    x = np.asarray(x, dtype=float)
    w = np.ones_like(y) if sigma is None else 1.0 / np.broadcast_to(sigma, y.shape)
    scale = np.zeros((B, P)) if scale is None else np.broadcast_to(np.abs(scale), (B, P))

    r = (y - model(x, p)) * w
    cost = np.einsum("bm,bm->b", r, r)
    initial_cost = cost.copy()
    lam = np.full(B, lam0)
    n_iter = np.zeros(B, dtype=np.int64)
    converged = np.zeros(B, dtype=bool)
    active = np.isfinite(cost)

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xs = _take(x, idx)
        J = jacobian(xs, p[idx]) * w[idx, :, None]
        jtj = np.einsum("bmp,bmq->bpq", J, J)
        grad = np.einsum("bmp,bm->bp", J, r[idx])
        diag = np.einsum("bpp->bp", jtj)
        diag = np.maximum(diag, 1e-12 * diag.max(axis=1, keepdims=True) + 1e-300)
        A = jtj + lam[idx, None, None] * (diag[:, :, None] * np.eye(P))
        try:
            step = np.linalg.solve(A, grad[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(a, g, rcond=None)[0] for a, g in zip(A, grad)])
        p_try = p[idx] + step
        r_try = (y[idx] - model(xs, p_try)) * w[idx]
        cost_try = np.einsum("bm,bm->b", r_try, r_try)
        better = np.isfinite(cost_try) & (cost_try < cost[idx])
        small = np.all(np.abs(step) < xtol * (np.abs(p[idx]) + scale[idx]), axis=1)

        good = idx[better]
        p[good] = p_try[better]
        r[good] = r_try[better]
        cost[good] = cost_try[better]
        lam[good] = np.maximum(lam[good] / 10, 1e-12)
        bad = idx[~better]
        lam[bad] = lam[bad] * 10
        n_iter[idx] += 1

        done = small | (lam[idx] > 1e16)
        converged[idx[small]] = True
        active[idx[done]] = False

    J = jacobian(x, p) * w[:, :, None]
    jtj = np.einsum("bmp,bmq->bpq", J, J)
    return LMResult(p, cost, initial_cost, n_iter, converged, jtj, y.shape[1])


def covariance(jtj: np.ndarray, scale: np.ndarray | float = 1.0) -> np.ndarray:
    """Inverse normal matrix times ``scale`` per problem; NaN where singular."""
    jtj = jtj[None] if jtj.ndim == 2 else jtj
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (jtj.shape[0],))
    try:
        c = np.linalg.inv(jtj)
    except np.linalg.LinAlgError:
        c = np.full(jtj.shape, np.nan)
        for b, m in enumerate(jtj):
            try:
                c[b] = np.linalg.inv(m)
            except np.linalg.LinAlgError:
                pass
    return 0.5 * (c + np.swapaxes(c, 1, 2)) * scale[:, None, None]
