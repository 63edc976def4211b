"""Independent reference implementations used as test oracles.

These deliberately re-derive results through a different path than the
library (dense eager noise, explicit matrix inverses, step-by-step replay)
so agreement is meaningful.
"""

from __future__ import annotations

import numpy as np

from dpmf.sgd import learning_rate, tiered_update_order


class DyadicStub:
    """Deterministic noise indexed by (kind, row, step, coord).

    Values are exact dyadic rationals (multiples of scale/16 for a
    power-of-two scale) with magnitude < 1, so any partial sum of up to
    ~2^45 of them is exact in float64 and addition order cannot change the
    result. ``step``/``interval`` implement the production noise source
    protocol (ignoring the variance argument).
    """

    def __init__(self, scale: float = 1.0):
        self.scale = scale  # must be a power of two to preserve exactness

    def per_step(self, kind: int, row: int, step: int, k: int) -> np.ndarray:
        d = np.arange(k)
        raw = (((11 * kind + 7 * row + 13 * step + 17 * d) % 31) - 15) / 16.0
        return raw * self.scale

    def step(self, kind, row, k, var, step):
        return self.per_step(kind, row, step, k)

    def interval(self, kind, row, k, var, a, b):
        total = np.zeros(k)
        for s in range(a + 1, b + 1):
            total += self.per_step(kind, row, s, k)
        return total


class RecordingNoise:
    """Zero noise that records every (kind, row, var, interval) request."""

    def __init__(self):
        self.calls = []

    def step(self, kind, row, k, var, step):
        self.calls.append(("step", kind, row, var, step))
        return np.zeros(k)

    def interval(self, kind, row, k, var, a, b):
        self.calls.append(("interval", kind, row, var, a, b))
        return np.zeros(k)


def eager_sgld(model, blocked, weights, hp_scaled, eta0, gamma, zeta, epochs,
               noise_per_step=None, rng=None):
    """Dense eager reference: every row receives its per-step noise at every
    step; the touched rows take the gradient first and their own noise after.

    ``noise_per_step(kind, row, step, k)`` supplies deterministic noise; when
    None, real N(0, zeta*eta_t) draws come from ``rng``.
    """
    U, V = model.U, model.V
    k = U.shape[1]
    N = blocked.n_triples
    cnt_u = np.zeros(U.shape[0])
    cnt_v = np.zeros(V.shape[0])
    for b in blocked.iter_blocks():
        np.add.at(cnt_u, b.users, 1.0)
        np.add.at(cnt_v, b.items, 1.0)

    step = 0
    for t in range(1, epochs + 1):
        eta = learning_rate(eta0, gamma, t)
        sd = np.sqrt(zeta * eta)
        for block in blocked.iter_blocks():
            order = tiered_update_order(block, blocked.bounds)
            rs = block.ratings.astype(np.float64)
            for idx in order:
                step += 1
                i = int(block.users[idx])
                j = int(block.items[idx])
                if noise_per_step is not None:
                    nu = np.stack([noise_per_step(0, r, step, k) for r in range(U.shape[0])])
                    nv = np.stack([noise_per_step(1, r, step, k) for r in range(V.shape[0])])
                else:
                    nu = sd * rng.standard_normal(U.shape)
                    nv = sd * rng.standard_normal(V.shape)
                # idle rows get their noise now; the touched rows after the
                # gradient, so the residual sees values through step-1 only.
                own_u, own_v = nu[i].copy(), nv[j].copy()
                nu[i] = 0.0
                nv[j] = 0.0
                U += nu
                V += nv
                u = U[i]
                v = V[j]
                e = rs[idx] - float(u @ v)
                c = N * weights[i] * hp_scaled.lambda_r * e
                gu = (N / cnt_u[i]) * hp_scaled.Lambda_u * u - c * v
                gv = (N / cnt_v[j]) * hp_scaled.Lambda_v * v - c * u
                U[i] = (u - eta * gu) + own_u
                V[j] = (v - eta * gv) + own_v
    return model


def ridge_fit_by_inverse(item_factors, items, ratings, lam):
    """Normal equations solved with an explicit matrix inverse."""
    k = item_factors.shape[1]
    Vs = item_factors[np.asarray(items, dtype=np.int64)]
    A = lam * np.eye(k) + Vs.T @ Vs
    b = Vs.T @ np.asarray(ratings, dtype=np.float64)
    return np.linalg.inv(A) @ b


def full_half_gradient(model, ds, weights, hp):
    """Analytic gradient of the half-objective
    (1/2) * [lambda_r * sum_ij w_i e_ij^2 + sum_i u' Lu u + sum_j v' Lv v],
    which is what the sparse per-triple estimate is unbiased for.
    """
    GU = model.U * hp.Lambda_u
    GV = model.V * hp.Lambda_v
    for u, i, r in zip(ds.users, ds.items, ds.ratings):
        e = float(r) - float(model.U[u] @ model.V[i])
        GU[u] -= weights[u] * hp.lambda_r * e * model.V[i]
        GV[i] -= weights[u] * hp.lambda_r * e * model.U[u]
    return GU, GV
