"""Pure-Python (numpy) training kernels: the fallback backend.

Update semantics match the compiled kernels triple for triple; only the
float reduction order inside dot products may differ, so the two backends
agree to rounding rather than bitwise. Unlike the compiled kernels, the
noisy SGLD loop here takes ledger/noise *objects*, which is what lets tests
inject deterministic noise stubs.
"""

from __future__ import annotations

import math

import numpy as np

BACKEND_NAME = "python"


def sgd_block(U, V, b_u, b_m, b_0, bias, users, items, ratings, order,
              eta, lam, prefetch_stride=0) -> int:
    """Run plain SGD over one block's triples in the given order.

    Returns the index of the first triple with a non-finite residual, or -1.
    """
    g = 1.0 - eta * lam
    rs = ratings.astype(np.float64)
    bias = bool(bias)
    for idx in order:
        i = users[idx]
        j = items[idx]
        u = U[i]
        v = V[j]
        e = rs[idx] - float(u @ v)
        if bias:
            e -= b_u[i] + b_m[j] + b_0[0]
        if not math.isfinite(e):
            return int(idx)
        he = eta * e
        un = g * u + he * v
        V[j] = g * v + he * u
        U[i] = un
        if bias:
            b_u[i] = g * b_u[i] + he
            b_m[j] = g * b_m[j] + he
            b_0[0] += he
    return -1


def sgld_block(U, V, users, items, ratings, order, w_user, eta, lam_r,
               Lu, Lv, N, cnt_u, cnt_v, ledger, noise, zeta_eta_cur) -> int:
    """Noisy posterior-sampling pass over a block with lazy deferred noise.

    Each processed triple claims one tick of the global step clock; the two
    touched rows are first caught up through the previous step and then take
    the gradient step plus their own fresh noise for this step.
    """
    k = U.shape[1]
    last_u, last_v, clock = ledger.last_u, ledger.last_v, ledger.clock
    prefix = ledger.schedule.prefix
    rs = ratings.astype(np.float64)
    for idx in order:
        i = int(users[idx])
        j = int(items[idx])
        step = int(clock[0]) + 1
        clock[0] = step
        pm1 = prefix(step - 1)
        a = int(last_u[i])
        if a < step - 1:
            var = pm1 - prefix(a)
            if var > 0.0:
                U[i] += noise.interval(0, i, k, var, a, step - 1)
        last_u[i] = step
        a = int(last_v[j])
        if a < step - 1:
            var = pm1 - prefix(a)
            if var > 0.0:
                V[j] += noise.interval(1, j, k, var, a, step - 1)
        last_v[j] = step
        u = U[i]
        v = V[j]
        e = rs[idx] - float(u @ v)
        if not math.isfinite(e):
            return int(idx)
        c = N * w_user[i] * lam_r * e
        gu = (N / cnt_u[i]) * Lu * u - c * v
        gv = (N / cnt_v[j]) * Lv * v - c * u
        un = (u - eta * gu) + noise.step(0, i, k, zeta_eta_cur, step)
        vn = (v - eta * gv) + noise.step(1, j, k, zeta_eta_cur, step)
        U[i] = un
        V[j] = vn
    return -1


def catchup_all(U, V, ledger, target, noise) -> None:
    """Bring every row's deferred noise up to the target step."""
    k = U.shape[1]
    prefix = ledger.schedule.prefix
    pt = prefix(target)
    for i in range(U.shape[0]):
        a = int(ledger.last_u[i])
        if a < target:
            var = pt - prefix(a)
            if var > 0.0:
                U[i] += noise.interval(0, i, k, var, a, target)
            ledger.last_u[i] = target
    for j in range(V.shape[0]):
        a = int(ledger.last_v[j])
        if a < target:
            var = pt - prefix(a)
            if var > 0.0:
                V[j] += noise.interval(1, j, k, var, a, target)
            ledger.last_v[j] = target
