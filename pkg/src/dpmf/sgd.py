"""Cache-efficient non-private SGD over tiered, user-blocked data.

One epoch streams every block once; within a block ratings are visited
tier-by-tier (hot items first) across the block's users so hot item rows are
reused by adjacent updates. The learning rate decays per epoch as
eta_t = eta0 / t^gamma.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import backends
from .data import BlockedDataset, UserBlock
from .errors import DivergenceError
from .model import FactorModel, objective_blocked, rmse
from .pipeline import SnapshotWriter, for_each_block


@dataclass
class SgdConfig:
    eta0: float = 0.05
    gamma: float = 0.25
    lam: float = 0.005
    epochs: int = 15
    workers: int = 1
    prefetch_stride: int = 2
    snapshot_every_blocks: int = 0
    snapshot_path: str | None = None
    seed: int = 0
    backend: str | None = None

    def __post_init__(self):
        if self.eta0 <= 0 or self.gamma < 0 or self.epochs < 0 or self.workers < 1:
            raise ValueError("need eta0 > 0, gamma >= 0, epochs >= 0, workers >= 1")


@dataclass
class EpochStats:
    epoch: int
    seconds: float
    objective: float
    rmse: float
    throughput: float


def learning_rate(eta0: float, gamma: float, t: int) -> float:
    """Per-round schedule eta_t = eta0 / t^gamma (t is 1-based)."""
    return eta0 / t**gamma


def tiered_update_order(block: UserBlock, bounds) -> np.ndarray:
    """Visit order for a block: tier-major, then user, then ascending item.

    The result is a permutation of the block's triple indices, so every
    rating is scheduled exactly once.
    """
    tiers = np.searchsorted(np.asarray(bounds), block.items, side="right")
    return np.lexsort((block.items, block.user_rank(), tiers)).astype(np.int64)


def sgd_step(m: FactorModel, user: int, item: int, rating: float,
             eta: float, lam: float) -> None:
    """One in-place update of (u_i, v_j) and, when enabled, the biases.

    The residual is computed once from pre-update values; both factor rows
    are then updated simultaneously from those old values.
    """
    u = m.U[user]
    v = m.V[item]
    e = float(rating) - float(u @ v)
    if m.bias:
        e -= m.b_u[user] + m.b_m[item] + m.b_0[0]
    if not math.isfinite(e):
        raise DivergenceError(f"non-finite residual at user {user}, item {item}")
    g = 1.0 - eta * lam
    he = eta * e
    un = g * u + he * v
    m.V[item] = g * v + he * u
    m.U[user] = un
    if m.bias:
        m.b_u[user] = g * m.b_u[user] + he
        m.b_m[item] = g * m.b_m[item] + he
        m.b_0[0] += he


class _Count:
    def __init__(self):
        self.total = 0
        self._lock = threading.Lock()

    def add(self, n: int) -> None:
        with self._lock:
            self.total += n


def train(model: FactorModel, blocked: BlockedDataset, cfg: SgdConfig,
          valid=None, weights: np.ndarray | None = None) -> list[EpochStats]:
    """Train in place; returns per-epoch stats (objective, validation RMSE)."""
    kern = backends.get(cfg.backend)
    snap = SnapshotWriter(model, cfg.snapshot_path, cfg.snapshot_every_blocks)
    stats: list[EpochStats] = []
    try:
        for t in range(1, cfg.epochs + 1):
            eta = learning_rate(cfg.eta0, cfg.gamma, t)
            count = _Count()

            def handle(block: UserBlock, _wid: int, eta=eta, t=t):
                order = tiered_update_order(block, blocked.bounds)
                bad = kern.sgd_block(
                    model.U, model.V, model.b_u, model.b_m, model.b_0,
                    int(model.bias), block.users, block.items, block.ratings,
                    order, eta, cfg.lam, cfg.prefetch_stride,
                )
                if bad >= 0:
                    raise DivergenceError(
                        f"non-finite residual at user {block.users[bad]}, "
                        f"item {block.items[bad]} in epoch {t}"
                    )
                count.add(len(order))
                snap.block_done()

            t0 = time.perf_counter()
            for_each_block(blocked, cfg.workers, handle)
            secs = time.perf_counter() - t0
            if count.total != blocked.n_triples:
                raise RuntimeError(
                    f"epoch {t} processed {count.total} of {blocked.n_triples} ratings"
                )
            obj = objective_blocked(model, blocked, cfg.lam, weights)
            if not math.isfinite(obj):
                raise DivergenceError(f"objective diverged in epoch {t}: {obj}")
            vr = rmse(model, valid) if valid is not None else float("nan")
            stats.append(EpochStats(t, secs, obj, vr, count.total / max(secs, 1e-9)))
    finally:
        snap.close()
    return stats
