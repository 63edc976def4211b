"""Posterior sampling via noisy SGD with lazy deferred Gaussian noise.

The sampler targets P(U, V) proportional to exp(-s * F(U, V)) where
F = lambda_r * sum w_i e_ij^2 + sum_i u_i' diag(Lambda_u) u_i
  + sum_j v_j' diag(Lambda_v) v_j
and s = eps / 4B is folded into lambda_r and the Lambdas exactly once, in
``sample`` (HyperParams.scaled). Per-triple updates use the unbiased sparse
gradient estimate; every parameter row owes one N(0, zeta*eta_t) draw per
global step, and rows idle over (a, b] receive the aggregate draw
N(0, prefix(b) - prefix(a)) on their next touch (normals are closed under
addition).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import backends
from .data import BlockedDataset, UserBlock
from .errors import DivergenceError
from .model import FactorModel, HyperParams, objective_blocked, rmse
from .pipeline import SnapshotWriter, for_each_block
from .rng import substream, worker_states
from .sgd import learning_rate, tiered_update_order, _Count


@dataclass
class SgldConfig:
    """Sampler settings; table_size >= 10_000 is recommended (smaller pools
    measurably distort end-to-end accuracy)."""

    eta0: float = 2e-6
    gamma: float = 0.6
    zeta: float = 0.1
    epochs: int = 30
    workers: int = 1
    table_size: int = 100_000
    segment_len: int = 64
    alpha: float = 1.0
    beta: float = 100.0
    lam: float = 0.01
    lambda_r: float = 1.0
    fix_hyperparams: bool = False
    noise: str = "table"  # "table" | "exact"
    seed: int = 0
    prefetch_stride: int = 2
    snapshot_every_blocks: int = 0
    snapshot_path: str | None = None
    backend: str | None = None

    def __post_init__(self):
        if not (0.0 < self.zeta <= 1.0):
            raise ValueError("zeta must be in (0, 1]")
        if self.eta0 <= 0 or self.gamma < 0 or self.epochs < 0 or self.workers < 1:
            raise ValueError("need eta0 > 0, gamma >= 0, epochs >= 0, workers >= 1")
        if self.noise not in ("table", "exact"):
            raise ValueError("noise must be 'table' or 'exact'")


@dataclass
class TracePoint:
    epoch: int
    seconds: float
    objective: float
    rmse: float
    lambda_u_mean: float
    lambda_v_mean: float


class GaussianTable:
    """Precomputed pool of standard normals read in contiguous segments.

    The pool is drawn once from a real generator; reads start at a random
    offset, continue for ``segment_len`` values, and wrap around the end.
    """

    def __init__(self, size: int, rng: np.random.Generator | int = 0,
                 segment_len: int = 64):
        if size < 1:
            raise ValueError("table size must be >= 1")
        if segment_len < 1:
            raise ValueError("segment_len must be >= 1")
        if not isinstance(rng, np.random.Generator):
            rng = substream(int(rng), "table")
        self.pool = rng.standard_normal(int(size))
        self.segment_len = int(segment_len)
        self._rng = rng
        self._pos = 0
        self._left = 0

    @property
    def size(self) -> int:
        return len(self.pool)

    def take(self, n: int) -> np.ndarray:
        """Next n values under the segment-read policy."""
        out = np.empty(n)
        filled = 0
        size = len(self.pool)
        while filled < n:
            if self._left == 0:
                self._pos = int(self._rng.integers(size))
                self._left = self.segment_len
            run = min(n - filled, self._left, size - self._pos)
            out[filled:filled + run] = self.pool[self._pos:self._pos + run]
            filled += run
            self._pos += run
            if self._pos == size:
                self._pos = 0
            self._left -= run
        return out


class VarianceSchedule:
    """Prefix sums of per-step noise variance: prefix(t) = sum_{s<=t} zeta*eta_s.

    Steps are numbered 1..T with exactly steps_per_epoch per round, so the
    prefix is piecewise linear with one slope per round.
    """

    def __init__(self, steps_per_epoch: int):
        if steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        self.steps_per_epoch = int(steps_per_epoch)
        self.zeta_eta: list[float] = []
        self.var_base: list[float] = [0.0]

    @property
    def epochs(self) -> int:
        return len(self.zeta_eta)

    def push_epoch(self, zeta_eta: float) -> None:
        if zeta_eta < 0:
            raise ValueError("per-step variance must be >= 0")
        self.zeta_eta.append(float(zeta_eta))
        self.var_base.append(self.var_base[-1] + self.steps_per_epoch * float(zeta_eta))

    def prefix(self, step: int) -> float:
        if step <= 0:
            return 0.0
        e = (step - 1) // self.steps_per_epoch
        return self.var_base[e] + (step - e * self.steps_per_epoch) * self.zeta_eta[e]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.asarray(self.var_base, dtype=np.float64),
                np.asarray(self.zeta_eta, dtype=np.float64))


class NoiseLedger:
    """Per-row last-touched step counters plus the shared step clock."""

    def __init__(self, n_users: int, n_items: int, steps_per_epoch: int):
        self.last_u = np.zeros(n_users, dtype=np.int64)
        self.last_v = np.zeros(n_items, dtype=np.int64)
        self.clock = np.zeros(1, dtype=np.int64)
        self.schedule = VarianceSchedule(steps_per_epoch)


class TableNoise:
    """Production noise source: scaled segment reads from a GaussianTable."""

    def __init__(self, table: GaussianTable):
        self.table = table

    def step(self, kind: int, row: int, k: int, var: float, step: int) -> np.ndarray:
        if var <= 0.0:
            return np.zeros(k)
        return math.sqrt(var) * self.table.take(k)

    def interval(self, kind: int, row: int, k: int, var: float, a: int, b: int) -> np.ndarray:
        if var <= 0.0:
            return np.zeros(k)
        return math.sqrt(var) * self.table.take(k)


class ExactNoise:
    """Noise from a real normal generator (reference / comparison mode)."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def step(self, kind, row, k, var, step) -> np.ndarray:
        if var <= 0.0:
            return np.zeros(k)
        return math.sqrt(var) * self.rng.standard_normal(k)

    def interval(self, kind, row, k, var, a, b) -> np.ndarray:
        if var <= 0.0:
            return np.zeros(k)
        return math.sqrt(var) * self.rng.standard_normal(k)


def scaled_gradient(m: FactorModel, user: int, item: int, rating: float,
                    weight: float, hp: HyperParams, N: int, N_i: int, N_j: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Sparse unbiased gradient estimate for (u_i, v_j) from one triple.

    g_u = -N w lambda_r e v + (N / N_i) Lambda_u * u, and symmetrically for
    v. Averaged over a uniformly drawn triple this matches the full gradient
    of the (half-)objective; hp must already carry any global scaling.
    """
    if N_i <= 0 or N_j <= 0:
        raise ValueError("triple references a row with no ratings")
    u = m.U[user]
    v = m.V[item]
    e = float(rating) - float(u @ v)
    c = N * weight * hp.lambda_r * e
    gu = (N / N_i) * hp.Lambda_u * u - c * v
    gv = (N / N_j) * hp.Lambda_v * v - c * u
    return gu, gv


def sgld_step(m: FactorModel, user: int, item: int, rating: float,
              eta: float, zeta: float, weight: float, hp: HyperParams,
              N: int, N_i: int, N_j: int, noise, step: int) -> None:
    """One noisy update: (u, v) <- (u, v) - eta * g + N(0, zeta*eta I).

    Assumes both rows' deferred noise is already caught up through step-1.
    """
    gu, gv = scaled_gradient(m, user, item, rating, weight, hp, N, N_i, N_j)
    if not (np.isfinite(gu).all() and np.isfinite(gv).all()):
        raise DivergenceError(f"non-finite gradient at user {user}, item {item}")
    k = m.k
    ze = zeta * eta
    un = (m.U[user] - eta * gu) + noise.step(0, user, k, ze, step)
    vn = (m.V[item] - eta * gv) + noise.step(1, item, k, ze, step)
    m.U[user] = un
    m.V[item] = vn


def catch_up(m: FactorModel, kind: int, row: int, ledger: NoiseLedger,
             noise, target: int) -> None:
    """Inject the aggregate noise a row is owed for idle steps (last, target].

    One draw of variance prefix(target) - prefix(last); a no-op when the row
    is already current.
    """
    last_arr = ledger.last_u if kind == 0 else ledger.last_v
    a = int(last_arr[row])
    if target <= a:
        return
    var = ledger.schedule.prefix(target) - ledger.schedule.prefix(a)
    if var > 0.0:
        rows = m.U if kind == 0 else m.V
        rows[row] += noise.interval(kind, row, rows.shape[1], var, a, target)
    last_arr[row] = target


def gibbs_hyperparams(m: FactorModel, hp: HyperParams, alpha: float,
                      beta: float, rng: np.random.Generator) -> HyperParams:
    """Resample the diagonal precisions from their Gamma conditionals.

    Lambda_u[d] ~ Gamma(alpha + n_users/2, beta + sum_i U[i,d]^2 / 2), rate
    parameterization; likewise for Lambda_v. lambda_r stays fixed.
    """
    shape_u = alpha + m.n_users / 2.0
    shape_v = alpha + m.n_items / 2.0
    rate_u = beta + 0.5 * np.sum(m.U * m.U, axis=0)
    rate_v = beta + 0.5 * np.sum(m.V * m.V, axis=0)
    Lu = rng.gamma(shape_u, 1.0 / rate_u)
    Lv = rng.gamma(shape_v, 1.0 / rate_v)
    return HyperParams(hp.lambda_r, Lu, Lv, alpha=alpha, beta=beta)


def _row_counts(blocked: BlockedDataset) -> tuple[np.ndarray, np.ndarray]:
    cnt_u = np.zeros(blocked.n_users, dtype=np.float64)
    cnt_v = np.zeros(blocked.n_items, dtype=np.float64)
    for b in blocked.iter_blocks():
        np.add.at(cnt_u, b.users, 1.0)
        np.add.at(cnt_v, b.items, 1.0)
    return cnt_u, cnt_v


def sample(model: FactorModel, blocked: BlockedDataset, budget=None,
           cfg: SgldConfig = SgldConfig(), hp: HyperParams | None = None,
           valid=None, noise_override=None) -> list[TracePoint]:
    """Run the sampler in place; the model's final state is the sample.

    With a budget, per-user weights apply and the eps/4B factor is folded
    into the hyperparameters here (and nowhere else). Between epochs: a full
    catch-up sweep, then (unless fixed) a Gibbs step for the Lambdas. The
    returned trace is the burn-in record; the caller decides how many epochs
    are enough. ``noise_override`` (python backend only) replaces the noise
    source, which is how tests inject stubs.
    """
    if model.bias:
        raise ValueError("sampling runs bias-free; build the model with bias=False")
    scale = budget.scale if budget is not None else 1.0
    weights = (np.asarray(budget.weights, dtype=np.float64)
               if budget is not None else np.ones(blocked.n_users))
    if hp is None:
        hp = HyperParams.from_ridge(cfg.lam, model.k, cfg.alpha, cfg.beta, cfg.lambda_r)
    hp_s = hp.scaled(scale)

    N = blocked.n_triples
    if N == 0:
        return []
    cnt_u, cnt_v = _row_counts(blocked)
    ledger = NoiseLedger(model.n_users, model.n_items, steps_per_epoch=N)

    kern = backends.get(cfg.backend)
    compiled = kern.BACKEND_NAME == "compiled"
    if noise_override is not None and compiled:
        raise ValueError("noise_override requires the python backend")

    table = None
    if cfg.noise == "table":
        table = GaussianTable(cfg.table_size, substream(cfg.seed, "table"),
                              cfg.segment_len)
    if compiled:
        mode = 0 if cfg.noise == "table" else 1
        pool = table.pool if table is not None else np.zeros(1)
        states = worker_states(cfg.seed, "sgld-noise", cfg.workers)
        rng_state = np.zeros((cfg.workers, 3), dtype=np.uint64)
        rng_state[:, 0] = states
        bm_scratch = np.zeros((cfg.workers, 2))
        row_scratch = np.zeros((cfg.workers, model.k))
    else:
        if noise_override is not None:
            noise_src = noise_override
        elif cfg.noise == "table":
            noise_src = TableNoise(table)
        else:
            noise_src = ExactNoise(substream(cfg.seed, "sgld-noise"))

    gibbs_rng = substream(cfg.seed, "gibbs")
    snap = SnapshotWriter(model, cfg.snapshot_path, cfg.snapshot_every_blocks)
    trace: list[TracePoint] = []
    try:
        for t in range(1, cfg.epochs + 1):
            eta = learning_rate(cfg.eta0, cfg.gamma, t)
            ze = cfg.zeta * eta
            ledger.schedule.push_epoch(ze)
            var_base, zeta_eta = ledger.schedule.arrays()
            count = _Count()

            def handle(block: UserBlock, wid: int, eta=eta, ze=ze,
                       var_base=var_base, zeta_eta=zeta_eta, t=t):
                order = tiered_update_order(block, blocked.bounds)
                if compiled:
                    bad = kern.sgld_block(
                        model.U, model.V, block.users, block.items, block.ratings,
                        order, weights, eta, hp_s.lambda_r, hp_s.Lambda_u,
                        hp_s.Lambda_v, float(N), cnt_u, cnt_v,
                        ledger.last_u, ledger.last_v, ledger.clock,
                        var_base, zeta_eta, N, ze,
                        pool, cfg.segment_len, rng_state[wid], bm_scratch[wid],
                        mode, row_scratch[wid], cfg.prefetch_stride,
                    )
                else:
                    bad = kern.sgld_block(
                        model.U, model.V, block.users, block.items, block.ratings,
                        order, weights, eta, hp_s.lambda_r, hp_s.Lambda_u,
                        hp_s.Lambda_v, float(N), cnt_u, cnt_v,
                        ledger, noise_src, ze,
                    )
                if bad >= 0:
                    raise DivergenceError(
                        f"non-finite update at user {block.users[bad]}, "
                        f"item {block.items[bad]} in epoch {t}"
                    )
                count.add(len(order))
                snap.block_done()

            t0 = time.perf_counter()
            for_each_block(blocked, cfg.workers, handle)
            if count.total != N:
                raise RuntimeError(
                    f"epoch {t} processed {count.total} of {N} ratings"
                )
            # Full sweep so evaluation (and Gibbs) sees a consistent sample.
            target = t * N
            if compiled:
                kern.catchup_all(model.U, model.V, ledger.last_u, ledger.last_v,
                                 target, var_base, zeta_eta, N, pool,
                                 cfg.segment_len, rng_state[0], bm_scratch[0], mode)
            else:
                kern.catchup_all(model.U, model.V, ledger, target, noise_src)
            ledger.clock[0] = target
            secs = time.perf_counter() - t0

            if not model.finite():
                raise DivergenceError(f"parameters diverged in epoch {t}")
            if not cfg.fix_hyperparams:
                hp = gibbs_hyperparams(model, hp, cfg.alpha, cfg.beta, gibbs_rng)
                hp_s = hp.scaled(scale)
            obj = objective_blocked(model, blocked, cfg.lam, weights)
            vr = rmse(model, valid) if valid is not None else float("nan")
            trace.append(TracePoint(t, secs, obj, vr,
                                    float(hp.Lambda_u.mean()),
                                    float(hp.Lambda_v.mean())))
    finally:
        snap.close()
    return trace
