"""End-to-end private release: budget application, the retry-if-fail
constraint loop, accounting conversions, and a brute-force verification
oracle for the release distribution on tiny instances.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .data import BlockedDataset, RatingDataset, plan_tiers
from .errors import RetryLimitError
from .model import FactorModel, init_model
from .preprocess import PrivacyBudget, compute_budget, compute_weights, trim  # noqa: F401
from .rng import substream
from .sgld import SgldConfig, TracePoint, sample

_DELTA_CAVEAT = (
    "finite-chain release: if the sampler is delta-away from its target in "
    "L1, the guarantee degrades to (eps, (1+e^eps)*delta); delta is not "
    "measured here"
)


@dataclass
class PrivacyReport:
    """Accounting summary released alongside the item factors."""

    epsilon: float
    kappa: float
    tau: int
    rho: float
    B: float
    eps_rating: float
    eps_i: np.ndarray
    retries: int = 0
    constraint_check: str = "none"
    caveat: str = _DELTA_CAVEAT

    def save(self, path) -> None:
        doc = {
            "epsilon": self.epsilon,
            "kappa": self.kappa,
            "tau": self.tau,
            "rho": self.rho,
            "B": self.B,
            "eps_rating": self.eps_rating,
            "retries": self.retries,
            "constraint_check": self.constraint_check,
            "caveat": self.caveat,
            "eps_i": [float(x) for x in self.eps_i],
        }
        Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def accounting(budget: PrivacyBudget, epsilon: float | None = None) -> PrivacyReport:
    """Personalized losses eps_i = eps * B_i / (2B) and the eps/tau conversion."""
    eps = budget.epsilon if epsilon is None else float(epsilon)
    if eps <= 0:
        raise ValueError("epsilon must be > 0")
    if budget.B > 0:
        eps_i = eps * budget.B_i / (2.0 * budget.B)
    else:
        eps_i = np.zeros_like(budget.B_i)
    return PrivacyReport(
        epsilon=eps,
        kappa=budget.kappa,
        tau=budget.tau,
        rho=budget.rho,
        B=budget.B,
        eps_rating=eps / budget.tau,
        eps_i=eps_i,
    )


def rejection_sample(draw, accept, limit: int):
    """Redraw until accepted; returns (value, attempts).

    Rejection conditions the draw distribution on the accepted set without
    changing relative probabilities inside it.
    """
    for attempt in range(1, limit + 1):
        value = draw(attempt)
        if accept(value):
            return value, attempt
    raise RetryLimitError(f"no accepted draw in {limit} attempts")


def check_predictions(model: FactorModel, ds: RatingDataset, kappa: float,
                      mode: str = "auto", sample_pairs: int = 1_000_000,
                      exhaustive_limit: int = 4_000_000, seed: int = 0) -> dict:
    """Do all checked scores u_i'v_j stay inside [r_min-kappa, r_max+kappa]?

    mode "exhaustive" scans every (user, item) pair; "sampled" checks the
    observed pairs plus a uniform random sample of pairs; "auto" picks
    exhaustive when n_users*n_items is small enough.
    """
    lo = ds.r_min - kappa
    hi = ds.r_max + kappa
    total = model.n_users * model.n_items
    if mode == "auto":
        mode = "exhaustive" if total <= exhaustive_limit else "sampled"
    worst_lo, worst_hi = math.inf, -math.inf
    if mode == "exhaustive":
        chunk = max(1, exhaustive_limit // max(model.n_items, 1))
        for start in range(0, model.n_users, chunk):
            scores = model.U[start:start + chunk] @ model.V.T
            worst_lo = min(worst_lo, float(scores.min()))
            worst_hi = max(worst_hi, float(scores.max()))
        checked = total
    elif mode == "sampled":
        scores = np.einsum("ij,ij->i", model.U[ds.users], model.V[ds.items])
        worst_lo, worst_hi = float(scores.min()), float(scores.max())
        rng = substream(seed, "constraint-check")
        n = min(sample_pairs, total)
        us = rng.integers(model.n_users, size=n)
        js = rng.integers(model.n_items, size=n)
        extra = np.einsum("ij,ij->i", model.U[us], model.V[js])
        worst_lo = min(worst_lo, float(extra.min()))
        worst_hi = max(worst_hi, float(extra.max()))
        checked = ds.n_triples + n
    else:
        raise ValueError(f"unknown constraint-check mode {mode!r}")
    return {
        "ok": bool(worst_lo >= lo and worst_hi <= hi),
        "lo": worst_lo,
        "hi": worst_hi,
        "bounds": (lo, hi),
        "checked": int(checked),
        "mode": mode,
    }


@dataclass
class ReleaseResult:
    item_factors: np.ndarray
    model: FactorModel
    report: PrivacyReport
    budget: PrivacyBudget
    trace: list[TracePoint] = field(default_factory=list)
    item_ids: np.ndarray | None = None


def release_blocked(blocked: BlockedDataset, budget: PrivacyBudget, *,
                    k: int = 16, init_scale: float = 0.1,
                    cfg: SgldConfig | None = None, retry_limit: int = 10,
                    check_mode: str = "auto", valid=None) -> ReleaseResult:
    """Sample from the scaled posterior and release V, redrawing on violations.

    The sampled model must keep every checked score inside
    [r_min-kappa, r_max+kappa]; otherwise the whole sampler reruns with fresh
    randomness, up to retry_limit times. Only V (plus global metadata) is
    released; U and any biases stay local.
    """
    cfg = cfg or SgldConfig()
    cfg = replace(cfg, fix_hyperparams=True)  # private runs keep the Lambdas fixed
    observed = blocked.to_dataset()
    kappa = budget.kappa
    state: dict = {}

    def draw(attempt: int) -> FactorModel:
        aseed = int(np.random.SeedSequence([cfg.seed, attempt]).generate_state(1)[0])
        acfg = replace(cfg, seed=aseed)
        model = init_model(blocked.n_users, blocked.n_items, k, init_scale, seed=aseed)
        state["trace"] = sample(model, blocked, budget, acfg, valid=valid)
        return model

    def accept(model: FactorModel) -> bool:
        result = check_predictions(model, observed, kappa, mode=check_mode,
                                   seed=cfg.seed)
        state["check"] = result
        return result["ok"]

    try:
        model, attempts = rejection_sample(draw, accept, retry_limit)
    except RetryLimitError:
        raise RetryLimitError(
            f"scores escaped [r_min-{kappa}, r_max+{kappa}] in {retry_limit} "
            "consecutive samples; rerun with a larger kappa"
        ) from None

    report = accounting(budget)
    report.retries = attempts - 1
    report.constraint_check = state["check"]["mode"]
    return ReleaseResult(
        item_factors=model.V.copy(),
        model=model,
        report=report,
        budget=budget,
        trace=state["trace"],
        item_ids=blocked.item_ids_by_position.copy(),
    )


def run_dpmf(ds: RatingDataset, *, epsilon: float, kappa: float = 1.0,
             tau: int = 100, rho: float = 1.0, k: int = 16,
             init_scale: float = 0.1, cfg: SgldConfig | None = None,
             cutoffs=None, users_per_block: int = 1000,
             bound_span: float | None = None, retry_limit: int = 10,
             check_mode: str = "auto", valid=None) -> ReleaseResult:
    """End to end: trim -> reweight -> budget -> sample -> constrained release."""
    cfg = cfg or SgldConfig()
    trimmed = trim(ds, tau, seed=cfg.seed)
    weights = compute_weights(trimmed, tau, kappa, rho)
    budget = compute_budget(trimmed, tau, kappa, epsilon, weights, rho, bound_span)
    if cutoffs is None:
        cutoffs = tuple(c for c in (500, 4500) if c < trimmed.n_items) or (trimmed.n_items,)
    plan = plan_tiers(trimmed, cutoffs)
    blocked = BlockedDataset.build(trimmed, plan, users_per_block)
    return release_blocked(blocked, budget, k=k, init_scale=init_scale, cfg=cfg,
                           retry_limit=retry_limit, check_mode=check_mode,
                           valid=valid)


def exp_mechanism_oracle(grid: np.ndarray, ds_a: RatingDataset,
                         ds_b: RatingDataset, epsilon: float, tau: int,
                         kappa: float, rho: float = 1.0, lam: float = 0.0,
                         B: float | None = None,
                         bound_span: float | None = None) -> float:
    """Max |log P_a(theta) - log P_b(theta)| over an exact scalar-factor grid.

    Both datasets (they should differ by one user's ratings) are scored under
    P(theta) proportional to exp(-(eps/4B) F(theta)) restricted to the
    support where every u_i*v_j lies in [r_min-kappa, r_max+kappa]. B
    defaults to the data-independent bound tau * (span+kappa)^2 so the same
    mechanism applies to both datasets. Exact sampling from this family is
    epsilon-differentially private, so the result must stay <= epsilon.
    """
    if ds_a.n_users != ds_b.n_users or ds_a.n_items != ds_b.n_items:
        raise ValueError("datasets must share the same (n_users, n_items) universe")
    if (ds_a.r_min, ds_a.r_max) != (ds_b.r_min, ds_b.r_max):
        raise ValueError("datasets must share the same rating range")
    n_u, n_i = ds_a.n_users, ds_a.n_items
    dims = n_u + n_i
    grid = np.asarray(grid, dtype=np.float64)
    if len(grid) ** dims > 200_000:
        raise ValueError("grid too large for exact normalization")
    span = (ds_a.r_max - ds_a.r_min) if bound_span is None else float(bound_span)
    if B is None:
        B = tau * (span + kappa) ** 2
    scale = epsilon / (4.0 * B)

    coords = np.meshgrid(*([grid] * dims), indexing="ij")
    flat = [c.reshape(-1) for c in coords]

    support = np.ones(flat[0].shape, dtype=bool)
    lo, hi = ds_a.r_min - kappa, ds_a.r_max + kappa
    for i in range(n_u):
        for j in range(n_i):
            s = flat[i] * flat[n_u + j]
            support &= (s >= lo) & (s <= hi)
    if not support.any():
        raise ValueError("empty support: enlarge the grid or kappa")

    def log_probs(ds: RatingDataset) -> np.ndarray:
        w = compute_weights(ds, tau, kappa, rho)
        F = lam * sum(f * f for f in flat)
        for u, i, r in zip(ds.users, ds.items, ds.ratings):
            e = float(r) - flat[u] * flat[n_u + i]
            F = F + w[u] * e * e
        logp = -scale * F[support]
        return logp - logsumexp(logp)

    diff = np.abs(log_probs(ds_a) - log_probs(ds_b))
    return float(diff.max())
