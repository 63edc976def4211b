"""Trimming, reweighting, and the per-user loss bounds behind all accounting.

The pipeline order is fixed: trim -> compute_weights -> compute_budget. The
bound factor defaults to (r_max - r_min + kappa)^2; ``bound_span`` overrides
the span, e.g. 4.0 for the classic five-star scale (which is what reproduces
B = 5000 for tau=200 on data rescaled to [0, 5]) or r_max for the
conservative variant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import RatingDataset
from .rng import substream


@dataclass
class PrivacyBudget:
    """Privacy loss budget plus the per-user bounds it rests on.

    B is the uniform bound max_i B_i with
    B_i = min(tau, m_i) * w_i * (span + kappa)^2, and eps_i = eps * B_i / (2B)
    is user i's personalized loss.
    """

    epsilon: float
    kappa: float
    tau: int
    rho: float
    weights: np.ndarray
    B: float
    B_i: np.ndarray
    eps_i: np.ndarray
    r_min: float
    r_max: float
    bound_span: float
    user_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def scale(self) -> float:
        """Objective multiplier eps / (4B) used by the sampler."""
        if self.B <= 0:
            return 1.0
        return self.epsilon / (4.0 * self.B)

    def with_epsilon(self, epsilon: float) -> "PrivacyBudget":
        """Same bounds under a different global loss; eps_i recomputed."""
        if epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        eps_i = (epsilon * self.B_i / (2.0 * self.B) if self.B > 0
                 else np.zeros_like(self.B_i))
        return replace(self, epsilon=float(epsilon), eps_i=eps_i)

    @property
    def eps_rating(self) -> float:
        """Rating-level loss: eps / tau."""
        return self.epsilon / self.tau


def trim(ds: RatingDataset, tau: int, seed: int = 0) -> RatingDataset:
    """Cap every user at tau ratings, deleting uniformly at random.

    Users at or below the cap are untouched; the result is deterministic for
    a given seed. Idempotent on already-trimmed data.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    counts = ds.user_counts
    if counts.size == 0 or counts.max() <= tau:
        return ds
    rng = substream(seed, "trim")
    keep_parts = []
    for u in range(ds.n_users):
        lo, hi = int(ds.user_ptr[u]), int(ds.user_ptr[u + 1])
        m = hi - lo
        if m <= tau:
            keep_parts.append(np.arange(lo, hi, dtype=np.int64))
        else:
            chosen = rng.choice(m, size=tau, replace=False)
            chosen.sort()
            keep_parts.append(lo + chosen.astype(np.int64))
    return ds.select(np.concatenate(keep_parts))


def compute_weights(
    ds: RatingDataset, tau: int, kappa: float, rho: float = 1.0
) -> np.ndarray:
    """Per-user weights w_i = min(rho, B / (m_i * (span+kappa)^2)).

    With B = tau * (span+kappa)^2 the factor cancels and w_i = min(rho,
    tau / m_i); users with no ratings get rho (they contribute nothing).
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if rho <= 0:
        raise ValueError("rho must be > 0")
    m = ds.user_counts.astype(np.float64)
    w = np.full(ds.n_users, float(rho))
    nz = m > 0
    w[nz] = np.minimum(rho, float(tau) / m[nz])
    return w


def compute_budget(
    ds: RatingDataset,
    tau: int,
    kappa: float,
    epsilon: float,
    weights: np.ndarray,
    rho: float = 1.0,
    bound_span: float | None = None,
) -> PrivacyBudget:
    """Populate the uniform bound B, per-user bounds B_i, and losses eps_i."""
    if epsilon <= 0 or kappa <= 0 or tau < 1:
        raise ValueError("need epsilon > 0, kappa > 0, tau >= 1")
    span = (ds.r_max - ds.r_min) if bound_span is None else float(bound_span)
    factor = (span + kappa) ** 2
    m = ds.user_counts.astype(np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (ds.n_users,):
        raise ValueError("weights must have one entry per user")
    B_i = np.minimum(float(tau), m) * weights * factor
    B = float(B_i.max()) if B_i.size else 0.0
    eps_i = epsilon * B_i / (2.0 * B) if B > 0 else np.zeros_like(B_i)
    return PrivacyBudget(
        epsilon=float(epsilon),
        kappa=float(kappa),
        tau=int(tau),
        rho=float(rho),
        weights=weights,
        B=B,
        B_i=B_i,
        eps_i=eps_i,
        r_min=ds.r_min,
        r_max=ds.r_max,
        bound_span=span,
        user_counts=ds.user_counts.copy(),
    )


def write_budget_report(budget: PrivacyBudget, ds: RatingDataset, path) -> None:
    """One record per user (m_i, w_i, B_i, eps_i) plus the global figures.

    The report contains per-user counts and is meant to stay local.
    """
    report = {
        "epsilon": budget.epsilon,
        "epsilon_rating": budget.eps_rating,
        "kappa": budget.kappa,
        "tau": budget.tau,
        "rho": budget.rho,
        "bound_span": budget.bound_span,
        "B": budget.B,
        "r_min": budget.r_min,
        "r_max": budget.r_max,
        "users": [
            {
                "user": int(ds.user_ids[i]),
                "m": int(budget.user_counts[i]),
                "w": float(budget.weights[i]),
                "B_i": float(budget.B_i[i]),
                "eps_i": float(budget.eps_i[i]),
            }
            for i in range(ds.n_users)
        ],
    }
    Path(path).write_text(json.dumps(report, indent=1), encoding="utf-8")


def load_budget_report(path) -> PrivacyBudget:
    """Rebuild a PrivacyBudget from a report file (user order = record order)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    users = doc["users"]
    weights = np.array([u["w"] for u in users], dtype=np.float64)
    B_i = np.array([u["B_i"] for u in users], dtype=np.float64)
    eps_i = np.array([u["eps_i"] for u in users], dtype=np.float64)
    counts = np.array([u["m"] for u in users], dtype=np.int64)
    return PrivacyBudget(
        epsilon=doc["epsilon"],
        kappa=doc["kappa"],
        tau=doc["tau"],
        rho=doc["rho"],
        weights=weights,
        B=doc["B"],
        B_i=B_i,
        eps_i=eps_i,
        r_min=doc["r_min"],
        r_max=doc["r_max"],
        bound_span=doc["bound_span"],
        user_counts=counts,
    )
