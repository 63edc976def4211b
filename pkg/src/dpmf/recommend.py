"""Two-stage local recommender on top of released item factors.

Users fit their own factor vector from their own ratings (no privacy
machinery needed for one's own data) and rank unseen items by score.
"""

from __future__ import annotations

import numpy as np

from .data import RatingDataset
from .errors import SingularSystemError


def local_fit(item_factors: np.ndarray, items, ratings, lam: float) -> np.ndarray:
    """Ridge solve u = (lam I + sum v v')^(-1) sum v r over the user's ratings.

    An empty rating set gives the zero vector. With lam = 0 the Gram matrix
    may be singular, which raises SingularSystemError.
    """
    k = item_factors.shape[1]
    items = np.asarray(items, dtype=np.int64)
    if len(items) == 0:
        return np.zeros(k)
    ratings = np.asarray(ratings, dtype=np.float64)
    Vs = item_factors[items]
    A = lam * np.eye(k) + Vs.T @ Vs
    b = Vs.T @ ratings
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        raise SingularSystemError(
            "singular local system; use lam > 0 to regularize"
        ) from None


def recommend_top_n(u: np.ndarray, item_factors: np.ndarray, exclude,
                    n: int) -> list[tuple[int, float]]:
    """Top-n items by <u, v_j>, excluding already-rated ones.

    Deterministic: ties break by ascending item index.
    """
    scores = item_factors @ u
    order = np.lexsort((np.arange(len(scores)), -scores))
    excluded = set(int(j) for j in exclude)
    out = []
    for j in order:
        if int(j) in excluded:
            continue
        out.append((int(j), float(scores[j])))
        if len(out) == n:
            break
    return out


def evaluate_local(item_factors: np.ndarray, train: RatingDataset,
                   test: RatingDataset, lam: float) -> float:
    """RMSE of per-user local fits scored on held-out ratings.

    Both datasets must index items in the same space as the released factor
    rows. Users absent from the training set fall back to the zero vector.
    """
    if train.n_users != test.n_users:
        raise ValueError("train/test must share the user index space")
    sq = 0.0
    n = 0
    for user in range(test.n_users):
        ts = test.user_slice(user)
        m_test = ts.stop - ts.start
        if m_test == 0:
            continue
        rs = train.user_slice(user)
        u = local_fit(item_factors, train.items[rs], train.ratings[rs], lam)
        pred = item_factors[test.items[ts]] @ u
        e = test.ratings[ts].astype(np.float64) - pred
        sq += float(e @ e)
        n += m_test
    if n == 0:
        return float("nan")
    return float(np.sqrt(sq / n))
