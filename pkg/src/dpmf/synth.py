"""Synthetic dataset generators for tests, benchmarks, and the bundled sample."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import RatingDataset
from .rng import substream


def sample_ratings_path() -> Path:
    """Location of the bundled ~1.1k-rating sample CSV."""
    return Path(__file__).parent / "assets" / "sample_ratings.csv"


def make_low_rank(n_users: int = 200, n_items: int = 300, rank: int = 5,
                  density: float = 0.2, noise: float = 0.1,
                  holdout: float = 0.1, seed: int = 0,
                  factor_scale: float = 0.45):
    """Low-rank ground truth with additive Gaussian noise.

    Ratings are 3 + <u*, v*> + N(0, noise^2) on a uniformly drawn subset of
    cells; `holdout` of the observed entries become the validation set.
    Returns (train, test, truth) where truth carries the generating factors.
    """
    rng = substream(seed, "synth")
    U0 = rng.standard_normal((n_users, rank)) * factor_scale
    V0 = rng.standard_normal((n_items, rank)) * factor_scale
    total = n_users * n_items
    n_obs = int(round(density * total))
    cells = rng.choice(total, size=n_obs, replace=False)
    users = (cells // n_items).astype(np.int32)
    items = (cells % n_items).astype(np.int32)
    r = 3.0 + np.einsum("ij,ij->i", U0[users], V0[items])
    r += noise * rng.standard_normal(n_obs)
    r_min = float(np.floor(r.min()))
    r_max = float(np.ceil(r.max()))
    test_mask = rng.random(n_obs) < holdout
    train = RatingDataset(users[~test_mask], items[~test_mask], r[~test_mask],
                          n_users, n_items, r_min, r_max)
    test = RatingDataset(users[test_mask], items[test_mask], r[test_mask],
                         n_users, n_items, r_min, r_max)
    truth = {"U": U0, "V": V0, "noise": noise}
    return train, test, truth


def make_power_law(n_users: int = 2000, n_items: int = 1500,
                   n_ratings: int = 100_000, exponent: float = 0.75,
                   seed: int = 0) -> RatingDataset:
    """Ratings whose item popularity follows rank^(-exponent).

    Item 0 is the most popular. Duplicate (user, item) draws collapse, so the
    result holds slightly fewer than n_ratings triples. Ratings are integer
    stars in [1, 5].
    """
    rng = substream(seed, "synth")
    p = np.arange(1, n_items + 1, dtype=np.float64) ** (-exponent)
    p /= p.sum()
    items = rng.choice(n_items, size=n_ratings, p=p).astype(np.int64)
    users = rng.integers(n_users, size=n_ratings).astype(np.int64)
    codes = users * n_items + items
    _, first = np.unique(codes, return_index=True)
    users, items = users[first], items[first]
    ratings = rng.integers(1, 6, size=len(users)).astype(np.float32)
    return RatingDataset(users.astype(np.int32), items.astype(np.int32), ratings,
                         n_users, n_items, r_min=1.0, r_max=5.0)


def write_ratings_csv(ds: RatingDataset, path) -> None:
    """Dump as user,item,rating lines using the original ids."""
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, r in zip(ds.users, ds.items, ds.ratings):
            rtxt = np.format_float_positional(np.float32(r), unique=True, trim="0")
            fh.write(f"{ds.user_ids[u]},{ds.item_ids[i]},{rtxt}\n")
