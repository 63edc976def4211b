import numpy as np
import pytest

import dpmf
from dpmf.synth import make_low_rank


@pytest.fixture(scope="session")
def synth_problem():
    """The shared synthetic benchmark: rank-5 truth, 200x300, 20% observed,
    noise 0.1, with a 10% validation holdout. Item ids remapped through the
    tier plan so training and evaluation share the index space."""
    train, test, truth = make_low_rank(n_users=200, n_items=300, rank=5,
                                       density=0.2, noise=0.1, holdout=0.1,
                                       seed=3)
    plan = dpmf.plan_tiers(train, (50, 150))
    blocked = dpmf.BlockedDataset.build(train, plan, users_per_block=64)
    valid = test.remap_items(plan)
    return {"train": train, "test": test, "plan": plan, "blocked": blocked,
            "valid": valid, "truth": truth}


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def make_dataset(users, items, ratings, n_users=None, n_items=None,
                 r_min=1.0, r_max=5.0):
    users = np.asarray(users, dtype=np.int32)
    items = np.asarray(items, dtype=np.int32)
    n_users = int(users.max()) + 1 if n_users is None else n_users
    n_items = int(items.max()) + 1 if n_items is None else n_items
    return dpmf.RatingDataset(users, items, np.asarray(ratings, np.float32),
                              n_users, n_items, r_min, r_max)


def random_dataset(rng, n_users=12, n_items=9, max_ratings=60, r_min=1.0,
                   r_max=5.0, cover_all_rows=False):
    """Random dedup'd dataset; optionally guarantees every row has a rating."""
    pairs = set()
    triples = []
    if cover_all_rows:
        perm_items = rng.permutation(n_items)
        for u in range(n_users):
            i = int(perm_items[u % n_items])
            pairs.add((u, i))
        for i in range(n_items):
            u = int(rng.integers(n_users))
            pairs.add((u, i))
    while len(pairs) < min(max_ratings, n_users * n_items):
        pairs.add((int(rng.integers(n_users)), int(rng.integers(n_items))))
    for (u, i) in sorted(pairs):
        triples.append((u, i, float(rng.uniform(r_min, r_max))))
    users, items, ratings = zip(*triples)
    return make_dataset(users, items, ratings, n_users, n_items, r_min, r_max)
