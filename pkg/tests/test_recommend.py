import numpy as np
import pytest

import dpmf
from dpmf.errors import SingularSystemError
from dpmf.recommend import evaluate_local, local_fit, recommend_top_n

from conftest import make_dataset
from oracles import ridge_fit_by_inverse


class TestLocalFit:
    def test_hand_case_exact(self):
        u = local_fit(np.array([[1.0, 0.0]]), [0], [4.0], lam=1.0)
        assert u[0] == 2.0 and u[1] == 0.0

    def test_empty_ratings_zero_vector(self, rng):
        V = rng.standard_normal((5, 3))
        assert np.array_equal(local_fit(V, [], [], lam=0.5), np.zeros(3))

    def test_matches_inverse_oracle(self, rng):
        for _ in range(100):
            k = int(rng.integers(2, 6))
            n = int(rng.integers(1, 12))
            V = rng.standard_normal((20, k))
            items = rng.integers(20, size=n)
            ratings = rng.uniform(1, 5, size=n)
            lam = float(rng.uniform(0.05, 2.0))
            got = local_fit(V, items, ratings, lam)
            want = ridge_fit_by_inverse(V, items, ratings, lam)
            np.testing.assert_allclose(got, want, atol=1e-8, rtol=0)

    def test_singular_without_ridge(self):
        V = np.array([[1.0, 0.0]])
        with pytest.raises(SingularSystemError, match="lam"):
            local_fit(V, [0], [4.0], lam=0.0)

    def test_norm_shrinks_with_lambda(self, rng):
        V = rng.standard_normal((15, 4))
        items = rng.integers(15, size=10)
        ratings = rng.uniform(1, 5, size=10)
        norms = [np.linalg.norm(local_fit(V, items, ratings, lam))
                 for lam in (0.1, 1.0, 10.0)]
        assert norms[0] > norms[1] > norms[2]

    def test_local_optimality(self, rng):
        V = rng.standard_normal((12, 3))
        items = rng.integers(12, size=8)
        ratings = rng.uniform(1, 5, size=8)
        lam = 0.7
        u = local_fit(V, items, ratings, lam)

        def ridge_obj(vec):
            e = ratings - V[items] @ vec
            return float(e @ e) + lam * float(vec @ vec)

        base = ridge_obj(u)
        for _ in range(100):
            assert base < ridge_obj(u + 0.01 * rng.standard_normal(3))


class TestTopN:
    def test_excludes_and_orders(self):
        V = np.array([[1.0], [3.0], [2.0], [0.5]])
        top = recommend_top_n(np.array([1.0]), V, exclude=[1], n=2)
        assert [t[0] for t in top] == [2, 0]

    def test_ties_break_by_item_id(self):
        V = np.array([[1.0], [1.0], [1.0]])
        top = recommend_top_n(np.array([2.0]), V, exclude=[], n=3)
        assert [t[0] for t in top] == [0, 1, 2]

    def test_rank_invariant_to_positive_scaling(self, rng):
        V = rng.standard_normal((30, 4))
        u = rng.standard_normal(4)
        a = [t[0] for t in recommend_top_n(u, V, [], 10)]
        b = [t[0] for t in recommend_top_n(3.7 * u, V, [], 10)]
        assert a == b


class TestEvaluateLocal:
    def test_perfect_factors_near_zero_rmse(self, rng):
        # ratings generated exactly from a rank-k model; local fits recover it
        V = rng.standard_normal((20, 3))
        U = rng.standard_normal((6, 3))
        users, items = [], []
        for u in range(6):
            for i in range(u, 20, 2):
                users.append(u)
                items.append(i)
        users = np.array(users, np.int32)
        items = np.array(items, np.int32)
        r = np.einsum("ij,ij->i", U[users], V[items])
        ds = dpmf.RatingDataset(users, items, r.astype(np.float32), 6, 20, -99, 99)
        mask = np.arange(ds.n_triples) % 3 == 0
        train = ds.select(np.flatnonzero(~mask))
        test = ds.select(np.flatnonzero(mask))
        score = evaluate_local(V, train, test, lam=1e-9)
        assert score < 1e-3

    def test_cold_user_falls_back_to_zero(self, rng):
        V = rng.standard_normal((5, 2))
        train = make_dataset([0], [1], [3.0], n_users=2, n_items=5)
        test = make_dataset([1], [2], [4.0], n_users=2, n_items=5)
        score = evaluate_local(V, train, test, lam=0.5)
        assert score == pytest.approx(4.0)  # zero vector predicts 0

    def test_matches_manual_computation(self, rng):
        V = rng.standard_normal((8, 2))
        train = make_dataset([0, 0, 1], [1, 3, 2], [4.0, 2.0, 5.0], 2, 8)
        test = make_dataset([0, 1], [5, 6], [3.0, 1.0], 2, 8)
        sq = 0.0
        for u in range(2):
            tr = train.user_slice(u)
            vec = ridge_fit_by_inverse(V, train.items[tr], train.ratings[tr], 0.3)
            te = test.user_slice(u)
            e = test.ratings[te].astype(np.float64) - V[test.items[te]] @ vec
            sq += float(e @ e)
        want = np.sqrt(sq / 2)
        assert evaluate_local(V, train, test, lam=0.3) == pytest.approx(want, rel=1e-9)
