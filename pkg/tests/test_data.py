import io
import json
from pathlib import Path

import numpy as np
import pytest

import dpmf
from dpmf.data import UserBlock
from dpmf.errors import DataError
from dpmf.synth import make_power_law

from conftest import make_dataset, random_dataset


class TestIngest:
    def test_three_lines(self):
        ds = dpmf.ingest(["0,0,5", "0,1,3", "1,0,4"])
        assert ds.n_users == 2 and ds.n_items == 2
        assert list(ds.user_counts) == [2, 1]
        assert ds.n_triples == 3

    def test_empty_stream(self):
        with pytest.raises(DataError, match="no ratings"):
            dpmf.ingest([])

    def test_rating_out_of_range(self):
        with pytest.raises(DataError, match="line 1"):
            dpmf.ingest(["0,0,9"])

    def test_malformed_line_number(self):
        with pytest.raises(DataError, match="line 2"):
            dpmf.ingest(["0,0,5", "0,0"])

    def test_duplicate_last_wins(self):
        ds = dpmf.ingest(["0,0,5", "0,0,2"])
        assert ds.n_triples == 1
        assert float(ds.ratings[0]) == 2.0

    def test_column_permutation(self):
        ds = dpmf.ingest(["3.5,7,9"], columns=("rating", "user", "item"))
        assert ds.user_ids[ds.users[0]] == 7
        assert ds.item_ids[ds.items[0]] == 9
        assert float(ds.ratings[0]) == 3.5

    def test_netflix_format(self):
        lines = ["42:", "1,5", "2,3", "7:", "1,4"]
        ds = dpmf.ingest(lines, netflix_format=True)
        assert ds.n_users == 2 and ds.n_items == 2
        assert sorted(ds.item_ids.tolist()) == [7, 42]

    def test_file_source(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("5;0;4\n", encoding="utf-8")
        ds = dpmf.ingest(p, delimiter=";")
        assert ds.n_triples == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            dpmf.ingest(tmp_path / "nope.csv")

    def test_user_groups_contiguous(self, rng):
        ds = random_dataset(rng, n_users=20, n_items=15, max_ratings=120)
        assert int(ds.user_counts.sum()) == ds.n_triples
        # every user's run is one contiguous slice
        changes = np.count_nonzero(np.diff(ds.users))
        assert changes == np.count_nonzero(ds.user_counts > 0) - 1


class TestTierPlan:
    def test_sort_by_count(self):
        # item counts 10 / 500 / 3
        users = np.zeros(513, np.int32)
        items = np.concatenate([np.full(10, 0), np.full(500, 1), np.full(3, 2)])
        ds = make_dataset(users, items, np.ones(513), n_users=1, n_items=3)
        plan = dpmf.plan_tiers(ds, cutoffs=(1, 2))
        assert plan.order.tolist() == [1, 0, 2]
        assert np.allclose(plan.coverage, (500 / 513, 10 / 513, 3 / 513))

    def test_single_tier(self, rng):
        ds = random_dataset(rng, n_users=6, n_items=8, max_ratings=30)
        plan = dpmf.plan_tiers(ds, cutoffs=(ds.n_items,))
        assert plan.bounds == (8,)
        counts = ds.item_counts[plan.order]
        assert all(counts[i] >= counts[i + 1] for i in range(len(counts) - 1))

    def test_permutation_inverse_identity(self, rng):
        ds = random_dataset(rng, n_users=10, n_items=17, max_ratings=80)
        plan = dpmf.plan_tiers(ds, cutoffs=(5,))
        assert np.array_equal(plan.position_of[plan.order], np.arange(ds.n_items))
        assert np.array_equal(plan.order[plan.position_of], np.arange(ds.n_items))

    def test_coverage_sums_to_one(self, rng):
        for _ in range(5):
            ds = random_dataset(rng, n_users=9, n_items=23, max_ratings=100)
            plan = dpmf.plan_tiers(ds, cutoffs=(4, 11))
            assert abs(sum(plan.coverage) - 1.0) < 1e-12

    def test_ties_broken_by_ascending_id(self):
        items = np.array([2, 1, 0], dtype=np.int32)  # all count 1
        ds = make_dataset(np.zeros(3, np.int32), items, [1, 2, 3], 1, 3)
        plan = dpmf.plan_tiers(ds, cutoffs=(3,))
        assert plan.order.tolist() == [0, 1, 2]

    def test_invalid_cutoffs(self, rng):
        ds = random_dataset(rng, n_users=4, n_items=6)
        with pytest.raises(ValueError):
            dpmf.plan_tiers(ds, cutoffs=(3, 3))
        with pytest.raises(ValueError):
            dpmf.plan_tiers(ds, cutoffs=(99,))

    def test_netflix_shaped_power_law_top_tier_share(self):
        # generator calibrated so the hottest 500 of ~17.8k items carry about
        # 44% of ratings; tolerance is deliberately wide (+-10 points)
        ds = make_power_law(n_users=20_000, n_items=17_770, n_ratings=300_000,
                            exponent=0.8, seed=1)
        plan = dpmf.plan_tiers(ds, cutoffs=(500, 4500))
        assert abs(plan.coverage[0] - 0.44) < 0.10


class TestBlocks:
    def _ds(self, rng, n_users=2500, n_items=40):
        users = np.repeat(np.arange(n_users, dtype=np.int32), 2)
        items = rng.integers(n_items, size=len(users)).astype(np.int32)
        # dedup (user, item)
        key = users.astype(np.int64) * n_items + items
        _, first = np.unique(key, return_index=True)
        users, items = users[first], items[first]
        ratings = rng.integers(1, 6, size=len(users)).astype(np.float32)
        return make_dataset(users, items, ratings, n_users, n_items)

    def test_block_sizes_ceiling(self, rng, tmp_path):
        ds = self._ds(rng)
        plan = dpmf.plan_tiers(ds, cutoffs=(ds.n_items,))
        path = tmp_path / "d.blocks"
        blocked = dpmf.write_blocks(ds, plan, path, users_per_block=1000)
        sizes = [b.n_users for b in blocked.iter_blocks()]
        assert sizes == [1000, 1000, 500]

    def test_roundtrip_multiset(self, rng, tmp_path):
        ds = random_dataset(rng, n_users=40, n_items=25, max_ratings=300)
        plan = dpmf.plan_tiers(ds, cutoffs=(7,))
        path = tmp_path / "d.blocks"
        blocked = dpmf.write_blocks(ds, plan, path, users_per_block=16)

        def multiset(users, items, ratings):
            return sorted(zip(users.tolist(), items.tolist(), ratings.tolist()))

        orig = multiset(ds.users, ds.items, ds.ratings)
        back = []
        for b in blocked.iter_blocks():
            back += list(zip(b.users.tolist(),
                             plan.order[b.items].tolist(),
                             b.ratings.tolist()))
        assert sorted(back) == orig

    def test_single_user_block(self, tmp_path):
        ds = make_dataset(np.zeros(10, np.int32), np.arange(10, dtype=np.int32),
                          np.ones(10), 1, 10)
        plan = dpmf.plan_tiers(ds, cutoffs=(10,))
        blocked = dpmf.write_blocks(ds, plan, tmp_path / "s.blocks", users_per_block=1)
        blocks = list(blocked.iter_blocks())
        assert len(blocks) == 1 and blocks[0].n_triples == 10

    def test_no_user_spans_blocks(self, rng, tmp_path):
        ds = self._ds(rng, n_users=137)
        plan = dpmf.plan_tiers(ds, cutoffs=(ds.n_items,))
        blocked = dpmf.write_blocks(ds, plan, tmp_path / "d.blocks", users_per_block=10)
        seen = set()
        for b in blocked.iter_blocks():
            block_users = set(b.users.tolist())
            assert not (block_users & seen)
            seen |= block_users

    def test_corrupt_block_detected(self, rng, tmp_path):
        ds = random_dataset(rng, n_users=10, n_items=8, max_ratings=50)
        plan = dpmf.plan_tiers(ds, cutoffs=(8,))
        path = tmp_path / "d.blocks"
        dpmf.write_blocks(ds, plan, path, users_per_block=4)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF  # flip a payload byte in the last block
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="checksum"):
            list(dpmf.read_blocks(path))

    def test_index_metadata(self, rng, tmp_path):
        ds = random_dataset(rng, n_users=12, n_items=9, max_ratings=60)
        plan = dpmf.plan_tiers(ds, cutoffs=(3,))
        path = tmp_path / "d.blocks"
        dpmf.write_blocks(ds, plan, path, users_per_block=5)
        idx = json.loads(Path(str(path) + ".idx").read_text())
        assert idx["n_users"] == ds.n_users
        assert idx["cutoffs"] == [3, 9]
        assert sum(b["triples"] for b in idx["blocks"]) == ds.n_triples
        reopened = dpmf.BlockedDataset.open(path)
        assert reopened.bounds == (3, 9)
        assert reopened.n_triples == ds.n_triples

    def test_shuffle_users_preserves_content(self, rng, tmp_path):
        ds = random_dataset(rng, n_users=30, n_items=12, max_ratings=150)
        plan = dpmf.plan_tiers(ds, cutoffs=(12,))
        b1 = dpmf.write_blocks(ds, plan, tmp_path / "a.blocks", users_per_block=7)
        b2 = dpmf.write_blocks(ds, plan, tmp_path / "b.blocks", users_per_block=7,
                               shuffle_users=True, seed=5)
        def content(blocked):
            out = []
            for b in blocked.iter_blocks():
                out += list(zip(b.users.tolist(), b.items.tolist(), b.ratings.tolist()))
            return sorted(out)
        assert content(b1) == content(b2)

    def test_user_rank(self):
        b = UserBlock(np.array([4, 4, 7, 9, 9, 9], np.int32),
                      np.zeros(6, np.int32), np.zeros(6, np.float32))
        assert b.user_rank().tolist() == [0, 0, 1, 2, 2, 2]
        assert b.n_users == 3
