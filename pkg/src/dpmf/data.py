"""Rating ingestion, popularity tiers, and the user-blocked binary layout.

The binary block format is little-endian throughout and documented field by
field in README.md. Ratings are quantized to float32 at ingest so that a
dataset survives a write/read round trip bit-exactly.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .errors import DataError
from .rng import substream


class RatingTriple(NamedTuple):
    user: int
    item: int
    rating: float


TRIPLE_DTYPE = np.dtype([("u", "<u4"), ("i", "<u4"), ("r", "<f4")])

_FILE_MAGIC = b"DPMFBLK1"
_FILE_VERSION = 1
# magic, version, flags, n_users, n_items, n_triples, r_min, r_max,
# users_per_block, n_blocks, n_cutoffs, pad
_FILE_HEADER = struct.Struct("<8sII QQQ dd IIII")
# n_users, n_triples, crc32 of payload
_BLOCK_HEADER = struct.Struct("<IQI")


class RatingDataset:
    """Observed (user, item, rating) triples stored user-major.

    Every user's ratings occupy a contiguous run sorted by item id, which is
    what the block writer and the tier scheduler rely on. ``user_ids`` /
    ``item_ids`` map dense indices back to the original identifiers.
    """

    def __init__(
        self,
        users,
        items,
        ratings,
        n_users: int,
        n_items: int,
        r_min: float,
        r_max: float,
        user_ids=None,
        item_ids=None,
        _sorted: bool = False,
    ):
        users = np.ascontiguousarray(users, dtype=np.int32)
        items = np.ascontiguousarray(items, dtype=np.int32)
        ratings = np.ascontiguousarray(ratings, dtype=np.float32)
        if not (len(users) == len(items) == len(ratings)):
            raise ValueError("users/items/ratings length mismatch")
        if not _sorted:
            order = np.lexsort((items, users))
            users, items, ratings = users[order], items[order], ratings[order]
        self.users = users
        self.items = items
        self.ratings = ratings
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.r_min = float(r_min)
        self.r_max = float(r_max)
        self.user_ids = (
            np.arange(self.n_users, dtype=np.int64)
            if user_ids is None
            else np.asarray(user_ids, dtype=np.int64)
        )
        self.item_ids = (
            np.arange(self.n_items, dtype=np.int64)
            if item_ids is None
            else np.asarray(item_ids, dtype=np.int64)
        )
        counts = np.bincount(users, minlength=self.n_users)
        self.user_ptr = np.zeros(self.n_users + 1, dtype=np.int64)
        np.cumsum(counts, out=self.user_ptr[1:])
        self.item_counts = np.bincount(items, minlength=self.n_items).astype(np.int64)

    @property
    def n_triples(self) -> int:
        return len(self.users)

    @property
    def user_counts(self) -> np.ndarray:
        """Per-user rating counts m_i."""
        return np.diff(self.user_ptr)

    def user_slice(self, i: int) -> slice:
        return slice(self.user_ptr[i], self.user_ptr[i + 1])

    def triples(self) -> Iterator[RatingTriple]:
        for u, i, r in zip(self.users, self.items, self.ratings):
            yield RatingTriple(int(u), int(i), float(r))

    def select(self, index: np.ndarray) -> "RatingDataset":
        """New dataset over a subset of triples; id spaces are unchanged."""
        return RatingDataset(
            self.users[index],
            self.items[index],
            self.ratings[index],
            self.n_users,
            self.n_items,
            self.r_min,
            self.r_max,
            user_ids=self.user_ids,
            item_ids=self.item_ids,
        )

    def remap_items(self, plan: "TierPlan") -> "RatingDataset":
        """Relabel items by tier position; re-sorts each user's run."""
        if plan.n_items != self.n_items:
            raise ValueError("plan does not cover this dataset's items")
        return RatingDataset(
            self.users,
            plan.position_of[self.items],
            self.ratings,
            self.n_users,
            self.n_items,
            self.r_min,
            self.r_max,
            user_ids=self.user_ids,
            item_ids=self.item_ids[plan.order],
        )


def _open_lines(source) -> tuple[Iterable[str], str]:
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise DataError(f"input file not found: {path}")
        return path.open("r", encoding="utf-8"), str(path)
    if isinstance(source, io.IOBase) or hasattr(source, "read"):
        return source, getattr(source, "name", "<stream>")
    return iter(source), "<lines>"


def ingest(
    source,
    *,
    delimiter: str = ",",
    columns: tuple[str, str, str] = ("user", "item", "rating"),
    r_min: float = 1.0,
    r_max: float = 5.0,
    netflix_format: bool = False,
) -> RatingDataset:
    """Parse delimited rating triples into a densely indexed dataset.

    ``columns`` names the order of the user/item/rating fields. With
    ``netflix_format`` the input is the per-movie layout (``<item>:`` header
    lines followed by ``user,rating[,date]`` rows). Duplicate (user, item)
    pairs keep the last occurrence.
    """
    if sorted(columns) != ["item", "rating", "user"]:
        raise ValueError(f"columns must name user/item/rating once each, got {columns}")
    iu, ii, ir = (columns.index(c) for c in ("user", "item", "rating"))
    lines, name = _open_lines(source)

    seen: dict[tuple[int, int], float] = {}
    current_item = None
    try:
        for lineno, raw in enumerate(lines, 1):
            line = raw.strip()
            if not line:
                continue
            try:
                if netflix_format:
                    if line.endswith(":"):
                        current_item = int(line[:-1])
                        continue
                    if current_item is None:
                        raise ValueError("rating row before any item header")
                    parts = line.split(delimiter)
                    if len(parts) < 2:
                        raise ValueError("expected user,rating[,date]")
                    u, i, r = int(parts[0]), current_item, float(parts[1])
                else:
                    parts = line.split(delimiter)
                    if len(parts) < 3:
                        raise ValueError(f"expected 3 fields, got {len(parts)}")
                    u, i, r = int(parts[iu]), int(parts[ii]), float(parts[ir])
            except ValueError as exc:
                raise DataError(f"{name} line {lineno}: {exc}") from None
            if not np.isfinite(r) or r < r_min or r > r_max:
                raise DataError(
                    f"{name} line {lineno}: rating {r} outside [{r_min}, {r_max}]"
                )
            seen[(u, i)] = r
    finally:
        if hasattr(lines, "close") and not isinstance(source, io.IOBase):
            lines.close()

    if not seen:
        raise DataError(f"{name}: no ratings found")

    raw_users = np.fromiter((k[0] for k in seen), dtype=np.int64, count=len(seen))
    raw_items = np.fromiter((k[1] for k in seen), dtype=np.int64, count=len(seen))
    ratings = np.fromiter(seen.values(), dtype=np.float32, count=len(seen))
    user_ids, users = np.unique(raw_users, return_inverse=True)
    item_ids, items = np.unique(raw_items, return_inverse=True)
    return RatingDataset(
        users,
        items,
        ratings,
        n_users=len(user_ids),
        n_items=len(item_ids),
        r_min=r_min,
        r_max=r_max,
        user_ids=user_ids,
        item_ids=item_ids,
    )


@dataclass(frozen=True)
class TierPlan:
    """Popularity ordering of items plus tier boundaries.

    ``order[p]`` is the dense item id placed at position ``p`` (descending
    rating count, ties by ascending id); ``position_of`` is its inverse.
    ``bounds`` are cumulative item counts ending with n_items, so tier t is
    positions [bounds[t-1], bounds[t]).
    """

    order: np.ndarray
    position_of: np.ndarray
    bounds: tuple[int, ...]
    coverage: tuple[float, ...]

    @property
    def n_items(self) -> int:
        return len(self.order)

    @property
    def n_tiers(self) -> int:
        return len(self.bounds)

    def tier_of_position(self, positions) -> np.ndarray:
        return np.searchsorted(np.asarray(self.bounds), positions, side="right")


def plan_tiers(ds: RatingDataset, cutoffs=(500, 4500)) -> TierPlan:
    """Sort items by descending rating count and fix tier boundaries.

    ``cutoffs`` are strictly increasing item counts, each <= n_items; a final
    boundary at n_items is appended when missing.
    """
    cutoffs = tuple(int(c) for c in cutoffs)
    if not cutoffs:
        cutoffs = (ds.n_items,)
    if any(b <= a for a, b in zip(cutoffs, cutoffs[1:])) or cutoffs[0] < 1:
        raise ValueError(f"cutoffs must be strictly increasing and >= 1: {cutoffs}")
    if cutoffs[-1] > ds.n_items:
        raise ValueError(f"cutoff {cutoffs[-1]} exceeds n_items={ds.n_items}")
    bounds = cutoffs if cutoffs[-1] == ds.n_items else cutoffs + (ds.n_items,)

    order = np.argsort(-ds.item_counts, kind="stable").astype(np.int32)
    position_of = np.empty(ds.n_items, dtype=np.int32)
    position_of[order] = np.arange(ds.n_items, dtype=np.int32)

    total = max(int(ds.item_counts.sum()), 1)
    lows = (0,) + bounds[:-1]
    coverage = tuple(
        float(ds.item_counts[order[lo:hi]].sum()) / total
        for lo, hi in zip(lows, bounds)
    )
    return TierPlan(order=order, position_of=position_of, bounds=bounds, coverage=coverage)


def random_plan(ds: RatingDataset, seed: int = 0) -> TierPlan:
    """Single-tier plan with a random item relabeling (benchmark baseline)."""
    order = substream(seed, "bench").permutation(ds.n_items).astype(np.int32)
    position_of = np.empty(ds.n_items, dtype=np.int32)
    position_of[order] = np.arange(ds.n_items, dtype=np.int32)
    return TierPlan(order=order, position_of=position_of, bounds=(ds.n_items,), coverage=(1.0,))


@dataclass
class UserBlock:
    """A contiguous group of users' triples; no user spans two blocks."""

    users: np.ndarray  # int32 global user ids, user-contiguous runs
    items: np.ndarray  # int32 item positions (tier space)
    ratings: np.ndarray  # float32

    @property
    def n_triples(self) -> int:
        return len(self.users)

    @property
    def n_users(self) -> int:
        if len(self.users) == 0:
            return 0
        return int(np.count_nonzero(np.diff(self.users)) + 1)

    def user_rank(self) -> np.ndarray:
        """Per-triple index of the user within this block (0-based)."""
        if len(self.users) == 0:
            return np.zeros(0, dtype=np.int64)
        changed = np.empty(len(self.users), dtype=np.int64)
        changed[0] = 0
        changed[1:] = (self.users[1:] != self.users[:-1]).astype(np.int64)
        return np.cumsum(changed)


def _iter_block_user_ranges(n_users: int, users_per_block: int) -> Iterator[np.ndarray]:
    for start in range(0, n_users, users_per_block):
        yield np.arange(start, min(start + users_per_block, n_users), dtype=np.int64)


def _gather_block(ds: RatingDataset, block_users: np.ndarray) -> UserBlock:
    spans = [ds.user_slice(int(u)) for u in block_users]
    idx = np.concatenate([np.arange(s.start, s.stop, dtype=np.int64) for s in spans]) if spans else np.zeros(0, np.int64)
    return UserBlock(ds.users[idx], ds.items[idx], ds.ratings[idx])


def write_blocks(
    ds: RatingDataset,
    plan: TierPlan,
    path,
    users_per_block: int = 1000,
    shuffle_users: bool = False,
    seed: int = 0,
) -> "BlockedDataset":
    """Write the tier-remapped dataset as a blocked binary file plus index.

    Users go into blocks of ``users_per_block`` in id order (or shuffled,
    seeded). Returns the reopened BlockedDataset.
    """
    if users_per_block < 1:
        raise ValueError("users_per_block must be >= 1")
    path = Path(path)
    remapped = ds.remap_items(plan)

    user_order = np.arange(ds.n_users, dtype=np.int64)
    if shuffle_users:
        user_order = substream(seed, "ingest-shuffle").permutation(user_order)

    records = []
    with path.open("wb") as fh:
        header = _FILE_HEADER.pack(
            _FILE_MAGIC,
            _FILE_VERSION,
            0,
            ds.n_users,
            ds.n_items,
            ds.n_triples,
            ds.r_min,
            ds.r_max,
            users_per_block,
            0,  # n_blocks patched below
            len(plan.bounds),
            0,
        )
        fh.write(header)
        fh.write(np.asarray(plan.bounds, dtype="<u4").tobytes())
        fh.write(np.asarray(plan.order, dtype="<u4").tobytes())
        n_blocks = 0
        for block_users in _iter_block_user_ranges(ds.n_users, users_per_block):
            block = _gather_block(remapped, user_order[block_users])
            payload = np.empty(block.n_triples, dtype=TRIPLE_DTYPE)
            payload["u"] = block.users
            payload["i"] = block.items
            payload["r"] = block.ratings
            raw = payload.tobytes()
            crc = zlib.crc32(raw) & 0xFFFFFFFF
            offset = fh.tell()
            fh.write(_BLOCK_HEADER.pack(len(block_users), block.n_triples, crc))
            fh.write(raw)
            records.append(
                {
                    "offset": offset,
                    "nbytes": _BLOCK_HEADER.size + len(raw),
                    "users": int(len(block_users)),
                    "triples": int(block.n_triples),
                    "crc32": crc,
                }
            )
            n_blocks += 1
        # patch n_blocks in the fixed header
        fh.seek(0)
        fh.write(
            _FILE_HEADER.pack(
                _FILE_MAGIC,
                _FILE_VERSION,
                0,
                ds.n_users,
                ds.n_items,
                ds.n_triples,
                ds.r_min,
                ds.r_max,
                users_per_block,
                n_blocks,
                len(plan.bounds),
                0,
            )
        )

    index = {
        "version": _FILE_VERSION,
        "n_users": ds.n_users,
        "n_items": ds.n_items,
        "n_triples": ds.n_triples,
        "r_min": ds.r_min,
        "r_max": ds.r_max,
        "users_per_block": users_per_block,
        "cutoffs": list(plan.bounds),
        "coverage": list(plan.coverage),
        "blocks": records,
        "user_ids": ds.user_ids.tolist(),
        "item_ids_by_position": remapped.item_ids.tolist(),
    }
    Path(str(path) + ".idx").write_text(json.dumps(index), encoding="utf-8")
    return BlockedDataset.open(path)


def _read_header(fh, path) -> dict:
    raw = fh.read(_FILE_HEADER.size)
    if len(raw) != _FILE_HEADER.size:
        raise DataError(f"{path}: truncated header")
    (magic, version, _flags, n_users, n_items, n_triples, r_min, r_max,
     users_per_block, n_blocks, n_cutoffs, _pad) = _FILE_HEADER.unpack(raw)
    if magic != _FILE_MAGIC:
        raise DataError(f"{path}: not a block file (bad magic)")
    if version != _FILE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    bounds = np.frombuffer(fh.read(4 * n_cutoffs), dtype="<u4")
    order = np.frombuffer(fh.read(4 * n_items), dtype="<u4")
    if len(bounds) != n_cutoffs or len(order) != n_items:
        raise DataError(f"{path}: truncated tier table")
    return {
        "n_users": n_users,
        "n_items": n_items,
        "n_triples": n_triples,
        "r_min": r_min,
        "r_max": r_max,
        "users_per_block": users_per_block,
        "n_blocks": n_blocks,
        "bounds": tuple(int(b) for b in bounds),
        "order": order.astype(np.int32),
    }


def read_blocks(path) -> Iterator[UserBlock]:
    """Stream UserBlocks from a block file, verifying checksums."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"block file not found: {path}")
    with path.open("rb") as fh:
        meta = _read_header(fh, path)
        for _ in range(meta["n_blocks"]):
            raw = fh.read(_BLOCK_HEADER.size)
            if len(raw) != _BLOCK_HEADER.size:
                raise DataError(f"{path}: truncated block header")
            _n_users, n_triples, crc = _BLOCK_HEADER.unpack(raw)
            payload = fh.read(n_triples * TRIPLE_DTYPE.itemsize)
            if len(payload) != n_triples * TRIPLE_DTYPE.itemsize:
                raise DataError(f"{path}: truncated block payload")
            if (zlib.crc32(payload) & 0xFFFFFFFF) != crc:
                raise DataError(f"{path}: block checksum mismatch (corrupt file)")
            triples = np.frombuffer(payload, dtype=TRIPLE_DTYPE)
            yield UserBlock(
                triples["u"].astype(np.int32),
                triples["i"].astype(np.int32),
                np.ascontiguousarray(triples["r"]),
            )


class BlockedDataset:
    """Block source for training: file-backed or in-memory.

    Exposes the metadata solvers need (sizes, rating range, tier bounds) and
    ``iter_blocks()``, which yields immutable UserBlocks in file order.
    """

    def __init__(self, *, path=None, blocks=None, meta: dict):
        self._path = Path(path) if path is not None else None
        self._blocks = blocks
        self.n_users = int(meta["n_users"])
        self.n_items = int(meta["n_items"])
        self.n_triples = int(meta["n_triples"])
        self.r_min = float(meta["r_min"])
        self.r_max = float(meta["r_max"])
        self.bounds = tuple(meta["bounds"])
        self.user_ids = np.asarray(meta.get("user_ids", np.arange(self.n_users)), dtype=np.int64)
        self.item_ids_by_position = np.asarray(
            meta.get("item_ids_by_position", np.arange(self.n_items)), dtype=np.int64
        )

    @classmethod
    def open(cls, path) -> "BlockedDataset":
        path = Path(path)
        if not path.exists():
            raise DataError(f"block file not found: {path}")
        with path.open("rb") as fh:
            meta = _read_header(fh, path)
        idx_path = Path(str(path) + ".idx")
        if idx_path.exists():
            idx = json.loads(idx_path.read_text(encoding="utf-8"))
            meta["user_ids"] = idx.get("user_ids", None)
            meta["item_ids_by_position"] = idx.get("item_ids_by_position", None)
            if meta["user_ids"] is None:
                del meta["user_ids"]
            if meta["item_ids_by_position"] is None:
                del meta["item_ids_by_position"]
        return cls(path=path, meta=meta)

    @classmethod
    def build(
        cls,
        ds: RatingDataset,
        plan: TierPlan | None = None,
        users_per_block: int = 1000,
    ) -> "BlockedDataset":
        """In-memory blocked view of a dataset (no file round trip)."""
        if plan is None:
            plan = plan_tiers(ds, cutoffs=(ds.n_items,))
        remapped = ds.remap_items(plan)
        blocks = [
            _gather_block(remapped, rng)
            for rng in _iter_block_user_ranges(ds.n_users, users_per_block)
        ]
        meta = {
            "n_users": ds.n_users,
            "n_items": ds.n_items,
            "n_triples": ds.n_triples,
            "r_min": ds.r_min,
            "r_max": ds.r_max,
            "bounds": plan.bounds,
            "user_ids": ds.user_ids,
            "item_ids_by_position": remapped.item_ids,
        }
        return cls(blocks=blocks, meta=meta)

    def iter_blocks(self) -> Iterator[UserBlock]:
        if self._blocks is not None:
            return iter(self._blocks)
        return read_blocks(self._path)

    def to_dataset(self) -> RatingDataset:
        """Materialize all blocks as one dataset (item ids stay in tier space)."""
        us, its, rs = [], [], []
        for b in self.iter_blocks():
            us.append(b.users)
            its.append(b.items)
            rs.append(b.ratings)
        return RatingDataset(
            np.concatenate(us) if us else np.zeros(0, np.int32),
            np.concatenate(its) if its else np.zeros(0, np.int32),
            np.concatenate(rs) if rs else np.zeros(0, np.float32),
            n_users=self.n_users,
            n_items=self.n_items,
            r_min=self.r_min,
            r_max=self.r_max,
            user_ids=self.user_ids,
            item_ids=self.item_ids_by_position,
        )
