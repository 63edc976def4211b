"""Factor matrices, biases, hyperparameters, prediction, and evaluation.

The in-memory model is float64 row-major per entity (one user's or item's
factors are contiguous). Snapshots are written as float32 per the format in
README.md; loading casts back to float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import BlockedDataset, RatingDataset
from .errors import DataError
from .rng import substream

_SNAP_MAGIC = b"DPMFMDL1"
_SNAP_VERSION = 1
_FLAG_BIAS = 1
# magic, version, flags, n_users, n_items, k, pad
_SNAP_HEADER = struct.Struct("<8sII QQ II")


@dataclass
class HyperParams:
    """Rating precision and diagonal factor precisions, with Gamma prior."""

    lambda_r: float
    Lambda_u: np.ndarray  # (k,)
    Lambda_v: np.ndarray  # (k,)
    alpha: float = 1.0
    beta: float = 100.0

    @classmethod
    def from_ridge(cls, lam: float, k: int, alpha: float = 1.0, beta: float = 100.0,
                   lambda_r: float = 1.0) -> "HyperParams":
        """Diagonal precisions Lambda = lam * I, matching a ridge penalty."""
        return cls(
            lambda_r=float(lambda_r),
            Lambda_u=np.full(k, float(lam)),
            Lambda_v=np.full(k, float(lam)),
            alpha=float(alpha),
            beta=float(beta),
        )

    def scaled(self, c: float) -> "HyperParams":
        """Fold a global objective multiplier into the precisions."""
        return HyperParams(
            lambda_r=self.lambda_r * c,
            Lambda_u=self.Lambda_u * c,
            Lambda_v=self.Lambda_v * c,
            alpha=self.alpha,
            beta=self.beta,
        )


class FactorModel:
    """User/item factors plus optional biases.

    Rows may be updated concurrently without locks during training (racy row
    writes are accepted); evaluation assumes a quiesced model.
    """

    def __init__(self, U: np.ndarray, V: np.ndarray, bias: bool = False,
                 b_u=None, b_m=None, b_0: float = 0.0):
        self.U = np.ascontiguousarray(U, dtype=np.float64)
        self.V = np.ascontiguousarray(V, dtype=np.float64)
        if self.U.shape[1] != self.V.shape[1]:
            raise ValueError("U and V must share the latent dimension")
        self.bias = bool(bias)
        n_users, n_items = self.U.shape[0], self.V.shape[0]
        self.b_u = np.zeros(n_users) if b_u is None else np.ascontiguousarray(b_u, np.float64)
        self.b_m = np.zeros(n_items) if b_m is None else np.ascontiguousarray(b_m, np.float64)
        self.b_0 = np.array([float(b_0)])  # 1-element array so kernels can update it

    @property
    def n_users(self) -> int:
        return self.U.shape[0]

    @property
    def n_items(self) -> int:
        return self.V.shape[0]

    @property
    def k(self) -> int:
        return self.U.shape[1]

    def copy(self) -> "FactorModel":
        m = FactorModel(self.U.copy(), self.V.copy(), self.bias,
                        self.b_u.copy(), self.b_m.copy(), float(self.b_0[0]))
        return m

    def finite(self) -> bool:
        return bool(
            np.isfinite(self.U).all()
            and np.isfinite(self.V).all()
            and np.isfinite(self.b_u).all()
            and np.isfinite(self.b_m).all()
            and np.isfinite(self.b_0).all()
        )


def init_model(n_users: int, n_items: int, k: int, scale: float = 0.01,
               seed: int = 0, bias: bool = False) -> FactorModel:
    """Factors drawn i.i.d. N(0, scale^2); biases start at zero."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = substream(seed, "init")
    U = rng.standard_normal((n_users, k)) * scale
    V = rng.standard_normal((n_items, k)) * scale
    return FactorModel(U, V, bias=bias)


def predict(m: FactorModel, i: int, j: int) -> float:
    """Unclipped score <u_i, v_j> (+ biases when enabled)."""
    if not (0 <= i < m.n_users and 0 <= j < m.n_items):
        raise IndexError(f"index out of range: user {i}, item {j}")
    s = float(np.dot(m.U[i], m.V[j]))
    if m.bias:
        s += float(m.b_u[i] + m.b_m[j] + m.b_0[0])
    return s


def predict_many(m: FactorModel, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    s = np.einsum("ij,ij->i", m.U[users], m.V[items])
    if m.bias:
        s = s + m.b_u[users] + m.b_m[items] + m.b_0[0]
    return s


def objective(m: FactorModel, ds: RatingDataset, lam: float = 0.0,
              weights: np.ndarray | None = None) -> float:
    """Weighted squared error plus Frobenius penalty lam(|U|^2 + |V|^2)."""
    e = ds.ratings.astype(np.float64) - predict_many(m, ds.users, ds.items)
    if weights is None:
        sq = float(np.dot(e, e))
    else:
        w = np.asarray(weights, dtype=np.float64)[ds.users]
        sq = float(np.dot(w * e, e))
    reg = lam * (float(np.vdot(m.U, m.U)) + float(np.vdot(m.V, m.V)))
    return sq + reg


def rmse(m: FactorModel, ds: RatingDataset, clip: bool = False) -> float:
    """Root mean squared prediction error; optionally clipped to the range."""
    if ds.n_triples == 0:
        return float("nan")
    pred = predict_many(m, ds.users, ds.items)
    if clip:
        pred = np.clip(pred, ds.r_min, ds.r_max)
    e = ds.ratings.astype(np.float64) - pred
    return float(np.sqrt(np.mean(e * e)))


def objective_blocked(m: FactorModel, blocked: BlockedDataset, lam: float = 0.0,
                      weights: np.ndarray | None = None) -> float:
    """Objective streamed over a blocked dataset."""
    sq = 0.0
    for b in blocked.iter_blocks():
        e = b.ratings.astype(np.float64) - predict_many(m, b.users, b.items)
        if weights is None:
            sq += float(np.dot(e, e))
        else:
            w = np.asarray(weights, dtype=np.float64)[b.users]
            sq += float(np.dot(w * e, e))
    reg = lam * (float(np.vdot(m.U, m.U)) + float(np.vdot(m.V, m.V)))
    return sq + reg


def save_snapshot(m: FactorModel, path) -> None:
    """Write the versioned float32 snapshot (see README for the layout)."""
    path = Path(path)
    flags = _FLAG_BIAS if m.bias else 0
    with path.open("wb") as fh:
        fh.write(_SNAP_HEADER.pack(_SNAP_MAGIC, _SNAP_VERSION, flags,
                                   m.n_users, m.n_items, m.k, 0))
        fh.write(m.U.astype("<f4").tobytes())
        fh.write(m.V.astype("<f4").tobytes())
        if m.bias:
            fh.write(m.b_u.astype("<f4").tobytes())
            fh.write(m.b_m.astype("<f4").tobytes())
            fh.write(np.asarray(m.b_0, dtype="<f4").tobytes())


def load_snapshot(path) -> FactorModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"snapshot not found: {path}")
    with path.open("rb") as fh:
        raw = fh.read(_SNAP_HEADER.size)
        if len(raw) != _SNAP_HEADER.size:
            raise DataError(f"{path}: truncated snapshot header")
        magic, version, flags, n_users, n_items, k, _ = _SNAP_HEADER.unpack(raw)
        if magic != _SNAP_MAGIC:
            raise DataError(f"{path}: not a model snapshot (bad magic)")
        if version != _SNAP_VERSION:
            raise DataError(f"{path}: unsupported snapshot version {version}")
        want = (n_users + n_items) * k * 4
        body = fh.read(want)
        if len(body) != want:
            raise DataError(f"{path}: truncated snapshot body")
        U = np.frombuffer(body[: n_users * k * 4], dtype="<f4").reshape(n_users, k)
        V = np.frombuffer(body[n_users * k * 4:], dtype="<f4").reshape(n_items, k)
        bias = bool(flags & _FLAG_BIAS)
        b_u = b_m = None
        b_0 = 0.0
        if bias:
            raw = fh.read((n_users + n_items + 1) * 4)
            if len(raw) != (n_users + n_items + 1) * 4:
                raise DataError(f"{path}: truncated bias section")
            b_u = np.frombuffer(raw[: n_users * 4], dtype="<f4").astype(np.float64)
            b_m = np.frombuffer(raw[n_users * 4: -4], dtype="<f4").astype(np.float64)
            b_0 = float(np.frombuffer(raw[-4:], dtype="<f4")[0])
    return FactorModel(U.astype(np.float64), V.astype(np.float64), bias, b_u, b_m, b_0)


def save_item_factors(V: np.ndarray, path) -> None:
    """Release file: snapshot format with an empty user section."""
    m = FactorModel(np.zeros((0, V.shape[1])), V, bias=False)
    save_snapshot(m, path)


def load_item_factors(path) -> np.ndarray:
    return load_snapshot(path).V
