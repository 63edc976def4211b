"""Throughput benchmark: dimensions x workers x layout x backend.

Reports ratings/sec for short training runs on synthetic power-law data; no
absolute performance assertions anywhere. The tiered layout uses the
popularity plan; "shuffled" relabels items randomly with a single tier, which
removes the cache-friendly ordering while doing identical work.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from . import backends
from .data import BlockedDataset, plan_tiers, random_plan
from .model import init_model
from .sgd import SgdConfig, train
from .synth import make_power_law


@dataclass
class BenchRow:
    dim: int
    workers: int
    layout: str
    backend: str
    seconds: float
    ratings_per_sec: float
    ratings_processed: int


def resolve_backends(spec: str | None) -> list[str]:
    if spec in (None, "", "auto"):
        return ["compiled"] if backends.compiled_available() else ["python"]
    if spec == "both":
        out = ["compiled", "python"] if backends.compiled_available() else ["python"]
        return out
    names = [s.strip() for s in spec.split(",") if s.strip()]
    for n in names:
        if n not in ("compiled", "python"):
            raise ValueError(f"unknown backend {n!r}")
        if n == "compiled" and not backends.compiled_available():
            raise ValueError("compiled backend requested but not built")
    return names


def run_bench(dims=(16,), workers=(1,), layouts=("tiered",), backend_spec=None,
              n_users=2000, n_items=1500, n_ratings=100_000, epochs=2,
              cutoffs=(500,), users_per_block=1000, seed=0,
              eta0=0.01, lam=1e-3) -> tuple[list[BenchRow], dict]:
    ds = make_power_law(n_users=n_users, n_items=n_items, n_ratings=n_ratings,
                        seed=seed)
    eff_cutoffs = tuple(c for c in cutoffs if c < ds.n_items) or (ds.n_items,)
    plans = {}
    coverage = {}
    for layout in layouts:
        if layout == "tiered":
            plan = plan_tiers(ds, eff_cutoffs)
        elif layout == "shuffled":
            plan = random_plan(ds, seed=seed)
        else:
            raise ValueError(f"unknown layout {layout!r}")
        plans[layout] = BlockedDataset.build(ds, plan, users_per_block)
        coverage[layout] = plan.coverage

    rows: list[BenchRow] = []
    for layout in layouts:
        blocked = plans[layout]
        for backend in resolve_backends(backend_spec):
            for dim in dims:
                for w in workers:
                    model = init_model(ds.n_users, ds.n_items, int(dim),
                                       scale=0.1, seed=seed)
                    cfg = SgdConfig(eta0=eta0, gamma=0.0, lam=lam, epochs=epochs,
                                    workers=int(w), backend=backend, seed=seed)
                    t0 = time.perf_counter()
                    stats = train(model, blocked, cfg)
                    secs = time.perf_counter() - t0
                    processed = ds.n_triples * len(stats)
                    rows.append(BenchRow(int(dim), int(w), layout, backend, secs,
                                         processed / max(secs, 1e-9), processed))
    info = {"n_ratings": ds.n_triples, "coverage": coverage,
            "cutoffs": eff_cutoffs}
    return rows, info


def format_rows(rows: list[BenchRow]) -> str:
    header = f"{'dim':>6} {'workers':>7} {'layout':>9} {'backend':>9} {'seconds':>9} {'ratings/s':>12}"
    lines = [header]
    for r in rows:
        lines.append(f"{r.dim:>6} {r.workers:>7} {r.layout:>9} {r.backend:>9} "
                     f"{r.seconds:>9.3f} {r.ratings_per_sec:>12.0f}")
    return "\n".join(lines)
