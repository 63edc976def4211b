"""Command-line pipeline: preprocess, train, dp-release, recommend, evaluate, bench.

Exit codes: 0 success, 1 usage error, 2 data error, 3 divergence or
retry-limit failure. Option precedence: CLI flag > config file > built-in
default ("key=value" lines, keys spelled like the flags with dashes replaced
by underscores).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import backends
from .bench import format_rows, run_bench
from .data import BlockedDataset, ingest, plan_tiers, write_blocks
from .errors import DataError, DivergenceError, DpmfError, RetryLimitError
from .model import (
    init_model,
    load_item_factors,
    save_item_factors,
    save_snapshot,
)
from .preprocess import (
    compute_budget,
    compute_weights,
    load_budget_report,
    trim,
    write_budget_report,
)
from .privacy import release_blocked
from .recommend import evaluate_local, local_fit, recommend_top_n
from .sgd import SgdConfig, train
from .sgld import SgldConfig, sample


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file not found: {p}")
    out = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{p} line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _merged(args: argparse.Namespace, config: dict, key: str, default, cast):
    """CLI flag > config file > default."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    if key in config:
        raw = config[key]
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return cast(raw)
    return default


def _effective_cutoffs(cutoffs, n_items: int) -> tuple[int, ...]:
    eff = tuple(c for c in cutoffs if c < n_items)
    return eff or (n_items,)


def _write_log(path, rows, fields) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(fields) + "\n")
        for r in rows:
            fh.write("\t".join(_fmt(getattr(r, f)) for f in fields) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _align_external(raw, blocked: BlockedDataset):
    """Map a dataset in original-id space onto a blocked dataset's dense/tier
    spaces; unknown users or items are dropped (count reported)."""
    user_sorted = np.sort(blocked.user_ids)
    user_pos = np.argsort(blocked.user_ids)
    ui = np.searchsorted(user_sorted, raw.user_ids[raw.users])
    ok_u = (ui < len(user_sorted)) & (user_sorted[np.minimum(ui, len(user_sorted) - 1)] == raw.user_ids[raw.users])
    item_sorted_idx = np.argsort(blocked.item_ids_by_position)
    item_sorted = blocked.item_ids_by_position[item_sorted_idx]
    ii = np.searchsorted(item_sorted, raw.item_ids[raw.items])
    ok_i = (ii < len(item_sorted)) & (item_sorted[np.minimum(ii, len(item_sorted) - 1)] == raw.item_ids[raw.items])
    keep = ok_u & ok_i
    dropped = int((~keep).sum())
    users = user_pos[ui[keep]].astype(np.int32)
    items = item_sorted_idx[ii[keep]].astype(np.int32)
    from .data import RatingDataset

    aligned = RatingDataset(users, items, raw.ratings[keep], blocked.n_users,
                            blocked.n_items, blocked.r_min, blocked.r_max,
                            user_ids=blocked.user_ids,
                            item_ids=blocked.item_ids_by_position)
    return aligned, dropped


def _load_valid(path, blocked, delimiter=","):
    if path is None:
        return None
    raw = ingest(path, delimiter=delimiter, r_min=blocked.r_min, r_max=blocked.r_max)
    aligned, dropped = _align_external(raw, blocked)
    if dropped:
        print(f"validation: dropped {dropped} ratings with unknown user/item ids")
    return aligned


def cmd_preprocess(args) -> int:
    span = None
    if args.bound_span not in (None, "auto"):
        span = args.r_max if args.bound_span == "max" else float(args.bound_span)
    ds = ingest(args.input, delimiter=args.delimiter,
                columns=tuple(args.columns.split(",")),
                r_min=args.r_min, r_max=args.r_max,
                netflix_format=args.netflix)
    trimmed = trim(ds, args.tau, seed=args.seed)
    weights = compute_weights(trimmed, args.tau, args.kappa, args.rho)
    budget = compute_budget(trimmed, args.tau, args.kappa, args.epsilon,
                            weights, args.rho, bound_span=span)
    cutoffs = _effective_cutoffs(args.tiers, trimmed.n_items)
    plan = plan_tiers(trimmed, cutoffs)
    out = Path(args.out_prefix)
    out.parent.mkdir(parents=True, exist_ok=True)
    blocked = write_blocks(trimmed, plan, str(out) + ".blocks",
                           users_per_block=args.block_users,
                           shuffle_users=args.shuffle_users, seed=args.seed)
    write_budget_report(budget, trimmed, str(out) + ".budget.json")
    cov = ", ".join(f"{c:.3f}" for c in plan.coverage)
    print(f"wrote {out}.blocks ({blocked.n_triples} ratings, "
          f"{blocked.n_users} users, {blocked.n_items} items)")
    print(f"tiers at {cutoffs}: coverage [{cov}]")
    print(f"B = {budget.B:g} (tau={args.tau}, kappa={args.kappa}, rho={args.rho}); "
          f"eps = {args.epsilon:g}, eps/rating = {budget.eps_rating:g}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    blocked = BlockedDataset.open(args.data)
    valid = _load_valid(args.valid, blocked)
    k = _merged(args, config, "k", 16, int)
    init_scale = _merged(args, config, "init_scale", 0.1, float)
    seed = _merged(args, config, "seed", 0, int)
    epochs = _merged(args, config, "epochs", 15, int)
    workers = _merged(args, config, "workers", 1, int)
    backend = _merged(args, config, "backend", None, str)
    lam = _merged(args, config, "lam", 0.005, float)
    gamma_default = 0.25 if args.solver == "sgd" else 0.6
    gamma = _merged(args, config, "gamma", gamma_default, float)
    model = init_model(blocked.n_users, blocked.n_items, k, init_scale,
                       seed=seed, bias=bool(args.bias))

    if args.solver == "sgd":
        cfg = SgdConfig(
            eta0=_merged(args, config, "eta0", 0.05, float),
            gamma=gamma, lam=lam, epochs=epochs, workers=workers,
            prefetch_stride=_merged(args, config, "prefetch_stride", 2, int),
            snapshot_every_blocks=_merged(args, config, "snapshot_every", 0, int),
            snapshot_path=args.snapshot, seed=seed, backend=backend,
        )
        stats = train(model, blocked, cfg, valid=valid)
        fields = ("epoch", "seconds", "objective", "rmse", "throughput")
    else:
        if model.bias:
            raise DataError("--bias is only supported by the sgd solver")
        budget = load_budget_report(args.budget) if args.budget else None
        if budget is not None and args.epsilon is not None:
            budget = budget.with_epsilon(args.epsilon)
        cfg = SgldConfig(
            eta0=_merged(args, config, "eta0", 2e-6, float),
            gamma=gamma,
            zeta=_merged(args, config, "zeta", 0.1, float),
            epochs=epochs, workers=workers,
            table_size=_merged(args, config, "table_size", 100_000, int),
            segment_len=_merged(args, config, "segment_len", 64, int),
            alpha=_merged(args, config, "alpha", 1.0, float),
            beta=_merged(args, config, "beta", 100.0, float),
            lam=lam,
            lambda_r=_merged(args, config, "lambda_r", 1.0, float),
            fix_hyperparams=bool(args.fix_hyperparams),
            noise=_merged(args, config, "noise", "table", str),
            seed=seed,
            prefetch_stride=_merged(args, config, "prefetch_stride", 2, int),
            snapshot_every_blocks=_merged(args, config, "snapshot_every", 0, int),
            snapshot_path=args.snapshot, backend=backend,
        )
        stats = sample(model, blocked, budget, cfg, valid=valid)
        fields = ("epoch", "seconds", "objective", "rmse",
                  "lambda_u_mean", "lambda_v_mean")

    save_snapshot(model, args.out)
    if args.log:
        _write_log(args.log, stats, fields)
    last = stats[-1] if stats else None
    if last is not None:
        print(f"{args.solver}: {len(stats)} epochs, objective {last.objective:.6g}"
              + (f", valid rmse {last.rmse:.4f}" if valid is not None else ""))
    print(f"model -> {args.out} (backend: {backends.active_name(backend)})")
    return 0


def cmd_dp_release(args) -> int:
    config = _load_config(args.config)
    blocked = BlockedDataset.open(args.data)
    budget = load_budget_report(args.budget).with_epsilon(args.epsilon)
    valid = _load_valid(args.valid, blocked)
    cfg = SgldConfig(
        eta0=_merged(args, config, "eta0", 2e-6, float),
        gamma=_merged(args, config, "gamma", 0.6, float),
        zeta=_merged(args, config, "zeta", 0.1, float),
        epochs=_merged(args, config, "epochs", 30, int),
        workers=_merged(args, config, "workers", 1, int),
        table_size=_merged(args, config, "table_size", 100_000, int),
        segment_len=_merged(args, config, "segment_len", 64, int),
        lam=_merged(args, config, "lam", 0.005, float),
        lambda_r=_merged(args, config, "lambda_r", 1.0, float),
        fix_hyperparams=True,
        noise=_merged(args, config, "noise", "table", str),
        seed=_merged(args, config, "seed", 0, int),
        backend=_merged(args, config, "backend", None, str),
    )
    result = release_blocked(
        blocked, budget, k=_merged(args, config, "k", 16, int),
        init_scale=_merged(args, config, "init_scale", 0.1, float),
        cfg=cfg, retry_limit=args.retry_limit, check_mode=args.check,
        valid=valid,
    )
    save_item_factors(result.item_factors, args.out)
    meta = {
        "k": int(result.item_factors.shape[1]),
        "n_items": int(result.item_factors.shape[0]),
        "item_ids": [int(x) for x in result.item_ids],
        "r_min": blocked.r_min,
        "r_max": blocked.r_max,
    }
    Path(str(args.out) + ".items.json").write_text(json.dumps(meta), encoding="utf-8")
    result.report.save(args.report)
    if args.log:
        _write_log(args.log, result.trace,
                   ("epoch", "seconds", "objective", "rmse",
                    "lambda_u_mean", "lambda_v_mean"))
    print(f"released item factors -> {args.out} "
          f"(retries: {result.report.retries}, check: {result.report.constraint_check})")
    print(f"eps = {result.report.epsilon:g}, eps/rating = {result.report.eps_rating:g}, "
          f"B = {result.report.B:g}")
    return 0


def _load_release(path):
    V = load_item_factors(path)
    meta_path = Path(str(path) + ".items.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        item_ids = np.asarray(meta["item_ids"], dtype=np.int64)
        r_min, r_max = float(meta.get("r_min", 1.0)), float(meta.get("r_max", 5.0))
    else:
        item_ids = np.arange(V.shape[0], dtype=np.int64)
        r_min, r_max = 1.0, 5.0
    return V, item_ids, r_min, r_max


def cmd_recommend(args) -> int:
    V, item_ids, r_min, r_max = _load_release(args.item_factors)
    raw = ingest(args.ratings, delimiter=args.delimiter, r_min=r_min, r_max=r_max)
    pos_of = {int(oid): p for p, oid in enumerate(item_ids)}
    lines = []
    for u in range(raw.n_users):
        sl = raw.user_slice(u)
        items = [pos_of[int(raw.item_ids[i])] for i in raw.items[sl]
                 if int(raw.item_ids[i]) in pos_of]
        ratings = [float(r) for i, r in zip(raw.items[sl], raw.ratings[sl])
                   if int(raw.item_ids[i]) in pos_of]
        vec = local_fit(V, items, ratings, args.lam)
        top = recommend_top_n(vec, V, exclude=items, n=args.n)
        for rank, (pos, score) in enumerate(top, 1):
            lines.append(f"{raw.user_ids[u]}\t{rank}\t{item_ids[pos]}\t{score:.6g}")
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {len(lines)} recommendations -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_evaluate(args) -> int:
    V, item_ids, r_min, r_max = _load_release(args.item_factors)
    raw_train = ingest(args.train, delimiter=args.delimiter, r_min=r_min, r_max=r_max)
    raw_test = ingest(args.test, delimiter=args.delimiter, r_min=r_min, r_max=r_max)

    # shared user universe across the two files
    all_users = np.union1d(raw_train.user_ids, raw_test.user_ids)
    pos_of = {int(oid): p for p, oid in enumerate(item_ids)}

    def remap(raw):
        from .data import RatingDataset

        users = np.searchsorted(all_users, raw.user_ids[raw.users])
        keep = np.array([int(raw.item_ids[i]) in pos_of for i in raw.items])
        items = np.array([pos_of.get(int(raw.item_ids[i]), 0) for i in raw.items])
        return RatingDataset(users[keep].astype(np.int32),
                             items[keep].astype(np.int32), raw.ratings[keep],
                             len(all_users), V.shape[0], r_min, r_max,
                             user_ids=all_users)

    train_ds = remap(raw_train)
    test_ds = remap(raw_test)
    score = evaluate_local(V, train_ds, test_ds, args.lam)
    print(f"local recommender rmse: {score:.6f} "
          f"({test_ds.n_triples} held-out ratings, lam={args.lam:g})")
    return 0


def cmd_bench(args) -> int:
    rows, info = run_bench(
        dims=args.dims, workers=args.workers,
        layouts=tuple(args.layouts.split(",")), backend_spec=args.backends,
        n_users=args.users, n_items=args.items, n_ratings=args.ratings,
        epochs=args.epochs, seed=args.seed,
    )
    cov = {lay: [round(c, 4) for c in cv] for lay, cv in info["coverage"].items()}
    print(f"data: {info['n_ratings']} ratings; tier cutoffs {info['cutoffs']}; "
          f"coverage {cov}")
    print(format_rows(rows))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("dim,workers,layout,backend,seconds,ratings_per_sec,ratings\n")
            for r in rows:
                fh.write(f"{r.dim},{r.workers},{r.layout},{r.backend},"
                         f"{r.seconds:.6f},{r.ratings_per_sec:.1f},{r.ratings_processed}\n")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="dpmf", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    pp = sub.add_parser("preprocess", help="ingest, trim, weight, tier, and block")
    pp.add_argument("input")
    pp.add_argument("out_prefix")
    pp.add_argument("--delimiter", default=",")
    pp.add_argument("--columns", default="user,item,rating")
    pp.add_argument("--netflix", action="store_true",
                    help="input uses the per-movie header format")
    pp.add_argument("--r-min", type=float, default=1.0)
    pp.add_argument("--r-max", type=float, default=5.0)
    pp.add_argument("--tau", type=int, default=100)
    pp.add_argument("--kappa", type=float, default=1.0)
    pp.add_argument("--rho", type=float, default=1.0)
    pp.add_argument("--epsilon", type=float, default=1.0)
    pp.add_argument("--bound-span", default="auto",
                    help='"auto" (r_max-r_min), "max" (r_max), or a number')
    pp.add_argument("--tiers", type=_parse_int_list, default=(500, 4500))
    pp.add_argument("--block-users", type=int, default=1000)
    pp.add_argument("--shuffle-users", action="store_true")
    pp.add_argument("--seed", type=int, default=0)
    pp.set_defaults(func=cmd_preprocess)

    tr = sub.add_parser("train", help="train a model (sgd or sgld)")
    tr.add_argument("--data", required=True, help="path to the .blocks file")
    tr.add_argument("--solver", choices=("sgd", "sgld"), default="sgd")
    tr.add_argument("--config", help="key=value config file")
    tr.add_argument("--out", required=True, help="model snapshot path")
    tr.add_argument("--log", help="epoch log (TSV)")
    tr.add_argument("--valid", help="validation ratings CSV")
    tr.add_argument("--budget", help="budget report (sgld: weights + scaling)")
    tr.add_argument("--epsilon", type=float, help="override the budget's epsilon")
    tr.add_argument("--bias", action="store_true", help="enable bias terms (sgd)")
    tr.add_argument("--fix-hyperparams", action="store_true")
    tr.add_argument("--snapshot", help="periodic snapshot path")
    for flag, typ in (("--k", int), ("--init-scale", float), ("--seed", int),
                      ("--epochs", int), ("--workers", int), ("--eta0", float),
                      ("--gamma", float), ("--lam", float), ("--zeta", float),
                      ("--table-size", int), ("--segment-len", int),
                      ("--alpha", float), ("--beta", float),
                      ("--lambda-r", float), ("--prefetch-stride", int),
                      ("--snapshot-every", int)):
        tr.add_argument(flag, type=typ)
    tr.add_argument("--noise", choices=("table", "exact"))
    tr.add_argument("--backend", choices=("auto", "compiled", "python"))
    tr.set_defaults(func=cmd_train)

    dp = sub.add_parser("dp-release", help="run the private pipeline and release V")
    dp.add_argument("--data", required=True)
    dp.add_argument("--budget", required=True)
    dp.add_argument("--epsilon", type=float, required=True)
    dp.add_argument("--config")
    dp.add_argument("--out", required=True)
    dp.add_argument("--report", required=True)
    dp.add_argument("--log")
    dp.add_argument("--valid")
    dp.add_argument("--retry-limit", type=int, default=10)
    dp.add_argument("--check", choices=("auto", "exhaustive", "sampled"),
                    default="auto")
    for flag, typ in (("--k", int), ("--init-scale", float), ("--seed", int),
                      ("--epochs", int), ("--workers", int), ("--eta0", float),
                      ("--gamma", float), ("--lam", float), ("--zeta", float),
                      ("--table-size", int), ("--segment-len", int),
                      ("--lambda-r", float)):
        dp.add_argument(flag, type=typ)
    dp.add_argument("--noise", choices=("table", "exact"))
    dp.add_argument("--backend", choices=("auto", "compiled", "python"))
    dp.set_defaults(func=cmd_dp_release)

    rc = sub.add_parser("recommend", help="top-N from released item factors")
    rc.add_argument("--item-factors", required=True)
    rc.add_argument("--ratings", required=True, help="user,item,rating CSV")
    rc.add_argument("--n", type=int, default=10)
    rc.add_argument("--lam", type=float, default=0.01)
    rc.add_argument("--delimiter", default=",")
    rc.add_argument("--out")
    rc.set_defaults(func=cmd_recommend)

    ev = sub.add_parser("evaluate", help="local-fit RMSE on a train/test split")
    ev.add_argument("--item-factors", required=True)
    ev.add_argument("--train", required=True)
    ev.add_argument("--test", required=True)
    ev.add_argument("--lam", type=float, default=0.01)
    ev.add_argument("--delimiter", default=",")
    ev.set_defaults(func=cmd_evaluate)

    be = sub.add_parser("bench", help="throughput benchmark")
    be.add_argument("--dims", type=_parse_int_list, default=(16,))
    be.add_argument("--workers", type=_parse_int_list, default=(1,))
    be.add_argument("--layouts", default="tiered")
    be.add_argument("--backends", default="auto",
                    help='"auto", "both", or comma list of compiled,python')
    be.add_argument("--users", type=int, default=2000)
    be.add_argument("--items", type=int, default=1500)
    be.add_argument("--ratings", type=int, default=100_000)
    be.add_argument("--epochs", type=int, default=2)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--out", help="CSV output path")
    be.set_defaults(func=cmd_bench)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except DataError as exc:
        print(f"dpmf: data error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, RetryLimitError) as exc:
        print(f"dpmf: {exc}", file=sys.stderr)
        return 3
    except DpmfError as exc:
        print(f"dpmf: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
