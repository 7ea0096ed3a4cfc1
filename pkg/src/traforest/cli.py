"""Command-line interface: ``traforest {ingest,fit,predict,evaluate,importance,bench}``.

Survival CSV files carry the response in ``lower``/``upper`` columns:
exact times have lower == upper, right-censored rows leave ``upper`` empty
or write ``inf``, left-censored rows leave ``lower`` empty or write ``0``,
and interval-censored rows have lower < upper.  An optional ``treatment``
column holds 0/1; all other columns are numeric covariates.
"""
import argparse
import csv
import logging
import math
import os
import sys

import numpy as np

from . import data as dio
from .forest import DatasetTooSmallError, Forest, ForestConfig, grow_forest
from .optim import FitConfig
from .simulate import EFFECTS, Scenario, benchmark_csv, default_forest_config, run_benchmark
from .tree import InfeasibleMethodError, SplitSpec, TreeConfig

log = logging.getLogger("traforest")


class CliError(Exception):
    pass


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _mtry(text):
    if text in ("sqrt", "all"):
        return text
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("mtry must be an integer, 'sqrt' or 'all'") from None
    if v < 1:
        raise argparse.ArgumentTypeError("mtry must be >= 1")
    return v


def _grid(text):
    try:
        g = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be comma-separated numbers, got {text!r}") from None
    if not g or any(not v > 0 for v in g):
        raise argparse.ArgumentTypeError("grid points must be positive")
    return g


def _threads():
    try:
        return max(1, int(os.environ.get("TRAFOREST_THREADS", "1")))
    except ValueError:
        return 1


def _open_out(path):
    return open(path, "w", newline="") if path and path != "-" else sys.stdout


def _close_out(fh):
    if fh is not sys.stdout:
        fh.close()


# ---------------------------------------------------------------------------

def cmd_ingest(args):
    with open(args.input, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CliError(f"{args.input}: empty file, header required")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    for k, r in enumerate(body, start=1):
        if len(r) != len(header):
            raise CliError(f"{args.input}: row {k} has {len(r)} fields, expected {len(header)}")
    cats = [c for c in (args.categorical or "").split(",") if c]
    out_header, out_rows = dio.one_hot(header, body, cats)
    dio.parse_rows(out_header, out_rows, source=args.input)  # validate the result
    fh = _open_out(args.out)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(out_header)
    w.writerows(out_rows)
    _close_out(fh)


def _spec_from_args(parser, args):
    try:
        return SplitSpec.parse(args.method, args.order)
    except InfeasibleMethodError as e:
        parser.error(f"--method {args.method}: {e}")
    except ValueError as e:
        parser.error(str(e))


def cmd_fit(args, parser):
    spec = _spec_from_args(parser, args)
    if args.trees < 1:
        raise CliError("--trees must be >= 1")
    if not 0 < args.subsample <= 1:
        raise CliError("--subsample must lie in (0, 1]")
    data = dio.read_csv(args.data, require_treatment=spec.predictive)
    tree = TreeConfig(max_depth=args.max_depth, min_node=args.min_node, mtry=args.mtry,
                      min_split=args.min_split)
    tree.resolve_mtry(data.n_features)
    cfg = ForestConfig(n_trees=args.trees, subsample_fraction=args.subsample, tree=tree, spec=spec,
                       master_seed=args.seed, aggregation_order=args.agg_order,
                       aggregation_mode=args.aggregation_mode, fit=FitConfig())
    print(f"method       {spec.label}")
    print(f"data         {args.data} (N={len(data)}, J={data.n_features})")
    print(f"trees        {cfg.n_trees}  max_depth {tree.max_depth}  min_node {tree.min_node}  "
          f"mtry {tree.resolve_mtry(data.n_features)}  subsample {cfg.subsample_fraction}")
    print(f"seed         {cfg.master_seed}")
    forest = grow_forest(data, cfg)
    forest.save(args.out)
    leaves = [len(t.leaves) for t in forest.trees]
    print(f"leaves/tree  mean {np.mean(leaves):.2f}  max {max(leaves)}")
    print(f"root loglik  {_in_sample_root(forest):.4f}")
    if cfg.subsample_fraction < 1:
        print(f"OOB loglik   {forest.oob_loglik():.4f}")
    print(f"model        {args.out}")


def _in_sample_root(forest):
    from .likelihood import loglik_contributions
    return float(np.sum(loglik_contributions(forest.aggregation_basis, forest.root_params, forest.data.resp)))


def _load_model(path):
    try:
        return Forest.load(path)
    except (OSError, ValueError, KeyError) as e:
        raise CliError(f"cannot load model {path}: {e}") from None


def _read_covariates(path, forest, need_response=False):
    """Covariate matrix aligned with the model's covariate names."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CliError(f"{path}: empty file, header required")
    header = [h.strip() for h in rows[0]]
    missing = [n for n in forest.data.names if n not in header]
    if missing:
        raise CliError(f"{path}: covariates {missing} of the model are missing from the file")
    if need_response or ("lower" in header and "upper" in header):
        return dio.read_csv(path, require_treatment=forest.predictive and need_response)
    pos = {h: j for j, h in enumerate(header)}
    X = []
    for k, r in enumerate(rows[1:], start=1):
        if not any(c.strip() for c in r):
            continue
        xs = []
        for name in forest.data.names:
            try:
                v = float(r[pos[name]])
            except (ValueError, IndexError):
                raise dio.SchemaError(f"{path}: row {k}, column {name!r}: not numeric") from None
            if not math.isfinite(v):
                raise dio.SchemaError(f"{path}: row {k}, column {name!r}: covariates must be finite")
            xs.append(v)
        X.append(xs)
    return np.asarray(X, float).reshape(len(X), len(forest.data.names))


def _model_X(obj, forest):
    if isinstance(obj, dio.SurvData):
        extra = [n for n in obj.names if n not in forest.data.names]
        if extra:
            log.warning("ignoring columns not used by the model: %s", ", ".join(extra))
        cols = [obj.names.index(n) for n in forest.data.names]
        return obj.X[:, cols]
    return obj


def cmd_predict(args):
    forest = _load_model(args.model)
    X = _model_X(_read_covariates(args.data, forest), forest)
    grid = args.grid
    arms = {"0": [0], "1": [1], "both": [0, 1]}[args.arm] if forest.predictive else [None]
    P = forest.aggregation_basis.n_params
    params = forest.predict_params(X)
    header = ["row"] + (["arm"] if forest.predictive else []) + [f"theta{k + 1}" for k in range(P)]
    if forest.predictive:
        header += [f"theta_tr{k + 1}" for k in range(P)] if forest.config.aggregation_mode == "theta_tr" else ["beta"]
    header += [f"S({t!r})" for t in grid]
    from .forest import predict_survivor
    fh = _open_out(args.out)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for i, p in enumerate(params, start=1):
        for arm in arms:
            row = [i] + ([arm] if forest.predictive else []) + [repr(float(v)) for v in p.theta]
            if forest.predictive:
                if p.theta_tr is not None:
                    row += [repr(float(v)) for v in p.theta_tr]
                elif p.beta is not None:
                    row += [repr(float(p.beta))]
                else:  # one-arm fallback fit
                    row += ["0.0"] * (P if forest.config.aggregation_mode == "theta_tr" else 1)
            row += [repr(float(s)) for s in predict_survivor(p, forest.aggregation_basis, grid, arm)]
            w.writerow(row)
    _close_out(fh)


def cmd_evaluate(args):
    forest = _load_model(args.model)
    valid = dio.read_csv(args.data, require_treatment=forest.predictive)
    if len(valid) == 0:
        log.warning("%s contains no subjects; out-of-sample log-likelihood is 0", args.data)
        print(0.0)
        return
    missing = [n for n in forest.data.names if n not in valid.names]
    if missing:
        raise CliError(f"{args.data}: covariates {missing} of the model are missing from the file")
    cols = [valid.names.index(n) for n in forest.data.names]
    valid = dio.SurvData(valid.resp, valid.X[:, cols], valid.treatment, list(forest.data.names))
    ll = forest.oos_loglik_contributions(valid)
    if args.per_subject:
        with open(args.per_subject, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "loglik"])
            for i, v in enumerate(ll, start=1):
                w.writerow([i, repr(float(v))])
    print(repr(float(np.sum(ll))))


def cmd_importance(args):
    forest = _load_model(args.model)
    if args.n_perm < 1:
        raise CliError("--n-perm must be >= 1")
    imp = forest.permutation_importance(n_perm=args.n_perm, seed=args.seed)
    order = np.argsort(-imp, kind="mergesort")
    rank = np.empty(len(imp), dtype=int)
    rank[order] = np.arange(1, len(imp) + 1)
    fh = _open_out(args.out)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["variable", "importance", "rank"])
    for j in order:
        w.writerow([forest.data.names[j], repr(float(imp[j])), int(rank[j])])
    _close_out(fh)


def cmd_bench(args, parser):
    if args.reps < 1:
        raise CliError("--reps must be >= 1")
    if args.scenario not in EFFECTS[args.mode]:
        raise CliError(f"unknown scenario {args.scenario!r} for mode {args.mode} "
                       f"(choose from {', '.join(EFFECTS[args.mode])})")
    methods = []
    for m in args.methods.split(","):
        try:
            methods.append(SplitSpec.parse(m.strip(), args.order))
        except ValueError as e:
            parser.error(f"--methods: {e}")
    sc = Scenario(mode=args.mode, effect=args.scenario, dim=args.dim, n_learn=args.n_learn,
                  n_valid=args.n_valid, seed=args.seed, censor_rate=args.censor_rate)
    tree_kw = {"max_depth": args.max_depth, "min_node": args.min_node}
    if args.mtry is not None:
        tree_kw["mtry"] = args.mtry
    cfg = default_forest_config(sc, args.trees, args.seed, **tree_kw)
    rows = run_benchmark(sc, methods, args.reps, cfg, seed=args.seed, timing=args.timing,
                         threads=_threads())
    fh = _open_out(args.out)
    fh.write(benchmark_csv(rows))
    _close_out(fh)


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="traforest", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="expand categorical columns to 0/1 indicators")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", default="-")
    s.add_argument("--categorical", help="comma list of columns forced to be categorical")

    s = sub.add_parser("fit", help="grow a forest and write the model JSON")
    s.add_argument("--data", required=True)
    s.add_argument("--method", required=True,
                   help="<W|Bs|NP>-<alpha|theta|alpha-beta|theta-beta|theta-thetatr>; NP pairs with alpha only")
    s.add_argument("--trees", type=int, default=250)
    s.add_argument("--max-depth", type=int, default=10)
    s.add_argument("--min-node", type=_positive_int, default=20)
    s.add_argument("--min-split", type=_positive_int, default=None,
                   help="smallest node considered for splitting (default 2 * min-node)")
    s.add_argument("--mtry", type=_mtry, default="sqrt")
    s.add_argument("--subsample", type=float, default=0.632)
    s.add_argument("--order", type=_positive_int, default=5, help="Bernstein order of the split model")
    s.add_argument("--agg-order", type=_positive_int, default=5, help="Bernstein order of the aggregation model")
    s.add_argument("--aggregation-mode", choices=("theta_tr", "beta"), default="theta_tr")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("predict", help="parameters and survivor curves for query rows")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--grid", type=_grid, required=True, help="comma-separated positive times")
    s.add_argument("--arm", choices=("0", "1", "both"), default="0")
    s.add_argument("--out", default="-")

    s = sub.add_parser("evaluate", help="out-of-sample log-likelihood of a held-out file")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--per-subject", help="write per-subject contributions to this CSV")

    s = sub.add_parser("importance", help="permutation variable importance")
    s.add_argument("--model", required=True)
    s.add_argument("--n-perm", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="-")

    s = sub.add_parser("bench", help="simulation benchmark (CSV)")
    s.add_argument("--mode", choices=("prognostic", "predictive"), default="prognostic")
    s.add_argument("--scenario", default="ph", help="no, ph, non-ph or combined")
    s.add_argument("--dim", choices=("low", "high"), default="low")
    s.add_argument("--methods", default="Bs-alpha,Bs-theta")
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--trees", type=_positive_int, default=250)
    s.add_argument("--max-depth", type=int, default=10)
    s.add_argument("--min-node", type=_positive_int, default=20)
    s.add_argument("--mtry", type=_mtry, default=None, help="default: all (low dim), sqrt (high dim)")
    s.add_argument("--order", type=_positive_int, default=5)
    s.add_argument("--n-learn", type=_positive_int, default=250)
    s.add_argument("--n-valid", type=_positive_int, default=500)
    s.add_argument("--censor-rate", type=float, default=0.0,
                   help="rate of independent exponential right-censoring (default off)")
    s.add_argument("--timing", action="store_true", help="fill wallclock_s (makes output non-reproducible)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="-")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        if args.command == "ingest":
            cmd_ingest(args)
        elif args.command == "fit":
            cmd_fit(args, parser)
        elif args.command == "predict":
            cmd_predict(args)
        elif args.command == "evaluate":
            cmd_evaluate(args)
        elif args.command == "importance":
            cmd_importance(args)
        elif args.command == "bench":
            cmd_bench(args, parser)
    except (CliError, dio.SchemaError, DatasetTooSmallError, ValueError, OSError) as e:
        print(f"traforest: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
