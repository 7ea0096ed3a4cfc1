"""Forests of score-split survival trees aggregated by local maximum likelihood.

Predictions re-fit the aggregation model (Bernstein polynomial in log time by
default) with nearest-neighbour weights: w_i(x) counts the trees in which x
and training subject i share a terminal node.
"""
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels as K
from . import basis as bs
from .data import SurvData
from .likelihood import ModelParams, Responses, loglik_contributions, response_design
from .optim import FitConfig, fit_design, fit_predictive_design
from .tree import NodeContext, SplitSpec, Tree, TreeConfig, grow_tree

log = logging.getLogger(__name__)

FORMAT_NAME = "traforest-model"
FORMAT_VERSION = 1


class DatasetTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 250
    subsample_fraction: float = 0.632
    # None: stratify exactly when the split family is predictive
    stratify_by_treatment: Optional[bool] = None
    tree: TreeConfig = field(default_factory=TreeConfig)
    spec: SplitSpec = field(default_factory=lambda: SplitSpec("theta", bs.BERNSTEIN, 5))
    master_seed: int = 0
    aggregation_order: int = 5
    # predictive aggregation model: "theta_tr" (arm-specific baselines) or "beta"
    aggregation_mode: str = "theta_tr"
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0 < self.subsample_fraction <= 1:
            raise ValueError("subsample_fraction must lie in (0, 1]")
        if self.aggregation_mode not in ("theta_tr", "beta"):
            raise ValueError("aggregation_mode must be 'theta_tr' or 'beta'")
        if self.aggregation_order < 1:
            raise ValueError("aggregation_order must be >= 1")

    @property
    def stratify(self) -> bool:
        if self.stratify_by_treatment is None:
            return self.spec.predictive
        return self.stratify_by_treatment


def splitmix64(seed: int, index: int) -> int:
    """Per-tree seed: splitmix64 finaliser applied to (seed, index)."""
    mask = (1 << 64) - 1
    z = (seed * 0x9E3779B97F4A7C15 + (index + 1) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)


def subsample_size(n: int, fraction: float) -> int:
    return min(n, math.ceil(fraction * n - 1e-9))


def draw_subsamples(n: int, fraction: float, n_trees: int, seed: int, strata=None):
    """Index sets drawn without replacement; with ``strata`` each stratum
    contributes its share of the subsample (largest-remainder rounding)."""
    rng = np.random.default_rng(seed)
    m = subsample_size(n, fraction)
    if strata is None:
        return [np.sort(rng.choice(n, size=m, replace=False)) for _ in range(n_trees)]
    strata = np.asarray(strata)
    levels = np.unique(strata)
    groups = [np.nonzero(strata == lev)[0] for lev in levels]
    exact = np.array([g.size * m / n for g in groups])
    alloc = np.floor(exact).astype(int)
    rem = m - alloc.sum()
    for k in np.argsort(-(exact - alloc), kind="mergesort")[:rem]:
        alloc[k] += 1
    out = []
    for _ in range(n_trees):
        parts = [rng.choice(g, size=a, replace=False) for g, a in zip(groups, alloc)]
        out.append(np.sort(np.concatenate(parts)))
    return out


def _n_threads() -> int:
    try:
        return max(1, int(os.environ.get("TRAFOREST_THREADS", "1")))
    except ValueError:
        return 1


class Forest:
    def __init__(self, data: SurvData, config: ForestConfig, support, trees, subsamples,
                 root_params: ModelParams):
        self.data = data
        self.config = config
        self.support = (float(support[0]), float(support[1]))
        self.trees = list(trees)
        self.subsamples = [np.asarray(s, dtype=np.int64) for s in subsamples]
        self.aggregation_basis = bs.bernstein(config.aggregation_order, self.support)
        self.root_params = root_params
        n = len(data)
        self._member_leaf = [t.member_leaf(n) for t in self.trees]
        self._A = response_design(self.aggregation_basis, data.resp)
        self._leaf_models = {}

    @property
    def spec(self) -> SplitSpec:
        return self.config.spec

    @property
    def predictive(self) -> bool:
        return self.spec.predictive

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    # -- weights --------------------------------------------------------------

    def _check_X(self, X):
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, float)))
        if X.shape[1] != self.data.n_features:
            raise ValueError(f"expected {self.data.n_features} covariates, got {X.shape[1]}")
        return X

    def weights(self, X, oob: bool = False) -> np.ndarray:
        """Raw co-membership counts, shape (n_queries, N).

        ``oob=True`` treats the queries as the training rows themselves and
        only counts trees whose subsample excludes the query row.
        """
        X = self._check_X(X)
        n = len(self.data)
        if oob and X.shape[0] != n:
            raise ValueError("out-of-bag weights need the training covariates as queries")
        W = np.zeros((X.shape[0], n))
        for tree, leaf_t, sub in zip(self.trees, self._member_leaf, self.subsamples):
            leaf_q = tree.apply(X)
            if oob:
                leaf_q = leaf_q.copy()
                leaf_q[sub] = -2
            K._cooccur(leaf_q, leaf_t, W)
        return W

    # -- local likelihood -----------------------------------------------------

    def _fit(self, w, warm=None):
        cfg = self.config.fit
        start = self.root_params.theta if warm is None else warm
        if self.predictive:
            return fit_predictive_design(self.aggregation_basis, self._A, self.data.resp.kind,
                                         self.data.treatment, w, self.config.aggregation_mode, cfg,
                                         warm_start=start)
        return fit_design(self.aggregation_basis, self._A, self.data.resp.kind, w, cfg, warm_start=start)

    def params_from_weights(self, w) -> ModelParams:
        w = np.asarray(w, float)
        if not w.sum() > 0:
            raise ValueError("all nearest-neighbour weights are zero")
        return self._fit(w).params

    def predict_params(self, X, oob: bool = False):
        """Local maximum-likelihood parameters for each query row."""
        W = self.weights(X, oob=oob)
        out = []
        for a in range(W.shape[0]):
            out.append(self.params_from_weights(W[a]) if W[a].sum() > 0 else None)
        return out

    def predict_survivor(self, X, t_grid, arm=None):
        """S(t | x) on ``t_grid`` for every query row; ``arm`` picks the
        treatment arm of predictive forests (default 0)."""
        params = self.predict_params(X)
        return np.vstack([predict_survivor(p, self.aggregation_basis, t_grid, arm) for p in params])

    def _contributions(self, data: SurvData, params):
        ll = np.empty(len(data))
        for i, p in enumerate(params):
            r = None if data.treatment is None else [data.treatment[i]]
            if p is None:
                ll[i] = np.nan
                continue
            if not p.has_treatment:
                r = None
            ll[i] = loglik_contributions(self.aggregation_basis, p, data.resp[[i]], r)[0]
        return ll

    def oos_loglik_contributions(self, data: SurvData) -> np.ndarray:
        if len(data) == 0:
            return np.zeros(0)
        if self.predictive and data.treatment is None:
            raise ValueError("validation data of a predictive forest need a treatment column")
        return self._contributions(data, self.predict_params(data.X))

    def oos_loglik(self, data: SurvData) -> float:
        return float(np.sum(self.oos_loglik_contributions(data)))

    def oob_loglik_contributions(self) -> np.ndarray:
        """Per-subject log-likelihood under out-of-bag predictions (NaN for
        rows that are in every subsample)."""
        return self._contributions(self.data, self.predict_params(self.data.X, oob=True))

    def oob_loglik(self) -> float:
        ll = self.oob_loglik_contributions()
        missing = np.isnan(ll)
        if missing.any():
            log.warning("%d subjects are never out of bag and are skipped", int(missing.sum()))
        return float(np.sum(ll[~missing]))

    # -- variable importance --------------------------------------------------

    def _leaf_model(self, b: int, leaf: int) -> ModelParams:
        key = (b, leaf)
        if key not in self._leaf_models:
            idx = self.trees[b].members[leaf]
            w = np.zeros(len(self.data))
            w[idx] = 1.0
            self._leaf_models[key] = self._fit(w).params
        return self._leaf_models[key]

    def _tree_loglik(self, b: int, rows, leaves) -> float:
        total = 0.0
        for leaf in np.unique(leaves):
            sel = rows[leaves == leaf]
            p = self._leaf_model(b, int(leaf))
            r = self.data.treatment[sel] if p.has_treatment else None
            total += float(np.sum(loglik_contributions(self.aggregation_basis, p, self.data.resp[sel], r)))
        return total

    def permutation_importance(self, n_perm: int = 1, seed: int = 0) -> np.ndarray:
        """Mean drop of the out-of-subsample tree log-likelihood when one
        covariate is permuted among the out-of-subsample rows."""
        if n_perm < 1:
            raise ValueError("n_perm must be >= 1")
        n, J = self.data.X.shape
        rng = np.random.default_rng(seed)
        imp = np.zeros(J)
        counted = 0
        for b, tree in enumerate(self.trees):
            oob = np.setdiff1d(np.arange(n), self.subsamples[b])
            if oob.size == 0:
                continue
            counted += 1
            Xo = self.data.X[oob]
            base_leaves = tree.apply(Xo)
            base = self._tree_loglik(b, oob, base_leaves)
            used = tree.used_variables()
            for j in range(J):
                for _ in range(n_perm):
                    perm = rng.permutation(oob.size)
                    if j not in used:
                        continue
                    Xp = Xo.copy()
                    Xp[:, j] = Xo[perm, j]
                    leaves = tree.apply(Xp)
                    if np.array_equal(leaves, base_leaves):
                        continue
                    imp[j] += base - self._tree_loglik(b, oob, leaves)
        if counted == 0:
            raise ValueError("no out-of-subsample observations (subsample_fraction = 1)")
        return imp / (counted * n_perm)

    # -- persistence ----------------------------------------------------------

    def to_dict(self) -> dict:
        d = self.data
        cfg = self.config
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "config": {
                "n_trees": cfg.n_trees,
                "subsample_fraction": cfg.subsample_fraction,
                "stratify_by_treatment": cfg.stratify_by_treatment,
                "tree": asdict(cfg.tree),
                "spec": asdict(cfg.spec),
                "master_seed": cfg.master_seed,
                "aggregation_order": cfg.aggregation_order,
                "aggregation_mode": cfg.aggregation_mode,
                "fit": asdict(cfg.fit),
            },
            "support": list(self.support),
            "extrapolation": "linear in log time beyond the support",
            "split_statistic": "quadratic form (c_quad), permutation moments, pseudo-inverse rcond 1e-10",
            "covariates": list(d.names),
            "data": {
                "kind": d.resp.kind.tolist(),
                "lower": d.resp.lower.tolist(),
                "upper": [None if math.isinf(v) else v for v in d.resp.upper.tolist()],
                "treatment": None if d.treatment is None else d.treatment.tolist(),
                "X": d.X.tolist(),
            },
            "root_params": _params_to_json(self.root_params),
            "subsamples": [s.tolist() for s in self.subsamples],
            "trees": [{
                "feature": t.feature.tolist(),
                "threshold": [None if math.isnan(v) else v for v in t.threshold.tolist()],
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "depth": t.depth.tolist(),
                "members": {str(k): m.tolist() for k, m in enumerate(t.members) if m is not None},
                "flags": list(t.flags),
            } for t in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Forest":
        if doc.get("format") != FORMAT_NAME:
            raise ValueError("not a traforest model document")
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')}")
        c = doc["config"]
        config = ForestConfig(
            n_trees=c["n_trees"], subsample_fraction=c["subsample_fraction"],
            stratify_by_treatment=c["stratify_by_treatment"], tree=TreeConfig(**c["tree"]),
            spec=SplitSpec(**c["spec"]), master_seed=c["master_seed"],
            aggregation_order=c["aggregation_order"], aggregation_mode=c["aggregation_mode"],
            fit=FitConfig(**c["fit"]))
        dd = doc["data"]
        upper = np.array([np.inf if v is None else v for v in dd["upper"]], dtype=float)
        resp = Responses(np.array(dd["kind"], dtype=np.int64), np.array(dd["lower"], dtype=float), upper)
        tr = None if dd["treatment"] is None else np.array(dd["treatment"], dtype=float)
        X = np.array(dd["X"], dtype=float).reshape(len(resp), len(doc["covariates"]))
        data = SurvData(resp, X, tr, list(doc["covariates"]))
        trees = []
        for t in doc["trees"]:
            nn = len(t["feature"])
            members = [None] * nn
            for k, m in t["members"].items():
                members[int(k)] = np.array(m, dtype=np.int64)
            thr = [np.nan if v is None else v for v in t["threshold"]]
            trees.append(Tree(t["feature"], thr, t["left"], t["right"], members, t["depth"], t.get("flags", ())))
        return cls(data, config, doc["support"], trees, doc["subsamples"], _params_from_json(doc["root_params"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, allow_nan=False)

    @classmethod
    def load(cls, path) -> "Forest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _params_to_json(p: ModelParams) -> dict:
    return {"theta": p.theta.tolist(),
            "beta": p.beta,
            "theta_tr": None if p.theta_tr is None else p.theta_tr.tolist()}


def _params_from_json(d: dict) -> ModelParams:
    return ModelParams(np.array(d["theta"], dtype=float), d["beta"],
                       None if d["theta_tr"] is None else np.array(d["theta_tr"], dtype=float))


def predict_survivor(p: ModelParams, b: bs.Basis, t_grid, r=None) -> np.ndarray:
    """S(t) = exp(-exp(z(t))) for the arm ``r`` (0 when omitted)."""
    t = np.asarray(t_grid, float)
    if np.any(~(t > 0)):
        raise ValueError("survivor grid must be positive")
    arm = int(r or 0)
    z = bs.design(b, t) @ p.arm_theta(arm) + p.arm_shift(arm)
    return np.exp(-np.exp(z))


def grow_forest(data: SurvData, cfg: ForestConfig = ForestConfig(), subsamples=None) -> Forest:
    """Grow ``cfg.n_trees`` trees on subsamples of ``data``.

    Explicit ``subsamples`` (a list of index arrays) override the random
    draw, so that several forests can share the same subsamples.
    """
    n = len(data)
    min_n = 2 * cfg.tree.min_node / cfg.subsample_fraction
    if n < min_n:
        raise DatasetTooSmallError(f"need at least {math.ceil(min_n)} subjects, got {n}")
    if cfg.spec.predictive and data.treatment is None:
        raise ValueError("predictive forests need a treatment indicator")
    support = bs.default_support(data.resp.finite_log_bounds())
    if subsamples is None:
        strata = data.treatment if (cfg.stratify and data.treatment is not None) else None
        subsamples = draw_subsamples(n, cfg.subsample_fraction, cfg.n_trees, cfg.master_seed, strata)
    elif len(subsamples) != cfg.n_trees:
        raise ValueError("number of subsamples must equal n_trees")
    ctx = NodeContext(data, cfg.spec, support, cfg.fit)
    agg = bs.bernstein(cfg.aggregation_order, support)
    root = fit_design(agg, response_design(agg, data.resp), data.resp.kind, np.ones(n), cfg.fit, resp=data.resp)

    def grow(b):
        tcfg = replace(cfg.tree, rng_seed=splitmix64(cfg.master_seed, b))
        return grow_tree(ctx, subsamples[b], tcfg)

    threads = min(_n_threads(), cfg.n_trees)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            trees = list(ex.map(grow, range(cfg.n_trees)))
    else:
        trees = [grow(b) for b in range(cfg.n_trees)]
    return Forest(data, cfg, support, trees, subsamples, root.params)
