"""Survival trees split on model-based score statistics."""
import math
from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from . import _kernels as K
from . import basis as bs
from .likelihood import (ALPHA, ALPHA_BETA, FAMILIES, PREDICTIVE_FAMILIES, THETA, THETA_BETA,
                         THETA_THETATR, response_design)
from .optim import FitConfig, fit_design

BASIS_CODES = {"W": bs.WEIBULL, "Bs": bs.BERNSTEIN, "NP": bs.NONPARAMETRIC}


class InfeasibleMethodError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    """Score family plus the basis of the node model."""

    family: str
    basis_kind: str
    order: int = 5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown score family {self.family!r}")
        if self.basis_kind not in (bs.WEIBULL, bs.BERNSTEIN, bs.NONPARAMETRIC):
            raise ValueError(f"unknown basis {self.basis_kind!r}")
        if self.basis_kind == bs.NONPARAMETRIC and self.family != ALPHA:
            raise InfeasibleMethodError(
                f"NP-{self.family} is not available: the non-parametric basis only pairs with "
                "log-rank (alpha) scores; NP-theta, NP-theta-beta and NP-theta-thetatr are "
                "computationally infeasible and NP-alpha-beta is not implemented")
        if self.basis_kind == bs.BERNSTEIN and self.order < 1:
            raise ValueError("Bernstein order must be >= 1")

    @property
    def predictive(self) -> bool:
        return self.family in PREDICTIVE_FAMILIES

    @property
    def label(self) -> str:
        code = {v: k for k, v in BASIS_CODES.items()}[self.basis_kind]
        return f"{code}-{self.family}"

    @classmethod
    def parse(cls, text: str, order: int = 5) -> "SplitSpec":
        """Parse ``<basis>-<family>``, e.g. ``Bs-theta`` or ``W-alpha-beta``."""
        head, _, fam = text.partition("-")
        if head not in BASIS_CODES or fam not in FAMILIES:
            raise ValueError(f"method must look like <W|Bs|NP>-<{'|'.join(FAMILIES)}>, got {text!r}")
        return cls(fam, BASIS_CODES[head], order)

    def basis(self, support) -> bs.Basis:
        if self.basis_kind == bs.WEIBULL:
            return bs.weibull()
        if self.basis_kind == bs.BERNSTEIN:
            return bs.bernstein(self.order, support)
        return bs.nonparametric()


@dataclass(frozen=True)
class TreeConfig:
    max_depth: int = 10
    min_node: int = 20
    mtry: Union[int, str] = "sqrt"
    rng_seed: int = 0
    # refit the node model in every node; False reuses the root fit
    refit_nodes: bool = True
    # smallest node that is considered for splitting (default 2 * min_node)
    min_split: Optional[int] = None

    def __post_init__(self):
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_node < 1:
            raise ValueError("min_node must be >= 1")
        if self.min_split is not None and self.min_split < 2 * self.min_node:
            raise ValueError("min_split must be >= 2 * min_node")
        if isinstance(self.mtry, str):
            if self.mtry not in ("sqrt", "all"):
                raise ValueError("mtry must be an integer, 'sqrt' or 'all'")
        elif self.mtry < 1:
            raise ValueError("mtry must be >= 1")

    @property
    def split_size(self) -> int:
        return 2 * self.min_node if self.min_split is None else self.min_split

    def resolve_mtry(self, n_features: int) -> int:
        if self.mtry == "all":
            return n_features
        if self.mtry == "sqrt":
            return max(1, math.ceil(math.sqrt(n_features)))
        if self.mtry > n_features:
            raise ValueError(f"mtry={self.mtry} exceeds the number of covariates ({n_features})")
        return int(self.mtry)


class NodeContext:
    """Training quantities shared by every node of every tree: the split
    basis design for all N subjects, response kinds and treatment."""

    def __init__(self, data, spec: SplitSpec, support, fit_cfg: FitConfig = FitConfig()):
        self.data = data
        self.spec = spec
        self.fit_cfg = fit_cfg
        if spec.predictive and data.treatment is None:
            raise ValueError(f"{spec.label} needs a treatment indicator")
        self.treatment = data.treatment if data.treatment is not None else np.zeros(len(data))
        self.kind = data.resp.kind
        if spec.basis_kind == bs.NONPARAMETRIC:
            data.resp.event_view()  # raises for left/interval censoring
            self.basis = bs.nonparametric()
            self.A = None
        else:
            self.basis = spec.basis(support)
            self.A = response_design(self.basis, data.resp)
        self.root_theta = None
        if self.A is not None:
            root = fit_design(self.basis, self.A, self.kind, np.ones(len(data)), fit_cfg, resp=data.resp)
            self.root_theta = root.params.theta


def node_scores(ctx: NodeContext, idx, warm_start=None, refit: bool = True):
    """Score matrix (len(idx) x q) of the node, or None when the node model
    cannot be fitted (the node then becomes a leaf)."""
    idx = np.asarray(idx)
    fam = ctx.spec.family
    r = ctx.treatment[idx]
    if ctx.A is None:
        time, event = ctx.data.resp.lower[idx], ctx.kind[idx] == K.EXACT
        et, ch = bs.nelson_aalen(time, event)
        base = np.concatenate([[0.0], ch])[np.searchsorted(et, time, side="right")]
        return (event - base)[:, None]
    A = tuple(m[idx] for m in ctx.A)
    kind = ctx.kind[idx]
    if refit:
        w = np.ones(idx.shape[0])
        start = ctx.root_theta if warm_start is None else warm_start
        fit = fit_design(ctx.basis, A, kind, w, ctx.fit_cfg, warm_start=start)
        if not fit.converged or not np.isfinite(fit.loglik):
            return None
        theta = fit.params.theta
    else:
        theta = ctx.root_theta
    zl, zh, zd = A[0] @ theta, A[1] @ theta, A[2] @ theta
    ll, dl, dh, dd = K.obs_terms(kind, zl, zh, zd)
    if not np.all(np.isfinite(ll)):
        return None
    u = dl + dh
    if fam == ALPHA:
        return u[:, None]
    if fam == ALPHA_BETA:
        return np.column_stack([u, u * r])
    s = dl[:, None] * A[0] + dh[:, None] * A[1] + dd[:, None] * A[2]
    if fam == THETA:
        return s
    if fam == THETA_BETA:
        return np.column_stack([s, u * r])
    return np.hstack([s, s * r[:, None]])


def score_covariance_pinv(scores) -> np.ndarray:
    n = scores.shape[0]
    tot = scores.sum(axis=0)
    V = scores.T @ scores - np.outer(tot, tot) / n
    return np.linalg.pinv(V, rcond=1e-10, hermitian=True)


def best_split(scores, X, candidate_vars, min_node: int):
    """Maximally selected quadratic-form statistic over all admissible cuts.

    Returns (variable, cutpoint, statistic) or None.
    """
    scores = np.ascontiguousarray(scores, dtype=float)
    X = np.asarray(X, float)
    n = scores.shape[0]
    if n < 2 * min_node or n < 2:
        return None
    vpinv = np.ascontiguousarray(score_covariance_pinv(scores))
    best = None
    best_t = 0.0
    for j in sorted(int(v) for v in candidate_vars):
        xs = np.ascontiguousarray(X[:, j])
        order = np.argsort(xs, kind="mergesort")
        t, c, _ = K._scan(scores, xs, order, vpinv, min_node)
        if t > best_t:
            best_t, best = t, (j, float(c), float(t))
    return best


class Tree:
    """Array-backed binary tree; leaves keep their training members."""

    def __init__(self, feature, threshold, left, right, members, depth, flags=()):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.members = members  # list: index array for leaves, None for splits
        self.depth = np.asarray(depth, dtype=np.int64)
        self.flags = tuple(flags)

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def leaves(self) -> List[int]:
        return [k for k in range(self.n_nodes) if self.feature[k] < 0]

    def apply(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, float)))
        return K._leaf_ids(X, self.feature, self.threshold, self.left, self.right)

    def used_variables(self) -> set:
        return {int(f) for f in self.feature if f >= 0}

    def member_leaf(self, n_total: int) -> np.ndarray:
        """Leaf id of every training row (-1 for rows outside the subsample)."""
        out = np.full(n_total, -1, dtype=np.int64)
        for k, m in enumerate(self.members):
            if m is not None:
                out[m] = k
        return out


def grow_tree(ctx: NodeContext, subsample, cfg: TreeConfig, rng=None) -> Tree:
    """Grow one tree on the rows ``subsample`` of the training data; no
    significance-based stopping, only depth and node-size limits."""
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    X = ctx.data.X
    J = X.shape[1]
    mtry = cfg.resolve_mtry(J)
    feature, threshold, left, right, members, depth = [], [], [], [], [], []
    flags = []

    def new_node(d):
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        members.append(None)
        depth.append(d)
        return len(feature) - 1

    root = new_node(0)
    stack = [(root, np.sort(np.asarray(subsample)), ctx.root_theta)]
    while stack:
        node, idx, start = stack.pop()
        d = depth[node]
        split = None
        if d < cfg.max_depth and idx.shape[0] >= cfg.split_size:
            cand = np.arange(J) if mtry == J else np.sort(rng.choice(J, size=mtry, replace=False))
            scores = node_scores(ctx, idx, warm_start=start, refit=cfg.refit_nodes)
            if scores is None:
                flags.append("node_fit_failed")
            else:
                split = best_split(scores, X[idx], cand, cfg.min_node)
        if split is None:
            members[node] = idx
            continue
        j, c, _ = split
        go_left = X[idx, j] <= c
        feature[node] = j
        threshold[node] = c
        lnode = new_node(d + 1)
        rnode = new_node(d + 1)
        left[node] = lnode
        right[node] = rnode
        # push right first so the left subtree is grown first
        stack.append((rnode, idx[~go_left], start))
        stack.append((lnode, idx[go_left], start))
    return Tree(feature, threshold, left, right, members, depth, flags)
