"""Constrained maximum-likelihood fitting of transformation models."""
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import basis as bs
from . import _kernels as K
from .likelihood import (EXACT, INTERVAL, LEFT, RIGHT, ModelParams, Responses,
                         model_design, response_design)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    max_outer_iters: int = 50
    max_inner_iters: int = 500
    grad_tol: float = 1e-6
    constraint_tol: float = 1e-8
    penalty_growth: float = 10.0
    # "newton": projected Newton on increment coordinates (default);
    # "spg": spectral projected gradient onto the monotone cone;
    # "auglag": augmented Lagrangian around an unprojected SPG inner loop
    solver: str = "newton"
    memory: int = 10

    def __post_init__(self):
        if min(self.max_outer_iters, self.max_inner_iters) < 1:
            raise ValueError("iteration limits must be positive")
        if not (self.grad_tol > 0 and self.constraint_tol > 0):
            raise ValueError("tolerances must be positive")
        if not self.penalty_growth > 1:
            raise ValueError("penalty_growth must exceed 1")
        if self.solver not in ("newton", "auglag", "spg"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass
class FitResult:
    params: ModelParams
    loglik: float
    converged: bool
    active_constraints: tuple = ()
    iterations: int = 0
    flags: tuple = ()
    coef: Optional[np.ndarray] = None
    coef_names: tuple = ()
    dropped: tuple = ()
    trace: np.ndarray = field(default=None, repr=False)


class DegenerateFitError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def as_responses(data) -> Responses:
    if isinstance(data, Responses):
        return data
    return Responses.from_list([s.response for s in data])


def _treatment_of(data, treatment):
    if treatment is not None:
        return np.asarray(treatment, float)
    if isinstance(data, Responses):
        return None
    r = [s.treatment for s in data]
    return None if any(v is None for v in r) else np.asarray(r, float)


def _chain_array(rows) -> np.ndarray:
    return np.asarray(rows, dtype=np.int64).reshape(-1, 4)


def _weighted_km(time, event, w):
    order = np.lexsort((~event, time))
    t, e, ww = time[order], event[order], w[order]
    uniq, first = np.unique(t, return_index=True)
    at_risk = np.cumsum(ww[::-1])[::-1][first]
    d = np.add.reduceat(ww * e, first)
    keep = d > 0
    surv = np.cumprod(1.0 - d[keep] / at_risk[keep])
    return uniq[keep], surv, d[keep]


def initial_theta(b: bs.Basis, resp: Responses, w=None) -> np.ndarray:
    """Start from a straight line in log time fitted to cloglog(1 - KM) at
    the event times, written in the basis coefficients; equally spaced
    (-2, 2) start when that is not possible.

    Only the two line coefficients are estimated, so data that cover a
    small part of the support cannot produce wild coefficients."""
    P = b.n_params
    fallback = np.linspace(-2.0, 2.0, P)
    w = np.ones(len(resp)) if w is None else np.asarray(w, float)
    kind = resp.kind
    time = np.where(kind == INTERVAL, np.sqrt(resp.lower * np.where(np.isfinite(resp.upper), resp.upper, 1.0)),
                    np.where(kind == LEFT, resp.upper, resp.lower))
    event = kind != RIGHT
    pos = w > 0
    theta = None
    if np.count_nonzero(event & pos) >= 2:
        et, surv, d = _weighted_km(time[pos], event[pos], w[pos])
        ok = (surv > 0) & (surv < 1)
        if np.count_nonzero(ok) >= 2 and np.ptp(np.log(et[ok])) > 0:
            y = np.log(-np.log(surv[ok]))
            lt = np.log(et[ok])
            sw = np.sqrt(d[ok])
            L = np.column_stack([np.ones_like(lt), lt])
            line, *_ = np.linalg.lstsq(L * sw[:, None], y * sw, rcond=None)
            line[1] = max(line[1], 1e-3)
            grid = np.linspace(lt.min(), lt.max(), 4 * P)
            if b.support is not None:
                grid = np.linspace(b.support[0], b.support[1], 4 * P)
            A = bs.design(b, np.exp(grid))
            theta, *_ = np.linalg.lstsq(A, line[0] + line[1] * grid, rcond=None)
            if not np.all(np.isfinite(theta)):
                theta = None
    if theta is None:
        theta = fallback
    chains = _chain_array(bs.chain_rows(b))
    return K._project(np.asarray(theta, float), chains, bs.EPS_POS)


def _degenerate(kind, w) -> bool:
    k = kind[w > 0]
    return bool(np.all(k == RIGHT) or np.all(k == LEFT))


def _increment_map(q, chains):
    """Matrix T with gamma = T @ delta, plus the lower bounds on delta.

    Monotone chains become cumulative sums of increments, so every
    constraint turns into a simple bound delta_k >= eps."""
    T = np.eye(q)
    lb = np.full(q, -np.inf)
    for start, length, kind, _ in chains:
        if kind == K.CHAIN_LOWER:
            lb[start] = bs.EPS_POS
            continue
        blk = slice(start, start + length)
        T[blk, blk] = np.tril(np.ones((length, length)))
        lb[start + 1:start + length] = bs.EPS_POS
    return T, lb


def _newton(x0, Zlo, Zhi, Zd, kind, w, wsum, chains, maxit, tol):
    """Projected Newton for the bound-constrained problem in increment
    coordinates.  Returns (gamma, f, converged, iterations)."""
    q = x0.shape[0]
    T, lb = _increment_map(q, chains)
    Tinv = np.linalg.inv(T)
    Ylo, Yhi, Yd = (np.ascontiguousarray(m @ T) for m in (Zlo, Zhi, Zd))

    def obj(d):
        return K._objective(np.ascontiguousarray(d), Ylo, Yhi, Yd, kind, w, wsum)

    d = np.maximum(Tinv @ x0, lb)
    f, g = obj(d)
    if not np.isfinite(f):
        return T @ d, f, False, 0
    bounded = np.isfinite(lb)
    for it in range(1, maxit + 1):
        at_bound = bounded & (d - lb <= 0.0) & (g > 0)
        pg = np.where(at_bound, 0.0, g)
        gnorm = np.max(np.abs(pg))
        if gnorm < tol:
            return T @ d, f, True, it - 1
        eps_a = min(1e-6, gnorm)
        active = bounded & (d - lb <= eps_a) & (g > 0)
        free = ~active
        H = np.empty((q, q))
        for k in range(q):
            h = 1e-6 * max(1.0, abs(d[k]))
            dk = d.copy()
            dk[k] += h
            fk, gk = obj(dk)
            if not np.isfinite(fk):
                h = -h
                dk[k] = d[k] + h
                fk, gk = obj(dk)
            H[:, k] = (gk - g) / h
        H = 0.5 * (H + H.T)
        Hf = H[np.ix_(free, free)]
        evals, evecs = np.linalg.eigh(Hf)
        floor = 1e-10 * max(1.0, np.max(np.abs(evals)))
        evals = np.maximum(evals, floor)
        step = np.zeros(q)
        step[free] = -(evecs @ ((evecs.T @ g[free]) / evals))
        diag = np.maximum(np.diag(H), floor)
        step[active] = -g[active] / diag[active]
        alpha = 1.0
        while alpha > 1e-14:
            dn = np.maximum(d + alpha * step, lb)
            fn, gn = obj(dn)
            dec = -np.dot(g[free], step[free]) * alpha + np.dot(g[active], d[active] - dn[active])
            if np.isfinite(fn) and fn <= f - 1e-4 * dec:
                break
            alpha *= 0.5
        else:
            return T @ d, f, False, it
        if f - fn <= 1e-15 * max(1.0, abs(f)) and np.max(np.abs(dn - d)) <= 1e-12 * max(1.0, np.max(np.abs(d))):
            d, f, g = dn, fn, gn
            return T @ d, f, True, it
        d, f, g = dn, fn, gn
    return T @ d, f, False, maxit


def solve(Z, kind, chains, w, x0, cfg: FitConfig):
    """Minimise the weighted negative log-likelihood over the chain-constrained
    set.  Returns (gamma, weighted loglik, converged, iterations, trace)."""
    w = np.asarray(w, float)
    keep = w > 0
    Zlo, Zhi, Zd = (np.ascontiguousarray(m[keep]) for m in Z)
    kk = np.ascontiguousarray(kind[keep], dtype=np.int64)
    ww = np.ascontiguousarray(w[keep])
    wsum = float(ww.sum())
    x0 = np.ascontiguousarray(x0, dtype=float)
    if cfg.solver == "newton":
        x, f, ok, it = _newton(x0, Zlo, Zhi, Zd, kk, ww, wsum, chains, cfg.max_outer_iters * 4, cfg.grad_tol)
        if not ok and np.isfinite(f):
            x1, f1, ok, it1 = K._spg(np.ascontiguousarray(K._project(x, chains, bs.EPS_POS)), Zlo, Zhi, Zd,
                                     kk, ww, wsum, chains, bs.EPS_POS, np.zeros(0), 1.0, False,
                                     cfg.max_inner_iters * cfg.max_outer_iters, cfg.grad_tol, cfg.memory)
            if f1 <= f:
                x, f = x1, f1
            it += it1
        trace = np.array([f])
    elif cfg.solver == "spg":
        x, f, ok, it = K._spg(x0, Zlo, Zhi, Zd, kk, ww, wsum, chains, bs.EPS_POS,
                              np.zeros(0), 1.0, False,
                              cfg.max_inner_iters * cfg.max_outer_iters, cfg.grad_tol, cfg.memory)
        trace = np.array([f])
    else:
        x, f, ok, it, trace = K._auglag(x0, Zlo, Zhi, Zd, kk, ww, wsum, chains, bs.EPS_POS,
                                        cfg.max_outer_iters, cfg.max_inner_iters, cfg.grad_tol,
                                        cfg.constraint_tol, cfg.penalty_growth, cfg.memory)
    if not np.isfinite(f):
        # the start was infeasible for the exact-time density; restart from the fallback
        return np.asarray(x), -np.inf, False, it, -np.asarray(trace) * wsum
    return np.asarray(x), -f * wsum, bool(ok), int(it), -np.asarray(trace) * wsum


def _active(gamma, chains, tol=1e-7) -> tuple:
    slack = K._constraint_values(np.asarray(gamma, float), chains, bs.EPS_POS)
    return tuple(int(j) for j in np.nonzero(slack <= tol)[0])


def _check_weights(w, n):
    w = np.asarray(w, float).reshape(-1)
    if w.shape[0] != n:
        raise ValueError(f"expected {n} weights, got {w.shape[0]}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if w.sum() < 2:
        raise ValueError("effective sample size (sum of weights) must be at least 2")
    return w


# ---------------------------------------------------------------------------
# public fits
# ---------------------------------------------------------------------------

def fit_design(b: bs.Basis, A, kind, w, cfg: FitConfig = FitConfig(), warm_start=None,
               resp: Optional[Responses] = None) -> FitResult:
    """Prognostic weighted fit on a precomputed response design ``A``."""
    chains = _chain_array(bs.chain_rows(b))
    flags = ()
    if _degenerate(kind, w):
        flags = ("degenerate",)
    if warm_start is not None:
        x0 = K._project(np.asarray(warm_start, float), chains, bs.EPS_POS)
    else:
        x0 = initial_theta(b, resp, w) if resp is not None else np.linspace(-2.0, 2.0, b.n_params)
    x, ll, ok, it, trace = solve(A, kind, chains, w, x0, cfg)
    if not np.isfinite(ll):
        x0 = K._project(np.linspace(-2.0, 2.0, b.n_params), chains, bs.EPS_POS)
        x, ll, ok, it, trace = solve(A, kind, chains, w, x0, cfg)
    if flags:
        ok = False
    return FitResult(ModelParams(x), float(ll), ok, _active(x, chains), it, flags, trace=trace)


def fit_weighted(b: bs.Basis, data, weights, cfg: FitConfig = FitConfig(), warm_start=None) -> FitResult:
    """argmax_theta sum_i w_i l_i(theta) under the basis constraints."""
    resp = as_responses(data)
    w = _check_weights(weights, len(resp))
    return fit_design(b, response_design(b, resp), resp.kind, w, cfg, warm_start, resp)


def fit_unconditional(b: bs.Basis, data, cfg: FitConfig = FitConfig()) -> FitResult:
    resp = as_responses(data)
    if len(resp) < 2:
        raise ValueError("need at least two subjects")
    return fit_weighted(b, resp, np.ones(len(resp)), cfg)


def predictive_design(A, treatment, mode):
    """Design for the predictive fits.  theta_tr mode is parameterised by the
    two arm-wise coefficient vectors (theta, theta + theta_tr)."""
    r = np.asarray(treatment, float)
    if mode == "beta":
        return model_design(A, r, "beta")
    if mode == "theta_tr":
        Alo, Ahi, Ad = A
        m = r[:, None]
        return tuple(np.ascontiguousarray(np.hstack([M * (1 - m), M * m])) for M in (Alo, Ahi, Ad))
    raise ValueError(f"unknown predictive mode {mode!r}")


def fit_predictive_design(b, A, kind, treatment, w, mode, cfg=FitConfig(), warm_start=None,
                          resp=None) -> FitResult:
    P = b.n_params
    r = np.asarray(treatment, float)
    w = np.asarray(w, float)
    w1 = float(np.sum(w * r))
    w0 = float(np.sum(w * (1 - r)))
    if w1 <= 0 or w0 <= 0:
        base = fit_design(b, A, kind, w, cfg, warm_start, resp)
        p = base.params
        params = (ModelParams(p.theta, beta=0.0) if mode == "beta"
                  else ModelParams(p.theta, theta_tr=np.zeros(P)))
        return FitResult(params, base.loglik, base.converged, base.active_constraints,
                         base.iterations, base.flags + ("one_arm",), trace=base.trace)
    if warm_start is None:
        warm_start = initial_theta(b, resp, w) if resp is not None else np.linspace(-2.0, 2.0, P)
    warm_start = np.asarray(warm_start, float)
    if mode == "beta":
        chains = _chain_array(bs.chain_rows(b))
        x0 = np.concatenate([warm_start[:P], [0.0]])
    else:
        chains = _chain_array(bs.chain_rows(b) + bs.chain_rows(b, offset=P))
        x0 = np.concatenate([warm_start[:P], warm_start[:P]])
    Z = predictive_design(A, r, mode)
    flags = ("degenerate",) if _degenerate(kind, w) else ()
    x, ll, ok, it, trace = solve(Z, kind, chains, w, x0, cfg)
    if flags:
        ok = False
    if mode == "beta":
        params = ModelParams(x[:P], beta=float(x[P]))
    else:
        params = ModelParams(x[:P], theta_tr=x[P:] - x[:P])
    return FitResult(params, float(ll), ok, _active(x, chains), it, flags, trace=trace)


def fit_weighted_predictive(b: bs.Basis, data, weights, mode: str, cfg: FitConfig = FitConfig(),
                            treatment=None, warm_start=None) -> FitResult:
    """Weighted fit of (theta, beta) or (theta, theta_tr).

    Falls back to the prognostic fit (flag ``one_arm``) when one treatment
    arm carries no weight.
    """
    resp = as_responses(data)
    r = _treatment_of(data, treatment)
    if r is None:
        raise ValueError("predictive fits need a treatment indicator for every subject")
    w = _check_weights(weights, len(resp))
    return fit_predictive_design(b, response_design(b, resp), resp.kind, r, w, mode, cfg,
                                 warm_start, resp)


def _independent_columns(X, tol=1e-10):
    """Greedy selection of columns of X independent of an intercept and of
    each other; returns the kept column indices."""
    keep = []
    base = np.ones((X.shape[0], 1))
    for j in range(X.shape[1]):
        cand = np.hstack([base, X[:, keep + [j]]])
        s = np.linalg.svd(cand, compute_uv=False)
        if s[-1] > tol * s[0]:
            keep.append(j)
    return keep


def fit_shift_model(b: bs.Basis, data, covariates, with_treatment_interactions: bool = False,
                    cfg: FitConfig = FitConfig(), treatment=None, names=None) -> FitResult:
    """Linear baseline model z(t) = a(t)'theta + x'alpha
    (+ beta r + x'beta_vec r when interactions are requested)."""
    resp = as_responses(data)
    n = len(resp)
    X = np.asarray(covariates, float).reshape(n, -1)
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(X.shape[1])]
    cols, cnames = [X], list(names)
    if with_treatment_interactions:
        r = _treatment_of(data, treatment)
        if r is None:
            raise ValueError("treatment interactions need a treatment indicator")
        cols += [r[:, None], X * r[:, None]]
        cnames += ["treatment"] + [f"{nm}:treatment" for nm in names]
    C = np.hstack(cols)
    keep = _independent_columns(C) if C.shape[1] else []
    dropped = tuple(cnames[j] for j in range(C.shape[1]) if j not in keep)
    if dropped:
        warnings.warn(f"rank-deficient design; dropped columns {list(dropped)}")
    C = C[:, keep]
    kept_names = tuple(cnames[j] for j in keep)
    P = b.n_params
    A = response_design(b, resp)
    if C.shape[1] == 0:
        res = fit_unconditional(b, resp, cfg)
        res.coef, res.coef_names, res.dropped = np.zeros(0), (), dropped
        return res
    mean = C.mean(axis=0)
    sd = C.std(axis=0)
    sd[sd == 0] = 1.0
    Cs = (C - mean) / sd
    Z = model_design(A, shift=Cs)
    chains = _chain_array(bs.chain_rows(b))
    x0 = np.concatenate([initial_theta(b, resp), np.zeros(C.shape[1])])
    x, ll, ok, it, trace = solve(Z, resp.kind, chains, np.ones(n), x0, cfg)
    coef = x[P:] / sd
    theta = x[:P].copy()
    intercept = np.ones(P) if b.kind == bs.BERNSTEIN else np.array([1.0, 0.0])
    theta -= np.dot(mean, coef) * intercept
    flags = ("degenerate",) if _degenerate(resp.kind, np.ones(n)) else ()
    return FitResult(ModelParams(theta), float(ll), ok and not flags, _active(x, chains), it, flags,
                     coef=coef, coef_names=kept_names, dropped=dropped, trace=trace)
