"""Weibull data-generating processes with Friedman-function effects and the
benchmark harness comparing forests by out-of-sample log-likelihood."""
import csv
import io
import math
import time
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .data import SurvData
from .forest import ForestConfig, draw_subsamples, grow_forest
from .likelihood import Responses
from .tree import SplitSpec, TreeConfig

PROGNOSTIC, PREDICTIVE = "prognostic", "predictive"
NO, PH, NONPH, COMBINED = "no", "ph", "non-ph", "combined"
LOW, HIGH = "low", "high"
EFFECTS = {PROGNOSTIC: (NO, PH, NONPH, COMBINED), PREDICTIVE: (PH, NONPH, COMBINED)}
N_FEATURES = {(PROGNOSTIC, LOW): 15, (PROGNOSTIC, HIGH): 60, (PREDICTIVE, LOW): 25, (PREDICTIVE, HIGH): 70}

BENCH_COLUMNS = ["scenario", "mode", "dim", "method", "rep", "oos_loglik", "true_loglik", "delta", "wallclock_s"]


def _check_unit(x):
    x = np.asarray(x, float)
    if np.any((x < 0) | (x > 1)) or not np.all(np.isfinite(x)):
        raise ValueError("Friedman inputs must lie in [0, 1]")
    return x


def friedman(x1, x2, x3, x4, x5):
    """10 sin(pi x1 x2) + 20 (x3 - 0.5)^2 + 10 x4 + 5 x5 on [0, 1]^5."""
    x1, x2, x3, x4, x5 = (_check_unit(v) for v in (x1, x2, x3, x4, x5))
    return 10.0 * np.sin(np.pi * x1 * x2) + 20.0 * (x3 - 0.5) ** 2 + 10.0 * x4 + 5.0 * x5


def friedman_star(x1, x2, x3, x4, x5):
    """Friedman function mapped from its range [0, 30] onto [-1.5, 1.5]."""
    return friedman(x1, x2, x3, x4, x5) / 10.0 - 1.5


def _fstar(X, first):
    """F* applied to columns first..first+4 (0-based)."""
    return friedman_star(*(X[:, first + k] for k in range(5)))


@dataclass(frozen=True)
class Scenario:
    mode: str = PROGNOSTIC
    effect: str = PH
    dim: str = LOW
    n_learn: int = 250
    n_valid: int = 500
    seed: int = 0
    # rate of independent exponential right-censoring; 0 keeps exact times
    censor_rate: float = 0.0

    def __post_init__(self):
        if self.mode not in EFFECTS:
            raise ValueError(f"mode must be one of {sorted(EFFECTS)}")
        if self.effect not in EFFECTS[self.mode]:
            raise ValueError(f"effect {self.effect!r} is not defined for {self.mode} scenarios "
                             f"(choose from {', '.join(EFFECTS[self.mode])})")
        if self.dim not in (LOW, HIGH):
            raise ValueError("dim must be 'low' or 'high'")
        if self.n_learn < 1 or self.n_valid < 0:
            raise ValueError("sample sizes must be positive")
        if self.censor_rate < 0:
            raise ValueError("censor_rate must be non-negative")

    @property
    def n_features(self) -> int:
        return N_FEATURES[(self.mode, self.dim)]

    @property
    def name(self) -> str:
        return f"{self.mode}-{self.effect}-{self.dim}"

    def informative(self) -> List[int]:
        """0-based columns that enter (xi, alpha)."""
        if self.mode == PROGNOSTIC:
            return {NO: [], PH: list(range(5)), NONPH: list(range(5, 10)),
                    COMBINED: list(range(10))}[self.effect]
        return {PH: list(range(10)), NONPH: list(range(10, 20)),
                COMBINED: list(range(20))}[self.effect]


@dataclass
class TrueParams:
    xi: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        self.xi = np.asarray(self.xi, float)
        self.alpha = np.asarray(self.alpha, float)
        if np.any(self.xi <= 0):
            raise ValueError("xi must be positive")


def true_params(sc: Scenario, X, r=None) -> TrueParams:
    n = X.shape[0]
    zero = np.zeros(n)
    if sc.mode == PROGNOSTIC:
        alpha = _fstar(X, 0) if sc.effect in (PH, COMBINED) else zero
        log_xi = _fstar(X, 5) if sc.effect in (NONPH, COMBINED) else zero
    else:
        r = np.asarray(r, float)
        alpha = _fstar(X, 0) + _fstar(X, 5) * r if sc.effect in (PH, COMBINED) else zero
        log_xi = _fstar(X, 10) + _fstar(X, 15) * r if sc.effect in (NONPH, COMBINED) else zero
    return TrueParams(np.exp(log_xi), alpha)


def event_time(E, xi, alpha):
    """Invert the Weibull model: the time whose cumulative hazard equals E."""
    return np.exp((np.log(E) - np.asarray(alpha, float)) / np.asarray(xi, float))


def gen_dataset(sc: Scenario, n: Optional[int] = None, seed=None):
    """Draw n subjects (default ``sc.n_learn``) with seed (default ``sc.seed``).

    Returns (SurvData, TrueParams)."""
    n = sc.n_learn if n is None else int(n)
    rng = np.random.default_rng(sc.seed if seed is None else seed)
    J = sc.n_features
    X = rng.uniform(size=(n, J))
    r = rng.integers(0, 2, size=n).astype(float) if sc.mode == PREDICTIVE else None
    tp = true_params(sc, X, r)
    E = rng.exponential(size=n)
    t = event_time(E, tp.xi, tp.alpha)
    if sc.censor_rate > 0:
        c = rng.exponential(1.0 / sc.censor_rate, size=n)
        resp = Responses.right_censored(np.minimum(t, c), t <= c)
    else:
        resp = Responses.exact_times(t)
    names = [f"x{j + 1}" for j in range(J)]
    return SurvData(resp, X, r, names), tp


def true_loglik(valid, tp: TrueParams) -> float:
    """Exact-time Weibull log-likelihood at the true (xi, alpha)."""
    t = valid.resp.lower if isinstance(valid, SurvData) else np.asarray(valid, float)
    if isinstance(valid, SurvData) and np.any(valid.resp.kind != 0):
        raise ValueError("true_loglik expects exact event times")
    if np.any(t <= 0):
        raise ValueError("times must be positive")
    if np.any(tp.xi <= 0):
        raise ValueError("xi must be positive")
    z = tp.xi * np.log(t) + tp.alpha
    return float(np.sum(z - np.exp(z) + np.log(tp.xi) - np.log(t)))


def default_forest_config(sc: Scenario, n_trees: int = 250, seed: int = 0, **tree_kw) -> ForestConfig:
    """Forest settings of the simulation study: depth 10, min node 20,
    bagging in low dimensions and sqrt(J) candidates in high dimensions."""
    tree_kw.setdefault("mtry", "all" if sc.dim == LOW else "sqrt")
    return ForestConfig(n_trees=n_trees, tree=TreeConfig(**tree_kw), master_seed=seed)


def _rep_seed(seed: int, rep: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, rep, stream])


def run_rep(sc: Scenario, methods: Sequence[SplitSpec], rep: int, forest_cfg: ForestConfig,
            seed: int = 0, timing: bool = True):
    """One repetition: fresh learning/validation draw, every method grown on
    the same subsamples.  Returns a list of row dicts."""
    learn, _ = gen_dataset(sc, sc.n_learn, _rep_seed(seed, rep, 0))
    valid, tp = gen_dataset(sc, sc.n_valid, _rep_seed(seed, rep, 1))
    truth = true_loglik(valid, tp)
    sub_seed = int(_rep_seed(seed, rep, 2).generate_state(1, np.uint64)[0])
    strat = learn.treatment if sc.mode == PREDICTIVE else None
    subs = draw_subsamples(len(learn), forest_cfg.subsample_fraction, forest_cfg.n_trees, sub_seed, strat)
    rows = []
    for spec in methods:
        if spec.predictive and sc.mode != PREDICTIVE:
            raise ValueError(f"{spec.label} needs a predictive scenario")
        cfg = replace(forest_cfg, spec=spec, master_seed=sub_seed)
        t0 = time.perf_counter()
        forest = grow_forest(learn, cfg, subsamples=subs)
        oos = forest.oos_loglik(valid)
        elapsed = time.perf_counter() - t0
        rows.append({"scenario": sc.effect, "mode": sc.mode, "dim": sc.dim, "method": spec.label,
                     "rep": rep, "oos_loglik": oos, "true_loglik": truth, "delta": oos - truth,
                     "wallclock_s": elapsed if timing else None})
    return rows


def run_benchmark(sc: Scenario, methods: Sequence[SplitSpec], n_reps: int,
                  forest_cfg: Optional[ForestConfig] = None, seed: int = 0, timing: bool = True,
                  threads: int = 1):
    """Rows of (scenario, mode, dim, method, rep, oos_loglik, true_loglik,
    delta, wallclock_s) for ``n_reps`` repetitions."""
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    if not methods:
        raise ValueError("at least one method is required")
    forest_cfg = default_forest_config(sc) if forest_cfg is None else forest_cfg
    reps = range(n_reps)
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as ex:
            chunks = list(ex.map(lambda k: run_rep(sc, methods, k, forest_cfg, seed, timing), reps))
    else:
        chunks = [run_rep(sc, methods, k, forest_cfg, seed, timing) for k in reps]
    return [row for chunk in chunks for row in chunk]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def benchmark_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in BENCH_COLUMNS])
    return buf.getvalue()
