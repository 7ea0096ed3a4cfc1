"""Log-cumulative-hazard bases a(t): Weibull, Bernstein on log time, and the
non-parametric (Nelson-Aalen) baseline used only for log-rank scores."""
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

WEIBULL = "weibull"
BERNSTEIN = "bernstein"
NONPARAMETRIC = "nonparametric"

# lower bound on the Weibull accelerator and on consecutive Bernstein
# coefficient differences; keeps the feasible set closed and densities > 0
EPS_POS = 1e-8


class UnsupportedBasisError(ValueError):
    pass


@dataclass(frozen=True)
class Basis:
    """A basis for the log-cumulative hazard.

    ``order`` and ``support`` (bounds on log time) only apply to Bernstein
    bases; ``baseline_times``/``baseline_cumhaz`` hold a fitted Nelson-Aalen
    step function for the non-parametric kind.
    """

    kind: str
    order: int = 0
    support: Optional[Tuple[float, float]] = None
    baseline_times: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    baseline_cumhaz: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in (WEIBULL, BERNSTEIN, NONPARAMETRIC):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.kind == BERNSTEIN:
            if self.order < 1:
                raise ValueError("Bernstein order must be >= 1")
            if self.support is None or not self.support[0] < self.support[1]:
                raise ValueError("Bernstein basis needs a support (lo, hi) with lo < hi")

    @property
    def n_params(self) -> int:
        if self.kind == WEIBULL:
            return 2
        if self.kind == BERNSTEIN:
            return self.order + 1
        raise UnsupportedBasisError("the non-parametric basis has no parameter vector")

    @property
    def parametric(self) -> bool:
        return self.kind != NONPARAMETRIC


def weibull() -> Basis:
    return Basis(WEIBULL)


def bernstein(order: int, support: Tuple[float, float]) -> Basis:
    return Basis(BERNSTEIN, order=int(order), support=(float(support[0]), float(support[1])))


def nonparametric() -> Basis:
    return Basis(NONPARAMETRIC)


def default_support(log_times) -> Tuple[float, float]:
    """[min, max] of the finite log-time bounds; needs two distinct values."""
    lt = np.asarray(log_times, dtype=float).ravel()
    lt = lt[np.isfinite(lt)]
    if lt.size == 0 or not lt.min() < lt.max():
        raise ValueError("support needs at least two distinct finite log-times")
    return float(lt.min()), float(lt.max())


def bernstein_polys(u, degree: int) -> np.ndarray:
    """Bernstein basis polynomials of ``degree`` at ``u`` (de Casteljau
    triangle), shape (len(u), degree + 1)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    out = np.zeros((u.size, degree + 1))
    out[:, 0] = 1.0
    v = 1.0 - u
    for m in range(1, degree + 1):
        for k in range(m, 0, -1):
            out[:, k] = v * out[:, k] + u * out[:, k - 1]
        out[:, 0] = v * out[:, 0]
    return out


def bernstein_polys_du(u, degree: int) -> np.ndarray:
    """d/du of :func:`bernstein_polys`."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    out = np.zeros((u.size, degree + 1))
    if degree == 0:
        return out
    low = bernstein_polys(u, degree - 1) * degree
    out[:, :-1] -= low
    out[:, 1:] += low
    return out


def _check_times(t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(~(t > 0)):
        raise ValueError("basis evaluation needs positive times")
    return t


def _bernstein_design(b: Basis, t: np.ndarray, deriv: bool) -> np.ndarray:
    lo, hi = b.support
    width = hi - lo
    u = (np.log(t) - lo) / width
    uc = np.clip(u, 0.0, 1.0)
    du = bernstein_polys_du(uc, b.order)
    if deriv:
        # d/dt = d/du * 1 / (width * t); constant slope in log t beyond support
        return du / (width * t)[:, None]
    val = bernstein_polys(uc, b.order)
    outside = u != uc
    if np.any(outside):
        val[outside] += (u - uc)[outside, None] * du[outside]
    return val


def design(b: Basis, t) -> np.ndarray:
    """Rows a(t) for every entry of ``t``; shape (n, P)."""
    t = _check_times(t)
    if b.kind == WEIBULL:
        return np.column_stack([np.ones_like(t), np.log(t)])
    if b.kind == BERNSTEIN:
        return _bernstein_design(b, t, deriv=False)
    raise UnsupportedBasisError("the non-parametric basis has no a(t)")


def design_deriv(b: Basis, t) -> np.ndarray:
    """Rows a'(t) = d a(t) / dt; shape (n, P)."""
    t = _check_times(t)
    if b.kind == WEIBULL:
        return np.column_stack([np.zeros_like(t), 1.0 / t])
    if b.kind == BERNSTEIN:
        return _bernstein_design(b, t, deriv=True)
    raise UnsupportedBasisError("the non-parametric basis has no a'(t)")


def eval_basis(b: Basis, t: float) -> np.ndarray:
    return design(b, [t])[0]


def eval_basis_deriv(b: Basis, t: float) -> np.ndarray:
    return design_deriv(b, [t])[0]


@dataclass(frozen=True)
class ConstraintSet:
    """Linear constraints ``matrix @ theta >= lower``."""

    matrix: np.ndarray
    lower: np.ndarray

    def satisfied(self, theta, tol: float = 0.0) -> bool:
        return bool(np.all(self.matrix @ np.asarray(theta, float) >= self.lower - tol))


def constraints(b: Basis) -> ConstraintSet:
    P = b.n_params
    if b.kind == WEIBULL:
        return ConstraintSet(np.array([[0.0, 1.0]]), np.array([EPS_POS]))
    D = np.zeros((P - 1, P))
    idx = np.arange(P - 1)
    D[idx, idx] = -1.0
    D[idx, idx + 1] = 1.0
    return ConstraintSet(D, np.full(P - 1, EPS_POS))


def chain_rows(b: Basis, offset: int = 0) -> list:
    """Constraint description consumed by the solver kernels."""
    from ._kernels import CHAIN_LOWER, CHAIN_MONOTONE

    if b.kind == WEIBULL:
        return [(offset + 1, 1, CHAIN_LOWER, 0)]
    return [(offset, b.n_params, CHAIN_MONOTONE, 0)]


def nelson_aalen(time, event, weights=None):
    """Nelson-Aalen cumulative hazard; returns (event times, cumhaz at them)."""
    time = np.asarray(time, float)
    event = np.asarray(event, bool)
    w = np.ones_like(time) if weights is None else np.asarray(weights, float)
    order = np.argsort(time, kind="mergesort")
    ts, es, ws = time[order], event[order], w[order]
    uniq, first = np.unique(ts, return_index=True)
    at_risk = np.cumsum(ws[::-1])[::-1][first]
    d = np.add.reduceat(ws * es, first)
    keep = d > 0
    return uniq[keep], np.cumsum(d[keep] / at_risk[keep])


def cumhaz_at(b: Basis, t) -> np.ndarray:
    """Step-function evaluation of a fitted non-parametric baseline."""
    if b.kind != NONPARAMETRIC or b.baseline_times is None:
        raise UnsupportedBasisError("non-parametric basis has no fitted baseline")
    t = np.asarray(t, float)
    if b.baseline_times.size == 0:
        return np.zeros_like(t)
    pos = np.searchsorted(b.baseline_times, t, side="right")
    ch = np.concatenate([[0.0], b.baseline_cumhaz])
    return ch[pos]


def fit_nonparametric(time, event) -> Basis:
    times, ch = nelson_aalen(time, event)
    return Basis(NONPARAMETRIC, baseline_times=times, baseline_cumhaz=ch)
