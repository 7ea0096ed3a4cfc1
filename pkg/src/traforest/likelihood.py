"""Censored-data log-likelihood contributions and score functions of the
transformation model P(T <= t) = 1 - exp(-exp(a(t)'theta [+ shift]))."""
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import basis as bs
from ._kernels import EXACT, INTERVAL, LEFT, RIGHT, obs_terms

KIND_NAMES = {EXACT: "exact", RIGHT: "right", LEFT: "left", INTERVAL: "interval"}

ALPHA = "alpha"
THETA = "theta"
ALPHA_BETA = "alpha-beta"
THETA_BETA = "theta-beta"
THETA_THETATR = "theta-thetatr"
FAMILIES = (ALPHA, THETA, ALPHA_BETA, THETA_BETA, THETA_THETATR)
PREDICTIVE_FAMILIES = (ALPHA_BETA, THETA_BETA, THETA_THETATR)


class MissingTreatmentError(ValueError):
    pass


@dataclass(frozen=True)
class SurvResponse:
    """One survival observation; ``lower``/``upper`` follow the kind:
    exact (t, t), right (t, inf), left (0, t), interval (lo, hi)."""

    kind: int
    lower: float
    upper: float

    def __post_init__(self):
        lo, hi = self.lower, self.upper
        if self.kind == EXACT:
            ok = lo > 0 and lo == hi
        elif self.kind == RIGHT:
            ok = lo > 0 and hi == np.inf
        elif self.kind == LEFT:
            ok = lo == 0 and 0 < hi < np.inf
        elif self.kind == INTERVAL:
            ok = 0 < lo < hi < np.inf
        else:
            ok = False
        if not ok:
            raise ValueError(f"invalid {KIND_NAMES.get(self.kind, self.kind)} response ({lo}, {hi})")

    @classmethod
    def exact(cls, t):
        return cls(EXACT, float(t), float(t))

    @classmethod
    def right(cls, t):
        return cls(RIGHT, float(t), np.inf)

    @classmethod
    def left(cls, t):
        return cls(LEFT, 0.0, float(t))

    @classmethod
    def interval(cls, lo, hi):
        return cls(INTERVAL, float(lo), float(hi))


Exact, Right, Left, Interval = SurvResponse.exact, SurvResponse.right, SurvResponse.left, SurvResponse.interval


class Responses:
    """Column store of N survival responses."""

    def __init__(self, kind, lower, upper):
        self.kind = np.asarray(kind, dtype=np.int64)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)

    @classmethod
    def from_list(cls, items: Sequence[SurvResponse]):
        return cls([r.kind for r in items], [r.lower for r in items], [r.upper for r in items])

    @classmethod
    def from_bounds(cls, lower, upper):
        """Classify (lower, upper) pairs: equal -> exact, upper=inf -> right,
        lower=0 -> left, otherwise interval."""
        lower = np.asarray(lower, float)
        upper = np.asarray(upper, float)
        kind = np.full(lower.shape, INTERVAL, dtype=np.int64)
        kind[upper == np.inf] = RIGHT
        kind[lower == 0] = LEFT
        kind[lower == upper] = EXACT
        bad = ~((lower >= 0) & (upper > 0) & (lower <= upper)) | ((lower == 0) & (upper == np.inf))
        if bad.any():
            raise ValueError(f"invalid response bounds at rows {np.nonzero(bad)[0][:10] + 1}")
        return cls(kind, lower, upper)

    @classmethod
    def exact_times(cls, t):
        t = np.asarray(t, float)
        return cls(np.full(t.shape, EXACT), t, t)

    @classmethod
    def right_censored(cls, time, event):
        time = np.asarray(time, float)
        event = np.asarray(event, bool)
        return cls(np.where(event, EXACT, RIGHT), time, np.where(event, time, np.inf))

    def __len__(self):
        return self.kind.shape[0]

    def __getitem__(self, idx):
        if np.isscalar(idx):
            return SurvResponse(int(self.kind[idx]), float(self.lower[idx]), float(self.upper[idx]))
        return Responses(self.kind[idx], self.lower[idx], self.upper[idx])

    def finite_log_bounds(self) -> np.ndarray:
        vals = np.concatenate([self.lower, self.upper])
        vals = vals[(vals > 0) & np.isfinite(vals)]
        return np.log(vals)

    def event_view(self):
        """(time, event) for exact/right-censored data."""
        if np.any((self.kind == LEFT) | (self.kind == INTERVAL)):
            raise ValueError("left- or interval-censored responses have no (time, event) form")
        return self.lower, self.kind == EXACT


@dataclass(frozen=True)
class ModelParams:
    theta: np.ndarray
    beta: Optional[float] = None
    theta_tr: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        if self.theta_tr is not None:
            object.__setattr__(self, "theta_tr", np.asarray(self.theta_tr, dtype=float))
        if self.beta is not None and self.theta_tr is not None:
            raise ValueError("at most one of beta / theta_tr may be set")

    @property
    def has_treatment(self) -> bool:
        return self.beta is not None or self.theta_tr is not None

    def arm_theta(self, r: int) -> np.ndarray:
        if r and self.theta_tr is not None:
            return self.theta + self.theta_tr
        return self.theta

    def arm_shift(self, r: int) -> float:
        return float(self.beta) if (r and self.beta is not None) else 0.0


@dataclass(frozen=True)
class Subject:
    response: SurvResponse
    covariates: np.ndarray = None
    treatment: Optional[int] = None


# ---------------------------------------------------------------------------
# design matrices
# ---------------------------------------------------------------------------

def response_design(b: bs.Basis, resp: Responses):
    """(A_lo, A_hi, A_d): basis rows at the lower bound (exact/right/interval),
    upper bound (left/interval) and the derivative at exact times; unused rows 0."""
    n, P = len(resp), b.n_params
    Alo = np.zeros((n, P))
    Ahi = np.zeros((n, P))
    Ad = np.zeros((n, P))
    use_lo = (resp.kind == EXACT) | (resp.kind == RIGHT) | (resp.kind == INTERVAL)
    use_hi = (resp.kind == LEFT) | (resp.kind == INTERVAL)
    ex = resp.kind == EXACT
    if use_lo.any():
        Alo[use_lo] = bs.design(b, resp.lower[use_lo])
    if use_hi.any():
        Ahi[use_hi] = bs.design(b, resp.upper[use_hi])
    if ex.any():
        Ad[ex] = bs.design_deriv(b, resp.lower[ex])
    return Alo, Ahi, Ad


def model_design(A, treatment=None, mode=None, shift=None):
    """Stack extra columns onto the basis design.

    mode "beta": z += beta * r; mode "theta_tr": z += a(t)'theta_tr * r;
    ``shift`` (n x k) adds linear shift terms sharing z_lo and z_hi.
    """
    Alo, Ahi, Ad = A
    n = Alo.shape[0]
    blocks_lo, blocks_hi, blocks_d = [Alo], [Ahi], [Ad]
    used_lo = np.any(Alo != 0, axis=1) | np.any(Ad != 0, axis=1)
    used_hi = np.any(Ahi != 0, axis=1)
    if mode == "beta":
        r = np.asarray(treatment, float)[:, None]
        blocks_lo.append(r * used_lo[:, None])
        blocks_hi.append(r * used_hi[:, None])
        blocks_d.append(np.zeros((n, 1)))
    elif mode == "theta_tr":
        r = np.asarray(treatment, float)[:, None]
        blocks_lo.append(r * Alo)
        blocks_hi.append(r * Ahi)
        blocks_d.append(r * Ad)
    elif mode is not None:
        raise ValueError(f"unknown treatment mode {mode!r}")
    if shift is not None and shift.shape[1] > 0:
        blocks_lo.append(shift * used_lo[:, None])
        blocks_hi.append(shift * used_hi[:, None])
        blocks_d.append(np.zeros_like(shift))
    return (np.ascontiguousarray(np.hstack(blocks_lo)),
            np.ascontiguousarray(np.hstack(blocks_hi)),
            np.ascontiguousarray(np.hstack(blocks_d)))


def _linear_predictors(b, p: ModelParams, resp: Responses, treatment):
    A = response_design(b, resp)
    if p.theta_tr is not None:
        gamma = np.concatenate([p.theta, p.theta_tr])
        Z = model_design(A, treatment, "theta_tr")
    elif p.beta is not None:
        gamma = np.concatenate([p.theta, [p.beta]])
        Z = model_design(A, treatment, "beta")
    else:
        gamma = p.theta
        Z = A
    return A, Z[0] @ gamma, Z[1] @ gamma, Z[2] @ gamma


def _treatment_array(treatment, n, needed):
    if treatment is None:
        if needed:
            raise MissingTreatmentError("treatment indicator required")
        return np.zeros(n)
    r = np.asarray(treatment, float).reshape(-1)
    if r.shape[0] == 1 and n != 1:
        r = np.full(n, r[0])
    return r


# ---------------------------------------------------------------------------
# vectorised contributions and scores
# ---------------------------------------------------------------------------

def loglik_contributions(b: bs.Basis, p: ModelParams, resp: Responses, treatment=None):
    r = _treatment_array(treatment, len(resp), p.has_treatment)
    _, zl, zh, zd = _linear_predictors(b, p, resp, r)
    ll, *_ = obs_terms(resp.kind, zl, zh, zd)
    return ll


def score_matrix(b: bs.Basis, family: str, p: ModelParams, resp: Responses, treatment=None):
    """Per-subject scores of ``family`` at ``p``; shape (n, q)."""
    if b.kind == bs.NONPARAMETRIC:
        # no parameters: log-rank scores against the fitted Nelson-Aalen baseline
        if family != ALPHA:
            raise bs.UnsupportedBasisError("the non-parametric basis only supplies log-rank (alpha) scores")
        time, event = resp.event_view()
        return (event - bs.cumhaz_at(b, time))[:, None]
    needs_r = family in PREDICTIVE_FAMILIES
    r = _treatment_array(treatment, len(resp), needs_r or p.has_treatment)
    A, zl, zh, zd = _linear_predictors(b, p, resp, r)
    _, dl, dh, dd = obs_terms(resp.kind, zl, zh, zd)
    u = dl + dh
    if family == ALPHA:
        return u[:, None]
    if family == ALPHA_BETA:
        return np.column_stack([u, u * r])
    s_theta = dl[:, None] * A[0] + dh[:, None] * A[1] + dd[:, None] * A[2]
    if family == THETA:
        return s_theta
    if family == THETA_BETA:
        return np.column_stack([s_theta, u * r])
    if family == THETA_THETATR:
        return np.hstack([s_theta, s_theta * r[:, None]])
    raise ValueError(f"unknown score family {family!r}")


# ---------------------------------------------------------------------------
# single-subject API
# ---------------------------------------------------------------------------

def _one(s: Subject):
    return Responses.from_list([s.response]), (None if s.treatment is None else [s.treatment])


def loglik(b: bs.Basis, p: ModelParams, s: Subject) -> float:
    """Log-likelihood contribution; ``-inf`` flags an infeasible parameter."""
    resp, r = _one(s)
    return float(loglik_contributions(b, p, resp, r)[0])


def score_theta(b, p, s):
    resp, r = _one(s)
    full = score_matrix(b, THETA_THETATR if p.theta_tr is not None else
                        (THETA_BETA if p.beta is not None else THETA), p, resp, r)[0]
    return full[:b.n_params]


def score_alpha(b, p, s) -> float:
    resp, r = _one(s)
    return float(score_matrix(b, ALPHA, p, resp, r)[0, 0])


def score_alpha_beta(b, p, s):
    if s.treatment is None:
        raise MissingTreatmentError("treatment indicator required")
    resp, r = _one(s)
    return score_matrix(b, ALPHA_BETA, p, resp, r)[0]


def score_theta_beta(b, p, s):
    if s.treatment is None:
        raise MissingTreatmentError("treatment indicator required")
    resp, r = _one(s)
    if p.beta is None and p.theta_tr is None:
        p = ModelParams(p.theta, beta=0.0)
    return score_matrix(b, THETA_BETA, p, resp, r)[0]


def score_theta_thetatr(b, p, s):
    if s.treatment is None:
        raise MissingTreatmentError("treatment indicator required")
    resp, r = _one(s)
    if p.theta_tr is None and p.beta is None:
        p = ModelParams(p.theta, theta_tr=np.zeros_like(p.theta))
    return score_matrix(b, THETA_THETATR, p, resp, r)[0]


def total_loglik(b, p, subjects: Sequence[Subject], weights) -> float:
    w = np.asarray(weights, float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if len(subjects) == 0:
        return 0.0
    resp = Responses.from_list([s.response for s in subjects])
    r = None if subjects[0].treatment is None else [s.treatment for s in subjects]
    ll = loglik_contributions(b, p, resp, r)
    pos = w > 0
    return float(np.dot(w[pos], ll[pos]))
