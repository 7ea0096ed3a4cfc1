import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from traforest import basis as bs
from traforest import likelihood as lk
from traforest.likelihood import Exact, Interval, Left, ModelParams, Right, Subject

from conftest import central_diff, rel_err

W = bs.weibull()
UNIT = ModelParams(np.array([0.0, 1.0]))


def subj(resp, r=None):
    return Subject(resp, np.zeros(1), r)


# -- log-likelihood values -----------------------------------------------------

def test_unit_exponential_values():
    assert lk.loglik(W, UNIT, subj(Exact(2.0))) == pytest.approx(-2.0)
    assert lk.loglik(W, UNIT, subj(Right(3.0))) == pytest.approx(-3.0)
    assert lk.loglik(W, UNIT, subj(Interval(1.0, 2.0))) == pytest.approx(math.log(math.exp(-1) - math.exp(-2)))
    assert lk.loglik(W, UNIT, subj(Interval(1.0, 2.0))) == pytest.approx(-1.45867, abs=1e-5)
    assert lk.loglik(W, UNIT, subj(Left(1.0))) == pytest.approx(math.log(1 - math.exp(-1)))


def test_null_beta_treated_equals_untreated():
    p = ModelParams(np.array([0.3, 1.4]), beta=0.0)
    for resp in (Exact(2.0), Right(0.7), Left(1.1), Interval(0.5, 2.5)):
        assert lk.loglik(W, p, subj(resp, 1)) == lk.loglik(W, p, subj(resp, 0))


def test_infeasible_density_is_flagged_not_nan():
    p = ModelParams(np.array([0.0, -1.0]))
    v = lk.loglik(W, p, subj(Exact(2.0)))
    assert v == -math.inf


def test_left_censoring_is_stable_for_tiny_hazard():
    # z = -40: log(1 - exp(-e^z)) ~ z
    p = ModelParams(np.array([-40.0, 1.0]))
    v = lk.loglik(W, p, subj(Left(1.0)))
    assert np.isfinite(v) and v == pytest.approx(-40.0, abs=1e-9)
    v = lk.loglik(W, p, subj(Interval(1.0, 2.0)))
    # F(2) - F(1) ~ e^-40 (2 - 1)
    assert v == pytest.approx(-40.0, abs=1e-6)


def test_interval_tends_to_right_censoring():
    p = ModelParams(np.array([-0.2, 1.3]))
    right = lk.loglik(W, p, subj(Right(1.5)))
    assert lk.loglik(W, p, subj(Interval(1.5, 1e6))) == pytest.approx(right, abs=1e-9)


@given(lo=st.floats(0.05, 5.0), width=st.floats(0.01, 5.0), a=st.floats(-2, 2), s=st.floats(0.2, 3))
def test_interval_equals_distribution_difference(lo, width, a, s):
    hi = lo + width
    p = ModelParams(np.array([a, s]))

    def cumhaz(t):
        return math.exp(a + s * math.log(t))

    # log(S(lo) - S(hi)) = -H(lo) + log(1 - exp(-(H(hi) - H(lo))))
    want = -cumhaz(lo) + math.log(-math.expm1(-(cumhaz(hi) - cumhaz(lo))))
    assert lk.loglik(W, p, subj(Interval(lo, hi))) == pytest.approx(want, rel=1e-8, abs=1e-10)


def test_invalid_responses():
    for args in [(lk.EXACT, 0.0, 0.0), (lk.RIGHT, 1.0, 2.0), (lk.LEFT, 0.0, math.inf), (lk.INTERVAL, 2.0, 1.0)]:
        with pytest.raises(ValueError):
            lk.SurvResponse(*args)


def test_beta_and_thetatr_are_exclusive():
    with pytest.raises(ValueError):
        ModelParams(np.array([0.0, 1.0]), beta=0.1, theta_tr=np.zeros(2))


# -- scores ---------------------------------------------------------------------

def test_score_theta_hand_values():
    assert np.allclose(lk.score_theta(W, UNIT, subj(Exact(1.0))), [0.0, 1.0])
    assert np.allclose(lk.score_theta(W, UNIT, subj(Right(1.0))), [-1.0, 0.0])


def test_score_alpha_hand_values():
    assert lk.score_alpha(W, UNIT, subj(Exact(2.0))) == pytest.approx(-1.0)
    assert lk.score_alpha(W, UNIT, subj(Right(3.0))) == pytest.approx(-3.0)


def test_score_alpha_beta_hand_values():
    s = lk.score_alpha_beta(W, ModelParams(UNIT.theta, beta=0.0), subj(Exact(2.0), 1))
    assert np.allclose(s, [-1.0, -1.0])
    s = lk.score_alpha_beta(W, UNIT, subj(Right(1.0), 0))
    assert np.allclose(s, [-1.0, 0.0])


def test_score_theta_beta_blocks():
    p = ModelParams(np.array([0.2, 0.8]), beta=0.0)
    s0 = lk.score_theta_beta(W, p, subj(Exact(1.7), 0))
    assert s0[-1] == 0.0
    s1 = lk.score_theta_beta(W, p, subj(Exact(1.7), 1))
    assert np.allclose(s1[:2], lk.score_theta(W, ModelParams(p.theta), subj(Exact(1.7))))


def test_score_theta_thetatr_blocks():
    p = ModelParams(np.array([0.2, 0.8]), theta_tr=np.zeros(2))
    s0 = lk.score_theta_thetatr(W, p, subj(Interval(0.4, 2.0), 0))
    assert np.all(s0[2:] == 0.0)
    s1 = lk.score_theta_thetatr(W, p, subj(Interval(0.4, 2.0), 1))
    assert np.allclose(s1[:2], s1[2:])


def test_nonparametric_scores_without_events_are_zero():
    b = bs.fit_nonparametric(np.array([1.0, 2.0, 3.0]), np.zeros(3, bool))
    resp = lk.Responses.right_censored([1.0, 2.0, 3.0], [False] * 3)
    assert np.all(lk.score_matrix(b, lk.ALPHA, None, resp) == 0.0)


def test_nonparametric_rejects_other_families():
    b = bs.fit_nonparametric(np.array([1.0, 2.0]), np.ones(2, bool))
    resp = lk.Responses.exact_times([1.0, 2.0])
    with pytest.raises(bs.UnsupportedBasisError):
        lk.score_matrix(b, lk.THETA, None, resp)


# finite-difference oracle: every family under every censoring kind

BASES = {"weibull": bs.weibull(), "bernstein": bs.bernstein(5, (-1.0, 2.0))}
RESPONSES = {
    "exact": Exact(1.3), "right": Right(0.8), "left": Left(2.2), "interval": Interval(0.6, 3.1),
    "exact-outside": Exact(20.0), "interval-outside": Interval(0.1, 0.2),
}


def _theta(b):
    return np.array([-0.3, 1.2]) if b.kind == bs.WEIBULL else np.array([-2.0, -1.1, -0.4, 0.5, 0.9, 1.8])


def _fd_case(bname, rname, family, r):
    b, resp = BASES[bname], RESPONSES[rname]
    theta = _theta(b)
    P = theta.size
    s = subj(resp, r)
    if family == lk.THETA:
        analytic = lk.score_theta(b, ModelParams(theta), s)
        fd = central_diff(lambda x: lk.loglik(b, ModelParams(x), s), theta)
    elif family == lk.ALPHA:
        analytic = np.array([lk.score_alpha(b, ModelParams(theta), s)])
        e1 = np.zeros(P)
        e1[0] = 1.0
        if b.kind == bs.BERNSTEIN:
            e1 = np.ones(P)  # an intercept shift of a Bernstein polynomial
        fd = central_diff(lambda a: lk.loglik(b, ModelParams(theta + a[0] * e1), s), [0.0])
    elif family == lk.ALPHA_BETA:
        analytic = lk.score_alpha_beta(b, ModelParams(theta, beta=0.0), s)
        e1 = np.ones(P) if b.kind == bs.BERNSTEIN else np.array([1.0, 0.0])
        fd = central_diff(lambda v: lk.loglik(b, ModelParams(theta + v[0] * e1, beta=v[1]), s), [0.0, 0.0])
    elif family == lk.THETA_BETA:
        analytic = lk.score_theta_beta(b, ModelParams(theta, beta=0.15), s)
        fd = central_diff(lambda v: lk.loglik(b, ModelParams(v[:P], beta=v[P]), s), np.r_[theta, 0.15])
    else:
        tr = np.full(P, 0.05) if b.kind == bs.BERNSTEIN else np.array([0.1, 0.05])
        analytic = lk.score_theta_thetatr(b, ModelParams(theta, theta_tr=tr), s)
        fd = central_diff(lambda v: lk.loglik(b, ModelParams(v[:P], theta_tr=v[P:]), s), np.r_[theta, tr])
    return analytic, fd


@pytest.mark.parametrize("bname", sorted(BASES))
@pytest.mark.parametrize("rname", sorted(RESPONSES))
@pytest.mark.parametrize("family", lk.FAMILIES)
@pytest.mark.parametrize("r", [0, 1])
def test_scores_match_finite_differences(bname, rname, family, r):
    analytic, fd = _fd_case(bname, rname, family, r)
    assert rel_err(analytic, fd) < 1e-5


def test_score_matrix_matches_single_subject_api():
    b = BASES["bernstein"]
    theta = _theta(b)
    resp = lk.Responses.from_list(list(RESPONSES.values()))
    r = np.array([0, 1, 0, 1, 1, 0], float)
    p = ModelParams(theta, theta_tr=np.zeros_like(theta))
    S = lk.score_matrix(b, lk.THETA_THETATR, p, resp, r)
    for i, resp_i in enumerate(RESPONSES.values()):
        assert np.allclose(S[i], lk.score_theta_thetatr(b, p, subj(resp_i, int(r[i]))))


# -- weighted totals ------------------------------------------------------------

def test_total_loglik():
    s = [subj(Exact(2.0))]
    assert lk.total_loglik(W, UNIT, s, [0.0]) == 0.0
    assert lk.total_loglik(W, UNIT, s, [1.0]) == pytest.approx(-2.0)
    many = [subj(Exact(2.0)), subj(Right(1.0)), subj(Interval(1.0, 2.0))]
    one = lk.total_loglik(W, UNIT, many, [1.0, 1.0, 1.0])
    assert lk.total_loglik(W, UNIT, many, [2.0, 2.0, 2.0]) == pytest.approx(2 * one)
    with pytest.raises(ValueError):
        lk.total_loglik(W, UNIT, s, [-1.0])


def test_missing_treatment():
    with pytest.raises(lk.MissingTreatmentError):
        lk.score_alpha_beta(W, UNIT, subj(Exact(1.0)))


@given(z=st.floats(-30, 5), a=st.floats(-3, 3))
def test_distribution_function_bounds(z, a):
    # F(t) = 1 - exp(-exp(z)) in [0, 1) and monotone for feasible theta
    b = BASES["bernstein"]
    theta = _theta(b) + a
    t = np.exp(np.linspace(-3, 4, 50))
    F = 1 - np.exp(-np.exp(bs.design(b, t) @ theta))
    assert np.all((F >= 0) & (F <= 1))
    assert np.all(np.diff(F) >= 0)
