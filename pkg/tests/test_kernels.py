"""The compiled loop kernels and the numpy kernels must agree."""
import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from traforest import _kernels as K

numba = pytest.importorskip("numba")

obs_loop = numba.njit(K._obs_terms_loop)
objective_loop = numba.njit(K._objective_loop)
scan_loop = numba.njit(K._scan_loop)
leaf_loop = numba.njit(K._leaf_ids_loop)
cooccur_loop = numba.njit(K._cooccur_loop)


def _design(rng, n, q):
    kind = rng.integers(0, 4, size=n).astype(np.int64)
    zl = rng.normal(size=n)
    zh = zl + rng.exponential(size=n)
    zh[kind == 0] = zl[kind == 0]
    zd = rng.exponential(size=n)
    return kind, zl, zh, zd


@given(st.integers(0, 2**31 - 1))
def test_observation_terms_agree(seed):
    rng = np.random.default_rng(seed)
    kind, zl, zh, zd = _design(rng, 64, 1)
    zl[:4] = [-40.0, -25.0, 3.0, 0.0]
    for a, b in zip(obs_loop(kind, zl, zh, zd), K._obs_terms_vec(kind, zl, zh, zd)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_objective_agrees():
    rng = np.random.default_rng(1)
    n, q = 200, 6
    Zlo = rng.normal(size=(n, q))
    Zhi = Zlo + np.abs(rng.normal(size=(n, q)))
    Zd = np.abs(rng.normal(size=(n, q)))
    kind = rng.integers(0, 4, size=n).astype(np.int64)
    Zhi[kind == 0] = Zlo[kind == 0]
    w = rng.integers(0, 3, size=n).astype(float)
    gamma = 0.1 * rng.normal(size=q)
    fa, ga = objective_loop(gamma, Zlo, Zhi, Zd, kind, w, w.sum())
    fb, gb = K._objective_vec(gamma, Zlo, Zhi, Zd, kind, w, w.sum())
    if np.isfinite(fa):
        assert fa == pytest.approx(fb, rel=1e-12)
        np.testing.assert_allclose(ga, gb, rtol=1e-10, atol=1e-12)
    else:
        assert not np.isfinite(fb)


@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_scan_agrees(seed, min_node):
    rng = np.random.default_rng(seed)
    n, q = 40, 3
    s = rng.normal(size=(n, q))
    x = np.round(rng.uniform(size=n), 1)
    order = np.argsort(x, kind="mergesort")
    V = s.T @ s - np.outer(s.sum(0), s.sum(0)) / n
    vp = np.linalg.pinv(V, rcond=1e-10)
    a = scan_loop(s, x, order, vp, min_node)
    b = K._scan_vec(s, x, order, vp, min_node)
    assert a[2] == b[2]
    assert a[0] == pytest.approx(b[0], rel=1e-10, abs=1e-12)
    if a[2] >= 0:
        assert a[1] == b[1]


def test_leaf_ids_and_cooccurrence_agree():
    rng = np.random.default_rng(2)
    feature = np.array([0, 1, -1, -1, -1], dtype=np.int64)
    threshold = np.array([0.5, 0.3, np.nan, np.nan, np.nan])
    left = np.array([1, 3, -1, -1, -1], dtype=np.int64)
    right = np.array([2, 4, -1, -1, -1], dtype=np.int64)
    X = rng.uniform(size=(100, 2))
    la = leaf_loop(X, feature, threshold, left, right)
    lb = K._leaf_ids_vec(X, feature, threshold, left, right)
    assert np.array_equal(la, lb)
    leaf_t = la.copy()
    leaf_t[::3] = -1
    out_a = np.zeros((100, 100))
    out_b = np.zeros((100, 100))
    cooccur_loop(la, leaf_t, out_a)
    K._cooccur_vec(la, leaf_t, out_b)
    assert np.array_equal(out_a, out_b)


_SCRIPT = """
import json, numpy as np
from traforest import _jit
from traforest.data import SurvData
from traforest.forest import ForestConfig, grow_forest
from traforest.likelihood import Responses
from traforest.tree import TreeConfig
rng = np.random.default_rng(0)
X = rng.uniform(size=(120, 3))
t = np.exp(np.log(rng.exponential(size=120)) - 1.5 * X[:, 0])
f = grow_forest(SurvData(Responses.exact_times(t), X),
                ForestConfig(n_trees=3, tree=TreeConfig(max_depth=2, min_node=15), master_seed=1))
print(json.dumps({"numba": _jit.USE_NUMBA, "oob": f.oob_loglik(),
                  "features": [t.feature.tolist() for t in f.trees]}))
"""


def _run(disable):
    env = dict(os.environ)
    env.pop("TRAFOREST_DISABLE_NUMBA", None)
    if disable:
        env["TRAFOREST_DISABLE_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", _SCRIPT], env=env, capture_output=True, text=True,
                         check=True, timeout=600)
    return json.loads(out.stdout.strip().splitlines()[-1])


def test_environment_flag_switches_backend_with_same_results():
    fast = _run(False)
    slow = _run(True)
    assert fast["numba"] is True and slow["numba"] is False
    assert fast["features"] == slow["features"]
    assert fast["oob"] == pytest.approx(slow["oob"], rel=1e-7)
