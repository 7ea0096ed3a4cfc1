import json
import math

import numpy as np
import pytest

from traforest import basis as bs
from traforest.data import SurvData
from traforest.forest import (DatasetTooSmallError, Forest, ForestConfig, draw_subsamples, grow_forest,
                              predict_survivor, splitmix64)
from traforest.likelihood import ModelParams, Responses, loglik_contributions
from traforest.optim import fit_unconditional
from traforest.tree import SplitSpec, TreeConfig


def _ph_data(n, seed, J=4, effect=1.5):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, J))
    X[:, 0] = rng.integers(0, 2, size=n)
    t = np.exp(np.log(rng.exponential(size=n)) - effect * X[:, 0])
    return SurvData(Responses.exact_times(t), X)


@pytest.fixture(scope="module")
def small_forest():
    d = _ph_data(200, 1)
    cfg = ForestConfig(n_trees=15, tree=TreeConfig(max_depth=4, min_node=15), master_seed=3)
    return grow_forest(d, cfg)


def _depth0(d, n_trees=1, fraction=1.0):
    cfg = ForestConfig(n_trees=n_trees, subsample_fraction=fraction, tree=TreeConfig(max_depth=0))
    return grow_forest(d, cfg)


# -- subsampling and seeding ---------------------------------------------------

def test_single_tree_on_full_data():
    d = _ph_data(60, 2)
    f = grow_forest(d, ForestConfig(n_trees=1, subsample_fraction=1.0, tree=TreeConfig(min_node=10)))
    assert f.n_trees == 1 and np.array_equal(f.subsamples[0], np.arange(60))


def test_stratified_subsamples_keep_arm_fractions():
    r = np.zeros(250)
    r[:100] = 1
    subs = draw_subsamples(250, 0.632, 50, 7, strata=r)
    for s in subs:
        assert s.size == 158
        assert np.sum(r[s]) in (63, 64)
        assert np.unique(s).size == s.size


def test_splitmix_seeds_differ():
    seeds = {splitmix64(0, b) for b in range(1000)}
    assert len(seeds) == 1000
    assert splitmix64(5, 3) == splitmix64(5, 3)


def test_same_seed_same_forest():
    d = _ph_data(150, 3)
    cfg = ForestConfig(n_trees=5, tree=TreeConfig(max_depth=3, min_node=10), master_seed=42)
    a = json.dumps(grow_forest(d, cfg).to_dict())
    b = json.dumps(grow_forest(d, cfg).to_dict())
    assert a == b


def test_every_tree_partitions_its_subsample(small_forest):
    for tree, sub in zip(small_forest.trees, small_forest.subsamples):
        members = np.concatenate([tree.members[k] for k in tree.leaves])
        assert np.array_equal(np.sort(members), np.sort(sub))


def test_too_small_dataset():
    with pytest.raises(DatasetTooSmallError):
        grow_forest(_ph_data(30, 4), ForestConfig(n_trees=2))


def test_config_validation():
    with pytest.raises(ValueError):
        ForestConfig(n_trees=0)
    with pytest.raises(ValueError):
        ForestConfig(subsample_fraction=0.0)
    with pytest.raises(ValueError):
        ForestConfig(subsample_fraction=1.5)


# -- weights -------------------------------------------------------------------

def test_depth0_weights_count_subsample_membership():
    d = _ph_data(120, 5)
    f = _depth0(d, n_trees=7, fraction=0.632)
    counts = np.zeros(120)
    for s in f.subsamples:
        counts[s] += 1
    W = f.weights(np.random.default_rng(0).uniform(size=(3, 4)))
    assert np.all(W == counts)


def test_self_weight_with_full_subsamples():
    d = _ph_data(120, 6)
    f = grow_forest(d, ForestConfig(n_trees=6, subsample_fraction=1.0, tree=TreeConfig(max_depth=3, min_node=10)))
    W = f.weights(d.X[:10])
    assert np.all(W[np.arange(10), np.arange(10)] == 6)


def test_weight_counting_identity(small_forest):
    X = np.random.default_rng(1).uniform(size=(5, 4))
    W = small_forest.weights(X)
    for a in range(5):
        total = sum(tree.members[tree.apply(X[a:a + 1])[0]].size for tree in small_forest.trees)
        assert W[a].sum() == total
    assert np.all(W <= small_forest.n_trees) and np.all(W == np.round(W))


def test_weights_reject_wrong_length(small_forest):
    with pytest.raises(ValueError):
        small_forest.weights(np.zeros((1, 3)))


def test_oob_weights_exclude_in_bag_trees(small_forest):
    n = len(small_forest.data)
    W = small_forest.weights(small_forest.data.X, oob=True)
    for i in range(0, n, 17):
        oob_trees = [b for b, s in enumerate(small_forest.subsamples) if i not in set(s)]
        assert W[i].sum() == sum(
            small_forest.trees[b].members[small_forest.trees[b].apply(small_forest.data.X[i:i + 1])[0]].size
            for b in oob_trees)


# -- prediction ----------------------------------------------------------------

def test_depth0_forest_reduces_to_unconditional_model():
    d = _ph_data(150, 7)
    f = _depth0(d)
    ref = fit_unconditional(f.aggregation_basis, d.resp)
    for p in f.predict_params(d.X[:4]):
        assert np.max(np.abs(p.theta - ref.params.theta)) < 1e-6
    valid = _ph_data(80, 8)
    want = loglik_contributions(f.aggregation_basis, ref.params, valid.resp).sum()
    assert f.oos_loglik(valid) == pytest.approx(want, abs=1e-6)


def test_cluster_recovery():
    rng = np.random.default_rng(9)
    n = 500
    g = rng.integers(0, 2, size=n)
    X = np.column_stack([g + rng.normal(0, 0.05, size=n), rng.uniform(size=n)])
    shape = np.where(g == 1, 2.0, 0.7)
    alpha = np.where(g == 1, -1.0, 0.5)
    t = np.exp((np.log(rng.exponential(size=n)) - alpha) / shape)
    d = SurvData(Responses.exact_times(t), X)
    f = grow_forest(d, ForestConfig(n_trees=30, tree=TreeConfig(mtry="all"), master_seed=1))
    grid = np.exp(np.linspace(np.log(np.quantile(t, 0.05)), np.log(np.quantile(t, 0.95)), 40))
    for grp in (0, 1):
        p = f.predict_params(np.array([[float(grp), 0.5]]))[0]
        fit = fit_unconditional(f.aggregation_basis, d.resp[g == grp])
        s_forest = predict_survivor(p, f.aggregation_basis, grid)
        s_group = predict_survivor(fit.params, f.aggregation_basis, grid)
        assert np.max(np.abs(s_forest - s_group)) < 0.1


def test_predictive_forest_without_treatment_effect():
    # effect read on the beta scale, averaged over three independent samples
    gaps = []
    for seed in (10, 11, 12):
        rng = np.random.default_rng(seed)
        n = 500
        X = rng.uniform(size=(n, 3))
        r = rng.integers(0, 2, size=n).astype(float)
        t = np.exp(np.log(rng.exponential(size=n)) - X[:, 0])
        d = SurvData(Responses.exact_times(t), X, r)
        cfg = ForestConfig(n_trees=30, spec=SplitSpec("theta-thetatr", bs.BERNSTEIN, 5), master_seed=2,
                           aggregation_mode="beta")
        f = grow_forest(d, cfg)
        grid = np.exp(np.linspace(np.log(np.quantile(t, 0.1)), np.log(np.quantile(t, 0.9)), 20))
        for p in f.predict_params(X[:25]):
            s0 = predict_survivor(p, f.aggregation_basis, grid, 0)
            s1 = predict_survivor(p, f.aggregation_basis, grid, 1)
            gaps.append(np.mean(np.abs(s1 - s0)))
    assert np.mean(gaps) < 0.05


def test_predict_survivor_values():
    p = ModelParams(np.array([0.0, 1.0]))
    s = predict_survivor(p, bs.weibull(), [1.0, 2.0, 4.0])
    assert np.allclose(s, np.exp(-np.array([1.0, 2.0, 4.0])))
    assert s[0] == pytest.approx(0.3679, abs=1e-4)
    with pytest.raises(ValueError):
        predict_survivor(p, bs.weibull(), [0.0, 1.0])


def test_survivor_below_support_tends_to_one():
    b = bs.bernstein(5, (0.0, 2.0))
    p = ModelParams(np.array([-2.0, -1.0, 0.0, 0.5, 1.0, 2.0]))
    s = predict_survivor(p, b, np.exp(np.linspace(-30, 0, 50)))
    assert np.all(np.diff(s) <= 0) and s[0] > 1 - 1e-9


def test_arms_identical_with_null_thetatr():
    b = bs.bernstein(3, (0.0, 2.0))
    p = ModelParams(np.array([-1.0, 0.0, 0.5, 1.0]), theta_tr=np.zeros(4))
    g = np.exp(np.linspace(-1, 3, 10))
    assert np.array_equal(predict_survivor(p, b, g, 0), predict_survivor(p, b, g, 1))


def test_survivor_monotone_for_forest_predictions(small_forest):
    X = np.random.default_rng(2).uniform(size=(6, 4))
    S = small_forest.predict_survivor(X, np.exp(np.linspace(-6, 4, 80)))
    assert np.all(np.diff(S, axis=1) <= 1e-15)
    assert np.all((S >= 0) & (S <= 1))


def test_oos_loglik_additive_and_finite(small_forest):
    v = _ph_data(40, 12)
    once = small_forest.oos_loglik(v)
    twice = small_forest.oos_loglik(v.subset(np.r_[np.arange(40), np.arange(40)]))
    assert twice == pytest.approx(2 * once, rel=1e-12)
    far = SurvData(Responses.exact_times([1e-9, 1e6]), np.full((2, 4), 0.5))
    assert np.all(np.isfinite(small_forest.oos_loglik_contributions(far)))


def test_oob_loglik_is_finite(small_forest):
    assert math.isfinite(small_forest.oob_loglik())


# -- importance ----------------------------------------------------------------

def test_unused_variable_has_zero_importance(small_forest):
    used = set().union(*(t.used_variables() for t in small_forest.trees))
    imp = small_forest.permutation_importance(seed=1)
    for j in range(4):
        if j not in used:
            assert imp[j] == 0.0


def test_strong_signal_variable_most_important():
    wins = 0
    for seed in range(10):
        d = _ph_data(250, 100 + seed, J=5, effect=2.0)
        f = grow_forest(d, ForestConfig(n_trees=20, tree=TreeConfig(mtry="all"), master_seed=seed))
        imp = f.permutation_importance(seed=seed)
        wins += int(np.argmax(imp) == 0)
    assert wins >= 9


def test_importance_n_perm_validation(small_forest):
    with pytest.raises(ValueError):
        small_forest.permutation_importance(n_perm=0)


# -- persistence ---------------------------------------------------------------

def test_model_file_round_trip_is_bit_stable(tmp_path, small_forest):
    path = tmp_path / "m.json"
    small_forest.save(path)
    g = Forest.load(path)
    X = np.random.default_rng(3).uniform(size=(4, 4))
    for a, b in zip(small_forest.predict_params(X), g.predict_params(X)):
        assert np.array_equal(a.theta, b.theta)
    assert json.dumps(g.to_dict()) == json.dumps(small_forest.to_dict())


def test_predictive_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    d = SurvData(Responses.right_censored(rng.exponential(size=120), rng.uniform(size=120) < 0.7),
                 rng.uniform(size=(120, 3)), rng.integers(0, 2, size=120).astype(float))
    f = grow_forest(d, ForestConfig(n_trees=4, spec=SplitSpec.parse("W-theta-beta"),
                                    tree=TreeConfig(min_node=10)))
    f.save(tmp_path / "p.json")
    g = Forest.load(tmp_path / "p.json")
    for a, b in zip(f.predict_params(d.X[:3]), g.predict_params(d.X[:3])):
        assert np.array_equal(a.theta, b.theta) and np.array_equal(a.theta_tr, b.theta_tr)


def test_load_rejects_other_documents(tmp_path):
    p = tmp_path / "x.json"
    p.write_text(json.dumps({"format": "something"}))
    with pytest.raises(ValueError):
        Forest.load(p)
