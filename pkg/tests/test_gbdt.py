import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_kernel, exact_score, exact_stationary_trace, greedy_argmax_tree, path_softmax_distribution
from viforge import gbdt
from viforge.data import Dataset
from viforge.errors import BudgetError, InvalidArgumentError
from viforge.gbdt import GbdtConfig, GbdtEnsemble, GbdtLearner, ObliviousTree, Quantizer
from viforge.numerics import RngStream
from viforge.stopping import FixedT


def col(*values):
    return np.array(values, dtype=float)[:, None]


def test_quantize_constant_column():
    q = gbdt.quantize(np.full((10, 1), 3.0), 5)
    assert len(q.thresholds[0]) == 0
    assert np.all(q.transform(np.full((4, 1), 3.0)) == 0)


def test_quantize_median_split():
    q = gbdt.quantize(col(1, 2, 3, 4), 1)
    assert len(q.thresholds[0]) == 1
    np.testing.assert_array_equal(q.transform(col(1, 2, 3, 4))[:, 0], [0, 0, 1, 1])


def test_quantize_ties_go_left():
    q = gbdt.quantize(col(1, 2, 3, 4), 1)
    t = q.thresholds[0][0]
    bins = [q.transform(col(t))[0, 0] for _ in range(5)]
    assert bins == [0] * 5


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 40), rows=st.integers(2, 60))
def test_quantizer_invariants(seed, n, rows):
    x = np.round(np.random.default_rng(seed).standard_normal((rows, 3)), 1)
    q = gbdt.quantize(x, n)
    for t in q.thresholds:
        assert len(t) <= n
        assert np.all(np.diff(t) > 0)
    xb = q.transform(x)
    assert xb.min() >= 0 and all(xb[:, j].max() <= len(t) for j, t in enumerate(q.thresholds))


def test_quantize_rejects_zero_borders():
    with pytest.raises(InvalidArgumentError):
        gbdt.quantize(col(1, 2), 0)


XB4 = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])


def test_score_zero_residual():
    assert gbdt.score(((0, 0),), np.zeros(4), XB4) == 0.0


def test_score_separating_split():
    assert gbdt.score(((0, 0),), [1, 1, -1, -1], XB4) == pytest.approx(1.0)


def test_score_cancelling_split():
    assert gbdt.score(((1, 0),), [1, 1, -1, -1], XB4) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=4, max_size=4), st.sampled_from([((0, 0),), ((1, 0),), ((0, 0), (1, 0))]))
def test_score_matches_exact(z, splits):
    assert gbdt.score(splits, z, XB4) == pytest.approx(float(exact_score(splits, z, XB4)), abs=1e-12)
    assert gbdt.score(splits, z, XB4) >= 0


def quantized(x, borders=3):
    q = gbdt.quantize(x, borders)
    return q, q.transform(x)


def test_beta_zero_dominant_split():
    x = np.column_stack([np.arange(8.0), np.tile([0.0, 1.0], 4)])
    q, xb = quantized(x, 1)
    z = np.array([-1, -1, -1, -1, 1, 1, 1, 1.0])
    splits = gbdt.sample_tree(z, GbdtConfig(depth=1, beta=0.0), xb, q, RngStream(0))
    assert splits == ((0, 0),)


def test_beta_zero_tie_break():
    x = np.column_stack([np.tile([0.0, 1.0], 2), np.tile([0.0, 1.0], 2)])
    q, xb = quantized(x, 1)
    splits = gbdt.sample_tree([1.0, -1.0, 1.0, -1.0], GbdtConfig(depth=1, beta=0.0), xb, q, RngStream(0))
    assert splits == ((0, 0),)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), depth=st.integers(1, 3), p=st.integers(1, 3), borders=st.integers(1, 3))
def test_beta_zero_equals_greedy_oracle(seed, depth, p, borders):
    g = np.random.default_rng(seed)
    x = g.integers(0, 5, size=(12, p)).astype(float)
    z = g.integers(-4, 5, size=12)
    q, xb = quantized(x, borders)
    if not any(len(t) for t in q.thresholds):
        return
    got = gbdt.sample_tree(z.astype(float), GbdtConfig(depth=depth, beta=0.0), xb, q, RngStream(seed))
    assert got == greedy_argmax_tree(z, depth, xb, q)


def test_fit_leaf_values_single_leaf():
    xb = np.zeros((4, 1), dtype=int)
    theta = gbdt.fit_leaf_values(((0, 0),), [1.0, 2.0, 3.0, 6.0], xb)
    np.testing.assert_allclose(theta, [3.0, 0.0])


def test_fit_leaf_values_constant_and_separated():
    np.testing.assert_allclose(gbdt.fit_leaf_values(((0, 0), (1, 0)), np.full(4, 2.5), XB4), [2.5] * 4)
    np.testing.assert_allclose(gbdt.fit_leaf_values(((0, 0),), [1, 1, -1, -1], XB4), [1, -1])


def test_weighted_rows_match_expanded_rows():
    g = np.random.default_rng(3)
    x = g.integers(0, 3, size=(40, 2)).astype(float)
    y = g.standard_normal(40)
    q, xb = quantized(x, 2)
    cells, inv, counts = np.unique(xb, axis=0, return_inverse=True, return_counts=True)
    ysum = np.bincount(inv.ravel(), weights=y)
    cfg = GbdtConfig(depth=2, beta=1.0)
    a = gbdt.sample_tree(y, cfg, xb, q, np.random.default_rng(5))
    b = gbdt.sample_tree(ysum, cfg, cells, q, np.random.default_rng(5), counts.astype(float))
    assert a == b
    np.testing.assert_allclose(gbdt.fit_leaf_values(a, y, xb),
                               gbdt.fit_leaf_values(a, ysum, cells, counts.astype(float)), rtol=1e-12)


def fit(cfg, d, T, seed=0, warm=None):
    return gbdt.train_gbdt(cfg, d, RngStream(seed), warm_start=warm, stop=FixedT(T))


def regression_data(n=200, seed=0):
    g = np.random.default_rng(seed)
    x = g.standard_normal((n, 3))
    return Dataset(x, x[:, 0] - np.abs(x[:, 1]) + 0.3 * g.standard_normal(n))


def test_zero_iterations_returns_warm_start():
    d = regression_data()
    cfg = GbdtConfig(depth=2, beta=1.0, epsilon=0.3)
    assert fit(cfg, d, 0).n_trees == 0
    warm = fit(cfg, d, 5)
    again = fit(cfg, d, 0, warm=warm)
    np.testing.assert_array_equal(again.predict(d.x), warm.predict(d.x))


def test_single_exact_step_centres_residuals():
    x = col(0, 0, 0, 1, 1, 1)
    y = np.array([1.0, 2.0, 6.0, -1.0, 0.0, 4.0])
    model = fit(GbdtConfig(depth=1, borders=1, beta=0.0, epsilon=1.0), Dataset(x, y), 1)
    resid = y - model.predict(x)
    np.testing.assert_allclose(resid, [-2, -1, 3, -2, -1, 3], atol=1e-12)


@pytest.mark.parametrize("eps", [0.1, 0.5, 1.0])
def test_training_loss_nonincreasing(eps):
    d = regression_data(seed=1)
    learner = GbdtLearner(GbdtConfig(depth=2, beta=10.0, epsilon=eps))
    s = learner.session(learner.init(d), d.x, d.y)
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(40):
        losses.append(np.mean((d.y - s.pred) ** 2))
        s.step(rng)
    assert np.all(np.diff(losses) <= 1e-12)


def test_ensemble_additivity():
    d = regression_data(seed=2)
    cfg = GbdtConfig(depth=2, beta=5.0, epsilon=0.2)
    warm = fit(cfg, d, 10, seed=1)
    continued = fit(cfg, d, 15, seed=2, warm=warm)
    resid = d.with_y(d.y - warm.predict(d.x))
    separate = fit(cfg, resid, 15, seed=2)
    np.testing.assert_allclose(continued.predict(d.x), warm.predict(d.x) + separate.predict(d.x), atol=1e-12)


def test_shrinkage_scales_previous_trees():
    d = regression_data(seed=3)
    cfg = GbdtConfig(depth=1, beta=0.0, epsilon=0.5, lam=4.0)
    m1 = fit(cfg, d, 1)
    m2 = fit(cfg, d, 2)
    shrink = 1 - 4.0 * 0.5 / d.n
    np.testing.assert_allclose(m2.weights[0], shrink * m1.weights[0])


def test_branching_views_do_not_interfere():
    d = regression_data(seed=4)
    cfg = GbdtConfig(depth=2, beta=1.0)
    base = fit(cfg, d, 3)
    before = base.predict(d.x)
    a = fit(cfg, d, 4, seed=10, warm=base)
    b = fit(cfg, d, 4, seed=11, warm=base)
    np.testing.assert_array_equal(base.predict(d.x), before)
    assert a.n_trees == b.n_trees == 7
    assert not np.array_equal(a.predict(d.x), b.predict(d.x))
    np.testing.assert_array_equal(fit(cfg, d, 4, seed=10, warm=base).predict(d.x), a.predict(d.x))


def test_warm_start_feature_mismatch():
    d = regression_data()
    warm = fit(GbdtConfig(), d, 1)
    with pytest.raises(InvalidArgumentError):
        fit(GbdtConfig(), Dataset(d.x[:, :2], d.y), 1, warm=warm)


def test_tree_kernel_single_leaf():
    k = gbdt.tree_kernel((), np.zeros((5, 1), dtype=int))
    np.testing.assert_array_equal(k, np.ones((5, 5)))


def test_tree_kernel_two_blocks():
    k = gbdt.tree_kernel(((0, 0),), XB4)
    np.testing.assert_array_equal(k, [[2, 2, 0, 0], [2, 2, 0, 0], [0, 0, 2, 2], [0, 0, 2, 2]])
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(k / 4))[::-1], [1, 1, 0, 0], atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), depth=st.integers(1, 3))
def test_tree_kernel_eigenvalues_zero_one(seed, depth):
    g = np.random.default_rng(seed)
    xb = g.integers(0, 3, size=(15, 3))
    splits = tuple((j, int(g.integers(0, 2))) for j in g.permutation(3)[:depth])
    k = gbdt.tree_kernel(splits, xb)
    lam = np.linalg.eigvalsh(k / 15)
    leaves = len(set(map(tuple, (xb[:, [f for f, _ in splits]] > [b for _, b in splits]).astype(int))))
    assert np.allclose(np.sort(lam)[::-1][:leaves], 1, atol=1e-12)
    assert np.allclose(np.sort(lam)[::-1][leaves:], 0, atol=1e-12)


def test_stationary_kernel_hand_enumeration():
    x = col(1, 2, 3, 4)
    q, xb = quantized(x, 2)
    np.testing.assert_array_equal(q.thresholds[0], [2.0, 3.0])
    k = gbdt.stationary_kernel(xb, q, 1).matrix
    a = np.array([[2, 2, 0, 0], [2, 2, 0, 0], [0, 0, 2, 2], [0, 0, 2, 2]]) / 4
    b = np.array([[4 / 3] * 3 + [0]] * 3 + [[0, 0, 0, 4]]) / 4
    np.testing.assert_allclose(k, (a + b) / 2, atol=1e-15)
    np.testing.assert_allclose(k, brute_kernel([((0, 0),), ((0, 1),)], xb), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), depth=st.integers(1, 3), p=st.integers(1, 3))
def test_stationary_kernel_trace_and_brute_force(seed, depth, p):
    g = np.random.default_rng(seed)
    x = g.integers(0, 4, size=(10, p)).astype(float)
    q, xb = quantized(x, 3)
    if not any(len(t) for t in q.thresholds):
        return
    k = gbdt.stationary_kernel(xb, q, depth)
    exact = exact_stationary_trace(gbdt.enumerate_trees(q, depth), xb)
    assert exact <= 2**depth
    assert np.trace(k.matrix) == pytest.approx(float(exact), rel=1e-12)
    assert np.linalg.eigvalsh(k.matrix).min() >= -1e-10
    np.testing.assert_allclose(k.matrix, brute_kernel(gbdt.enumerate_trees(q, depth), xb), atol=1e-12)


def test_enumeration_budget():
    q = gbdt.quantize(np.random.default_rng(0).standard_normal((100, 10)), 32)
    with pytest.raises(BudgetError):
        gbdt.enumerate_trees(q, 3)
    with pytest.raises(BudgetError):
        gbdt.tree_distribution(np.zeros(100), GbdtConfig(depth=3, beta=1.0), q.transform(np.zeros((100, 10))), q)


def test_tree_distribution_equal_scores():
    x = np.column_stack([np.tile([0.0, 1.0], 2), np.tile([0.0, 1.0], 2)])
    q, xb = quantized(x, 1)
    for beta in (0.1, 1.0, 7.0):
        t = gbdt.tree_distribution([1.0, -1.0, 1.0, -1.0], GbdtConfig(depth=1, beta=beta), xb, q)
        assert t == pytest.approx({((0, 0),): 0.5, ((1, 0),): 0.5})


def test_tree_distribution_softmax():
    q = Quantizer((np.array([0.5]), np.array([0.5])))
    # feature 0 separates z, feature 1 cancels it: D = (1, 0)
    t = gbdt.tree_distribution([1, 1, -1, -1], GbdtConfig(depth=1, beta=1.0), XB4, q)
    e = np.exp(1.0)
    assert t[((0, 0),)] == pytest.approx(e / (e + 1), abs=1e-3)
    assert t[((1, 0),)] == pytest.approx(1 / (e + 1), abs=1e-3)
    assert t[((0, 0),)] == pytest.approx(0.731, abs=1e-3)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), depth=st.integers(1, 2), beta=st.floats(0.05, 5.0))
def test_tree_distribution_matches_path_oracle(seed, depth, beta):
    g = np.random.default_rng(seed)
    x = g.integers(0, 3, size=(8, 2)).astype(float)
    z = g.integers(-3, 4, size=8)
    q, xb = quantized(x, 2)
    if sum(len(t) for t in q.thresholds) < depth:
        return
    got = gbdt.tree_distribution(z.astype(float), GbdtConfig(depth=depth, beta=beta), xb, q)
    want = path_softmax_distribution(z, depth, beta, xb, q)
    assert sum(got.values()) == pytest.approx(1.0, abs=1e-10)
    assert set(got) == set(want)
    for key in want:
        assert got[key] == pytest.approx(want[key], abs=1e-10)


def test_tree_distribution_rejects_beta_zero():
    q, xb = quantized(col(1, 2, 3, 4), 1)
    with pytest.raises(InvalidArgumentError):
        gbdt.tree_distribution(np.zeros(4), GbdtConfig(depth=1, beta=0.0), xb, q)


def test_save_load_round_trip(tmp_path):
    d = regression_data(seed=5)
    m = fit(GbdtConfig(depth=2, beta=1.0, lam=1.0), d, 12)
    gbdt.save(m, tmp_path / "m.json")
    back = gbdt.load(tmp_path / "m.json")
    assert np.array_equal(back.predict(d.x), m.predict(d.x))
    with pytest.raises(InvalidArgumentError):
        gbdt.from_dict({"format": "x"})


@pytest.mark.parametrize("kw", [dict(depth=0), dict(borders=0), dict(beta=-1.0), dict(epsilon=0.0), dict(lam=-1.0)])
def test_config_validation(kw):
    with pytest.raises(InvalidArgumentError):
        GbdtConfig(**kw)


def test_ensemble_needs_one_weight_per_tree():
    q = Quantizer((np.array([0.0]),))
    with pytest.raises(InvalidArgumentError):
        GbdtEnsemble(q, (ObliviousTree(((0, 0),), np.zeros(2)),), np.zeros(2))
