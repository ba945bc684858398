import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obdlab.datagen import PointNavEnv, collect_dataset
from obdlab.density import (
    FALLBACK_BANDWIDTH,
    KdeModel,
    density,
    fit_kde,
    log_density,
    log_density_histogram,
    sdw_weight,
)
from obdlab.errors import DomainError, ShapeError


def test_identical_samples_fall_back():
    with pytest.warns(UserWarning):
        model = fit_kde(np.array([[0.3, 1.0], [0.3, 1.0]]))
    assert model.degenerate
    np.testing.assert_array_equal(model.bandwidth, [FALLBACK_BANDWIDTH] * 2)


def test_scott_bandwidth_on_standard_normal():
    x = np.random.default_rng(0).standard_normal((10_000, 1))
    model = fit_kde(x, "scott")
    h = model.bandwidth[0]
    assert 0.1 <= h <= 0.2
    assert h == pytest.approx(10_000 ** -0.2 * x.std(ddof=1), rel=1e-12)
    assert not model.degenerate


def test_silverman_formula():
    x = np.random.default_rng(1).normal(size=(500, 2)) * [1.0, 3.0]
    model = fit_kde(x, "silverman")
    factor = (4 / 4) ** (1 / 6) * 500 ** (-1 / 6)
    np.testing.assert_allclose(model.bandwidth, factor * x.std(axis=0, ddof=1), rtol=1e-12)


def test_scott_is_scale_equivariant():
    x = np.random.default_rng(2).normal(size=(200, 3))
    h1 = fit_kde(x).bandwidth
    h2 = fit_kde(4.5 * x).bandwidth
    np.testing.assert_allclose(h2, 4.5 * h1, rtol=1e-12)


def test_fixed_bandwidth_and_bad_rules():
    x = np.zeros((1, 2))
    assert np.all(fit_kde(x, 0.5).bandwidth == 0.5)
    with pytest.raises(DomainError):
        fit_kde(x, "scott")
    with pytest.raises(DomainError):
        fit_kde(np.ones((5, 1)) * np.arange(5)[:, None], "bogus")
    with pytest.raises(DomainError):
        KdeModel(np.zeros((2, 1)), np.array([0.0]))
    with pytest.raises(ShapeError):
        KdeModel(np.zeros((2, 2)), np.array([1.0]))


def test_peak_of_single_sample():
    h = np.array([0.5, 2.0])
    model = KdeModel(np.array([[1.0, -1.0]]), h)
    expected = np.prod((2 * np.pi) ** -0.5 / h)
    assert density(model, np.array([1.0, -1.0])) == pytest.approx(expected, rel=1e-14)


def test_symmetric_pair():
    model = KdeModel(np.array([[-1.0], [1.0]]), np.array([0.7]))
    one_sided = KdeModel(np.array([[1.0]]), np.array([0.7]))
    # each sample carries weight 1/2, the two contributions at 0 are equal
    assert density(model, np.array([0.0])) == pytest.approx(density(one_sided, np.array([0.0])), rel=1e-14)
    q = np.array([[0.4], [-0.4]])
    d = density(model, q)
    assert d[0] == pytest.approx(d[1], rel=1e-14)


def test_far_query_is_positive():
    model = KdeModel(np.zeros((3, 2)), np.array([0.1, 0.1]))
    assert density(model, np.array([2.0, 2.0])) > 0.0
    # far beyond underflow the log density stays finite
    assert np.isfinite(log_density(model, np.array([50.0, 50.0])))


def test_dim_mismatch():
    model = fit_kde(np.random.default_rng(0).normal(size=(10, 2)))
    with pytest.raises(ShapeError):
        density(model, np.zeros(3))


def test_chunking_does_not_change_values():
    rng = np.random.default_rng(3)
    model = fit_kde(rng.normal(size=(300, 2)))
    q = rng.normal(size=(97, 2))
    np.testing.assert_allclose(log_density(model, q, chunk=7), log_density(model, q, chunk=1000), rtol=0, atol=1e-12)


def grid_integral_1d(model, lo, hi, n=4001):
    x = np.linspace(lo, hi, n)
    return np.trapezoid(density(model, x[:, None]), x)


def test_integrates_to_one_1d():
    x = np.random.default_rng(4).standard_normal((400, 1)) * 2.0 + 1.0
    model = fit_kde(x)
    s = x.std(ddof=1)
    lo, hi = x.min() - 5 * s, x.max() + 5 * s
    assert grid_integral_1d(model, lo, hi) == pytest.approx(1.0, abs=0.01)


def test_integrates_to_one_2d():
    x = np.random.default_rng(5).normal(size=(300, 2)) * [1.0, 0.5]
    model = fit_kde(x)
    s = x.std(axis=0, ddof=1)
    m = x.mean(axis=0)
    gx = np.linspace(m[0] - 5 * s[0], m[0] + 5 * s[0], 301)
    gy = np.linspace(m[1] - 5 * s[1], m[1] + 5 * s[1], 301)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    d = density(model, np.column_stack([X.ravel(), Y.ravel()])).reshape(X.shape)
    total = np.trapezoid(np.trapezoid(d, gy, axis=1), gx)
    assert total == pytest.approx(1.0, abs=0.01)


def test_histogram_unit_area():
    rng = np.random.default_rng(6)
    model = fit_kde(rng.normal(size=(200, 2)))
    hist = log_density_histogram(model, rng.normal(size=(500, 2)), n_bins=25)
    widths = hist.bin_right - hist.bin_left
    assert (hist.density * widths).sum() == pytest.approx(1.0, abs=1e-9)
    assert len(list(hist.rows())) == 25


def test_histogram_of_identical_states():
    model = fit_kde(np.random.default_rng(7).normal(size=(50, 2)))
    hist = log_density_histogram(model, np.ones((20, 2)), n_bins=10)
    assert np.count_nonzero(hist.density) == 1
    with pytest.raises(DomainError):
        log_density_histogram(model, np.ones((2, 2)), n_bins=0)


def test_expert_mix_states_sit_at_higher_density_than_replay():
    env = PointNavEnv()
    replay = collect_dataset(env, "replay_like", 3000, 0).states
    mix = collect_dataset(env, "expert_mix", 3000, 0).states
    med_replay = np.median(log_density(fit_kde(replay), replay))
    med_mix = np.median(log_density(fit_kde(mix), mix))
    assert med_mix > med_replay


def test_sdw_weight_examples():
    assert sdw_weight(2.0, 4.0, 0.5) == pytest.approx(1.0, abs=1e-15)
    assert sdw_weight(3.7, 0.02, 0.0) == 3.7
    assert sdw_weight(3.7, 1.0, 0.15) == 3.7
    np.testing.assert_allclose(sdw_weight(np.array([1.0, 2.0]), np.array([0.5, 2.0]), 1.0), [2.0, 1.0])


def test_sdw_weight_floor_and_errors():
    assert sdw_weight(1.0, 1e-300, 1.0) == pytest.approx(1e12)
    for bad in (0.0, -1.0, np.nan):
        with pytest.raises(DomainError):
            sdw_weight(1.0, bad, 0.1)
    with pytest.raises(DomainError):
        sdw_weight(1.0, 1.0, -0.1)


@settings(max_examples=200, deadline=None)
@given(
    q=st.floats(-1e3, 1e3, allow_nan=False),
    d=st.floats(1e-10, 1e4),
    tau=st.floats(0.0, 2.0),
)
def test_sdw_weight_inverts(q, d, tau):
    w = sdw_weight(q, d, tau)
    assert w * d**tau == pytest.approx(q, rel=1e-12, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    d1=st.floats(1e-6, 1e3),
    ratio=st.floats(1.01, 1e3),
    tau1=st.floats(0.0, 1.0),
    dtau=st.floats(0.01, 1.0),
)
def test_larger_tau_emphasizes_rare_states(d1, ratio, tau1, dtau):
    d2 = d1 * ratio
    r1 = sdw_weight(1.0, d1, tau1) / sdw_weight(1.0, d2, tau1)
    r2 = sdw_weight(1.0, d1, tau1 + dtau) / sdw_weight(1.0, d2, tau1 + dtau)
    assert r2 > r1
