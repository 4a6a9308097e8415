import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quantcomm.field import MeasurementSet
from quantcomm.gp import GPHyperparams, GPNumericalError, fit, predict_mean, predict_var

from oracles import dense_gp

HP = GPHyperparams()


def random_set(rng, shape, n, robot=0):
    cells = rng.integers(0, shape[0] * shape[1], n)
    return MeasurementSet(cells, rng.uniform(0, 1, n), robot, np.arange(n))


@pytest.mark.parametrize("seed", range(10))
def test_matches_dense_oracle_on_20_points(seed):
    rng = np.random.default_rng(seed)
    shape = (25, 25)
    data = random_set(rng, shape, 20)
    gp = fit(data, HP, shape)
    mu, var = dense_gp(data.cells, data.values, shape)
    np.testing.assert_allclose(predict_mean(gp), mu, atol=1e-8, rtol=0)
    np.testing.assert_allclose(predict_var(gp), var, atol=1e-8, rtol=0)


def test_repeated_cells_equal_per_reading_model():
    rng = np.random.default_rng(3)
    shape = (6, 7)
    cells = np.array([4, 4, 4, 9, 9, 30])
    data = MeasurementSet(cells, rng.uniform(0, 1, 6), 1, np.arange(6))
    mu, var = dense_gp(cells, data.values, shape)
    gp = fit(data, HP, shape)
    np.testing.assert_allclose(gp.mean(), mu, atol=1e-10)
    np.testing.assert_allclose(gp.variance(), var, atol=1e-10)


def test_prior_when_empty():
    gp = fit(MeasurementSet.empty(), HP, (4, 5))
    assert np.all(gp.mean() == 0.5) and np.all(gp.variance() == 1.0)


def test_extended_equals_refit_and_skips_duplicates():
    rng = np.random.default_rng(1)
    shape = (10, 10)
    a, b = random_set(rng, shape, 15, 0), random_set(rng, shape, 15, 1)
    ext = fit(a, HP, shape).extended(b)
    ref = fit(a.union(b), HP, shape)
    np.testing.assert_allclose(ext.mean(), ref.mean(), atol=1e-12)
    np.testing.assert_allclose(ext.variance(), ref.variance(), atol=1e-12)
    assert ext.extended(a) is ext


def test_fit_deduplicates_forwarded_copies():
    rng = np.random.default_rng(2)
    a = random_set(rng, (8, 8), 10)
    doubled = MeasurementSet(np.r_[a.cells, a.cells], np.r_[a.values, a.values],
                             np.r_[a.robots, a.robots], np.r_[a.steps, a.steps])
    np.testing.assert_array_equal(fit(doubled, HP, (8, 8)).mean(), fit(a, HP, (8, 8)).mean())


def test_outputs_are_readonly():
    gp = fit(random_set(np.random.default_rng(0), (5, 5), 4), HP, (5, 5))
    with pytest.raises(ValueError):
        gp.mean()[0] = 1.0


def test_ill_conditioned_gram_still_factorizes():
    # noise-free, very long length scale: Gram is numerically singular
    data = MeasurementSet(np.arange(25), np.linspace(0, 1, 25), 0, np.arange(25))
    gp = fit(data, GPHyperparams(noise_variance=0.0, length_scale_cells=30.0, jitter=1e-12), (5, 5))
    assert np.all(np.isfinite(gp.mean()))
    assert np.all(gp.variance() >= 0)


def test_hyperparam_validation():
    with pytest.raises(ValueError):
        GPHyperparams(jitter=0.0)
    with pytest.raises(ValueError):
        GPHyperparams(noise_variance=-1.0)
    assert issubclass(GPNumericalError, ArithmeticError)


training = st.integers(0, 2 ** 31).map(np.random.default_rng)


@settings(max_examples=1000, deadline=None)
@given(rng=training, n=st.integers(1, 12), extra=st.integers(1, 6))
def test_variance_monotone_under_more_data(rng, n, extra):
    shape = (6, 6)
    a = random_set(rng, shape, n, 0)
    b = random_set(rng, shape, extra, 1)
    before = fit(a, HP, shape).variance()
    after = fit(a.union(b), HP, shape).variance()
    assert np.all(after <= before + 1e-12)
    assert np.all(before <= HP.signal_variance + 1e-12)
    assert np.all(after >= 0)


def interpolation_bounds(cells, vals, hp):
    """Derived bounds with effective noise s2: the mean misses each reading by at most
    s2 * |y - m| / lambda_min(K), and the variance at a training cell is at most s2."""
    xy = np.c_[cells % 6, cells // 6].astype(float)
    K = hp.signal_variance * np.exp(-0.5 * ((xy[:, None] - xy[None]) ** 2).sum(-1) / hp.length_scale_cells ** 2)
    s2 = hp.noise_variance + hp.jitter
    lam = max(np.linalg.eigvalsh(K).min(), 0.0) + s2
    return s2 * np.linalg.norm(vals - hp.prior_mean) / lam, s2


@settings(max_examples=1000, deadline=None)
@given(rng=training, n=st.integers(1, 10))
def test_near_interpolation_at_training_cells(rng, n):
    shape = (6, 6)
    cells = rng.choice(36, n, replace=False)
    vals = rng.uniform(0, 1, n)
    hp = GPHyperparams(noise_variance=1e-10)
    gp = fit(MeasurementSet(cells, vals, 0, 0), hp, shape)
    mean_bound, var_bound = interpolation_bounds(cells, vals, hp)
    assert np.abs(gp.mean()[cells] - vals).max() <= mean_bound + 1e-9
    assert gp.variance(cells).max() <= var_bound + 1e-12
