import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from ppap_errors import DimensionError, NumericError
from ppap_loss import Batch, gaussian_nll, mse, probabilistic_loss, probabilistic_loss_gradients
from ppap_model import Fusion, PredictedDistribution
from tensor_autodiff import Parameter


def _batch(mus, log_sigmas, labels, adapted=None):
    preds = []
    for i, (m, s) in enumerate(zip(mus, log_sigmas)):
        if adapted is None:
            preds.append(PredictedDistribution(m, s))
        else:
            preds.append(PredictedDistribution(m, s, adapted[i], 0.0))
    return Batch(preds, labels)


@pytest.mark.parametrize(
    "mu, log_sigma, y, expected",
    [
        (0.0, 0.0, 0.0, 0.0),
        (0.0, 0.0, 1.0, 0.5),
        (1.0, np.log(2.0), 0.0, 0.125 + np.log(2.0)),
    ],
)
def test_loss_examples(mu, log_sigma, y, expected):
    assert abs(probabilistic_loss(_batch([mu], [log_sigma], [y])) - expected) <= 1e-12


def test_loss_is_mean_over_batch():
    batch = _batch([0.0, 0.0], [0.0, 0.0], [0.0, 1.0])
    assert probabilistic_loss(batch) == pytest.approx(0.25, abs=1e-12)


def test_closed_form_gradients_match_finite_differences(rng):
    mus = rng.uniform(-1, 1, size=5)
    log_sigmas = rng.uniform(-1, 0.5, size=5)
    labels = rng.uniform(-1, 1, size=5)
    d_mu, d_log_sigma = probabilistic_loss_gradients(_batch(mus, log_sigmas, labels))
    h = 1e-6
    for k in range(5):
        bump = np.zeros(5)
        bump[k] = h
        fd_mu = (probabilistic_loss(_batch(mus + bump, log_sigmas, labels))
                 - probabilistic_loss(_batch(mus - bump, log_sigmas, labels))) / (2 * h)
        fd_ls = (probabilistic_loss(_batch(mus, log_sigmas + bump, labels))
                 - probabilistic_loss(_batch(mus, log_sigmas - bump, labels))) / (2 * h)
        assert abs(fd_mu - d_mu[k]) <= 1e-8
        assert abs(fd_ls - d_log_sigma[k]) <= 1e-8


def test_closed_form_gradients_match_autodiff(rng):
    mu = Parameter(rng.normal(size=4))
    log_sigma = Parameter(rng.normal(size=4) * 0.3)
    y = rng.uniform(-1, 1, size=4)
    gaussian_nll(mu, log_sigma, y).backward()
    d_mu, d_log_sigma = probabilistic_loss_gradients(_batch(mu.data, log_sigma.data, y))
    assert_allclose(mu.grad, d_mu, atol=1e-12)
    assert_allclose(log_sigma.grad, d_log_sigma, atol=1e-12)


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-3, 3))
def test_loss_minimized_at_squared_error_over_log_sigma(mu, y, log_sigma):
    # 固定 μ 时最优 σ = |y − μ|
    assume(abs(y - mu) > 1e-3)
    best = probabilistic_loss(_batch([mu], [np.log(abs(y - mu))], [y]))
    assert probabilistic_loss(_batch([mu], [log_sigma], [y])) >= best - 1e-12


def test_mse_examples():
    assert mse(_batch([0.5], [0.0], [1.0]), Fusion.MF) == pytest.approx(0.25)
    assert mse(_batch([0.0, 0.0], [0.0, 0.0], [1.0, -1.0]), Fusion.EF) == pytest.approx(1.0)


def test_late_fusion_mse_uses_adapter_output():
    batch = _batch([0.0, 0.0], [0.0, 0.0], [1.0, -1.0], adapted=[1.0, -0.5])
    assert mse(batch, Fusion.LF) == pytest.approx(0.125)
    assert mse(batch, Fusion.MF) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mse(_batch([0.0], [0.0], [1.0]), Fusion.LF)


def test_batch_validation():
    with pytest.raises(DimensionError):
        Batch([], [])
    with pytest.raises(DimensionError):
        _batch([0.0, 0.0], [0.0, 0.0], [1.0])
    with pytest.raises(NumericError):
        _batch([0.0], [0.0], [np.nan])
    with pytest.raises(NumericError):
        PredictedDistribution(np.inf, 0.0)
