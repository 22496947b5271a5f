import numpy as np
import pytest

from sidp.autodiff import Tape, Tensor, tsum
from sidp.data import synthetic_classification
from sidp.layers import mlp
from sidp.noisy import (NoisyParam, RngStream, epochs_to_reach, noisy_train, reparametrize,
                        sample_params, sample_weights)
from sidp.training import EpochRecord


def test_zero_sigma_returns_mean_exactly(rng):
    p = NoisyParam(rng.normal(size=(3, 4)), 0.0)
    theta = sample_weights(p, RngStream(0))
    np.testing.assert_array_equal(theta.data, p.mu)
    assert theta.shape == p.mu.shape


def test_negative_sigma_rejected():
    with pytest.raises(ValueError):
        NoisyParam(np.zeros(2), -0.1)


def test_scalar_draw_moments():
    p = NoisyParam(np.zeros(100_000), 1.0)
    theta = sample_weights(p, RngStream(3)).data
    assert abs(theta.mean()) < 0.02
    assert abs(theta.var() - 1.0) < 0.05


def test_reset_stream_reproduces_draw(rng):
    p = NoisyParam(rng.normal(size=5), 0.3)
    s = RngStream(11, 4)
    a = sample_weights(p, s).data.copy()
    s.reset()
    b = sample_weights(p, s).data
    np.testing.assert_array_equal(a, b)


def test_substreams_are_independent_and_stable():
    a = RngStream(1).child(0).normal(4)
    b = RngStream(1).child(1).normal(4)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, RngStream(1, (0,)).normal(4))


def test_reparametrization_has_identity_jacobian(rng):
    mu = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    with Tape() as tape:
        y = tsum(reparametrize(mu, 0.7, RngStream(0)))
    np.testing.assert_array_equal(tape.backward(y, [mu])[mu], np.ones((2, 3)))


def test_norm_parameters_are_not_perturbed(rng):
    m = mlp(6, (4,), 2, norm="layer")
    mu = m.init_params(rng)
    theta = sample_params(m, mu, 1.0, RngStream(0))
    np.testing.assert_array_equal(theta["1.gamma"], mu["1.gamma"])
    assert not np.array_equal(theta["0.weight"], mu["0.weight"])


@pytest.fixture(scope="module")
def blobs():
    d = synthetic_classification(400, 10, 3, seed=2)
    return d.subset(slice(0, 300)), d.subset(slice(300, 400))


def test_same_seed_same_means_and_learns(blobs):
    train, test = blobs
    m = mlp(10, (8,), 3, norm="layer")
    a = noisy_train(m, train, test, 0.0, 10, RngStream(5), optimizer="sgd", lr=0.5, batch_size=32)
    # same seed, same streams: sigma=0 consumes the same draws and gives the same means
    b = noisy_train(m, train, test, 0.0, 10, RngStream(5), optimizer="sgd", lr=0.5, batch_size=32)
    for k in a.mu:
        np.testing.assert_array_equal(a.mu[k], b.mu[k])
    assert a.converged and a.final_accuracy > 0.9


def test_sigma_zero_equals_hand_rolled_sgd(blobs):
    from sidp.data import batches
    from sidp.training import batch_loss_and_grads
    train, test = blobs
    m = mlp(10, (8,), 3, norm="layer")
    res = noisy_train(m, train, test, 0.0, 1, RngStream(9), optimizer="sgd", lr=0.3, batch_size=50)
    mu = m.init_params(RngStream(9).child(0).generator)
    for idx in batches(len(train), 50, RngStream(9).child(1).generator):
        _, g = batch_loss_and_grads(m, mu, train.images[idx], train.labels[idx])
        mu = {k: mu[k] - 0.3 * g[k] for k in mu}
    for k in mu:
        np.testing.assert_allclose(res.mu[k], mu[k], rtol=1e-12, atol=1e-14)


def test_divergence_is_structured(blobs):
    train, test = blobs
    m = mlp(10, (8,), 3)
    res = noisy_train(m, train, test, 0.0, 3, RngStream(0), optimizer="sgd", lr=1e12)
    assert not res.converged
    assert res.reason in ("diverged", "no-convergence")


def test_low_accuracy_is_no_convergence(blobs):
    train, test = blobs
    m = mlp(10, (8,), 3)
    res = noisy_train(m, train, test, 0.0, 1, RngStream(0), optimizer="sgd", lr=1e-9,
                      min_accuracy=0.99)
    assert (res.converged, res.reason) == (False, "no-convergence")


def test_epochs_to_reach():
    h = [EpochRecord(1, 1.0, 0.5), EpochRecord(2, 0.5, 0.95), EpochRecord(3, 0.4, 0.97)]
    assert epochs_to_reach(h, 0.9) == 2
    assert epochs_to_reach(h, 0.99) is None
