import numpy as np
import pytest

from gfmn import tensor as T
from gfmn.errors import FingerprintMismatch, ShapeError
from gfmn.moments import (
    MomentStats,
    batch_stats,
    delta,
    full_loss,
    layer_weights,
    loss_terms,
    precompute_stats,
)
from gfmn.nets import EncoderConfig, FeatureExtractor, IdentityExtractor
from gfmn.tensor import Tensor

from oracles import two_pass_variance


@pytest.fixture
def extractor():
    return FeatureExtractor(EncoderConfig(image_size=8, channels=1, seed=5)).freeze()


def test_precompute_matches_two_pass_oracle(rng, extractor):
    data = rng.uniform(-1, 1, (37, 1, 8, 8)).astype(np.float32)
    stats = precompute_stats(data, extractor, chunk=10)
    feats = [f.data.astype(np.float64) for f in extractor.extract(Tensor(data))]
    for j, f in enumerate(feats):
        np.testing.assert_allclose(stats.mean[j], f.mean(axis=0), rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(stats.var[j], two_pass_variance(f), rtol=1e-4, atol=1e-6)
    assert stats.count == 37


def test_precompute_is_bit_reproducible(rng, extractor):
    data = rng.uniform(-1, 1, (20, 1, 8, 8)).astype(np.float32)
    a = precompute_stats(data, extractor, chunk=7)
    b = precompute_stats(data, extractor, chunk=7)
    assert all(np.array_equal(x, y) for x, y in zip(a.mean + a.var, b.mean + b.var))


def test_chunk_size_changes_only_rounding(rng, extractor):
    data = rng.uniform(-1, 1, (20, 1, 8, 8)).astype(np.float32)
    a = precompute_stats(data, extractor, chunk=3)
    b = precompute_stats(data, extractor, chunk=256)
    for x, y in zip(a.mean, b.mean):
        np.testing.assert_allclose(x, y, rtol=1e-6)


def test_precompute_needs_frozen_extractor_and_data(rng):
    with pytest.raises(ValueError):
        precompute_stats(np.zeros((2, 1, 8, 8)), FeatureExtractor(EncoderConfig(image_size=8, channels=1)))
    with pytest.raises(ValueError):
        precompute_stats(np.zeros((0, 2)), IdentityExtractor())


def test_mean_only_stats_have_no_variances():
    s = precompute_stats(np.ones((3, 2)), IdentityExtractor(), covariance=False)
    assert s.var is None


def test_batch_variance_needs_two_samples():
    with pytest.raises(ValueError):
        batch_stats(Tensor(np.ones((1, 2))), IdentityExtractor())
    assert batch_stats(Tensor(np.ones((1, 2))), IdentityExtractor(), covariance=False).var is None


def test_full_loss_matches_numpy(rng):
    E = IdentityExtractor()
    real_x = rng.standard_normal((50, 3))
    fake_x = rng.standard_normal((10, 3)) + 1
    real = precompute_stats(real_x, E)
    fake = batch_stats(Tensor(fake_x), E)
    expected = np.sum((real_x.mean(0) - fake_x.mean(0)) ** 2) + np.sum((real_x.var(0) - fake_x.var(0)) ** 2)
    assert float(full_loss(real, fake)) == pytest.approx(expected, rel=1e-5)
    assert float(full_loss(real, fake, covariance=False)) == pytest.approx(
        np.sum((real_x.mean(0) - fake_x.mean(0)) ** 2), rel=1e-5)


def test_full_loss_is_zero_on_identical_stats(rng):
    x = rng.standard_normal((10, 3)).astype(np.float32)
    s = precompute_stats(x, IdentityExtractor())
    assert float(full_loss(s, s)) == 0.0


def test_delta_signs(rng):
    E = IdentityExtractor()
    real = precompute_stats(np.full((4, 2), 3.0), E)
    fake = batch_stats(Tensor(np.full((4, 2), 1.0)), E)
    d = delta(real, fake)
    np.testing.assert_array_equal(d.mean[0], [2.0, 2.0])
    np.testing.assert_array_equal(d.var[0], [0.0, 0.0])


def test_fingerprint_mismatch_raises(rng, extractor):
    other = FeatureExtractor(EncoderConfig(image_size=8, channels=1, seed=6)).freeze()
    data = rng.uniform(-1, 1, (4, 1, 8, 8)).astype(np.float32)
    real = precompute_stats(data, extractor)
    fake = batch_stats(Tensor(data), other)
    with pytest.raises(FingerprintMismatch):
        full_loss(real, fake)


def test_width_mismatch_raises():
    a = MomentStats([np.zeros(2)], None, 1, "x")
    b = MomentStats([np.zeros(3)], None, 1, "x")
    with pytest.raises(ShapeError):
        a.check_compatible(b)


def test_layer_weights():
    assert layer_weights([4, 2]) == [1.0, 1.0]
    assert layer_weights([4, 2], normalize=True) == [0.25, 0.5]


def test_weighted_loss_terms(rng):
    E = IdentityExtractor()
    real = precompute_stats(np.zeros((4, 2)), E)
    fake = batch_stats(Tensor(np.ones((4, 2))), E)
    mean_term, var_term = loss_terms(real, fake, [0.5])
    assert float(mean_term) == pytest.approx(1.0)
    assert float(var_term) == 0.0


def test_loss_gradient_flows_to_generated_batch(rng):
    E = IdentityExtractor()
    real = precompute_stats(rng.standard_normal((20, 2)), E)
    x = Tensor(rng.standard_normal((6, 2)), requires_grad=True)
    report = T.grad_check(lambda: full_loss(real, batch_stats(x, E)), {"x": x}, epsilon=1e-5)
    assert report.ok(1e-6)
