"""Amortized encoder and Gaussian potential pooling."""

import numpy as np
import pytest

from foamnerf.encoder import (
    EncoderConfig,
    GaussianPotential,
    encode_view,
    encode_views,
    encoder_packer,
    init_encoder_params,
    pool_moments,
    pool_potentials,
)


@pytest.fixture
def enc():
    config = EncoderConfig(latent_dim=3, channels=(4, 6), kernel=3, stride=2, cam_hidden=5)
    params = init_encoder_params(config, np.random.default_rng(0))
    return config, params


def _view(seed, size=8):
    rng = np.random.default_rng(seed)
    image = rng.uniform(size=(size, size, 3))
    cam = np.eye(4)
    cam[:3, 3] = rng.standard_normal(3)
    return image, cam


def test_param_vector_matches_packer(enc):
    config, params = enc
    assert params.shape == (encoder_packer(config).size,)


def test_zero_head_gives_unit_potential(enc):
    # init zeroes the head: every view starts as the noninformative factor
    config, params = enc
    image, cam = _view(1)
    pot = encode_view(image, cam, params, config)
    assert np.allclose(pot.mu, 0.0)
    assert np.allclose(pot.tau, 1.0)


def test_encode_views_batched_matches_single(enc):
    config, params = enc
    # perturb params away from the zero head so outputs vary
    rng = np.random.default_rng(2)
    params = params + 0.05 * rng.standard_normal(params.shape)
    images, cams = zip(*[_view(s) for s in (3, 4, 5)])
    mu_b, ls_b = encode_views(np.stack(images), np.stack(cams), params, config)
    mu_b, ls_b = np.asarray(mu_b), np.asarray(ls_b)
    assert mu_b.shape == (3, 3) and ls_b.shape == (3, 3)
    for i in range(3):
        pot = encode_view(images[i], cams[i], params, config)
        assert np.allclose(pot.mu, mu_b[i], rtol=1e-12)
        assert np.allclose(pot.tau, np.exp(-2.0 * ls_b[i]), rtol=1e-12)


def test_encoder_sensitive_to_image_and_camera(enc):
    config, params = enc
    rng = np.random.default_rng(6)
    params = params + 0.05 * rng.standard_normal(params.shape)
    image, cam = _view(7)
    base = encode_view(image, cam, params, config)
    other_img = encode_view(np.clip(image + 0.3, 0, 1), cam, params, config)
    cam2 = cam.copy()
    cam2[:3, 3] += 1.0
    other_cam = encode_view(image, cam2, params, config)
    assert not np.allclose(base.mu, other_img.mu)
    assert not np.allclose(base.mu, other_cam.mu)


def test_pool_potentials_formula():
    prior = GaussianPotential(np.array([0.0, 1.0]), np.array([1.0, 2.0]))
    v1 = GaussianPotential(np.array([2.0, -1.0]), np.array([4.0, 1.0]))
    v2 = GaussianPotential(np.array([-1.0, 0.5]), np.array([0.5, 3.0]))
    pooled = pool_potentials(prior, [v1, v2])
    # precision-weighted product of Gaussians, written out by hand
    tau = np.array([1.0 + 4.0 + 0.5, 2.0 + 1.0 + 3.0])
    mu = np.array(
        [
            (1.0 * 0.0 + 4.0 * 2.0 + 0.5 * -1.0) / tau[0],
            (2.0 * 1.0 + 1.0 * -1.0 + 3.0 * 0.5) / tau[1],
        ]
    )
    assert np.allclose(pooled.tau, tau, rtol=1e-15)
    assert np.allclose(pooled.mu, mu, rtol=1e-15)


def test_pool_potentials_no_views_returns_prior():
    prior = GaussianPotential(np.array([0.3]), np.array([2.5]))
    pooled = pool_potentials(prior, [])
    assert np.array_equal(pooled.mu, prior.mu)
    assert np.array_equal(pooled.tau, prior.tau)


def test_pool_moments_matches_pool_potentials():
    rng = np.random.default_rng(8)
    k, j = 4, 3
    prior_mu = rng.standard_normal(k)
    prior_tau = rng.uniform(0.5, 2.0, k)
    mus = rng.standard_normal((j, k))
    taus = rng.uniform(0.5, 2.0, (j, k))
    mu_hat, tau_hat = pool_moments(prior_mu, prior_tau, mus, taus)
    ref = pool_potentials(
        GaussianPotential(prior_mu, prior_tau),
        [GaussianPotential(mus[i], taus[i]) for i in range(j)],
    )
    assert np.allclose(np.asarray(mu_hat), ref.mu, rtol=1e-13)
    assert np.allclose(np.asarray(tau_hat), ref.tau, rtol=1e-13)


def test_gaussian_potential_validation():
    with pytest.raises(ValueError):
        GaussianPotential(np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        GaussianPotential(np.zeros(2), np.array([1.0, -1.0]))


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(latent_dim=2, channels=())
