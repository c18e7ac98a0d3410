"""Per-view amortized inference network and Gaussian potential pooling.

Each view contributes an independent Gaussian potential (mu, tau) over the
latent z; potentials multiply, so the pooled posterior is Gaussian with
precision the sum of precisions (the learned prior enters as potential 0).
The image trunk is a small strided CNN with global average pooling, which
keeps the parameter count independent of image resolution; the camera
matrix feeds a two-layer MLP on its flattened entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .params import Packer


@dataclass(frozen=True)
class EncoderConfig:
    latent_dim: int
    channels: tuple[int, ...] = (16, 32, 64, 64, 64)
    kernel: int = 3
    stride: int = 2
    cam_hidden: int = 64

    def __post_init__(self):
        if len(self.channels) < 1:
            raise ValueError("need at least one conv layer")


@dataclass
class GaussianPotential:
    """One factor of a product-of-Gaussians posterior."""

    mu: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.tau = np.asarray(self.tau, dtype=np.float64)
        if self.mu.shape != self.tau.shape:
            raise ValueError("mu and tau must have the same shape")
        if np.any(self.tau <= 0.0):
            raise ValueError("tau must be positive")


def encoder_packer(config: EncoderConfig) -> Packer:
    specs = []
    cin = 3
    for i, cout in enumerate(config.channels):
        specs.append((f"conv{i}_w", (config.kernel * config.kernel * cin, cout)))
        specs.append((f"conv{i}_b", (cout,)))
        cin = cout
    h = config.cam_hidden
    specs += [
        ("cam_w1", (16, h)),
        ("cam_b1", (h,)),
        ("cam_w2", (h, h)),
        ("cam_b2", (h,)),
        ("head_w", (config.channels[-1] + h, 2 * config.latent_dim)),
        ("head_b", (2 * config.latent_dim,)),
    ]
    return Packer(specs)


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator) -> np.ndarray:
    packer = encoder_packer(config)
    out = {}
    for name, (lo, hi, shape) in packer.offsets.items():
        if name.endswith("_b") or name == "head_w":
            # zero head: every view starts as the unit potential (mu 0, tau 1)
            out[name] = np.zeros(shape)
        else:
            out[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), shape)
    return packer.pack(out)


def encode_views(images, cameras, params, config: EncoderConfig):
    """Batched encoding: images (B, H, W, 3), cameras (B, 4, 4) -> (mu, log_scale)."""
    p = encoder_packer(config).unpack(params)
    h = images
    for i in range(len(config.channels)):
        h = ad.conv2d(h, p[f"conv{i}_w"], config.kernel, config.stride, config.kernel // 2)
        h = ad.relu(ad.add(h, p[f"conv{i}_b"]))
    shape = h.shape if isinstance(h, ad.Var) else np.shape(h)
    feat = ad.div(ad.sum(h, axis=(1, 2)), float(shape[1] * shape[2]))
    cams = np.asarray(cameras, dtype=np.float64).reshape(-1, 16)
    c = ad.relu(ad.add(ad.matmul(cams, p["cam_w1"]), p["cam_b1"]))
    c = ad.relu(ad.add(ad.matmul(c, p["cam_w2"]), p["cam_b2"]))
    joint = ad.concatenate([feat, c], axis=-1)
    head = ad.add(ad.matmul(joint, p["head_w"]), p["head_b"])
    k = config.latent_dim
    return ad.slice_last(head, 0, k), ad.slice_last(head, k, 2 * k)


def encode_view(image, camera_matrix, params, config: EncoderConfig) -> GaussianPotential:
    """Single-view potential; tau = exp(-2 * log_scale)."""
    image = np.asarray(image, dtype=np.float64)[None, ...]
    cam = np.asarray(camera_matrix, dtype=np.float64)[None, ...]
    mu, log_scale = encode_views(image, cam, params, config)
    mu = np.asarray(mu)[0]
    tau = np.exp(-2.0 * np.asarray(log_scale)[0])
    return GaussianPotential(mu, tau)


def pool_potentials(prior: GaussianPotential, views: list[GaussianPotential]) -> GaussianPotential:
    """Product of Gaussians: tau_hat = sum tau_j, mu_hat = weighted mean."""
    tau = prior.tau.copy()
    weighted = prior.tau * prior.mu
    for v in views:
        tau = tau + v.tau
        weighted = weighted + v.tau * v.mu
    return GaussianPotential(weighted / tau, tau)


def pool_moments(prior_mu, prior_tau, mus, taus):
    """Tape-friendly pooling over a view axis.

    mus/taus: (..., J, K); prior terms broadcast against (..., K).  Returns
    (mu_hat, tau_hat) with shape (..., K).
    """
    tau_hat = ad.add(prior_tau, ad.sum(taus, axis=-2))
    weighted = ad.add(ad.mul(prior_tau, prior_mu), ad.sum(ad.mul(taus, mus), axis=-2))
    return ad.div(weighted, tau_hat), tau_hat
