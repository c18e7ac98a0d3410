"""ELBO training of the generative model with the amortized encoder.

One training step encodes every view of a minibatch of objects into
Gaussian potentials, pools them with the learned prior potential, draws
one reparameterized latent per object, and scores it under the flow prior
and a ray-subsampled foam-rendered likelihood.  Weight perturbation is
omitted during training, so the likelihood sees hypernet outputs directly.
All parameters (flow, hypernet, encoder, prior potential) live in one flat
vector and are updated jointly by Adam; per-object field weights are never
free parameters.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteValueError
from .encoder import encode_views, pool_moments
from .field import field_apply_encoded, positional_encode
from .genmodel import LOG_2PI, flow_inverse, hypernet_forward, log_standard_normal
from .model import Model, save_checkpoint
from .params import Packer
from .render import _foam_hits_batch, _padded_points, composite, generate_rays


# hit-count buckets per batch; padding cost falls fast, graph size grows
_RAY_BUCKETS = 3


class TrainDivergence(RuntimeError):
    """Non-finite loss during training; carries where it happened."""

    def __init__(self, iteration: int, term: str):
        super().__init__(f"non-finite value in {term!r} at iteration {iteration}")
        self.iteration = iteration
        self.term = term


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10_000
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    objects_per_batch: int = 8
    views_per_object: int = 10
    rays_per_object: int = 1024
    observation_scale: float = 0.1
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.observation_scale <= 0.0:
            raise ValueError("observation scale must be positive")
        for name in ("objects_per_batch", "views_per_object", "rays_per_object", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "TrainConfig":
        return TrainConfig(**json.loads(text))


# ---------------------------------------------------------------------------
# parameter packing


def training_packer(model: Model) -> Packer:
    k = model.latent_dim
    return Packer(
        [
            ("flow", model.flow_params.shape),
            ("hypernet", model.hypernet_params.shape),
            ("encoder", model.encoder_params.shape),
            ("prior_mu", (k,)),
            ("prior_log_scale", (k,)),
        ]
    )


def pack_params(model: Model) -> np.ndarray:
    return training_packer(model).pack(
        {
            "flow": model.flow_params,
            "hypernet": model.hypernet_params,
            "encoder": model.encoder_params,
            "prior_mu": model.prior_mu,
            "prior_log_scale": model.prior_log_scale,
        }
    )


def with_params(model: Model, vector: np.ndarray) -> Model:
    p = training_packer(model).unpack(np.asarray(vector, dtype=np.float64))
    return replace(
        model,
        flow_params=p["flow"],
        hypernet_params=p["hypernet"],
        encoder_params=p["encoder"],
        prior_mu=p["prior_mu"],
        prior_log_scale=p["prior_log_scale"],
    )


# ---------------------------------------------------------------------------
# minibatches


@dataclass
class TrainBatch:
    """Per-object views for pooling plus a ray subsample for the likelihood."""

    images: np.ndarray  # (B, J, H, W, 3)
    cameras: np.ndarray  # (B, J, 4, 4)
    ray_origins: np.ndarray  # (B, n, 3)
    ray_directions: np.ndarray  # (B, n, 3)
    ray_pixels: np.ndarray  # (B, n, 3)
    total_rays: int  # rays in all J selected views of one object

    def __post_init__(self):
        b, n = self.ray_origins.shape[:2]
        if self.images.shape[0] != b or self.cameras.shape[:2] != self.images.shape[:2]:
            raise ValueError("images and cameras must align with the ray batch")
        if self.ray_directions.shape != (b, n, 3) or self.ray_pixels.shape != (b, n, 3):
            raise ValueError("ray arrays must align")
        if not 1 <= n <= self.total_rays:
            raise ValueError("ray subsample size out of range")


def build_train_batch(entries, config: TrainConfig, rng) -> TrainBatch:
    """Sample objects, views without replacement, and a ray subsample."""
    b = config.objects_per_batch
    j = config.views_per_object
    replace_objects = len(entries) < b
    picked = rng.choice(len(entries), size=b, replace=replace_objects)
    images, cameras = [], []
    origins, directions, pixels = [], [], []
    total = None
    for idx in picked:
        entry = entries[int(idx)]
        if len(entry.views) < j:
            raise ValueError(
                f"object {entry.object_id} has {len(entry.views)} views, need {j}"
            )
        view_ids = rng.choice(len(entry.views), size=j, replace=False)
        imgs, cams, ray_o, ray_d, ray_p = [], [], [], [], []
        for v in view_ids:
            image, camera = entry.views[int(v)]
            bundle = generate_rays(camera)
            imgs.append(image)
            cams.append(camera.c2w)
            ray_o.append(bundle.origins)
            ray_d.append(bundle.directions)
            ray_p.append(np.asarray(image, dtype=np.float64).reshape(-1, 3))
        ray_o = np.concatenate(ray_o)
        ray_d = np.concatenate(ray_d)
        ray_p = np.concatenate(ray_p)
        total = len(ray_o)
        n = min(config.rays_per_object, total)
        sub = rng.choice(total, size=n, replace=False)
        images.append(np.stack(imgs))
        cameras.append(np.stack(cams))
        origins.append(ray_o[sub])
        directions.append(ray_d[sub])
        pixels.append(ray_p[sub])
    return TrainBatch(
        images=np.stack(images),
        cameras=np.stack(cameras),
        ray_origins=np.stack(origins),
        ray_directions=np.stack(directions),
        ray_pixels=np.stack(pixels),
        total_rays=int(total),
    )


# ---------------------------------------------------------------------------
# ELBO


def reparameterized_sample(mu_hat, tau_hat, eps):
    """z = mu + tau^(-1/2) * eps with eps held constant."""
    return ad.add(mu_hat, ad.mul(ad.power(tau_hat, -0.5), np.asarray(eps, dtype=np.float64)))


def gaussian_log_density(z, mu_hat, tau_hat):
    """Diagonal Gaussian log-density summed over the last axis."""
    diff = ad.sub(z, mu_hat)
    quad = ad.mul(tau_hat, ad.mul(diff, diff))
    k = z.shape[-1] if isinstance(z, ad.Var) else np.shape(z)[-1]
    per_dim = ad.sub(ad.mul(0.5, ad.log(tau_hat)), ad.mul(0.5, quad))
    return ad.sub(ad.sum(per_dim, axis=-1), 0.5 * k * LOG_2PI)


def _batch_geometry(batch: TrainBatch, scene):
    """Per-object foam geometry, lattice-hitting rays compacted to the front.

    Rays that miss the lattice render to the background regardless of the
    weights; their residuals are returned as the constant miss_quad (B,).
    Hitting rays are padded per object to a common count m with rows whose
    optical factor is zero and whose pixel is the background, so pad
    residuals are exactly zero.  Returns (points (B, m, H, 3), view_dirs,
    factor (B, m, H), pixels (B, m, 3), miss_quad, buckets) where buckets
    lists (ray_lo, ray_hi, trimmed_hit_count) slices; points is None when
    every ray misses.
    """
    b, n = batch.ray_origins.shape[:2]
    o = batch.ray_origins.reshape(-1, 3)
    d = batch.ray_directions.reshape(-1, 3)
    ts, mask = _foam_hits_batch(o, d, scene)
    pts, vdirs = _padded_points(o, d, ts, mask, scene)
    hmax = mask.shape[-1]
    hit = mask.any(axis=-1).reshape(b, n)
    bg = scene.background
    miss_resid = np.where(hit[..., None], 0.0, bg - batch.ray_pixels)
    miss_quad = -0.5 * np.sum(miss_resid * miss_resid, axis=(1, 2))
    m = int(hit.sum(axis=1).max())
    if m == 0:
        return None, None, None, None, miss_quad, []
    front = np.argsort(~hit, axis=1, kind="stable")[:, :m]  # (b, m)
    valid = np.take_along_axis(hit, front, axis=1)
    rows = (np.arange(b)[:, None] * n + front).reshape(-1)
    sel_pts = pts[rows].reshape(b, m, hmax, 3)
    sel_vd = vdirs[rows].reshape(b, m, hmax, 3)
    factor = mask[rows].reshape(b, m, hmax) / scene.grid_size
    factor *= valid[..., None]
    pixels = np.where(
        valid[..., None], np.take_along_axis(batch.ray_pixels, front[..., None], axis=1), bg
    )
    # sort rays by crossing count so equal-count buckets can trim their
    # padded sample axis; residuals are a sum over rays, order-free
    counts = (factor > 0.0).sum(axis=-1)
    order = np.argsort(counts, axis=1, kind="stable")
    sel_pts = np.take_along_axis(sel_pts, order[..., None, None], axis=1)
    sel_vd = np.take_along_axis(sel_vd, order[..., None, None], axis=1)
    factor = np.take_along_axis(factor, order[..., None], axis=1)
    pixels = np.take_along_axis(pixels, order[..., None], axis=1)
    counts = np.take_along_axis(counts, order, axis=1)
    bounds = np.linspace(0, m, min(_RAY_BUCKETS, m) + 1).astype(int)
    buckets = []
    for k in range(len(bounds) - 1):
        lo, hi = int(bounds[k]), int(bounds[k + 1])
        if hi > lo:
            buckets.append((lo, hi, max(int(counts[:, lo:hi].max()), 1)))
    return sel_pts, sel_vd, factor, pixels, miss_quad, buckets


def _elbo(vector, model: Model, batch: TrainBatch, eps, likelihood_weight=1.0):
    """Mean per-object ELBO; `vector` may be a Var (training) or ndarray."""
    p = training_packer(model).unpack(vector)
    b, j = batch.images.shape[:2]
    h, w = batch.images.shape[2:4]
    k = model.latent_dim

    flat_images = batch.images.reshape(b * j, h, w, 3)
    flat_cams = batch.cameras.reshape(b * j, 4, 4)
    mu, log_scale = encode_views(flat_images, flat_cams, p["encoder"], model.encoder_config)
    mus = ad.reshape(mu, (b, j, k))
    taus = ad.exp(ad.mul(-2.0, ad.reshape(log_scale, (b, j, k))))
    prior_tau = ad.exp(ad.mul(-2.0, p["prior_log_scale"]))
    mu_hat, tau_hat = pool_moments(p["prior_mu"], prior_tau, mus, taus)

    z = reparameterized_sample(mu_hat, tau_hat, eps)
    log_q = gaussian_log_density(z, mu_hat, tau_hat)
    z_tilde, log_det = flow_inverse(z, p["flow"], model.flow_config)
    log_prior = ad.add(log_standard_normal(z_tilde), log_det)

    elbo = ad.sub(log_prior, log_q)
    if likelihood_weight != 0.0:
        weights = hypernet_forward(z, p["hypernet"], model.hypernet_config)
        points, vdirs, factor, pixels, miss_quad, buckets = _batch_geometry(batch, model.scene)
        n = batch.ray_origins.shape[1]
        quad = miss_quad
        order = model.field_config.encoding_order
        for lo, hi, h in buckets:
            pts_k = np.ascontiguousarray(points[:, lo:hi, :h])
            vd_k = vdirs[:, lo:hi, :h]
            fac_k = np.ascontiguousarray(factor[:, lo:hi, :h])
            mk = hi - lo
            enc_x = positional_encode(pts_k.reshape(b, mk * h, 3), order)
            enc_v1 = positional_encode(vd_k[:, :, :1, :], order)
            enc_v = np.broadcast_to(enc_v1, pts_k.shape[:3] + (enc_v1.shape[-1],))
            enc_v = np.ascontiguousarray(enc_v).reshape(b, mk * h, -1)

            def fn(_pts, _dirs, enc_x=enc_x, enc_v=enc_v, mk=mk, h=h):
                sigma, color = field_apply_encoded(weights, model.field_config, enc_x, enc_v)
                return ad.reshape(sigma, (b, mk, h)), ad.reshape(color, (b, mk, h, 3))

            rendered = composite(fn, pts_k, vd_k, fac_k, model.scene.background)
            resid = ad.sub(rendered, pixels[:, lo:hi])
            quad = ad.add(quad, ad.mul(-0.5, ad.sum(ad.mul(resid, resid), axis=(-2, -1))))
        s = model.noise.observation_scale
        log_lik = ad.sub(ad.div(quad, s * s), 3.0 * n * (np.log(s) + 0.5 * LOG_2PI))
        scaled = ad.mul(float(batch.total_rays) / n, log_lik)
        elbo = ad.add(elbo, ad.mul(likelihood_weight, scaled))
    return ad.div(ad.sum(elbo), float(b))


def elbo_estimate(model: Model, batch: TrainBatch, seed: int, likelihood_weight=1.0) -> float:
    """Single-sample ELBO estimate; the seed fixes the latent noise."""
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((batch.images.shape[0], model.latent_dim))
    value = _elbo(pack_params(model), model, batch, eps, likelihood_weight)
    return float(np.asarray(value))


# ---------------------------------------------------------------------------
# optimizer and loop


class Adam:
    """First-order adaptive-moment ascent step."""

    def __init__(self, size: int, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        """Returns the parameter increment for gradient ascent."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)  # dicts: iteration, elbo, wall_time_s

    @property
    def final_elbo(self) -> float:
        return self.history[-1]["elbo"] if self.history else float("nan")


def _write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "elbo", "wall_time_s"])
        writer.writeheader()
        writer.writerows(rows)


def train(model: Model, entries, config: TrainConfig, log_path=None, checkpoint_path=None) -> TrainResult:
    """Adam ascent on the ELBO; raises TrainDivergence on non-finite loss."""
    if not entries:
        raise ValueError("dataset is empty")
    if model.noise.observation_scale != config.observation_scale:
        model = replace(
            model, noise=replace(model.noise, observation_scale=config.observation_scale)
        )
    batch_rng, eps_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2)
    )
    vector = pack_params(model)
    adam = Adam(vector.size, config.learning_rate, config.beta1, config.beta2)
    history = []
    start = time.perf_counter()
    try:
        for it in range(config.iterations):
            batch = build_train_batch(entries, config, batch_rng)
            eps = eps_rng.standard_normal((config.objects_per_batch, model.latent_dim))
            try:
                value, grad = ad.value_and_gradient(
                    lambda v: _elbo(v, model, batch, eps), vector
                )
            except NonFiniteValueError as err:
                raise TrainDivergence(it, err.primitive) from err
            if not np.isfinite(value):
                raise TrainDivergence(it, "elbo")
            vector = vector + adam.step(grad)
            model = with_params(model, vector)
            if (it + 1) % config.log_every == 0 or it == config.iterations - 1:
                history.append(
                    {
                        "iteration": it + 1,
                        "elbo": float(value),
                        "wall_time_s": time.perf_counter() - start,
                    }
                )
    finally:
        if log_path is not None and history:
            _write_log(log_path, history)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model)
    return TrainResult(model=model, history=history)
