"""Latent prior over field weights: flow on z, hypernetwork to weights.

Generative chain: z_tilde ~ N(0, I); z = flow(z_tilde); w = hypernet(z);
w_tilde = w + sqrt(alpha_w) * delta with delta ~ N(0, I); pixels are
Gaussian around the foam rendering of w_tilde with scale s per channel.

Samplers work in the noncentered parameterization (z_tilde, delta), where
the prior is standard normal and no flow Jacobian enters the target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .field import FieldConfig, FieldWeights, field_apply_encoded, positional_encode, weight_count
from .params import Packer
from .render import FoamScene, _foam_hits_batch, _padded_points, composite

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# coupling flow


@dataclass(frozen=True)
class FlowConfig:
    """Two pairs of affine couplings with a fixed permutation after each pair."""

    dim: int
    hidden: int = 512
    n_pairs: int = 2
    scale_bound: float = 3.0
    perm_seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("flow dim must be >= 2")

    @property
    def split(self) -> tuple[int, int]:
        return self.dim // 2, self.dim - self.dim // 2


def flow_permutations(config: FlowConfig) -> list[np.ndarray]:
    rng = np.random.default_rng(config.perm_seed)
    return [rng.permutation(config.dim) for _ in range(config.n_pairs)]


def flow_packer(config: FlowConfig) -> Packer:
    d1, d2 = config.split
    specs = []
    for p in range(config.n_pairs):
        for c, (cond, upd) in enumerate(((d1, d2), (d2, d1))):
            tag = f"c{2 * p + c}"
            specs += [
                (f"{tag}_w1", (cond, config.hidden)),
                (f"{tag}_b1", (config.hidden,)),
                (f"{tag}_w2", (config.hidden, 2 * upd)),
                (f"{tag}_b2", (2 * upd,)),
            ]
    return Packer(specs)


def init_flow_params(config: FlowConfig, rng: np.random.Generator) -> np.ndarray:
    """He-initialized hidden layers, zero output layers (identity couplings)."""
    packer = flow_packer(config)
    out = {}
    for name, (lo, hi, shape) in packer.offsets.items():
        if name.endswith("_w1"):
            out[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), shape)
        else:
            out[name] = np.zeros(shape)
    return packer.pack(out)


def _coupling(x, p, tag, upd_dim, config, inverse):
    """One affine coupling; the conditioner is a one-hidden-layer MLP."""
    d = x.shape[-1] if isinstance(x, ad.Var) else np.shape(x)[-1]
    cond_dim = d - upd_dim
    cond = ad.slice_last(x, 0, cond_dim)
    upd = ad.slice_last(x, cond_dim, d)
    h = ad.relu(ad.add(ad.matmul(cond, p[f"{tag}_w1"]), p[f"{tag}_b1"]))
    raw = ad.add(ad.matmul(h, p[f"{tag}_w2"]), p[f"{tag}_b2"])
    shift = ad.slice_last(raw, 0, upd_dim)
    log_scale = ad.mul(config.scale_bound, ad.tanh(ad.slice_last(raw, upd_dim, 2 * upd_dim)))
    if inverse:
        new = ad.mul(ad.sub(upd, shift), ad.exp(ad.neg(log_scale)))
    else:
        new = ad.add(ad.mul(upd, ad.exp(log_scale)), shift)
    out = ad.concatenate([cond, new], axis=-1)
    return out, ad.sum(log_scale, axis=-1)


def _swap_halves(x, d1):
    d = x.shape[-1] if isinstance(x, ad.Var) else np.shape(x)[-1]
    return ad.concatenate([ad.slice_last(x, d1, d), ad.slice_last(x, 0, d1)], axis=-1)


def flow_forward(z_tilde, params, config: FlowConfig):
    """Map base samples to latents; returns (z, log_det of dz/dz_tilde)."""
    p = flow_packer(config).unpack(params)
    perms = flow_permutations(config)
    d1, d2 = config.split
    x = z_tilde
    log_det = 0.0
    for pair in range(config.n_pairs):
        # first coupling updates the second half, second the first half
        x, ld = _coupling(x, p, f"c{2 * pair}", d2, config, inverse=False)
        log_det = ad.add(log_det, ld)
        x = _swap_halves(x, d1)
        x, ld = _coupling(x, p, f"c{2 * pair + 1}", d1, config, inverse=False)
        log_det = ad.add(log_det, ld)
        x = _swap_halves(x, d2)
        x = ad.permute_last(x, perms[pair])
    return x, log_det


def flow_inverse(z, params, config: FlowConfig):
    """Inverse map; returns (z_tilde, log_det of dz_tilde/dz)."""
    p = flow_packer(config).unpack(params)
    perms = flow_permutations(config)
    d1, d2 = config.split
    x = z
    log_det = 0.0
    for pair in reversed(range(config.n_pairs)):
        x = ad.permute_last(x, np.argsort(perms[pair]))
        x = _swap_halves(x, d1)
        x, ld = _coupling(x, p, f"c{2 * pair + 1}", d1, config, inverse=True)
        log_det = ad.sub(log_det, ld)
        x = _swap_halves(x, d2)
        x, ld = _coupling(x, p, f"c{2 * pair}", d2, config, inverse=True)
        log_det = ad.sub(log_det, ld)
    return x, log_det


# ---------------------------------------------------------------------------
# hypernetwork


@dataclass(frozen=True)
class HypernetConfig:
    latent_dim: int
    hidden: int = 512
    out_dim: int = 20868


def hypernet_packer(config: HypernetConfig) -> Packer:
    return Packer(
        [
            ("w1", (config.latent_dim, config.hidden)),
            ("b1", (config.hidden,)),
            ("w2", (config.hidden, config.hidden)),
            ("b2", (config.hidden,)),
            ("w3", (config.hidden, config.out_dim)),
            ("b3", (config.out_dim,)),
        ]
    )


def init_hypernet_params(config: HypernetConfig, rng: np.random.Generator) -> np.ndarray:
    packer = hypernet_packer(config)
    return packer.pack(
        {
            "w1": rng.normal(0.0, np.sqrt(2.0 / config.latent_dim), (config.latent_dim, config.hidden)),
            "b1": np.zeros(config.hidden),
            "w2": rng.normal(0.0, np.sqrt(2.0 / config.hidden), (config.hidden, config.hidden)),
            "b2": np.zeros(config.hidden),
            # small output scale so initial fields start near the zero-weight field
            "w3": rng.normal(0.0, 0.01, (config.hidden, config.out_dim)),
            "b3": np.zeros(config.out_dim),
        }
    )


def hypernet_forward(z, params, config: HypernetConfig):
    """Two ReLU hidden layers, then a linear projection to weight space."""
    p = hypernet_packer(config).unpack(params)
    h = ad.relu(ad.add(ad.matmul(z, p["w1"]), p["b1"]))
    h = ad.relu(ad.add(ad.matmul(h, p["w2"]), p["b2"]))
    return ad.add(ad.matmul(h, p["w3"]), p["b3"])


# ---------------------------------------------------------------------------
# latent state and densities


@dataclass
class LatentState:
    z_tilde: np.ndarray
    delta: np.ndarray

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.z_tilde), np.asarray(self.delta)])

    @staticmethod
    def from_flat(x, latent_dim: int) -> "LatentState":
        x = np.asarray(x, dtype=np.float64)
        return LatentState(x[:latent_dim], x[latent_dim:])


@dataclass(frozen=True)
class NoiseModel:
    perturbation_variance: float = 0.025**2  # alpha_w
    observation_scale: float = 0.1  # s

    def __post_init__(self):
        if self.perturbation_variance < 0.0:
            raise ValueError("perturbation variance must be >= 0")
        if self.observation_scale <= 0.0:
            raise ValueError("observation scale must be > 0")


def perturb_weights(w, delta, alpha_w: float):
    """w + sqrt(alpha_w) * delta; alpha_w = 0 keeps weights on the manifold."""
    return ad.add(w, ad.mul(float(np.sqrt(alpha_w)), delta))


def log_standard_normal(x):
    """Sum of standard normal log-densities, constants included."""
    n = x.shape[-1] if isinstance(x, ad.Var) else np.shape(x)[-1]
    return ad.sub(ad.mul(-0.5, ad.sum(ad.mul(x, x), axis=-1)), 0.5 * n * LOG_2PI)


def log_prior(state: LatentState) -> float:
    flat = state.flatten()
    return float(log_standard_normal(flat))


@dataclass
class Observation:
    """Conditioning data: one ray per observed pixel."""

    origins: np.ndarray
    directions: np.ndarray
    pixels: np.ndarray

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 3)
        if not (len(self.origins) == len(self.directions) == len(self.pixels)):
            raise ValueError("origins, directions, and pixels must align")

    def __len__(self):
        return self.origins.shape[0]


@dataclass
class ObservationGeometry:
    """Precomputed foam sample points for one observation (hits are weight-free).

    Rays that miss the lattice render to the background for every weight
    vector, so only lattice-hitting rays carry sample points; the misses
    contribute the constant `miss_quad` to the residual quadratic.
    """

    points: np.ndarray  # (A, H, 3), lattice-hitting rays only
    view_dirs: np.ndarray  # (A, H, 3)
    optical_factor: np.ndarray  # (A, H)
    background: np.ndarray
    pixels: np.ndarray  # (A, 3)
    miss_quad: float  # -(1/2) sum over missing rays of |background - pixel|^2
    ray_count: int  # total rays, misses included
    enc_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @staticmethod
    def build(obs: Observation, scene: FoamScene) -> "ObservationGeometry":
        ts, mask = _foam_hits_batch(obs.origins, obs.directions, scene)
        hit = mask.any(axis=-1)
        cols = max(1, int(mask[hit].sum(axis=-1).max())) if hit.any() else 1
        ts, mask = ts[hit, :cols], mask[hit, :cols]
        pts, vdirs = _padded_points(obs.origins[hit], obs.directions[hit], ts, mask, scene)
        factor = mask.astype(np.float64) / scene.grid_size
        miss = scene.background - obs.pixels[~hit]
        return ObservationGeometry(
            pts,
            vdirs,
            factor,
            scene.background,
            obs.pixels[hit],
            miss_quad=float(-0.5 * np.sum(miss * miss)),
            ray_count=len(obs),
        )

    def encodings(self, order: int):
        """Cached flat positional encodings of the constant sample points.

        All samples of a ray share its direction, so directions are encoded
        once per ray and repeated along the hit axis.  Returns contiguous
        (n_points, features) arrays; reshape against points.shape as needed.
        """
        if order not in self.enc_cache:
            enc_x = positional_encode(self.points, order)
            enc_v = positional_encode(self.view_dirs[..., :1, :], order)
            enc_v = np.ascontiguousarray(np.broadcast_to(enc_v, enc_x.shape))
            f = enc_x.shape[-1]
            self.enc_cache[order] = (enc_x.reshape(-1, f), enc_v.reshape(-1, f))
        return self.enc_cache[order]


def bucket_geometry(geometry: "ObservationGeometry", n_buckets: int = 3):
    """Split rays into hit-count buckets to shrink the padded sample axis.

    Rays are sorted by crossing count and cut into equal-count groups, each
    trimmed to its own max count.  Sum of per-bucket residual quadratics
    equals the unbucketed one exactly; miss_quad and ray_count ride on the
    first bucket only, the rest carry zero/empty so double counting is
    impossible.
    """
    a = geometry.points.shape[0]
    if a == 0:
        return [geometry]
    counts = (geometry.optical_factor > 0.0).sum(axis=-1)
    order = np.argsort(counts, kind="stable")
    n_buckets = max(1, min(n_buckets, a))
    bounds = np.linspace(0, a, n_buckets + 1).astype(int)
    out = []
    for k in range(n_buckets):
        rows = order[bounds[k] : bounds[k + 1]]
        if rows.size == 0:
            continue
        h = int(counts[rows].max())
        out.append(
            ObservationGeometry(
                points=geometry.points[rows, :h],
                view_dirs=geometry.view_dirs[rows, :h],
                optical_factor=geometry.optical_factor[rows, :h],
                background=geometry.background,
                pixels=geometry.pixels[rows],
                miss_quad=geometry.miss_quad if not out else 0.0,
                ray_count=geometry.ray_count if not out else 0,
            )
        )
    return out


def encoded_field_fn(vector, config: FieldConfig, geometry: "ObservationGeometry"):
    """Field closure over the geometry's cached encodings.

    The returned function ignores its point arguments (composite passes the
    same constant geometry back in) and runs the MLPs on flat encodings.
    """
    flat_x, flat_v = geometry.encodings(config.encoding_order)
    lead = geometry.points.shape[:-1]

    def fn(points, dirs):
        sigma, color = field_apply_encoded(vector, config, flat_x, flat_v)
        return ad.reshape(sigma, lead), ad.reshape(color, lead + (3,))

    return fn


def residual_quadratic(field_fn, geometry: ObservationGeometry):
    """-(1/2) sum of squared pixel residuals under the foam renderer.

    This is the s-independent part of the log-likelihood; see
    log_likelihood for the full density.  Rays that miss the lattice enter
    through the geometry's precomputed constant.
    """
    if geometry.points.shape[0] == 0:
        return geometry.miss_quad
    rendered = composite(
        field_fn, geometry.points, geometry.view_dirs, geometry.optical_factor, geometry.background
    )
    resid = ad.sub(rendered, geometry.pixels)
    return ad.add(ad.mul(-0.5, ad.sum(ad.mul(resid, resid))), geometry.miss_quad)


def log_likelihood(w_tilde, obs: Observation, s: float, scene: FoamScene, config: FieldConfig):
    """Per-channel Gaussian log-density of observed pixels given weights."""
    if len(obs) == 0:
        return 0.0
    vector = w_tilde.vector if isinstance(w_tilde, FieldWeights) else w_tilde
    geometry = ObservationGeometry.build(obs, scene)
    fn = encoded_field_fn(vector, config, geometry)
    quad = residual_quadratic(fn, geometry)
    n_terms = 3 * geometry.ray_count
    return ad.sub(ad.div(quad, s * s), n_terms * (np.log(s) + 0.5 * LOG_2PI))


def log_joint_noncentered(
    state,
    obs: Observation,
    s: float,
    flow_params,
    flow_config: FlowConfig,
    hyper_params,
    hyper_config: HypernetConfig,
    field_config: FieldConfig,
    scene: FoamScene,
    alpha_w: float,
):
    """log p(z_tilde, delta) + log p(pixels | weights(z_tilde, delta)).

    `state` may be a LatentState or a flat vector/Var [z_tilde, delta]; the
    flow Jacobian never appears because the prior is on z_tilde itself.
    """
    if isinstance(state, LatentState):
        state = state.flatten()
    k = flow_config.dim
    total = state.shape[-1] if isinstance(state, ad.Var) else np.shape(state)[-1]
    z_tilde = ad.slice_last(state, 0, k)
    delta = ad.slice_last(state, k, total)
    z, _ = flow_forward(z_tilde, flow_params, flow_config)
    w = hypernet_forward(z, hyper_params, hyper_config)
    w_tilde = perturb_weights(w, delta, alpha_w)
    prior = log_standard_normal(state)
    lik = log_likelihood(w_tilde, obs, s, scene, field_config)
    return ad.add(prior, lik)


def sample_prior(seed: int, model) -> tuple[LatentState, FieldWeights]:
    """Draw (z_tilde, delta) from the base prior and decode field weights."""
    rng = np.random.default_rng(seed)
    k = model.flow_config.dim
    d = model.hypernet_config.out_dim
    state = LatentState(rng.standard_normal(k), rng.standard_normal(d))
    z, _ = flow_forward(state.z_tilde, model.flow_params, model.flow_config)
    w = hypernet_forward(z, model.hypernet_params, model.hypernet_config)
    w_tilde = perturb_weights(w, state.delta, model.noise.perturbation_variance)
    return state, FieldWeights(np.asarray(w_tilde), model.field_config)


def decode_flat_state(model, x, latent_only: bool = False) -> FieldWeights:
    """Turn a flat sampler state into renderable field weights.

    x is [z_tilde] when latent_only (delta frozen at zero) or
    [z_tilde, delta] otherwise.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    k = model.flow_config.dim
    expected = k if latent_only else k + model.hypernet_config.out_dim
    if x.shape[0] != expected:
        raise ValueError(f"state has dim {x.shape[0]}, expected {expected}")
    z, _ = flow_forward(x[:k], model.flow_params, model.flow_config)
    w = np.asarray(hypernet_forward(z, model.hypernet_params, model.hypernet_config))
    if not latent_only:
        w = np.asarray(perturb_weights(w, x[k:], model.noise.perturbation_variance))
    return FieldWeights(w, model.field_config)
