"""Pinhole rays, exact foam rendering, and stratified quadrature rendering.

The foam renderer assumes all density mass sits on the faces of a G^3
lattice inside the scene bounding box, so a ray's radiance integral
reduces to a finite sum over its intersections with the 3*(G+1) axis
planes.  That makes rendering exact (no quadrature error) with at most
3*(G+1) field evaluations per ray.

The quadrature renderer is the usual stratified sampler along the in-box
segment; it is deterministic per seed and exists mainly as a baseline.

Batched entry points pad rays to a common hit count.  Pads are masked by
zeroing their optical depth, which removes them exactly from both the
composited value and its gradient, so padded positions never leak into
weight gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .field import FieldConfig, FieldWeights, field_apply

_T_TOL = 1e-9


class InvalidCameraError(ValueError):
    """Camera pose matrix is not a rigid transform."""


@dataclass
class Camera:
    """Pinhole camera: camera-to-world pose, vertical fov (radians), size."""

    c2w: np.ndarray
    fov: float
    width: int
    height: int

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise InvalidCameraError(f"pose must be 4x4, got {self.c2w.shape}")
        _check_rotation(self.c2w[:3, :3])
        if not (0.0 < self.fov < np.pi):
            raise InvalidCameraError("fov must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise InvalidCameraError("image size must be positive")


def _check_rotation(r):
    err = np.max(np.abs(r.T @ r - np.eye(3)))
    if not np.isfinite(err) or err > 1e-6:
        raise InvalidCameraError(f"rotation block not orthonormal (max dev {err:.3g})")


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, |d| = {n}")


@dataclass
class RayBundle:
    """Rays for a pixel block, row-major pixel order."""

    origins: np.ndarray
    directions: np.ndarray

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, i) -> Ray:
        return Ray(self.origins[i], self.directions[i])


@dataclass
class Hit:
    t: float
    point: np.ndarray


@dataclass
class FoamScene:
    """Lattice geometry plus background color."""

    grid_size: int
    lower: np.ndarray = dc_field(default_factory=lambda: np.array([-1.0, -1.0, -1.0]))
    upper: np.ndarray = dc_field(default_factory=lambda: np.array([1.0, 1.0, 1.0]))
    background: np.ndarray = dc_field(default_factory=lambda: np.array([1.0, 1.0, 1.0]))

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float64)
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")
        if not np.all(self.upper > self.lower):
            raise ValueError("bounding box must have positive extent")


def generate_rays(camera: Camera) -> RayBundle:
    """One ray per pixel center, top-left pixel first, row-major.

    The camera looks along its -z axis; +x is image right, +y image up.
    """
    _check_rotation(camera.c2w[:3, :3])
    h, w = camera.height, camera.width
    focal = 0.5 * h / np.tan(0.5 * camera.fov)
    cols = (np.arange(w) + 0.5) - 0.5 * w
    rows = (np.arange(h) + 0.5) - 0.5 * h
    xs = np.broadcast_to(cols[None, :], (h, w)) / focal
    ys = -np.broadcast_to(rows[:, None], (h, w)) / focal
    dirs_cam = np.stack([xs, ys, -np.ones((h, w))], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ camera.c2w[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.c2w[:3, 3], dirs.shape).copy()
    return RayBundle(origins, dirs)


# ---------------------------------------------------------------------------
# foam hit enumeration


def foam_intersections(ray: Ray, scene: FoamScene) -> list[Hit]:
    """All lattice-plane crossings inside the box, sorted by t, merged.

    Crossings closer than 1e-9 in t (plane/edge coincidences) collapse to
    one hit so the field is evaluated once per geometric point.
    """
    ts, mask = _foam_hits_batch(ray.origin[None, :], ray.direction[None, :], scene)
    out = []
    for t in ts[0][mask[0]]:
        out.append(Hit(float(t), ray.origin + t * ray.direction))
    return out


def _foam_hits_batch(origins, dirs, scene):
    """Padded hit parameters for many rays: (t (R, N), mask (R, N)).

    Invalid/padded slots hold t = +inf with mask False.  N <= 3*(G+1).
    """
    r = origins.shape[0]
    g = scene.grid_size
    coords = [
        scene.lower[a] + (scene.upper[a] - scene.lower[a]) * np.arange(g + 1) / g
        for a in range(3)
    ]
    all_t = np.full((r, 3 * (g + 1)), np.inf)
    for a in range(3):
        d = dirs[:, a]
        ok = np.abs(d) > 1e-12
        t = np.full((r, g + 1), np.inf)
        t[ok] = (coords[a][None, :] - origins[ok, a, None]) / d[ok, None]
        all_t[:, a * (g + 1) : (a + 1) * (g + 1)] = t
    with np.errstate(invalid="ignore"):
        pts = origins[:, None, :] + all_t[..., None] * dirs[:, None, :]
        inside = np.all(
            (pts >= scene.lower - _T_TOL) & (pts <= scene.upper + _T_TOL), axis=-1
        )
    valid = np.isfinite(all_t) & (all_t >= 0.0) & inside
    all_t[~valid] = np.inf
    order = np.argsort(all_t, axis=1)
    ts = np.take_along_axis(all_t, order, axis=1)
    finite = np.isfinite(ts)
    # drop near-duplicate crossings; first of each run survives
    with np.errstate(invalid="ignore"):
        gaps = np.diff(ts, axis=1, prepend=-np.inf)
        keep = finite & (gaps > _T_TOL)
    n = max(int(keep.sum(axis=1).max()), 1) if r else 1
    # stable sort moves each row's kept entries to the front, order intact
    front = np.argsort(~keep, axis=1, kind="stable")[:, :n]
    out_t = np.take_along_axis(ts, front, axis=1)
    mask = np.take_along_axis(keep, front, axis=1)
    out_t[~mask] = np.inf
    return out_t, mask


def ray_box_span(origins, dirs, scene):
    """Entry/exit parameters of rays against the box; t1 <= t0 means miss."""
    t0 = np.zeros(origins.shape[0])
    t1 = np.full(origins.shape[0], np.inf)
    for a in range(3):
        d = dirs[:, a]
        o = origins[:, a]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (scene.lower[a] - o) / d
            tb = (scene.upper[a] - o) / d
        near = np.minimum(ta, tb)
        far = np.maximum(ta, tb)
        parallel = np.abs(d) <= 1e-12
        inside = (o >= scene.lower[a]) & (o <= scene.upper[a])
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
        t0 = np.maximum(t0, near)
        t1 = np.minimum(t1, far)
    return t0, t1


# ---------------------------------------------------------------------------
# compositing


def composite(field_fn, points, view_dirs, optical_factor, background):
    """Front-to-back alpha compositing over precomputed sample points.

    points/view_dirs: (..., N, 3) constants; optical_factor (..., N) is the
    constant multiplier taking raw density to optical depth (1/G for foam,
    segment length for quadrature, zero on pads).  Returns rgb (..., 3).
    """
    sigma, color = field_fn(points, view_dirs)
    optical = ad.mul(sigma, optical_factor)
    inclusive = ad.cumsum(optical, axis=-1)
    shape = inclusive.shape if isinstance(inclusive, ad.Var) else np.shape(inclusive)
    zeros = np.zeros(shape[:-1] + (1,))
    exclusive = ad.concatenate([zeros, ad.slice_last(inclusive, 0, shape[-1] - 1)], axis=-1)
    trans = ad.exp(ad.neg(exclusive))  # transmittance before each sample
    alpha = ad.sub(1.0, ad.exp(ad.neg(optical)))
    weights = ad.mul(alpha, trans)
    rgb = ad.sum(ad.mul(color, ad.reshape(weights, shape + (1,))), axis=-2)
    t_final = ad.exp(ad.neg(ad.sum(optical, axis=-1)))
    tb_shape = t_final.shape if isinstance(t_final, ad.Var) else np.shape(t_final)
    bg = ad.mul(ad.reshape(t_final, tb_shape + (1,)), background)
    return ad.add(rgb, bg)


def field_fn_from_weights(vector, config: FieldConfig):
    """Adapter turning a flat weight vector into a (points, dirs) field."""

    def fn(points, dirs):
        return field_apply(vector, config, points, dirs)

    return fn


def _padded_points(origins, dirs, ts, mask, scene):
    center = 0.5 * (scene.lower + scene.upper)
    t_safe = np.where(mask, ts, 0.0)
    pts = origins[..., None, :] + t_safe[..., None] * dirs[..., None, :]
    pts = np.where(mask[..., None], pts, center)
    vdirs = np.broadcast_to(dirs[..., None, :], pts.shape).copy()
    return pts, vdirs


def render_rays_foam(field_fn, origins, dirs, scene: FoamScene):
    """Exact foam rendering of a ray batch; origins/dirs (..., 3) constants."""
    lead = origins.shape[:-1]
    o2 = origins.reshape(-1, 3)
    d2 = dirs.reshape(-1, 3)
    ts, mask = _foam_hits_batch(o2, d2, scene)
    pts, vdirs = _padded_points(o2, d2, ts, mask, scene)
    factor = mask.astype(np.float64) / scene.grid_size
    rgb = composite(field_fn, pts, vdirs, factor, scene.background)
    out_shape = lead + (3,)
    return ad.reshape(rgb, out_shape)


def render_ray_foam(weights: FieldWeights, ray: Ray, scene: FoamScene) -> np.ndarray:
    fn = field_fn_from_weights(weights.vector, weights.config)
    return np.asarray(render_rays_foam(fn, ray.origin[None, :], ray.direction[None, :], scene))[0]


def quadrature_samples(origins, dirs, scene, n_samples, seed):
    """Stratified sample parameters and segment lengths per ray.

    Returns (t (R, n), delta (R, n), hit (R,)); rays that miss the box get
    zero deltas so they composite to pure background.
    """
    rng = np.random.default_rng(seed)
    r = origins.shape[0]
    t0, t1 = ray_box_span(origins, dirs, scene)
    t0 = np.maximum(t0, 0.0)
    hit = t1 > t0 + 1e-12
    # misses can report infinite spans; pin them so every t stays finite
    t0 = np.where(hit, t0, 0.0)
    t1 = np.where(hit, t1, 0.0)
    span = np.where(hit, t1 - t0, 0.0)
    edges = t0[:, None] + span[:, None] * np.arange(n_samples + 1) / n_samples
    u = rng.random((r, n_samples))
    t = edges[:, :-1] + u * (edges[:, 1:] - edges[:, :-1])
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = t1 - t[:, -1]
    delta = np.where(hit[:, None], delta, 0.0)
    return t, delta, hit


def render_rays_quadrature(field_fn, origins, dirs, scene, n_samples, seed):
    """Stratified quadrature rendering; deterministic for a given seed."""
    lead = origins.shape[:-1]
    o2 = origins.reshape(-1, 3)
    d2 = dirs.reshape(-1, 3)
    t, delta, hit = quadrature_samples(o2, d2, scene, n_samples, seed)
    mask = np.broadcast_to(hit[:, None], t.shape)
    pts, vdirs = _padded_points(o2, d2, t, mask, scene)
    rgb = composite(field_fn, pts, vdirs, delta, scene.background)
    return ad.reshape(rgb, lead + (3,))


def render_ray_quadrature(
    weights: FieldWeights, ray: Ray, scene: FoamScene, n_samples: int, seed: int
) -> np.ndarray:
    fn = field_fn_from_weights(weights.vector, weights.config)
    out = render_rays_quadrature(
        fn, ray.origin[None, :], ray.direction[None, :], scene, n_samples, seed
    )
    return np.asarray(out)[0]


def render_image(
    weights: FieldWeights,
    camera: Camera,
    scene: FoamScene,
    renderer: str = "foam",
    n_samples: int = 64,
    seed: int = 0,
) -> np.ndarray:
    """Render a full image (H, W, 3); rows are independent ray batches."""
    bundle = generate_rays(camera)
    fn = field_fn_from_weights(weights.vector, weights.config)
    if renderer == "foam":
        flat = render_rays_foam(fn, bundle.origins, bundle.directions, scene)
    elif renderer == "quadrature":
        flat = render_rays_quadrature(
            fn, bundle.origins, bundle.directions, scene, n_samples, seed
        )
    else:
        raise ValueError(f"unknown renderer {renderer!r}")
    return np.asarray(flat).reshape(camera.height, camera.width, 3)
