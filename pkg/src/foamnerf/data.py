"""Synthetic voxel objects, an independent oracle renderer, and dataset I/O.

Objects are hard-surface occupancy lattices with per-voxel albedo inside
the [-1, 1]^3 box.  The oracle renderer marches the voxel grid directly
(incremental grid stepping) and paints the first occupied voxel's albedo
at full opacity; it shares no code with the foam renderer, so the two can
check each other.

The two-limb family carries latent limb tilt angles.  The tilt lies along
the front camera's viewing axis, so negating both angles mirrors the
object in depth: the front silhouette is exactly unchanged in the
far-camera limit and differs only on the 1px mask fringe at dataset
scale, which makes single-front-view posteriors genuinely multimodal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .genmodel import Observation
from .images import read_ppm, write_ppm
from .render import Camera, FoamScene, generate_rays

FAMILIES = ("box-stack", "two-limb", "random-blobs")

MANIFEST_VERSION = 1


class UnknownFamilyError(ValueError):
    pass


@dataclass
class VoxelObject:
    occupancy: np.ndarray  # (G, G, G) bool
    albedo: np.ndarray  # (G, G, G, 3) float in [0, 1]
    seed: int
    family: str


def _voxel_centers(g: int) -> np.ndarray:
    return -1.0 + 2.0 * (np.arange(g) + 0.5) / g


def _paint_box(occ, alb, lo, hi, color, g):
    """Mark voxels whose centers fall inside the world-space box [lo, hi]."""
    c = _voxel_centers(g)
    mx = (c >= lo[0]) & (c <= hi[0])
    my = (c >= lo[1]) & (c <= hi[1])
    mz = (c >= lo[2]) & (c <= hi[2])
    region = mx[:, None, None] & my[None, :, None] & mz[None, None, :]
    occ |= region
    alb[region] = color


def _paint_capsule(occ, alb, a, b, radius, color, g):
    """Mark voxels within `radius` of segment a-b."""
    c = _voxel_centers(g)
    pts = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)  # (G,G,G,3)
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        u = np.zeros(pts.shape[:-1])
    else:
        u = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    closest = a + u[..., None] * ab
    region = np.linalg.norm(pts - closest, axis=-1) <= radius
    occ |= region
    alb[region] = color


def _rand_color(rng) -> np.ndarray:
    # saturated-ish colors away from the white background
    c = rng.uniform(0.0, 0.85, 3)
    c[rng.integers(3)] = rng.uniform(0.55, 0.9)
    return c


def make_box_stack(rng, g: int) -> tuple[np.ndarray, np.ndarray]:
    occ = np.zeros((g, g, g), dtype=bool)
    alb = np.zeros((g, g, g, 3))
    n = rng.integers(2, 5)
    y = -0.7
    for _ in range(n):
        sx, sz = rng.uniform(0.15, 0.55, 2)
        h = rng.uniform(0.2, 0.45)
        cx, cz = rng.uniform(-0.2, 0.2, 2)
        _paint_box(
            occ,
            alb,
            np.array([cx - sx, y, cz - sz]),
            np.array([cx + sx, min(y + h, 0.85), cz + sz]),
            _rand_color(rng),
            g,
        )
        y += h
        if y > 0.8:
            break
    return occ, alb


def make_two_limb(
    g: int,
    angle_a: float,
    angle_b: float,
    torso_color=None,
    limb_color=None,
    torso_half_width: float = 0.22,
    limb_radius: float = 0.16,
    limb_length: float = 0.62,
) -> tuple[np.ndarray, np.ndarray]:
    """Torso plus two limbs tilted into the depth (x) axis by the angles.

    Negating both angles mirrors the object in x, which the front camera
    (on the +x axis) cannot resolve in silhouette beyond parallax on the
    mask fringe.
    """
    occ = np.zeros((g, g, g), dtype=bool)
    alb = np.zeros((g, g, g, 3))
    if torso_color is None:
        torso_color = np.array([0.75, 0.25, 0.2])
    if limb_color is None:
        limb_color = np.array([0.2, 0.35, 0.75])
    hw = torso_half_width
    _paint_box(occ, alb, np.array([-hw, -0.75, -hw]), np.array([hw, 0.55, hw]), torso_color, g)
    for side, angle in ((1.0, angle_a), (-1.0, angle_b)):
        shoulder = np.array([0.0, 0.42, side * hw])
        direction = np.array(
            [np.sin(angle), -0.35 * np.cos(angle), side * 0.94 * np.cos(angle)]
        )
        direction /= np.linalg.norm(direction)
        _paint_capsule(
            occ, alb, shoulder, shoulder + limb_length * direction, limb_radius, limb_color, g
        )
    return occ, alb


def make_random_blobs(rng, g: int) -> tuple[np.ndarray, np.ndarray]:
    occ = np.zeros((g, g, g), dtype=bool)
    alb = np.zeros((g, g, g, 3))
    c = _voxel_centers(g)
    pts = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)
    for _ in range(rng.integers(3, 7)):
        center = rng.uniform(-0.5, 0.5, 3)
        radii = rng.uniform(0.15, 0.45, 3)
        region = np.sum(((pts - center) / radii) ** 2, axis=-1) <= 1.0
        occ |= region
        alb[region] = _rand_color(rng)
    return occ, alb


def generate_object(seed: int, family: str, grid_size: int = 16) -> VoxelObject:
    rng = np.random.default_rng(seed)
    if family == "box-stack":
        occ, alb = make_box_stack(rng, grid_size)
    elif family == "two-limb":
        # tilts capped at 0.55 rad: front-view silhouettes of the +/- pair then
        # differ only on the 1px mask boundary at dataset scale, while side
        # views separate the limb tips by several voxels
        angle_a = rng.uniform(-0.55, 0.55)
        angle_b = rng.uniform(-0.55, 0.55)
        occ, alb = make_two_limb(
            grid_size, angle_a, angle_b, torso_color=_rand_color(rng), limb_color=_rand_color(rng)
        )
    elif family == "random-blobs":
        occ, alb = make_random_blobs(rng, grid_size)
    else:
        raise UnknownFamilyError(f"unknown object family {family!r}")
    return VoxelObject(occ, alb, seed, family)


# ---------------------------------------------------------------------------
# oracle renderer: incremental grid stepping, first hit wins


def oracle_render(obj: VoxelObject, camera: Camera, scene: FoamScene) -> np.ndarray:
    """Exact first-hit raster of the voxel object; background elsewhere."""
    g = obj.occupancy.shape[0]
    bundle = generate_rays(camera)
    o, d = bundle.origins, bundle.directions
    r = o.shape[0]
    image = np.tile(scene.background, (r, 1))
    lo, hi = scene.lower, scene.upper
    cell = (hi - lo) / g

    # clip to box
    t0 = np.zeros(r)
    t1 = np.full(r, np.inf)
    for a in range(3):
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo[a] - o[:, a]) / d[:, a]
            tb = (hi[a] - o[:, a]) / d[:, a]
        near, far = np.minimum(ta, tb), np.maximum(ta, tb)
        parallel = np.abs(d[:, a]) <= 1e-12
        inside = (o[:, a] >= lo[a]) & (o[:, a] <= hi[a])
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
        t0, t1 = np.maximum(t0, near), np.minimum(t1, far)
    active = t1 > t0 + 1e-12
    if not active.any():
        return image.reshape(camera.height, camera.width, 3)

    start = o + (t0[:, None] + 1e-9) * d
    idx = np.clip(((start - lo) / cell).astype(np.int64), 0, g - 1)
    step = np.where(d > 0, 1, -1).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.abs(cell / d)
        next_bound = lo + (idx + (step > 0)) * cell
        t_max = np.where(np.abs(d) > 1e-12, (next_bound - o) / d, np.inf)

    done = ~active
    for _ in range(3 * g + 3):
        if done.all():
            break
        live = ~done
        ii = idx[live]
        occupied = obj.occupancy[ii[:, 0], ii[:, 1], ii[:, 2]]
        hit_rows = np.flatnonzero(live)[occupied]
        image[hit_rows] = obj.albedo[
            idx[hit_rows, 0], idx[hit_rows, 1], idx[hit_rows, 2]
        ]
        done[hit_rows] = True
        live = ~done
        if not live.any():
            break
        axis = np.argmin(t_max[live], axis=1)
        rows = np.flatnonzero(live)
        idx[rows, axis] += step[rows, axis]
        t_max[rows, axis] += t_delta[rows, axis]
        out = (idx[rows] < 0) | (idx[rows] >= g)
        done[rows[out.any(axis=1)]] = True
    return image.reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# cameras on a circle around the object


def look_at_camera(position, fov: float, width: int, height: int, target=None) -> Camera:
    position = np.asarray(position, dtype=np.float64)
    target = np.zeros(3) if target is None else np.asarray(target, dtype=np.float64)
    up = np.array([0.0, 1.0, 0.0])
    forward = target - position
    n = np.linalg.norm(forward)
    if n < 1e-9:
        raise ValueError("camera position coincides with target")
    forward /= n
    if abs(forward @ up) > 1.0 - 1e-9:
        raise ValueError("viewing direction parallel to the up axis")
    z_axis = -forward  # camera looks along -z
    x_axis = np.cross(up, z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x_axis, y_axis, z_axis, position
    return Camera(c2w, fov, width, height)


def camera_on_circle(
    azimuth: float, radius: float, fov: float, width: int, height: int
) -> Camera:
    """Camera at body height on the orbit circle, optical axis through origin."""
    pos = np.array([radius * np.cos(azimuth), 0.0, radius * np.sin(azimuth)])
    return look_at_camera(pos, fov, width, height)


def sample_cameras(
    n: int,
    radius: float,
    fov: float,
    width: int,
    height: int,
    mode: str = "uniform-random",
    seed: int = 0,
) -> tuple[list[Camera], np.ndarray]:
    if mode == "equally-spaced":
        azimuths = 2.0 * np.pi * np.arange(n) / n
    elif mode == "uniform-random":
        azimuths = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi, n)
    else:
        raise ValueError(f"unknown camera mode {mode!r}")
    cams = [camera_on_circle(a, radius, fov, width, height) for a in azimuths]
    return cams, azimuths


# ---------------------------------------------------------------------------
# dataset building and loading


@dataclass
class DatasetEntry:
    object_id: int
    seed: int
    family: str
    views: list[tuple[np.ndarray, Camera]]  # (image, camera)


def build_dataset(
    out_dir,
    n_objects: int,
    views_per_object: int,
    image_size: int,
    grid_size: int,
    seed: int,
    family: str = "box-stack",
    camera_mode: str = "uniform-random",
    radius: float = 2.7,
    fov: float = np.pi / 3.0,
) -> Path:
    """Render a dataset to PPM files plus a manifest that regenerates it."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    scene = FoamScene(grid_size=grid_size)
    root = np.random.SeedSequence(seed)
    object_seeds = [int(s.generate_state(1)[0]) for s in root.spawn(n_objects)]
    objects = []
    for i, oseed in enumerate(object_seeds):
        obj = generate_object(oseed, family, grid_size)
        cams, azimuths = sample_cameras(
            views_per_object, radius, fov, image_size, image_size, camera_mode, seed=oseed
        )
        views = []
        for j, (cam, az) in enumerate(zip(cams, azimuths)):
            image = oracle_render(obj, cam, scene)
            fname = f"images/obj{i:03d}_view{j:02d}.ppm"
            write_ppm(out / fname, image)
            views.append(
                {
                    "file": fname,
                    "azimuth": float(az),
                    "c2w": cam.c2w.reshape(-1).tolist(),
                    "fov": float(cam.fov),
                }
            )
        objects.append({"id": i, "seed": oseed, "family": family, "views": views})
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "family": family,
        "camera_mode": camera_mode,
        "image_size": image_size,
        "grid_size": grid_size,
        "radius": radius,
        "fov": fov,
        "objects": objects,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return out / "manifest.json"


def load_dataset(path) -> tuple[list[DatasetEntry], dict]:
    root = Path(path)
    if root.is_file():
        root = root.parent
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    entries = []
    for rec in manifest["objects"]:
        views = []
        for v in rec["views"]:
            cam = Camera(
                np.array(v["c2w"]).reshape(4, 4),
                v["fov"],
                manifest["image_size"],
                manifest["image_size"],
            )
            views.append((read_ppm(root / v["file"]), cam))
        entries.append(DatasetEntry(rec["id"], rec["seed"], rec["family"], views))
    return entries, manifest


def crop_view(image, camera: Camera, region=None) -> Observation:
    """Observation from a pixel rectangle (r0, r1, c0, c1), half-open.

    region None means the full view.  Empty regions are an error.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if region is None:
        region = (0, h, 0, w)
    r0, r1, c0, c1 = region
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ValueError(f"empty or out-of-bounds crop region {region}")
    bundle = generate_rays(camera)
    rows = np.arange(r0, r1)
    cols = np.arange(c0, c1)
    flat = (rows[:, None] * w + cols[None, :]).reshape(-1)
    return Observation(
        bundle.origins[flat], bundle.directions[flat], image[r0:r1, c0:c1].reshape(-1, 3)
    )
