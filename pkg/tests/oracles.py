"""Independent reference implementations used to cross-check the package.

Everything here is deliberately scalar, sequential, and written from the
defining formulas rather than shared with the library code: plane-enumeration
compositing with an explicit running transmittance product, a tiny-step
first-hit marcher, and plain central differences.
"""

import math

import numpy as np


def brute_force_foam_ray(field_scalar, origin, direction, scene):
    """Composite one ray over every lattice-plane crossing, front to back.

    field_scalar(point, direction) -> (sigma, rgb) for a single point.
    Each crossing contributes optical depth sigma / grid_size; crossings
    closer than 1e-9 in t collapse to one.
    """
    g = scene.grid_size
    ts = []
    for axis in range(3):
        d = direction[axis]
        if abs(d) <= 1e-12:
            continue
        for k in range(g + 1):
            plane = scene.lower[axis] + (scene.upper[axis] - scene.lower[axis]) * k / g
            t = (plane - origin[axis]) / d
            if t < 0.0:
                continue
            p = origin + t * direction
            if np.all(p >= scene.lower - 1e-9) and np.all(p <= scene.upper + 1e-9):
                ts.append(t)
    ts.sort()
    merged = []
    for t in ts:
        if not merged or t - merged[-1] > 1e-9:
            merged.append(t)
    rgb = np.zeros(3)
    trans = 1.0
    for t in merged:
        p = origin + t * direction
        sigma, color = field_scalar(p, direction)
        depth = float(sigma) / g
        rgb = rgb + trans * (1.0 - math.exp(-depth)) * np.asarray(color)
        trans *= math.exp(-depth)
    return rgb + trans * scene.background


def first_hit_march(obj, origin, direction, scene, step=1e-3, t_max=8.0):
    """March in tiny steps and return the albedo of the first occupied cell."""
    g = obj.occupancy.shape[0]
    cell = (scene.upper - scene.lower) / g
    t = 0.0
    while t < t_max:
        p = origin + t * direction
        if np.all(p >= scene.lower) and np.all(p <= scene.upper):
            idx = np.minimum(((p - scene.lower) / cell).astype(int), g - 1)
            if obj.occupancy[idx[0], idx[1], idx[2]]:
                return np.asarray(obj.albedo[idx[0], idx[1], idx[2]])
        t += step
    return np.asarray(scene.background)


def fd_gradient(fn, x, h=1e-6):
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        hi = x.copy()
        hi[i] += h
        lo = x.copy()
        lo[i] -= h
        out[i] = (float(fn(hi)) - float(fn(lo))) / (2.0 * h)
    return out


def fd_jacobian(fn, x, h=1e-6):
    """Central-difference Jacobian of a vector function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        hi = x.copy()
        hi[i] += h
        lo = x.copy()
        lo[i] -= h
        cols.append((np.asarray(fn(hi)) - np.asarray(fn(lo))) / (2.0 * h))
    return np.stack(cols, axis=-1)
