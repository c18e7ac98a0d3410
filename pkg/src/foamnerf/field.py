"""Small neural radiance fields driven by a flat weight vector.

A field is two ReLU MLPs: a density net on the encoded position and a
color net on [encoded position, encoded view direction, raw density].
Density uses a softplus output, color a sigmoid, so sigma >= 0 and color
lands in [0, 1] for any finite weights.  All weights live in one flat
vector so hypernetworks and samplers can treat the field as a point in
R^D; layout is density layers then color layers, each layer W (in x out,
row-major) followed by its bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class ShapeError(ValueError):
    """A weight or input vector has the wrong length or shape."""


@dataclass(frozen=True)
class FieldConfig:
    encoding_order: int = 10
    hidden_width: int = 64
    hidden_layers_per_mlp: int = 2
    grid_size: int = 128

    def __post_init__(self):
        if self.encoding_order < 1:
            raise ValueError("encoding_order must be >= 1")
        if self.hidden_width < 1 or self.hidden_layers_per_mlp < 1:
            raise ValueError("hidden dimensions must be >= 1")
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")

    @property
    def features_per_scalar(self) -> int:
        return 2 * self.encoding_order + 1

    @property
    def encoded_dim(self) -> int:
        return 3 * self.features_per_scalar


@dataclass
class FieldWeights:
    """Flat weight vector for one field instance."""

    vector: np.ndarray
    config: FieldConfig

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        expected = weight_count(self.config)
        if self.vector.shape != (expected,):
            raise ShapeError(
                f"weight vector has shape {self.vector.shape}, expected ({expected},)"
            )


def mlp_dims(config: FieldConfig) -> dict[str, list[tuple[int, int]]]:
    """(in, out) per linear layer for the density and color nets."""
    enc = config.encoded_dim
    w = config.hidden_width
    n = config.hidden_layers_per_mlp
    density = [enc] + [w] * n + [1]
    color = [2 * enc + 1] + [w] * n + [3]
    return {
        "density": list(zip(density[:-1], density[1:])),
        "color": list(zip(color[:-1], color[1:])),
    }


def weight_count(config: FieldConfig) -> int:
    dims = mlp_dims(config)
    return int(np.sum([(i + 1) * o for net in dims.values() for i, o in net]))


def positional_encode(x, order: int):
    """Sinusoidal features per scalar: [x, sin(2^j pi x + k/2)] for j < order, k in {0, 1}.

    Input (..., d) maps to (..., d*(2*order + 1)); per-scalar blocks are
    concatenated in input order, each block ordered raw value first, then
    ascending frequency with the phase-shifted copy adjacent.
    """
    shape = x.shape if isinstance(x, ad.Var) else np.shape(x)
    d = shape[-1]
    lead = tuple(shape[:-1])
    freqs = np.pi * (2.0 ** np.arange(order))  # (order,)
    if not isinstance(x, ad.Var):
        # constant fast path: one allocation, strided sin writes
        x = np.asarray(x, dtype=np.float64)
        out = np.empty(lead + (d, 2 * order + 1))
        out[..., 0] = x
        angles = x[..., None] * freqs
        np.sin(angles, out=out[..., 1::2])
        angles += 0.5
        np.sin(angles, out=out[..., 2::2])
        return out.reshape(lead + (d * (2 * order + 1),))
    xcol = ad.reshape(x, lead + (d, 1))
    angles = ad.mul(xcol, freqs)  # (..., d, order)
    s0 = ad.reshape(ad.sin(angles), lead + (d, order, 1))
    s1 = ad.reshape(ad.sin(ad.add(angles, 0.5)), lead + (d, order, 1))
    waves = ad.reshape(ad.concatenate([s0, s1], axis=-1), lead + (d, 2 * order))
    block = ad.concatenate([xcol, waves], axis=-1)  # (..., d, 2*order + 1)
    return ad.reshape(block, lead + (d * (2 * order + 1),))


def unflatten_weights(vector, config: FieldConfig):
    """Split a flat vector (..., D) into per-layer (W, b) pairs.

    Works on Vars and plain arrays; leading batch dimensions are kept so a
    stack of weight vectors unflattens to stacks of matrices.
    """
    shape = vector.shape if isinstance(vector, ad.Var) else np.shape(vector)
    if shape[-1] != weight_count(config):
        raise ShapeError(
            f"weight vector last axis is {shape[-1]}, expected {weight_count(config)}"
        )
    lead = tuple(shape[:-1])
    dims = mlp_dims(config)
    nets = {}
    offset = 0
    for name, layers in dims.items():
        out_layers = []
        for i, o in layers:
            w = ad.reshape(ad.slice_last(vector, offset, offset + i * o), lead + (i, o))
            offset += i * o
            b = ad.slice_last(vector, offset, offset + o)
            offset += o
            out_layers.append((w, b))
        nets[name] = out_layers
    return nets


def flatten_weights(density_layers, color_layers, config: FieldConfig) -> FieldWeights:
    """Inverse of unflatten_weights for plain arrays."""
    dims = mlp_dims(config)
    pieces = []
    for layers, expected in ((density_layers, dims["density"]), (color_layers, dims["color"])):
        if len(layers) != len(expected):
            raise ShapeError("wrong number of layers")
        for (w, b), (i, o) in zip(layers, expected):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.shape != (i, o) or b.shape != (o,):
                raise ShapeError(f"layer shape {w.shape}/{b.shape}, expected ({i},{o})/({o},)")
            pieces.append(w.reshape(-1))
            pieces.append(b)
    return FieldWeights(np.concatenate(pieces), config)


def _mlp_apply(layers, h):
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        shape = b.shape if isinstance(b, ad.Var) else np.shape(b)
        if len(shape) > 1:
            # batched weights: give biases a points axis to broadcast over
            b = ad.reshape(b, shape[:-1] + (1, shape[-1]))
        h = ad.add(ad.matmul(h, w), b)
        if i != last:
            h = ad.relu(h)
    return h


def field_apply(vector, config: FieldConfig, positions, directions):
    """Evaluate the field at positions/directions (..., P, 3).

    `vector` may be (D,) or batched (..., D) with leading dims broadcasting
    against the point batch.  Returns (sigma (..., P), color (..., P, 3)).
    """
    enc_x = positional_encode(positions, config.encoding_order)
    enc_v = positional_encode(directions, config.encoding_order)
    return field_apply_encoded(vector, config, enc_x, enc_v)


def field_apply_encoded(vector, config: FieldConfig, enc_x, enc_v):
    """field_apply on precomputed encodings (points are often constants)."""
    nets = unflatten_weights(vector, config)
    raw = _mlp_apply(nets["density"], enc_x)  # (..., P, 1)
    sigma = ad.softplus(raw)
    sig_shape = sigma.shape if isinstance(sigma, ad.Var) else np.shape(sigma)
    if not isinstance(enc_x, ad.Var) and np.ndim(enc_x) < len(sig_shape):
        # constant encodings shared across batched weights: broadcast views
        lead = sig_shape[: len(sig_shape) - np.ndim(enc_x)]
        enc_x = np.broadcast_to(enc_x, lead + np.shape(enc_x))
        enc_v = np.broadcast_to(enc_v, lead + np.shape(enc_v))
    color_in = ad.concatenate([enc_x, enc_v, sigma], axis=-1)
    color = ad.sigmoid(_mlp_apply(nets["color"], color_in))
    sig_shape = sigma.shape if isinstance(sigma, ad.Var) else np.shape(sigma)
    sigma = ad.reshape(sigma, sig_shape[:-1])
    return sigma, color


def eval_field(weights: FieldWeights, position, direction):
    """Single-point evaluation; returns (sigma: float, color: (3,))."""
    position = np.asarray(position, dtype=np.float64).reshape(1, 3)
    direction = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    sigma, color = field_apply(weights.vector, weights.config, position, direction)
    return float(sigma[0]), np.asarray(color[0])


def squash_density(sigma, grid_size):
    """Map raw density to opacity in [0, 1): alpha = 1 - exp(-sigma/G)."""
    return ad.sub(1.0, ad.exp(ad.neg(ad.div(sigma, float(grid_size)))))


# ---------------------------------------------------------------------------
# latent modulation: per-layer shifts vs concatenation (equivalent views)


def modulated_forward_shift(z, base_layers, shift_mats, x, activation=None):
    """MLP forward where layer i adds a shift V_i @ z to its pre-activation.

    base_layers: [(W (in, out), b (out,))]; shift_mats: [V (zdim, out)].
    """
    act = activation or (lambda h: np.maximum(h, 0.0))
    h = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    last = len(base_layers) - 1
    for i, ((w, b), v) in enumerate(zip(base_layers, shift_mats)):
        h = h @ w + b + z @ v
        if i != last:
            h = act(h)
    return h


def modulated_forward_concat(z, augmented_layers, x, activation=None):
    """MLP forward where every layer input has z appended.

    augmented_layers: [(Wcat ((in + zdim), out), b (out,))], with Wcat the
    block matrix [W; V] stacked on the input axis.
    """
    act = activation or (lambda h: np.maximum(h, 0.0))
    h = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    last = len(augmented_layers) - 1
    for i, (wcat, b) in enumerate(augmented_layers):
        h = np.concatenate([h, np.broadcast_to(z, h.shape[:-1] + z.shape[-1:])], axis=-1) @ wcat + b
        if i != last:
            h = act(h)
    return h


def augment_layers(base_layers, shift_mats):
    """Stack each (W, V) pair into the concat form [W; V]."""
    return [
        (np.concatenate([np.asarray(w, dtype=np.float64), np.asarray(v, dtype=np.float64)], axis=0), np.asarray(b, dtype=np.float64))
        for (w, b), v in zip(base_layers, shift_mats)
    ]
