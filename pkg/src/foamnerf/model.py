"""Model bundle and its single-file checkpoint format.

A checkpoint is one binary file: a little-endian uint32 header length, a
UTF-8 JSON header (version tag, all configs, permutation seed, array
manifest), then the parameter vectors concatenated as little-endian
float32 in manifest order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, GaussianPotential, init_encoder_params
from .field import FieldConfig, weight_count
from .genmodel import (
    FlowConfig,
    HypernetConfig,
    NoiseModel,
    init_flow_params,
    init_hypernet_params,
)
from .render import FoamScene

CHECKPOINT_VERSION = 1


@dataclass
class Model:
    field_config: FieldConfig
    flow_config: FlowConfig
    hypernet_config: HypernetConfig
    encoder_config: EncoderConfig
    noise: NoiseModel
    scene: FoamScene
    flow_params: np.ndarray
    hypernet_params: np.ndarray
    encoder_params: np.ndarray
    prior_mu: np.ndarray
    prior_log_scale: np.ndarray

    @property
    def latent_dim(self) -> int:
        return self.flow_config.dim

    @property
    def weight_dim(self) -> int:
        return self.hypernet_config.out_dim

    def prior_potential(self) -> GaussianPotential:
        return GaussianPotential(self.prior_mu, np.exp(-2.0 * self.prior_log_scale))


def init_model(
    field_config: FieldConfig,
    latent_dim: int,
    seed: int = 0,
    flow_hidden: int = 512,
    hypernet_hidden: int = 512,
    encoder_channels: tuple[int, ...] = (16, 32, 64, 64, 64),
    cam_hidden: int = 64,
    noise: NoiseModel | None = None,
    scene: FoamScene | None = None,
    perm_seed: int | None = None,
) -> Model:
    rng = np.random.default_rng(seed)
    flow_config = FlowConfig(
        dim=latent_dim, hidden=flow_hidden, perm_seed=seed if perm_seed is None else perm_seed
    )
    hyper_config = HypernetConfig(
        latent_dim=latent_dim, hidden=hypernet_hidden, out_dim=weight_count(field_config)
    )
    enc_config = EncoderConfig(
        latent_dim=latent_dim, channels=tuple(encoder_channels), cam_hidden=cam_hidden
    )
    return Model(
        field_config=field_config,
        flow_config=flow_config,
        hypernet_config=hyper_config,
        encoder_config=enc_config,
        noise=noise or NoiseModel(),
        scene=scene or FoamScene(grid_size=field_config.grid_size),
        flow_params=init_flow_params(flow_config, rng),
        hypernet_params=init_hypernet_params(hyper_config, rng),
        encoder_params=init_encoder_params(enc_config, rng),
        prior_mu=np.zeros(latent_dim),
        prior_log_scale=np.zeros(latent_dim),
    )


def save_checkpoint(path, model: Model) -> None:
    arrays = [
        ("flow_params", model.flow_params),
        ("hypernet_params", model.hypernet_params),
        ("encoder_params", model.encoder_params),
        ("prior_mu", model.prior_mu),
        ("prior_log_scale", model.prior_log_scale),
    ]
    header = {
        "version": CHECKPOINT_VERSION,
        "field_config": {
            "encoding_order": model.field_config.encoding_order,
            "hidden_width": model.field_config.hidden_width,
            "hidden_layers_per_mlp": model.field_config.hidden_layers_per_mlp,
            "grid_size": model.field_config.grid_size,
        },
        "latent_dim": model.latent_dim,
        "flow": {
            "hidden": model.flow_config.hidden,
            "n_pairs": model.flow_config.n_pairs,
            "scale_bound": model.flow_config.scale_bound,
            "perm_seed": model.flow_config.perm_seed,
        },
        "hypernet_hidden": model.hypernet_config.hidden,
        "encoder": {
            "channels": list(model.encoder_config.channels),
            "kernel": model.encoder_config.kernel,
            "stride": model.encoder_config.stride,
            "cam_hidden": model.encoder_config.cam_hidden,
        },
        "noise": {
            "perturbation_variance": model.noise.perturbation_variance,
            "observation_scale": model.noise.observation_scale,
        },
        "scene": {
            "grid_size": model.scene.grid_size,
            "lower": model.scene.lower.tolist(),
            "upper": model.scene.upper.tolist(),
            "background": model.scene.background.tolist(),
        },
        "arrays": [[name, int(arr.size)] for name, arr in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(np.array(len(blob), dtype="<u4").tobytes())
        f.write(blob)
        for _, arr in arrays:
            f.write(np.asarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        data = f.read()
    n = int(np.frombuffer(data, dtype="<u4", count=1)[0])
    header = json.loads(data[4 : 4 + n].decode("utf-8"))
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    offset = 4 + n
    vectors = {}
    for name, size in header["arrays"]:
        vectors[name] = (
            np.frombuffer(data, dtype="<f4", count=size, offset=offset).astype(np.float64)
        )
        offset += 4 * size
    fc = FieldConfig(**header["field_config"])
    flow_config = FlowConfig(dim=header["latent_dim"], **header["flow"])
    hyper_config = HypernetConfig(
        latent_dim=header["latent_dim"],
        hidden=header["hypernet_hidden"],
        out_dim=weight_count(fc),
    )
    enc = header["encoder"]
    enc_config = EncoderConfig(
        latent_dim=header["latent_dim"],
        channels=tuple(enc["channels"]),
        kernel=enc["kernel"],
        stride=enc["stride"],
        cam_hidden=enc["cam_hidden"],
    )
    sc = header["scene"]
    return Model(
        field_config=fc,
        flow_config=flow_config,
        hypernet_config=hyper_config,
        encoder_config=enc_config,
        noise=NoiseModel(**header["noise"]),
        scene=FoamScene(
            grid_size=sc["grid_size"],
            lower=np.array(sc["lower"]),
            upper=np.array(sc["upper"]),
            background=np.array(sc["background"]),
        ),
        flow_params=vectors["flow_params"],
        hypernet_params=vectors["hypernet_params"],
        encoder_params=vectors["encoder_params"],
        prior_mu=vectors["prior_mu"],
        prior_log_scale=vectors["prior_log_scale"],
    )
