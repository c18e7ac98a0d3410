"""Shared fixtures.

The expensive session fixtures (trained models, rendered datasets) can be
cached across pytest invocations by exporting FOAMNERF_FIXTURE_CACHE=<dir>;
without it everything is rebuilt from scratch in the pytest tmp tree, which
is what a clean verification run should do.
"""

import os
from pathlib import Path

import pytest

from foamnerf.data import build_dataset, load_dataset
from foamnerf.field import FieldConfig
from foamnerf.model import init_model, load_checkpoint
from foamnerf.training import TrainConfig, train

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_recorder():
    """Collects one pass/fail line per acceptance criterion for the summary."""

    def record(number, ok, detail):
        status = "PASS" if ok else "FAIL"
        ACCEPTANCE_LINES.append(f"[{status}] criterion {number:2d}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def _cache_root():
    value = os.environ.get("FOAMNERF_FIXTURE_CACHE")
    return Path(value) if value else None


def _dataset(tmp_path_factory, name, **kwargs):
    cache = _cache_root()
    root = (cache / name) if cache else tmp_path_factory.mktemp(name)
    if not (root / "manifest.json").exists():
        root.mkdir(parents=True, exist_ok=True)
        build_dataset(root, **kwargs)
    entries, _ = load_dataset(root)
    return entries


@pytest.fixture(scope="session")
def train_data(tmp_path_factory):
    """Two-limb training set at desk scale: 24 objects x 10 random orbits."""
    return _dataset(
        tmp_path_factory,
        "train_data",
        n_objects=24,
        views_per_object=10,
        image_size=16,
        grid_size=8,
        seed=0,
        family="two-limb",
        camera_mode="uniform-random",
    )


@pytest.fixture(scope="session")
def heldout_data(tmp_path_factory):
    """Six unseen two-limb objects with the four compass views each.

    View 0 (azimuth 0) is the ambiguous front view: mirrored limb tilts give
    near-identical silhouettes there.  View 1 (azimuth pi/2) separates them.
    """
    return _dataset(
        tmp_path_factory,
        "heldout_data",
        n_objects=6,
        views_per_object=4,
        image_size=16,
        grid_size=8,
        seed=777,
        family="two-limb",
        camera_mode="equally-spaced",
    )


def _train_fixture(entries, tmp_path_factory, name, hyper_hidden, flow_hidden, iterations):
    cache = _cache_root()
    # Iteration count in the cache name so config bumps never reuse stale runs.
    ckpt = (cache / f"{name}-{iterations}.ckpt") if cache else None
    if ckpt is not None and ckpt.exists():
        return load_checkpoint(ckpt)
    field_config = FieldConfig(
        encoding_order=5, hidden_width=24, hidden_layers_per_mlp=2, grid_size=8
    )
    model = init_model(
        field_config,
        latent_dim=8,
        seed=0,
        flow_hidden=flow_hidden,
        hypernet_hidden=hyper_hidden,
        encoder_channels=(8, 16, 32),
        cam_hidden=32,
    )
    config = TrainConfig(
        iterations=iterations,
        learning_rate=1e-3,
        objects_per_batch=8,
        views_per_object=10,
        rays_per_object=192,
        observation_scale=0.1,
        log_every=max(iterations // 10, 1),
        seed=0,
    )
    result = train(model, entries, config, checkpoint_path=ckpt)
    return result.model


@pytest.fixture(scope="session")
def trained_model(train_data, tmp_path_factory):
    """The desk-scale model most acceptance criteria run against."""
    return _train_fixture(
        train_data, tmp_path_factory, "main", hyper_hidden=96, flow_hidden=96, iterations=10_000
    )


@pytest.fixture(scope="session")
def lowcap_model(train_data, tmp_path_factory):
    """Same data, hypernet squeezed to 12 hidden units: the prior manifold
    underfits, leaving headroom that only weight-space inference can use."""
    return _train_fixture(
        train_data, tmp_path_factory, "lowcap", hyper_hidden=12, flow_hidden=64, iterations=2500
    )


@pytest.fixture(scope="session")
def tiny_model():
    """Throwaway untrained model, small enough for per-test finite differences."""
    field_config = FieldConfig(
        encoding_order=2, hidden_width=6, hidden_layers_per_mlp=2, grid_size=4
    )
    return init_model(
        field_config,
        latent_dim=4,
        seed=1,
        flow_hidden=12,
        hypernet_hidden=10,
        encoder_channels=(4,),
        cam_hidden=6,
    )
