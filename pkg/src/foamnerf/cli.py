"""Command-line entry points for dataset building, training, and inference.

Every subcommand reads an optional JSON config file, lets explicit flags
override it, and records the resolved configuration (with the seed) in the
run directory, so a run is reproducible from its config copy alone.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .ablations import (
    ablate_annealing,
    ablate_renderer,
    default_step_sweep,
    write_acceptance_csv,
    write_annealing_csv,
)
from .data import build_dataset, crop_view, load_dataset
from .field import FieldConfig
from .genmodel import decode_flat_state, sample_prior
from .images import write_ppm
from .inference import (
    AnnealingSchedule,
    archive_from_result,
    archive_from_vi,
    fit_vi,
    load_samples,
    run_annealed_chains,
    save_archive,
    write_diagnostics,
)
from .metrics import EvalReport, per_pixel_variance, psnr
from .model import init_model, load_checkpoint
from .render import Camera, field_fn_from_weights, generate_rays, render_rays_foam
from .training import TrainConfig, train

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _merge_config(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags, unknown keys rejected."""
    cfg = dict(defaults)
    path = getattr(args, "config", None)
    if path:
        with open(path) as f:
            file_cfg = json.load(f)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _prepare_run_dir(out, command: str, cfg: dict) -> Path:
    run = Path(out)
    run.mkdir(parents=True, exist_ok=True)
    with open(run / "config.json", "w") as f:
        json.dump({"command": command, **cfg}, f, indent=2, sort_keys=True)
        f.write("\n")
    return run


def _add_config_args(sp, defaults: dict, types: dict | None = None):
    """One optional flag per default key; None means 'not given'."""
    types = types or {}
    for key, value in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            sp.add_argument(flag, action="store_const", const=True, default=None)
        else:
            typ = types.get(key, type(value) if value is not None else str)
            sp.add_argument(flag, type=typ, default=None)


def _front_camera(image_size: int, radius: float, fov: float, azimuth: float = 0.0) -> Camera:
    from .data import camera_on_circle

    return camera_on_circle(azimuth, radius, fov, image_size, image_size)


def _render_view(model, weights_vector, camera) -> np.ndarray:
    bundle = generate_rays(camera)
    fn = field_fn_from_weights(weights_vector, model.field_config)
    img = render_rays_foam(fn, bundle.origins, bundle.directions, model.scene)
    return np.clip(np.asarray(img), 0.0, 1.0).reshape(camera.height, camera.width, 3)


def _load_observation(data_dir, object_index: int, view_index: int):
    entries, _ = load_dataset(data_dir)
    if not 0 <= object_index < len(entries):
        raise ValueError(f"object index {object_index} outside dataset of {len(entries)}")
    entry = entries[object_index]
    if not 0 <= view_index < len(entry.views):
        raise ValueError(f"view index {view_index} outside {len(entry.views)} views")
    image, camera = entry.views[view_index]
    return crop_view(image, camera), entry


# subcommands

MAKE_DATA_DEFAULTS = {
    "objects": 64,
    "views": 10,
    "image_size": 32,
    "grid_size": 16,
    "family": "two-limb",
    "camera_mode": "uniform-random",
    "radius": 2.7,
    "fov": float(np.pi / 3.0),
    "seed": 0,
}


def cmd_make_data(args) -> int:
    cfg = _merge_config(MAKE_DATA_DEFAULTS, args)
    run = _prepare_run_dir(args.out, "make-data", cfg)
    build_dataset(
        run,
        n_objects=cfg["objects"],
        views_per_object=cfg["views"],
        image_size=cfg["image_size"],
        grid_size=cfg["grid_size"],
        seed=cfg["seed"],
        family=cfg["family"],
        camera_mode=cfg["camera_mode"],
        radius=cfg["radius"],
        fov=cfg["fov"],
    )
    print(f"wrote {cfg['objects']} objects x {cfg['views']} views to {run}")
    return 0


TRAIN_DEFAULTS = {
    "latent_dim": 16,
    "encoding_order": 10,
    "hidden_width": 64,
    "grid_size": 16,
    "flow_hidden": 512,
    "hypernet_hidden": 512,
    "iterations": 10_000,
    "learning_rate": 1e-4,
    "objects_per_batch": 8,
    "views_per_object": 10,
    "rays_per_object": 1024,
    "observation_scale": 0.1,
    "log_every": 100,
    "seed": 0,
}


def cmd_train(args) -> int:
    cfg = _merge_config(TRAIN_DEFAULTS, args)
    run = _prepare_run_dir(args.out, "train", cfg)
    entries, _ = load_dataset(args.data)
    field_config = FieldConfig(
        encoding_order=cfg["encoding_order"],
        hidden_width=cfg["hidden_width"],
        hidden_layers_per_mlp=2,
        grid_size=cfg["grid_size"],
    )
    model = init_model(
        field_config,
        latent_dim=cfg["latent_dim"],
        seed=cfg["seed"],
        flow_hidden=cfg["flow_hidden"],
        hypernet_hidden=cfg["hypernet_hidden"],
    )
    train_config = TrainConfig(
        iterations=cfg["iterations"],
        learning_rate=cfg["learning_rate"],
        objects_per_batch=cfg["objects_per_batch"],
        views_per_object=cfg["views_per_object"],
        rays_per_object=cfg["rays_per_object"],
        observation_scale=cfg["observation_scale"],
        log_every=cfg["log_every"],
        seed=cfg["seed"],
    )
    result = train(
        model,
        entries,
        train_config,
        log_path=run / "train_log.csv",
        checkpoint_path=run / "model.ckpt",
    )
    print(f"trained {cfg['iterations']} iterations; final ELBO {result.final_elbo:.2f}")
    print(f"checkpoint at {run / 'model.ckpt'}")
    return 0


SAMPLE_PRIOR_DEFAULTS = {
    "count": 4,
    "seed": 0,
    "image_size": 32,
    "radius": 2.7,
    "fov": float(np.pi / 3.0),
    "azimuth": 0.0,
}


def cmd_sample_prior(args) -> int:
    cfg = _merge_config(SAMPLE_PRIOR_DEFAULTS, args)
    run = _prepare_run_dir(args.out, "sample-prior", cfg)
    model = load_checkpoint(args.model)
    camera = _front_camera(cfg["image_size"], cfg["radius"], cfg["fov"], cfg["azimuth"])
    for i in range(cfg["count"]):
        _, weights = sample_prior(cfg["seed"] + i, model)
        write_ppm(run / f"prior{i:03d}.ppm", _render_view(model, weights.vector, camera))
    print(f"wrote {cfg['count']} prior renders to {run}")
    return 0


INFER_DEFAULTS = {
    "object_index": 0,
    "view_index": 0,
    "chains": 8,
    "anneal_steps": 100,
    "leapfrog": 100,
    "keep_last": 16,
    "start_scale": 5.0,
    "final_scale": 0.1,
    "base_step": 0.005,
    "seed": 0,
}


def _run_infer_hmc(args, latent_only: bool) -> int:
    name = "infer-latent-only" if latent_only else "infer-hmc"
    cfg = _merge_config(INFER_DEFAULTS, args)
    run = _prepare_run_dir(args.out, name, cfg)
    model = load_checkpoint(args.model)
    obs, _ = _load_observation(args.data, cfg["object_index"], cfg["view_index"])
    schedule = AnnealingSchedule(
        start_scale=cfg["start_scale"],
        final_scale=cfg["final_scale"],
        n_steps=cfg["anneal_steps"],
        base_step=cfg["base_step"],
    )
    t0 = time.time()
    result = run_annealed_chains(
        model,
        obs,
        schedule,
        n_chains=cfg["chains"],
        n_leapfrog=cfg["leapfrog"],
        keep_last=cfg["keep_last"],
        seed=cfg["seed"],
        latent_only=latent_only,
    )
    elapsed = time.time() - t0
    save_archive(run / "posterior.samples", archive_from_result(result))
    write_diagnostics(run / "diagnostics.csv", result.diagnostics)
    with open(run / "run.json", "w") as f:
        json.dump(
            {
                "runtime_seconds": elapsed,
                "accept_rates": [float(a) for a in result.accept_rates],
                "divergences": [int(d) for d in result.divergences],
                "gradient_evals_per_chain": result.gradient_evals_per_chain,
                "n_samples": int(result.samples.shape[0] * result.samples.shape[1]),
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    print(
        f"{result.samples.shape[0] * result.samples.shape[1]} samples "
        f"({result.samples.shape[0]} chains x {result.samples.shape[1]}) in {elapsed:.1f}s; "
        f"mean accept {float(result.accept_rates.mean()):.3f}"
    )
    return 0


def cmd_infer_hmc(args) -> int:
    return _run_infer_hmc(args, latent_only=False)


def cmd_infer_latent_only(args) -> int:
    return _run_infer_hmc(args, latent_only=True)


INFER_VI_DEFAULTS = {
    "object_index": 0,
    "view_index": 0,
    "steps": 1500,
    "learning_rate": 0.02,
    "draws": 16,
    "seed": 0,
    "latent_only": False,
}


def cmd_infer_vi(args) -> int:
    cfg = _merge_config(INFER_VI_DEFAULTS, args)
    run = _prepare_run_dir(args.out, "infer-vi", cfg)
    model = load_checkpoint(args.model)
    obs, _ = _load_observation(args.data, cfg["object_index"], cfg["view_index"])
    t0 = time.time()
    params = fit_vi(
        model,
        obs,
        n_steps=cfg["steps"],
        learning_rate=cfg["learning_rate"],
        seed=cfg["seed"],
        latent_only=cfg["latent_only"],
    )
    elapsed = time.time() - t0
    save_archive(run / "posterior.samples", archive_from_vi(params, model, cfg["draws"], cfg["seed"]))
    with open(run / "vi_params.json", "w") as f:
        json.dump(
            {
                "mu": params.mu.tolist(),
                "log_sigma": params.log_sigma.tolist(),
                "latent_only": params.latent_only,
                "runtime_seconds": elapsed,
            },
            f,
        )
        f.write("\n")
    print(f"fit {cfg['steps']} VI steps in {elapsed:.1f}s; wrote {cfg['draws']} draws")
    return 0


RENDER_DEFAULTS = {
    "image_size": 32,
    "radius": 2.7,
    "fov": float(np.pi / 3.0),
    "azimuth": 0.0,
    "all_samples": False,
}


def cmd_render(args) -> int:
    cfg = _merge_config(RENDER_DEFAULTS, args)
    run = _prepare_run_dir(args.out, "render", cfg)
    model = load_checkpoint(args.model)
    archive = load_samples(args.samples)
    camera = _front_camera(cfg["image_size"], cfg["radius"], cfg["fov"], cfg["azimuth"])
    n = 0
    for c in range(archive.states.shape[0]):
        keep = range(archive.states.shape[1]) if cfg["all_samples"] \
            else [archive.states.shape[1] - 1]
        for k in keep:
            weights = decode_flat_state(model, archive.states[c, k], archive.latent_only)
            write_ppm(run / f"chain{c:02d}_sample{k:03d}.ppm",
                      _render_view(model, weights.vector, camera))
            n += 1
    print(f"rendered {n} samples to {run}")
    return 0


EVAL_DEFAULTS = {
    "object_index": 0,
    "views": "0",
    "max_samples": 64,
}


def cmd_eval(args) -> int:
    cfg = _merge_config(EVAL_DEFAULTS, args)
    model = load_checkpoint(args.model)
    archive = load_samples(args.samples)
    entries, _ = load_dataset(args.data)
    entry = entries[cfg["object_index"]]
    view_ids = [int(v) for v in str(cfg["views"]).split(",")]

    states = archive.flat_states
    if len(states) > cfg["max_samples"]:
        idx = np.linspace(0, len(states) - 1, cfg["max_samples"]).round().astype(int)
        states = states[idx]

    t0 = time.time()
    per_view = []
    variance_means = []
    for v in view_ids:
        truth, camera = entry.views[v]
        renders = [
            _render_view(model, decode_flat_state(model, s, archive.latent_only).vector, camera)
            for s in states
        ]
        per_view.append(float(np.mean([psnr(r, truth) for r in renders])))
        if len(renders) >= 2:
            _, mean_var = per_pixel_variance(renders)
            variance_means.append(mean_var)
    report = EvalReport(
        per_view_psnr=per_view,
        mean_per_pixel_variance=float(np.mean(variance_means)) if variance_means else 0.0,
        accept_rates=[float(a) for a in archive.accept_rates],
        runtime_seconds=time.time() - t0,
    )
    text = report.to_json()
    print(text)
    if args.out:
        run = _prepare_run_dir(args.out, "eval", cfg)
        with open(run / "report.json", "w") as f:
            f.write(text)
            f.write("\n")
    return 0


ABLATE_RENDERER_DEFAULTS = {
    "chains": 8,
    "leapfrog": 10,
    "iterations": 20,
    "image_size": 16,
    "n_samples": 32,
    "seed": 0,
    "steps": "",
}


def cmd_ablate_renderer(args) -> int:
    cfg = _merge_config(ABLATE_RENDERER_DEFAULTS, args)
    run = _prepare_run_dir(args.out, "ablate-renderer", cfg)
    model = load_checkpoint(args.model)
    steps = [float(s) for s in cfg["steps"].split(",")] if cfg["steps"] else default_step_sweep()
    rows = ablate_renderer(
        model,
        step_sizes=steps,
        seed=cfg["seed"],
        n_chains=cfg["chains"],
        n_leapfrog=cfg["leapfrog"],
        n_iterations=cfg["iterations"],
        image_size=cfg["image_size"],
        n_samples=cfg["n_samples"],
    )
    write_acceptance_csv(run / "acceptance.csv", rows)
    for row in rows:
        print(f"{row['renderer']:>10s}  step {row['step_size']:.1e}  "
              f"accept {row['mean_accept']:.3f}")
    return 0


ABLATE_ANNEALING_DEFAULTS = {
    "object_index": 0,
    "view_index": 0,
    "seeds": 3,
    "chains": 8,
    "anneal_steps": 100,
    "leapfrog": 25,
    "base_step": 0.005,
    # None: derived as base_step * final / start, the annealed run's last step
    "fixed_step": None,
}


def cmd_ablate_annealing(args) -> int:
    cfg = _merge_config(ABLATE_ANNEALING_DEFAULTS, args)
    run = _prepare_run_dir(args.out, "ablate-annealing", cfg)
    model = load_checkpoint(args.model)
    obs, _ = _load_observation(args.data, cfg["object_index"], cfg["view_index"])
    report = ablate_annealing(
        model,
        obs,
        seeds=tuple(range(cfg["seeds"])),
        n_chains=cfg["chains"],
        n_steps=cfg["anneal_steps"],
        n_leapfrog=cfg["leapfrog"],
        base_step=cfg["base_step"],
        fixed_step=cfg["fixed_step"],
    )
    write_annealing_csv(run / "annealing_mse.csv", report)
    summary = {
        "annealed_median_spread": report["annealed_median_spread"],
        "fixed_median_spread": report["fixed_median_spread"],
        "annealed_spread": report["annealed_spread"],
        "fixed_spread": report["fixed_spread"],
    }
    with open(run / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="foamnerf", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, defaults, needs=(), types=None):
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="JSON config file")
        for flag in needs:
            sp.add_argument(flag, required=True)
        _add_config_args(sp, defaults, types)
        sp.set_defaults(func=fn)
        return sp

    add("make-data", cmd_make_data, MAKE_DATA_DEFAULTS, needs=["--out"])
    add("train", cmd_train, TRAIN_DEFAULTS, needs=["--data", "--out"])
    add("sample-prior", cmd_sample_prior, SAMPLE_PRIOR_DEFAULTS, needs=["--model", "--out"])
    add("infer-hmc", cmd_infer_hmc, INFER_DEFAULTS, needs=["--model", "--data", "--out"])
    add("infer-latent-only", cmd_infer_latent_only, INFER_DEFAULTS,
        needs=["--model", "--data", "--out"])
    add("infer-vi", cmd_infer_vi, INFER_VI_DEFAULTS, needs=["--model", "--data", "--out"])
    add("render", cmd_render, RENDER_DEFAULTS, needs=["--model", "--samples", "--out"])
    ev = sub.add_parser("eval")
    ev.add_argument("--config", default=None)
    for flag in ("--model", "--samples", "--data"):
        ev.add_argument(flag, required=True)
    ev.add_argument("--out", default=None)
    _add_config_args(ev, EVAL_DEFAULTS)
    ev.set_defaults(func=cmd_eval)
    add("ablate-renderer", cmd_ablate_renderer, ABLATE_RENDERER_DEFAULTS,
        needs=["--model", "--out"])
    add("ablate-annealing", cmd_ablate_annealing, ABLATE_ANNEALING_DEFAULTS,
        needs=["--model", "--data", "--out"])
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except KeyboardInterrupt:
        raise
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
