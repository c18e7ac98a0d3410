"""Desk-scale sampler comparisons: renderer choice and annealing.

Both harnesses follow the same shape: condition on one rendered view of a
prior draw, run matched HMC variants, and table a scalar per variant.  The
renderer comparison measures last-iteration Metropolis acceptance; the
annealing comparison measures across-chain spread of conditioned-view MSE.
"""

from __future__ import annotations

import csv

import numpy as np

from .data import sample_cameras
from .genmodel import Observation, decode_flat_state, sample_prior
from .inference import (
    AnnealingSchedule,
    quadrature_quadratic,
    run_annealed_chains,
)
from .render import (
    field_fn_from_weights,
    generate_rays,
    render_rays_foam,
    render_rays_quadrature,
)

__all__ = [
    "default_step_sweep",
    "ablate_renderer",
    "write_acceptance_csv",
    "ablate_annealing",
    "write_annealing_csv",
    "state_view_mse",
]

ACCEPTANCE_FIELDS = ["renderer", "step_size", "mean_accept", "min_accept", "max_accept"]
ANNEALING_FIELDS = ["variant", "seed", "chain", "mse"]


def default_step_sweep() -> np.ndarray:
    """Step sizes 1e-5 .. 1e-1, log-spaced, 9 points."""
    return np.logspace(-5.0, -1.0, 9)


def _front_observation(model, weights, renderer: str, image_size: int, view_seed: int,
                       n_samples: int):
    """Render one front view of the given weights under `renderer`."""
    cams, _ = sample_cameras(1, 2.7, np.pi / 3.0, image_size, image_size,
                             mode="equally-spaced")
    bundle = generate_rays(cams[0])
    fn = field_fn_from_weights(weights.vector, weights.config)
    if renderer == "foam":
        img = render_rays_foam(fn, bundle.origins, bundle.directions, model.scene)
    elif renderer == "quadrature":
        img = render_rays_quadrature(fn, bundle.origins, bundle.directions, model.scene,
                                     n_samples, view_seed)
    else:
        raise ValueError(f"unknown renderer {renderer!r}")
    return Observation(bundle.origins, bundle.directions, np.clip(img, 0.0, 1.0))


def ablate_renderer(
    model,
    step_sizes=None,
    seed: int = 0,
    n_chains: int = 8,
    n_leapfrog: int = 10,
    n_iterations: int = 20,
    image_size: int = 16,
    n_samples: int = 32,
    noise_scale: float | None = None,
) -> list[dict]:
    """Acceptance-vs-step-size table for the exact and quadrature renderers.

    Per renderer and step size: draw one prior sample, render one view under
    that renderer, initialize all chains at the drawn point, run fixed-
    temperature HMC at the model's noise scale, and record the mean
    Metropolis acceptance probability across chains at the last iteration.
    The quadrature arm redraws its stratified jitter every proposal, so its
    target energy is not conserved; the foam arm's target is deterministic.
    """
    if step_sizes is None:
        step_sizes = default_step_sweep()
    s = model.noise.observation_scale if noise_scale is None else noise_scale
    state, weights = sample_prior(seed, model)
    x0 = state.flatten()

    rows = []
    for renderer in ("foam", "quadrature"):
        obs = _front_observation(model, weights, renderer, image_size, seed, n_samples)
        for step in step_sizes:
            sched = AnnealingSchedule(
                start_scale=s, final_scale=s, n_steps=n_iterations, base_step=float(step)
            )
            factory = None
            if renderer == "quadrature":
                def factory(t, _obs=obs, _base=seed * 100_003):
                    return quadrature_quadratic(model, _obs, n_samples, _base + t)
            res = run_annealed_chains(
                model, obs, sched,
                n_chains=n_chains, n_leapfrog=n_leapfrog, keep_last=1,
                seed=seed, init=x0, quadratic_factory=factory,
            )
            probs = res.final_accept_probs
            rows.append(
                {
                    "renderer": renderer,
                    "step_size": float(step),
                    "mean_accept": float(probs.mean()),
                    "min_accept": float(probs.min()),
                    "max_accept": float(probs.max()),
                }
            )
    return rows


def write_acceptance_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ACCEPTANCE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def state_view_mse(model, x, obs: Observation, latent_only: bool = False) -> float:
    """Mean squared error of the decoded state's render against obs pixels."""
    weights = decode_flat_state(model, x, latent_only)
    fn = field_fn_from_weights(weights.vector, weights.config)
    rendered = render_rays_foam(fn, obs.origins, obs.directions, model.scene)
    return float(np.mean((np.asarray(rendered) - obs.pixels) ** 2))


def ablate_annealing(
    model,
    obs: Observation,
    seeds=(0, 1, 2),
    n_chains: int = 8,
    n_steps: int = 100,
    n_leapfrog: int = 25,
    base_step: float = 0.005,
    fixed_step: float | None = None,
    final_scale: float | None = None,
) -> dict:
    """Annealed vs fixed-temperature HMC on one conditioned view.

    Both variants share per-seed initialization and momentum streams and end
    at the same temperature.  The fixed variant runs at that temperature
    throughout; by default its step size is the one the step-proportional-
    to-noise rule prescribes there (base_step * final / start), i.e. the
    step the annealed run finishes with, so the schedule is the only thing
    ablated.  Reports per-chain conditioned-view MSE and the across-chain
    standard deviation per seed.
    """
    sT = model.noise.observation_scale if final_scale is None else final_scale
    annealed_sched = AnnealingSchedule(
        start_scale=5.0, final_scale=sT, n_steps=n_steps, base_step=base_step
    )
    if fixed_step is None:
        fixed_step = base_step * sT / annealed_sched.start_scale
    fixed_sched = AnnealingSchedule(
        start_scale=sT, final_scale=sT, n_steps=n_steps, base_step=fixed_step
    )

    rows = []
    spreads = {"annealed": [], "fixed": []}
    for seed in seeds:
        for variant, sched in (("annealed", annealed_sched), ("fixed", fixed_sched)):
            res = run_annealed_chains(
                model, obs, sched, n_chains=n_chains, n_leapfrog=n_leapfrog,
                keep_last=1, seed=seed,
            )
            mses = [state_view_mse(model, res.final_positions[c], obs)
                    for c in range(n_chains)]
            spreads[variant].append(float(np.std(mses)))
            rows.extend(
                {"variant": variant, "seed": seed, "chain": c, "mse": m}
                for c, m in enumerate(mses)
            )
    return {
        "rows": rows,
        "annealed_spread": spreads["annealed"],
        "fixed_spread": spreads["fixed"],
        "annealed_median_spread": float(np.median(spreads["annealed"])),
        "fixed_median_spread": float(np.median(spreads["fixed"])),
    }


def write_annealing_csv(path, report) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ANNEALING_FIELDS)
        writer.writeheader()
        writer.writerows(report["rows"])
