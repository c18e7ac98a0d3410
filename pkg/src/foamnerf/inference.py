"""Posterior sampling over the latent state by annealed HMC, plus a VI baseline.

The posterior over (z_tilde, delta) conditioned on observed pixels is sharply
concentrated near the decoder manifold and multimodal for ambiguous views, so
plain HMC started from the prior mixes poorly.  The sampler instead targets a
sequence of tempered posteriors: the observation noise scale starts high
(nearly prior-like) and decays log-linearly down to the model's true scale,
with the leapfrog step size shrinking in proportion.

The exact lattice renderer is what makes this work: the likelihood gradient
is deterministic, so leapfrog nearly conserves energy and acceptance stays
high even at the coldest temperature.  A stochastic-quadrature likelihood
breaks that conservation (see the renderer ablation).

Chains run in lockstep as one batched tape evaluation; the residual
quadratic Q(x) = -1/2 sum (render - pixel)^2 and its gradient are cached at
the current position, so retempering between iterations is free and each HMC
iteration costs exactly `n_leapfrog` fresh gradient evaluations.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .field import field_apply_encoded
from .genmodel import (
    LOG_2PI,
    Observation,
    ObservationGeometry,
    bucket_geometry,
    flow_forward,
    hypernet_forward,
    log_standard_normal,
    perturb_weights,
)
from .render import composite, quadrature_samples
from .training import Adam

__all__ = [
    "AnnealingSchedule",
    "ScheduleRangeError",
    "InferenceFailure",
    "VIDivergence",
    "schedule_noise",
    "schedule_step_size",
    "leapfrog",
    "ChainState",
    "hmc_step",
    "BatchedQuadratic",
    "foam_quadratic",
    "quadrature_quadratic",
    "HMCResult",
    "run_annealed_chains",
    "run_latent_only_chains",
    "VIParams",
    "fit_vi",
    "sample_vi",
    "SampleArchive",
    "archive_from_result",
    "archive_from_vi",
    "save_archive",
    "save_samples",
    "load_samples",
    "write_diagnostics",
]

ARCHIVE_VERSION = 1

DIAGNOSTIC_FIELDS = [
    "chain",
    "t",
    "noise_scale",
    "step_size",
    "accept_prob",
    "accept_rate",
    "log_joint",
]


class ScheduleRangeError(ValueError):
    """Requested schedule index lies outside [0, n_steps]."""


class InferenceFailure(RuntimeError):
    """Sampling could not produce any finite proposal; carries diagnostics."""

    def __init__(self, message: str, diagnostics: list[dict]):
        super().__init__(message)
        self.diagnostics = diagnostics


class VIDivergence(RuntimeError):
    """The VI objective went non-finite; `step` is the offending iteration."""

    def __init__(self, step: int):
        super().__init__(f"non-finite variational objective at step {step}")
        self.step = step


@dataclass(frozen=True)
class AnnealingSchedule:
    """Log-linear noise-scale decay with a proportional step size.

    `start_scale` is the anchor at t=0 and `final_scale` the target at
    t=n_steps; sampling iterations use t = 1..n_steps, so the last iteration
    targets the model's true posterior exactly.  Setting start_scale equal to
    final_scale degenerates to fixed-temperature HMC.
    """

    start_scale: float = 5.0
    final_scale: float = 0.1
    n_steps: int = 100
    base_step: float = 0.005

    def __post_init__(self):
        if not self.start_scale >= self.final_scale > 0.0:
            raise ValueError("need start_scale >= final_scale > 0")
        if self.n_steps < 1:
            raise ValueError("schedule needs at least one step")
        if self.base_step <= 0.0:
            raise ValueError("base step size must be positive")

    def to_json(self) -> dict:
        return {
            "start_scale": self.start_scale,
            "final_scale": self.final_scale,
            "n_steps": self.n_steps,
            "base_step": self.base_step,
        }

    @staticmethod
    def from_json(d: dict) -> "AnnealingSchedule":
        return AnnealingSchedule(**d)


def schedule_noise(schedule: AnnealingSchedule, t: int) -> float:
    """Noise scale at step t: geometric interpolation, exact at both ends."""
    if not 0 <= t <= schedule.n_steps:
        raise ScheduleRangeError(f"t={t} outside [0, {schedule.n_steps}]")
    if t == 0:
        return schedule.start_scale
    if t == schedule.n_steps:
        return schedule.final_scale
    frac = t / schedule.n_steps
    return float(
        np.exp((1.0 - frac) * np.log(schedule.start_scale) + frac * np.log(schedule.final_scale))
    )


def schedule_step_size(schedule: AnnealingSchedule, t: int) -> float:
    """Leapfrog step at step t, scaled down with the noise scale."""
    return schedule.base_step * schedule_noise(schedule, t) / schedule.start_scale


# reference single-state integrator and transition (the batched runner below
# reproduces these exactly, chain by chain, for the annealed posterior)


def leapfrog(position, momentum, step_size, n_steps, grad_log_density):
    """Leapfrog integration of Hamiltonian dynamics with identity mass.

    Returns (position, momentum, diverged).  A non-finite gradient or state
    flags divergence and stops integrating; callers treat that as a
    rejection.  A zero gradient degenerates to straight-line drift.
    """
    x = np.array(position, dtype=np.float64)
    p = np.array(momentum, dtype=np.float64)
    g = np.asarray(grad_log_density(x), dtype=np.float64)
    if not np.all(np.isfinite(g)):
        return x, p, True
    p = p + 0.5 * step_size * g
    for i in range(n_steps):
        x = x + step_size * p
        g = np.asarray(grad_log_density(x), dtype=np.float64)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(x))):
            return x, p, True
        p = p + (step_size if i < n_steps - 1 else 0.5 * step_size) * g
    return x, p, False


@dataclass
class ChainState:
    """One HMC chain: current position plus its private random stream."""

    position: np.ndarray
    rng: np.random.Generator
    step_size: float
    iteration: int = 0
    accept_count: int = 0
    divergence_count: int = 0
    last_accept_prob: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(-1)

    @property
    def accept_rate(self) -> float:
        return self.accept_count / max(1, self.iteration)


def hmc_step(chain: ChainState, value_and_grad, n_leapfrog: int) -> ChainState:
    """One Metropolis-adjusted leapfrog transition; advances chain in place.

    value_and_grad(x) returns (log density, gradient).  Momentum is fresh
    standard normal each call; a divergent trajectory is a forced rejection.
    """
    x0 = chain.position
    logp0, g0 = value_and_grad(x0)
    p0 = chain.rng.standard_normal(x0.shape[0])
    h0 = 0.5 * float(p0 @ p0) - float(logp0)

    step = chain.step_size
    x, p = x0.copy(), p0.copy()
    diverged = not np.all(np.isfinite(g0))
    if not diverged:
        p = p + 0.5 * step * np.asarray(g0, dtype=np.float64)
        logp = logp0
        for i in range(n_leapfrog):
            x = x + step * p
            logp, g = value_and_grad(x)
            if not (np.all(np.isfinite(g)) and np.all(np.isfinite(x)) and np.isfinite(logp)):
                diverged = True
                break
            p = p + (step if i < n_leapfrog - 1 else 0.5 * step) * np.asarray(g, dtype=np.float64)

    if diverged:
        accept_prob = 0.0
    else:
        dh = (0.5 * float(p @ p) - float(logp)) - h0
        accept_prob = float(np.exp(min(0.0, -dh)))

    u = chain.rng.uniform()
    chain.iteration += 1
    chain.last_accept_prob = accept_prob
    if u < accept_prob:
        chain.position = x
        chain.accept_count += 1
    elif diverged:
        chain.divergence_count += 1
    return chain


# batched likelihood quadratic shared by all chains


class BatchedQuadratic:
    """Residual quadratic Q(x) = -1/2 ||render(x) - pixels||^2 over chains.

    Geometry (sample points, positional encodings) is fixed once, so every
    evaluation is a single tape pass over all chains; chains are independent,
    so the gradient of sum_c Q_c recovers each chain's own gradient row.
    """

    def __init__(self, model, geometries, latent_only: bool = False):
        self.model = model
        self.geometries = list(geometries)
        self.latent_only = latent_only
        k = model.latent_dim
        self.state_dim = k if latent_only else k + model.weight_dim
        self.n_residual_terms = 3 * sum(g.ray_count for g in self.geometries)
        self.count = 0  # counted gradient evaluations (leapfrog only)
        order = model.field_config.encoding_order
        for g in self.geometries:
            if g.points.shape[0]:
                g.encodings(order)

    def graph(self, x):
        """Q per chain for x (n_chains, state_dim); x may be a Var or array."""
        model = self.model
        k = model.latent_dim
        shape = x.shape if isinstance(x, ad.Var) else np.shape(x)
        if len(shape) != 2 or shape[1] != self.state_dim:
            raise ValueError(f"expected (chains, {self.state_dim}) states, got {shape}")
        z_tilde = ad.slice_last(x, 0, k)
        z, _ = flow_forward(z_tilde, model.flow_params, model.flow_config)
        w = hypernet_forward(z, model.hypernet_params, model.hypernet_config)
        if not self.latent_only:
            delta = ad.slice_last(x, k, self.state_dim)
            w = perturb_weights(w, delta, model.noise.perturbation_variance)

        config = model.field_config
        const = 0.0
        quad = None
        for geom in self.geometries:
            const += geom.miss_quad
            a, h = geom.points.shape[:2]
            if a == 0:
                continue
            enc_x, enc_v = geom.encodings(config.encoding_order)

            def fn(_pts, _dirs, enc_x=enc_x, enc_v=enc_v, a=a, h=h):
                sigma, color = field_apply_encoded(w, config, enc_x, enc_v)
                sigma = ad.reshape(sigma, (shape[0], a, h))
                color = ad.reshape(color, (shape[0], a, h, 3))
                return sigma, color

            rgb = composite(
                fn, geom.points, geom.view_dirs, geom.optical_factor, geom.background
            )
            resid = ad.sub(rgb, geom.pixels)
            term = ad.mul(-0.5, ad.sum(ad.mul(resid, resid), axis=(-2, -1)))
            quad = term if quad is None else ad.add(quad, term)
        if quad is None:
            return np.full((shape[0],), const, dtype=np.float64)
        return ad.add(quad, const) if const != 0.0 else quad

    def values_and_grads(self, x, counted: bool = True):
        """(Q (n_chains,), dQ/dx (n_chains, state_dim)) at constant x.

        Finiteness checking is off: a chain that wanders into overflow gets
        NaN rows here and is rejected by the caller; other chains are
        unaffected because every op is chain-blocked.
        """
        if counted:
            self.count += 1
        x = np.asarray(x, dtype=np.float64)
        tape = ad.Tape(check_finite=False)
        leaf = ad.Var(x, tape)
        with np.errstate(all="ignore"):
            q = self.graph(leaf)
            if not isinstance(q, ad.Var):
                return np.asarray(q, dtype=np.float64), np.zeros_like(x)
            ad.backward(ad.sum(q))
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(x)
        values = q.value.astype(np.float64, copy=True)
        tape.nodes.clear()  # break tape <-> Var cycles so the graph frees now
        return values, np.asarray(grad, dtype=np.float64)


def foam_quadratic(model, obs: Observation, latent_only: bool = False, n_buckets: int = 3):
    """Likelihood quadratic under the exact lattice renderer."""
    if len(obs) == 0:
        return BatchedQuadratic(model, [], latent_only)
    geom = ObservationGeometry.build(obs, model.scene)
    return BatchedQuadratic(model, bucket_geometry(geom, n_buckets), latent_only)


def quadrature_quadratic(
    model, obs: Observation, n_samples: int, seed: int, latent_only: bool = False
):
    """Likelihood quadratic under stochastic stratified quadrature.

    The jitter is drawn once from `seed`; rebuilding with a fresh seed per
    proposal round is what makes the quadrature target non-conservative.
    """
    if len(obs) == 0:
        return BatchedQuadratic(model, [], latent_only)
    t, delta, hit = quadrature_samples(obs.origins, obs.directions, model.scene, n_samples, seed)
    points = obs.origins[:, None, :] + t[..., None] * obs.directions[:, None, :]
    view_dirs = np.broadcast_to(obs.directions[:, None, :], points.shape)
    bg = model.scene.background
    miss_resid = bg - obs.pixels[~hit]
    geom = ObservationGeometry(
        points=np.ascontiguousarray(points[hit]),
        view_dirs=np.ascontiguousarray(view_dirs[hit]),
        optical_factor=np.ascontiguousarray(delta[hit]),
        background=bg,
        pixels=np.ascontiguousarray(obs.pixels[hit]),
        miss_quad=float(-0.5 * np.sum(miss_resid * miss_resid)),
        ray_count=len(obs),
    )
    return BatchedQuadratic(model, [geom], latent_only)


# annealed multi-chain runner


@dataclass
class HMCResult:
    """Retained samples plus per-chain bookkeeping from one annealed run."""

    samples: np.ndarray  # (n_chains, keep_last, state_dim), consecutive final iterates
    final_positions: np.ndarray  # (n_chains, state_dim)
    accept_rates: np.ndarray  # (n_chains,) overall accept fraction
    final_accept_probs: np.ndarray  # (n_chains,) Metropolis prob at the last iteration
    divergences: np.ndarray  # (n_chains,) divergent-proposal counts
    diagnostics: list  # per (chain, iteration) dict rows
    gradient_evals_per_chain: int
    schedule: AnnealingSchedule
    latent_dim: int
    weight_dim: int  # 0 when latent-only
    latent_only: bool
    seed: int

    @property
    def n_chains(self) -> int:
        return self.samples.shape[0]

    @property
    def keep_last(self) -> int:
        return self.samples.shape[1]

    @property
    def flat_samples(self) -> np.ndarray:
        """(n_chains * keep_last, state_dim); row-major by chain."""
        return self.samples.reshape(-1, self.samples.shape[-1])


def _leapfrog_batched(x, p, g_quad, step, n_steps, quad, inv_var):
    """All-chain leapfrog against U = 1/2 |x|^2 - Q(x)/s^2 (constants dropped).

    g_quad is the cached dQ/dx at x, so the integration performs exactly
    n_steps fresh quadratic evaluations.  Returns (x, p, Q, dQ/dx).
    """
    with np.errstate(all="ignore"):
        p = p + (0.5 * step) * (g_quad * inv_var - x)
        q = g = None
        for i in range(n_steps):
            x = x + step * p
            q, g = quad.values_and_grads(x)
            scale = step if i < n_steps - 1 else 0.5 * step
            p = p + scale * (g * inv_var - x)
    return x, p, q, g


def run_annealed_chains(
    model,
    obs: Observation,
    schedule: AnnealingSchedule | None = None,
    n_chains: int = 8,
    n_leapfrog: int = 100,
    keep_last: int = 16,
    seed: int = 0,
    latent_only: bool = False,
    init=None,
    quadratic_factory=None,
) -> HMCResult:
    """Run parallel HMC chains against the annealed posterior.

    Iteration t = 1..n_steps targets noise scale schedule_noise(t), ending
    exactly on the model's posterior.  Chains initialize from the standard
    normal prior on the state (or from `init`: one shared point or one row
    per chain) and consume independent spawned random streams, so matched
    seeds give matched initializations and momenta across variant runs.

    `quadratic_factory(t)` may swap the likelihood quadratic between
    iterations (the quadrature-reseeding ablation); the cached energy of the
    current position is deliberately carried over unrevised, which is what
    exposes a non-conservative target.  The position states after each of the
    final `keep_last` iterations are returned per chain.

    Raises InferenceFailure if the initial state has non-finite energy or if
    every proposal of every chain diverged.
    """
    if schedule is None:
        schedule = AnnealingSchedule()
    if not 1 <= keep_last <= schedule.n_steps:
        raise ValueError("keep_last must lie in [1, schedule.n_steps]")

    if quadratic_factory is None:
        base = foam_quadratic(model, obs, latent_only)
        quadratic_factory = lambda t: base  # noqa: E731 - trivial constant factory
    quad = quadratic_factory(0)
    dim = quad.state_dim
    n_obs_terms = quad.n_residual_terms

    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_chains)]
    if init is None:
        x = np.stack([r.standard_normal(dim) for r in rngs])
    else:
        init = np.asarray(init, dtype=np.float64)
        x = np.broadcast_to(init.reshape(-1, dim)[0], (n_chains, dim)).copy() \
            if init.ndim == 1 else init.reshape(n_chains, dim).copy()

    q_cur, g_cur = quad.values_and_grads(x, counted=False)
    if not np.all(np.isfinite(q_cur)):
        raise InferenceFailure("non-finite energy at initialization", [])

    accept_counts = np.zeros(n_chains, dtype=np.int64)
    div_counts = np.zeros(n_chains, dtype=np.int64)
    ever_finite = np.zeros(n_chains, dtype=bool)
    last_probs = np.zeros(n_chains)
    diagnostics: list[dict] = []
    kept: list[np.ndarray] = []
    evals = 0

    for t in range(1, schedule.n_steps + 1):
        nxt = quadratic_factory(t)
        if nxt is not quad:
            # fresh quadratic (reseeded); cached energy carries over unrevised
            quad = nxt
        s = schedule_noise(schedule, t)
        step = schedule_step_size(schedule, t)
        inv_var = 1.0 / (s * s)

        p0 = np.stack([r.standard_normal(dim) for r in rngs])
        u = np.array([r.uniform() for r in rngs])
        h0 = 0.5 * np.sum(x * x, axis=1) - q_cur * inv_var + 0.5 * np.sum(p0 * p0, axis=1)

        x1, p1, q1, g1 = _leapfrog_batched(x, p0, g_cur, step, n_leapfrog, quad, inv_var)
        evals += n_leapfrog

        with np.errstate(all="ignore"):
            finite = (
                np.isfinite(q1)
                & np.all(np.isfinite(x1), axis=1)
                & np.all(np.isfinite(p1), axis=1)
            )
            h1 = 0.5 * np.sum(x1 * x1, axis=1) - q1 * inv_var + 0.5 * np.sum(p1 * p1, axis=1)
            dh = np.where(finite, h1 - h0, np.inf)
            probs = np.exp(np.minimum(0.0, -dh))

        accept = u < probs
        x = np.where(accept[:, None], x1, x)
        q_cur = np.where(accept, q1, q_cur)
        g_cur = np.where(accept[:, None], g1, g_cur)
        accept_counts += accept
        div_counts += ~finite
        ever_finite |= finite
        last_probs = probs

        log_joint = (
            -0.5 * np.sum(x * x, axis=1)
            - 0.5 * dim * LOG_2PI
            + q_cur * inv_var
            - n_obs_terms * (np.log(s) + 0.5 * LOG_2PI)
        )
        for c in range(n_chains):
            diagnostics.append(
                {
                    "chain": c,
                    "t": t,
                    "noise_scale": s,
                    "step_size": step,
                    "accept_prob": float(probs[c]),
                    "accept_rate": float(accept_counts[c] / t),
                    "log_joint": float(log_joint[c]),
                }
            )
        if t > schedule.n_steps - keep_last:
            kept.append(x.copy())

    if not ever_finite.any():
        raise InferenceFailure("every proposal of every chain diverged", diagnostics)

    return HMCResult(
        samples=np.stack(kept, axis=1),
        final_positions=x.copy(),
        accept_rates=accept_counts / schedule.n_steps,
        final_accept_probs=last_probs,
        divergences=div_counts,
        diagnostics=diagnostics,
        gradient_evals_per_chain=evals,
        schedule=schedule,
        latent_dim=model.latent_dim,
        weight_dim=0 if latent_only else model.weight_dim,
        latent_only=latent_only,
        seed=seed,
    )


def run_latent_only_chains(model, obs, schedule=None, **kwargs) -> HMCResult:
    """Annealed HMC over z_tilde alone with the weight perturbation frozen at 0."""
    return run_annealed_chains(model, obs, schedule, latent_only=True, **kwargs)


# mean-field variational baseline


@dataclass
class VIParams:
    """Diagonal Gaussian over the flat state."""

    mu: np.ndarray
    log_sigma: np.ndarray
    latent_only: bool = False

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64).reshape(-1)
        if self.mu.shape != self.log_sigma.shape:
            raise ValueError("mu and log_sigma must have matching shapes")

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def fit_vi(
    model,
    obs: Observation,
    n_steps: int = 1500,
    learning_rate: float = 0.02,
    seed: int = 0,
    latent_only: bool = False,
    sticking_the_landing: bool = True,
    noise_scale: float | None = None,
    init: VIParams | None = None,
) -> VIParams:
    """Fit a mean-field Gaussian to the (untempered) posterior by ascent.

    One reparameterized sample per step; with sticking_the_landing the
    entropy term is evaluated at a frozen copy of the variational parameters,
    dropping the score contribution so the gradient estimator has zero
    variance when q matches the target exactly.  Deterministic for a given
    seed.  n_steps=0 returns the initialization (standard normal by default).
    """
    quad = foam_quadratic(model, obs, latent_only)
    dim = quad.state_dim
    s = model.noise.observation_scale if noise_scale is None else noise_scale
    inv_var = 1.0 / (s * s)
    lik_const = -quad.n_residual_terms * (np.log(s) + 0.5 * LOG_2PI)

    rng = np.random.default_rng(seed)
    if init is None:
        omega = np.zeros(2 * dim)
    else:
        if init.dim != dim:
            raise ValueError(f"init has dim {init.dim}, expected {dim}")
        omega = np.concatenate([init.mu, init.log_sigma])
    adam = Adam(omega.shape[0], learning_rate)

    for step_i in range(n_steps):
        eps = rng.standard_normal(dim)
        mu0 = omega[:dim].copy()
        sigma0 = np.exp(omega[dim:])

        def objective(leaf, eps=eps, mu0=mu0, sigma0=sigma0):
            mu = ad.slice_last(leaf, 0, dim)
            log_sigma = ad.slice_last(leaf, dim, 2 * dim)
            sigma = ad.exp(log_sigma)
            xs = ad.add(mu, ad.mul(sigma, eps))
            logp = log_standard_normal(xs)
            q = quad.graph(ad.reshape(xs, (1, dim)))
            logp = ad.add(logp, ad.add(ad.mul(inv_var, ad.sum(q)), lik_const))
            if sticking_the_landing:
                zed = ad.mul(ad.sub(xs, mu0), 1.0 / sigma0)
                log_q = ad.sub(
                    ad.mul(-0.5, ad.sum(ad.mul(zed, zed))),
                    float(np.sum(np.log(sigma0)) + 0.5 * dim * LOG_2PI),
                )
            else:
                zed = ad.div(ad.sub(xs, mu), sigma)
                log_q = ad.sub(
                    ad.mul(-0.5, ad.sum(ad.mul(zed, zed))),
                    ad.add(ad.sum(log_sigma), 0.5 * dim * LOG_2PI),
                )
            return ad.sub(logp, log_q)

        try:
            value, grad = ad.value_and_gradient(objective, omega)
        except ad.NonFiniteValueError:
            raise VIDivergence(step_i) from None
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise VIDivergence(step_i)
        omega = omega + adam.step(grad)

    return VIParams(omega[:dim].copy(), omega[dim:].copy(), latent_only)


def sample_vi(params: VIParams, n_samples: int, seed: int = 0) -> np.ndarray:
    """Independent draws (n_samples, dim) from the fitted Gaussian."""
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_samples, params.dim))
    return params.mu + params.sigma * eps


# sample archives and diagnostics files


@dataclass
class SampleArchive:
    """On-disk snapshot of retained posterior samples.

    HMC archives carry their schedule and acceptance bookkeeping; VI
    archives store independent draws as one pseudo-chain with no schedule.
    """

    states: np.ndarray  # (n_chains, keep_last, state_dim)
    latent_dim: int
    weight_dim: int
    latent_only: bool
    seed: int
    schedule: AnnealingSchedule | None
    accept_rates: np.ndarray
    gradient_evals_per_chain: int
    method: str = "hmc"

    @property
    def flat_states(self) -> np.ndarray:
        return self.states.reshape(-1, self.states.shape[-1])


def archive_from_result(result: HMCResult) -> SampleArchive:
    return SampleArchive(
        states=np.asarray(result.samples, dtype=np.float64),
        latent_dim=result.latent_dim,
        weight_dim=result.weight_dim,
        latent_only=result.latent_only,
        seed=result.seed,
        schedule=result.schedule,
        accept_rates=np.asarray(result.accept_rates, dtype=np.float64),
        gradient_evals_per_chain=result.gradient_evals_per_chain,
        method="hmc",
    )


def archive_from_vi(params: VIParams, model, n_samples: int, seed: int) -> SampleArchive:
    """Independent VI draws packaged as a single pseudo-chain."""
    draws = sample_vi(params, n_samples, seed)
    weight_dim = 0 if params.latent_only else model.weight_dim
    return SampleArchive(
        states=draws[None, :, :],
        latent_dim=model.latent_dim,
        weight_dim=weight_dim,
        latent_only=params.latent_only,
        seed=seed,
        schedule=None,
        accept_rates=np.zeros(0),
        gradient_evals_per_chain=0,
        method="vi",
    )


def save_archive(path, archive: SampleArchive) -> None:
    states = np.asarray(archive.states, dtype=np.float64)
    header = {
        "version": ARCHIVE_VERSION,
        "n_chains": int(states.shape[0]),
        "keep_last": int(states.shape[1]),
        "state_dim": int(states.shape[2]),
        "latent_dim": archive.latent_dim,
        "weight_dim": archive.weight_dim,
        "latent_only": archive.latent_only,
        "seed": archive.seed,
        "schedule": None if archive.schedule is None else archive.schedule.to_json(),
        "accept_rates": [float(a) for a in archive.accept_rates],
        "gradient_evals_per_chain": archive.gradient_evals_per_chain,
        "method": archive.method,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(np.array(len(blob), dtype="<u4").tobytes())
        f.write(blob)
        f.write(states.astype("<f4").tobytes())


def save_samples(path, result: HMCResult) -> None:
    save_archive(path, archive_from_result(result))


def load_samples(path) -> SampleArchive:
    with open(path, "rb") as f:
        data = f.read()
    n = int(np.frombuffer(data, dtype="<u4", count=1)[0])
    header = json.loads(data[4 : 4 + n].decode("utf-8"))
    if header["version"] != ARCHIVE_VERSION:
        raise ValueError(f"unsupported sample archive version {header['version']}")
    shape = (header["n_chains"], header["keep_last"], header["state_dim"])
    count = shape[0] * shape[1] * shape[2]
    states = np.frombuffer(data, dtype="<f4", count=count, offset=4 + n)
    sched = header["schedule"]
    return SampleArchive(
        states=states.astype(np.float64).reshape(shape),
        latent_dim=header["latent_dim"],
        weight_dim=header["weight_dim"],
        latent_only=header["latent_only"],
        seed=header["seed"],
        schedule=None if sched is None else AnnealingSchedule.from_json(sched),
        accept_rates=np.array(header["accept_rates"]),
        gradient_evals_per_chain=header["gradient_evals_per_chain"],
        method=header.get("method", "hmc"),
    )


def write_diagnostics(path, rows) -> None:
    """Per-chain, per-iteration CSV: noise scale, step size, acceptance, log joint."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=DIAGNOSTIC_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
