"""Filter orchestration: predict, update, learn, resample, plus baselines.

A filter instance advances sequentially in the step index; all randomness is
addressed by (seed, purpose, step, particle id), so reruns and permuted or
parallel executions reproduce the same numbers.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bayes import DENSITY_FLOOR, Likelihood, bayes_update, denominator_mc, \
    likelihood_density
from .errors import ConfigurationError, FilterError
from .kde import KernelDensity, save_density
from .learn import TrainConfig, sgd_fit
from .model import StateSpaceModel, TimeGrid, euler_step
from .predict import ParticleCloud, PredictConfig, predict_cloud
from .rngs import substream

Array = np.ndarray


@dataclass
class FilterConfig:
    """Sizes, variant switches, and the seed of one filter run."""

    grid: TimeGrid
    n_particles: int
    n_kernels: int
    predict: PredictConfig
    train: TrainConfig
    seed: int = 0
    negative_mass_warn: float = 0.05

    def __post_init__(self):
        if self.n_particles < 1:
            raise ConfigurationError("n_particles must be >= 1")
        if not 1 <= self.n_kernels <= self.n_particles:
            raise ConfigurationError("need 1 <= n_kernels <= n_particles")


@dataclass
class StepDiagnostics:
    denominator: float = math.nan
    acceptance_rate: float = math.nan
    negative_mass_fraction: float = math.nan
    kd_mass: float = math.nan

    def to_dict(self, k: int) -> dict:
        return {
            "k": k,
            "denominator": self.denominator,
            "acceptance_rate": self.acceptance_rate,
            "negative_mass_fraction": self.negative_mass_fraction,
            "kd_mass": self.kd_mass,
        }


@dataclass
class InitialDensity:
    """Exact initial-law wrapper carried by the filter at step zero."""

    model: StateSpaceModel

    def eval(self, x):
        return self.model.initial_density(np.atleast_2d(np.asarray(x, dtype=float)))


@dataclass
class FilterState:
    k: int
    cloud: ParticleCloud
    density: KernelDensity | InitialDensity
    diagnostics: StepDiagnostics = field(default_factory=StepDiagnostics)


def check_contraction(model: StateSpaceModel, cfg: FilterConfig) -> None:
    """Guard the damped fixed-point recursion of the prediction stage.

    With a known divergence bound the check is hard (raises); otherwise the
    bound is estimated from initial-law samples and violations only warn.
    """
    dt = cfg.grid.max_dt
    if model.divergence_bound is not None:
        if dt * model.divergence_bound >= 0.5:
            raise ConfigurationError(
                f"dt * divergence bound = {dt * model.divergence_bound:.3g} >= 0.5; "
                "shrink the time step")
        return
    probe = model.initial_sampler(256, substream(cfg.seed, "contraction-probe"))
    est = float(np.max(np.abs(model.drift_divergence(probe))))
    if dt * est >= 0.5:
        warnings.warn(
            f"estimated dt * divergence {dt * est:.3g} >= 0.5; the prediction "
            "fixed point may not contract", stacklevel=2)


def initialize(model: StateSpaceModel, cfg: FilterConfig) -> FilterState:
    """Draw the starting cloud from the initial law; density is exact there."""
    check_contraction(model, cfg)
    locations = model.initial_sampler(cfg.n_particles, substream(cfg.seed, "init"))
    locations = np.asarray(locations, dtype=float)
    if locations.shape != (cfg.n_particles, model.dim_state):
        raise FilterError(
            f"initial sampler returned shape {locations.shape}, expected "
            f"{(cfg.n_particles, model.dim_state)}")
    values = np.asarray(model.initial_density(locations), dtype=float)
    cloud = ParticleCloud(k=0, locations=locations, values=np.maximum(values, 0.0),
                          stage="posterior")
    return FilterState(k=0, cloud=cloud, density=InitialDensity(model))


def _metropolis(cloud: ParticleCloud, kd: KernelDensity,
                stream_for: Callable[[int], np.random.Generator]
                ) -> tuple[ParticleCloud, float]:
    old_vals = np.maximum(kd.eval(cloud.locations), DENSITY_FLOOR)
    new_locations = cloud.locations.copy()
    accepted = 0
    for row, pid in enumerate(cloud.ids):
        rng = stream_for(int(pid))
        proposal = kd.sample(rng)
        new_val = kd.eval(proposal[None, :])[0]
        ratio = max(new_val, 0.0) / old_vals[row]
        if rng.random() < min(1.0, ratio):
            new_locations[row] = proposal
            accepted += 1
    values = np.maximum(kd.eval(new_locations), 0.0)
    out = ParticleCloud(k=cloud.k, locations=new_locations, values=values,
                        stage="posterior", ids=cloud.ids.copy())
    return out, accepted / cloud.n_particles


def metropolis_resample(cloud: ParticleCloud, kd: KernelDensity,
                        rng: np.random.Generator | Callable[[int], np.random.Generator]
                        ) -> ParticleCloud:
    """Move each particle to a fresh mixture draw with an accept test.

    The proposal is a draw from the mixture itself and the acceptance
    probability is min(1, new value / old value); the ratio is unchanged by
    any positive rescaling of the mixture weights.  Old values are floored at
    the underflow constant before dividing, a zero-valued proposal keeps the
    incumbent, and every surviving particle gets its value re-evaluated under
    the mixture.

    ``rng`` is either one generator shared by all particles or a callable
    mapping particle id to its own stream (the form the filter step uses).
    """
    if callable(rng):
        out, _ = _metropolis(cloud, kd, rng)
    else:
        out, _ = _metropolis(cloud, kd, lambda pid: rng)
    return out


def step(state: FilterState, model: StateSpaceModel, obs_prev: Array,
         obs_now: Array, cfg: FilterConfig) -> FilterState:
    """Advance the filter by one observation interval.

    Composes prediction, Bayesian update, mixture learning, and resampling;
    the learned mixture is both the carried density and the value source for
    the resampled cloud.
    """
    k = state.k + 1
    if k > cfg.grid.steps:
        raise ConfigurationError(f"step {k} beyond the configured grid ({cfg.grid.steps})")
    try:
        prior = predict_cloud(state.cloud, state.density.eval, model, cfg.grid, k,
                              cfg.predict, cfg.seed)
        lik = Likelihood(obs_prev, obs_now, cfg.grid.dt(k), model.obs_map,
                         model.obs_noise(cfg.grid.time(k)))
        posterior = bayes_update(prior, lik)
        denominator = denominator_mc(prior, lik)
        kd, _report = sgd_fit(posterior, cfg.n_kernels, cfg.train,
                              substream(cfg.seed, "sgd", k))
        cloud, acceptance = _metropolis(
            posterior, kd, lambda pid: substream(cfg.seed, "resample", k, pid))
    except FilterError as err:
        raise type(err)(f"step {k}: {err}") from err

    neg_frac = kd.negative_mass_fraction()
    if neg_frac > cfg.negative_mass_warn:
        warnings.warn(
            f"step {k}: negative kernel mass fraction {neg_frac:.3f} exceeds "
            f"{cfg.negative_mass_warn:.3f}", stacklevel=2)
    diag = StepDiagnostics(denominator=denominator, acceptance_rate=acceptance,
                           negative_mass_fraction=neg_frac, kd_mass=kd.mass())
    return FilterState(k=k, cloud=cloud, density=kd, diagnostics=diag)


def run_filter(model: StateSpaceModel, observations: Array, cfg: FilterConfig,
               on_step: Callable[[FilterState], None] | None = None
               ) -> list[FilterState]:
    """Consume an observation sequence and return the state after every step.

    ``observations`` has one row per grid knot (row 0 is the starting value
    of the cumulative observation; the filter never generates data itself).
    """
    observations = np.atleast_2d(np.asarray(observations, dtype=float))
    if observations.shape[0] != cfg.grid.steps + 1:
        raise ConfigurationError(
            f"need {cfg.grid.steps + 1} observation rows, got {observations.shape[0]}")
    state = initialize(model, cfg)
    states = [state]
    if on_step is not None:
        on_step(state)
    for k in range(1, cfg.grid.steps + 1):
        state = step(state, model, observations[k - 1], observations[k], cfg)
        states.append(state)
        if on_step is not None:
            on_step(state)
    return states


def write_checkpoint(state: FilterState, out_dir) -> None:
    """Per-step artifact: mixture file, particle table, diagnostics record."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{state.k:04d}"
    if isinstance(state.density, KernelDensity):
        save_density(state.density, out / f"kd_step_{tag}.txt")
    with open(out / f"particles_step_{tag}.csv", "w", encoding="ascii") as handle:
        dim = state.cloud.dim
        coords = ",".join(f"x{j}" for j in range(dim))
        handle.write(f"index,{coords},value\n")
        for row in range(state.cloud.n_particles):
            pieces = [str(int(state.cloud.ids[row]))]
            pieces += [repr(float(v)) for v in state.cloud.locations[row]]
            pieces.append(repr(float(state.cloud.values[row])))
            handle.write(",".join(pieces) + "\n")
    with open(out / f"diagnostics_step_{tag}.json", "w", encoding="ascii") as handle:
        json.dump(state.diagnostics.to_dict(state.k), handle, indent=2, sort_keys=True)
        handle.write("\n")


# --- baselines ----------------------------------------------------------------

@dataclass
class KalmanResult:
    means: Array
    covs: Array

    def stds(self) -> Array:
        return np.sqrt(np.einsum("kii->ki", self.covs))


def kalman_update(mean: Array, cov: Array, z: Array, design: Array,
                  noise_cov: Array) -> tuple[Array, Array]:
    """Conjugate Gaussian measurement update."""
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    design = np.atleast_2d(np.asarray(design, dtype=float))
    innovation_cov = design @ cov @ design.T + np.atleast_2d(noise_cov)
    try:
        np.linalg.cholesky(innovation_cov)
    except np.linalg.LinAlgError:
        raise FilterError("innovation covariance lost positive definiteness") from None
    gain = cov @ design.T @ np.linalg.inv(innovation_cov)
    resid = np.asarray(z, dtype=float) - design @ mean
    new_mean = mean + gain @ resid
    eye = np.eye(cov.shape[0])
    new_cov = (eye - gain @ design) @ cov
    return new_mean, 0.5 * (new_cov + new_cov.T)


def kalman_filter(linear, grid: TimeGrid, observations: Array) -> KalmanResult:
    """Exact posterior recursion for the discretized linear-Gaussian chain.

    The chain is the same explicit discretization the particle machinery
    uses: transition matrix I + F dt, process covariance diffusion
    diffusion^T dt, measurement = observation increment with design H dt and
    noise covariance r r^T dt.
    """
    if linear is None:
        raise ConfigurationError("model has no linear-Gaussian coefficients")
    observations = np.atleast_2d(np.asarray(observations, dtype=float))
    d = linear.mean0.size
    means = np.empty((grid.steps + 1, d))
    covs = np.empty((grid.steps + 1, d, d))
    mean, cov = linear.mean0.copy(), linear.cov0.copy()
    means[0], covs[0] = mean, cov
    eye = np.eye(d)
    for k in range(1, grid.steps + 1):
        dt = grid.dt(k)
        trans = eye + linear.drift_matrix * dt
        proc = linear.diffusion @ linear.diffusion.T * dt
        mean = trans @ mean
        cov = trans @ cov @ trans.T + proc
        design = linear.obs_matrix * dt
        noise_cov = linear.obs_noise @ linear.obs_noise.T * dt
        z = observations[k] - observations[k - 1]
        mean, cov = kalman_update(mean, cov, z, design, noise_cov)
        means[k], covs[k] = mean, cov
    return KalmanResult(means=means, covs=covs)


@dataclass
class BootstrapResult:
    particles: Array  # (steps + 1, n, d), pre-resample
    weights: Array    # (steps + 1, n), normalized
    means: Array
    ess: Array


def bootstrap_pf(model: StateSpaceModel, grid: TimeGrid, observations: Array,
                 n_particles: int, seed: int) -> BootstrapResult:
    """Plain propagate / weight / multinomially-resample particle filter."""
    observations = np.atleast_2d(np.asarray(observations, dtype=float))
    n_steps = grid.steps
    d = model.dim_state
    particles = np.empty((n_steps + 1, n_particles, d))
    weights = np.full((n_steps + 1, n_particles), 1.0 / n_particles)
    means = np.empty((n_steps + 1, d))
    ess = np.empty(n_steps + 1)
    current = np.asarray(model.initial_sampler(n_particles, substream(seed, "pf-init")),
                         dtype=float)
    particles[0] = current
    means[0] = current.mean(axis=0)
    ess[0] = n_particles
    for k in range(1, n_steps + 1):
        dt = grid.dt(k)
        noise = math.sqrt(dt) * substream(seed, "pf-noise", k).standard_normal(
            (n_particles, model.dim_noise))
        current = euler_step(model, grid.time(k - 1), current, dt, noise)
        lik = Likelihood(observations[k - 1], observations[k], dt, model.obs_map,
                         model.obs_noise(grid.time(k)))
        w = np.maximum(likelihood_density(lik, current), DENSITY_FLOOR)
        w = w / w.sum()
        particles[k] = current
        weights[k] = w
        means[k] = (w[:, None] * current).sum(axis=0)
        ess[k] = 1.0 / float((w * w).sum())
        if ess[k] < 0.05 * n_particles:
            warnings.warn(
                f"bootstrap filter weight collapse at step {k}: effective sample "
                f"size {ess[k]:.1f} of {n_particles}", stacklevel=2)
        u = substream(seed, "pf-resample", k).random(n_particles)
        idx = np.minimum(np.searchsorted(np.cumsum(w), u, side="right"),
                         n_particles - 1)
        current = current[idx]
    return BootstrapResult(particles=particles, weights=weights, means=means, ess=ess)
