"""Dense-grid quadrature references used as ground truth in tests and studies.

Everything here is restricted to scalar state, where trapezoid quadrature on
a wide grid resolves Gaussian integrands to near machine precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bayes import Likelihood, likelihood_density
from .errors import ConfigurationError
from .model import StateSpaceModel, TimeGrid
from .rngs import substream

Array = np.ndarray


def normal_pdf(x: Array, mean: float, var: float) -> Array:
    z = (np.asarray(x, dtype=float) - mean)
    return np.exp(-0.5 * z * z / var) / math.sqrt(2.0 * math.pi * var)


def _require_scalar_state(model: StateSpaceModel, what: str) -> None:
    if model.dim_state != 1:
        raise ConfigurationError(f"{what} quadrature oracle needs a 1-d state")


def _backward_law(model: StateSpaceModel, t_k: float, x: float,
                  dt: float) -> tuple[float, float]:
    """Mean and variance of a reverse-time sample drawn from x."""
    point = np.array([x])
    mean = float((point - model.drift(point) * dt)[0])
    sig = float(np.asarray(model.diffusion(t_k))[0, 0])
    return mean, sig * sig * dt


def gaussian_expectation(f: Callable[[Array], Array], mean: float, var: float,
                         n_nodes: int = 4097, span: float = 8.0) -> float:
    """Trapezoid value of E[f(Z)] for Z ~ N(mean, var) on mean +- span std."""
    std = math.sqrt(var)
    xs = np.linspace(mean - span * std, mean + span * std, n_nodes)
    return float(np.trapezoid(np.asarray(f(xs), dtype=float)
                              * normal_pdf(xs, mean, var), xs))


def prediction_oracle_left_point(prev_density: Callable[[Array], Array],
                                 model: StateSpaceModel, t_k: float, x: float,
                                 dt: float, n_nodes: int = 4097,
                                 span: float = 8.0) -> float:
    """Exact one-step prior value targeted by the explicit prediction variant.

    Evaluates E[prev(Z)] - dt * E[divergence(Z) prev(Z)] over the reverse
    sampling law by dense quadrature; the expectations here are what the
    Monte Carlo estimator approximates, so the comparison isolates the
    sample-count error.
    """
    _require_scalar_state(model, "prediction")
    mean, var = _backward_law(model, t_k, x, dt)
    if var <= 0:
        pts = np.array([[mean]])
        val = float(np.asarray(prev_density(pts))[0])
        div = float(np.asarray(model.drift_divergence(pts))[0])
        return val - div * val * dt

    def integrand(xs: Array) -> Array:
        pts = xs[:, None]
        vals = np.asarray(prev_density(pts), dtype=float)
        div = np.asarray(model.drift_divergence(pts), dtype=float)
        return vals - div * vals * dt

    return gaussian_expectation(integrand, mean, var, n_nodes, span)


def prediction_oracle_right_point(prev_density: Callable[[Array], Array],
                                  model: StateSpaceModel, t_k: float, x: float,
                                  dt: float, n_nodes: int = 4097,
                                  span: float = 8.0) -> float:
    """Fixed-point limit of the implicit variant: E[prev] / (1 + divergence(x) dt)."""
    _require_scalar_state(model, "prediction")
    mean, var = _backward_law(model, t_k, x, dt)
    if var <= 0:
        expectation = float(np.asarray(prev_density(np.array([[mean]])))[0])
    else:
        expectation = gaussian_expectation(
            lambda xs: np.asarray(prev_density(xs[:, None]), dtype=float),
            mean, var, n_nodes, span)
    div = float(model.drift_divergence(np.array([x])))
    return expectation / (1.0 + div * dt)


def prediction_estimator_variance(prev_density: Callable[[Array], Array],
                                  model: StateSpaceModel, t_k: float, x: float,
                                  dt: float, n_nodes: int = 4097,
                                  span: float = 8.0) -> float:
    """Variance of a single reverse-sample term of the explicit estimator.

    The M-sample estimator is an i.i.d. average, so its mean squared error
    against the quadrature oracle is exactly this value divided by M.
    """
    _require_scalar_state(model, "prediction")
    mean, var = _backward_law(model, t_k, x, dt)

    def term(xs: Array) -> Array:
        pts = xs[:, None]
        vals = np.asarray(prev_density(pts), dtype=float)
        div = np.asarray(model.drift_divergence(pts), dtype=float)
        return vals - div * vals * dt

    first = gaussian_expectation(term, mean, var, n_nodes, span)
    second = gaussian_expectation(lambda xs: term(xs) ** 2, mean, var, n_nodes, span)
    return max(second - first * first, 0.0)


def denominator_oracle(lik: Likelihood, prior_density: Callable[[Array], Array],
                       center: float, spread: float, n_nodes: int = 8193,
                       span: float = 10.0) -> float:
    """Quadrature value of the observation normalizer integral.

    Integrates likelihood(x) * prior(x) over center +- span spread.
    """
    xs = np.linspace(center - span * spread, center + span * spread, n_nodes)
    pts = xs[:, None]
    vals = likelihood_density(lik, pts) * np.asarray(prior_density(pts), dtype=float)
    return float(np.trapezoid(vals, xs))


@dataclass
class GridFilterResult:
    """Posterior densities of the discrete-time chain on a fixed grid."""

    xs: Array
    posteriors: Array  # (steps + 1, n_nodes)
    means: Array
    stds: Array


def grid_filter(model: StateSpaceModel, grid: TimeGrid, observations: Array,
                n_nodes: int = 4096, span: float = 8.0) -> GridFilterResult:
    """Exact (to quadrature accuracy) filter for the discretized 1-d chain.

    Propagates the density through the one-step Gaussian transition of the
    explicit scheme and applies the Bayesian update on a fixed grid; serves
    as ground truth for nonlinear scalar models where no closed-form filter
    exists.
    """
    _require_scalar_state(model, "grid filter")
    observations = np.atleast_2d(np.asarray(observations, dtype=float))

    # deterministic domain probe: a cheap path bundle plus the initial law
    probe_rng = substream(20_240_601, "grid-domain")
    n_probe = 512
    states = model.initial_sampler(n_probe, probe_rng)
    lo = float(states.min())
    hi = float(states.max())
    for k in range(1, grid.steps + 1):
        dt = grid.dt(k)
        sig = np.asarray(model.diffusion(grid.time(k - 1)), dtype=float)
        noise = math.sqrt(dt) * probe_rng.standard_normal((n_probe, model.dim_noise))
        states = states + model.drift(states) * dt + noise @ sig.T
        lo = min(lo, float(states.min()))
        hi = max(hi, float(states.max()))
    pad = 0.35 * span * max(hi - lo, 1.0)
    xs = np.linspace(lo - pad, hi + pad, n_nodes)
    weight = np.gradient(xs)

    post = np.asarray(model.initial_density(xs[:, None]), dtype=float)
    post = post / np.trapezoid(post, xs)
    posteriors = np.empty((grid.steps + 1, n_nodes))
    posteriors[0] = post
    for k in range(1, grid.steps + 1):
        dt = grid.dt(k)
        sig = float(np.asarray(model.diffusion(grid.time(k - 1)))[0, 0])
        var = sig * sig * dt
        drift_to = xs + np.asarray(model.drift(xs[:, None]), dtype=float)[:, 0] * dt
        weighted = post * weight
        prior = np.empty(n_nodes)
        norm_const = math.sqrt(2.0 * math.pi * var)
        block = 256  # bounds the (block, n_nodes) transition slab held in memory
        for start in range(0, n_nodes, block):
            stop = min(start + block, n_nodes)
            kernel = np.exp(-0.5 * (xs[start:stop, None] - drift_to[None, :]) ** 2
                            / var) / norm_const
            prior[start:stop] = (kernel * weighted[None, :]).sum(axis=1)
        lik = Likelihood(observations[k - 1], observations[k], dt,
                         model.obs_map, model.obs_noise(grid.time(k)))
        post = prior * likelihood_density(lik, xs[:, None])
        norm = np.trapezoid(post, xs)
        if norm <= 0:
            raise ConfigurationError(f"grid filter lost all mass at step {k}")
        post = post / norm
        posteriors[k] = post

    means = np.trapezoid(posteriors * xs[None, :], xs, axis=1)
    seconds = np.trapezoid(posteriors * xs[None, :] ** 2, xs, axis=1)
    stds = np.sqrt(np.maximum(seconds - means ** 2, 0.0))
    return GridFilterResult(xs=xs, posteriors=posteriors, means=means, stds=stds)
