"""State-space models, SDE time stepping, and the built-in model zoo.

Convention: a single state is a float array of shape ``(dim_state,)`` and a
batch of states has shape ``(n, dim_state)``.  All model callables broadcast
over leading axes; scalar-valued maps (``drift_divergence``,
``initial_density``) drop the trailing state axis.  Diffusion and observation
noise are functions of time only, never of the state.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, ModelBlowUpError
from .rngs import substream

Array = np.ndarray


def matvec(mat: Array, vec: Array) -> Array:
    """Apply a (d_out, d_in) matrix to (..., d_in) vectors.

    Uses an explicit broadcast-and-reduce instead of BLAS so that a row's
    result does not depend on the batch shape it was computed in; this keeps
    batched runs bit-identical to per-sample runs.
    """
    mat = np.asarray(mat, dtype=float)
    vec = np.asarray(vec, dtype=float)
    return (mat * vec[..., None, :]).sum(axis=-1)


def finite_difference_divergence(drift: Callable[[Array], Array], x: Array,
                                 rel_step: float = 1e-5) -> Array:
    """Central-difference fallback for the divergence of a drift field.

    Step per coordinate is ``rel_step * (1 + |x_j|)``.  Intended as a
    convenience for quick model prototyping; analytic divergences are
    preferred and are cross-checked against this estimate.
    """
    x = np.asarray(x, dtype=float)
    dim = x.shape[-1]
    out = np.zeros(x.shape[:-1])
    for j in range(dim):
        h = rel_step * (1.0 + np.abs(x[..., j]))
        bump = np.zeros_like(x)
        bump[..., j] = h
        out = out + (drift(x + bump)[..., j] - drift(x - bump)[..., j]) / (2.0 * h)
    return out


@dataclass(frozen=True)
class LinearGaussian:
    """Coefficients of a linear-Gaussian model, consumed by the Kalman oracle."""

    drift_matrix: Array
    obs_matrix: Array
    diffusion: Array
    obs_noise: Array
    mean0: Array
    cov0: Array

    def __post_init__(self):
        for name in ("drift_matrix", "obs_matrix", "diffusion", "obs_noise",
                     "mean0", "cov0"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))


@dataclass
class StateSpaceModel:
    """Drift, diffusion, observation map, and initial law of a filtering problem.

    ``drift_divergence`` is the divergence of the drift field (the sum of the
    diagonal of its Jacobian).  If omitted, a central finite-difference
    fallback is installed; supply the analytic form whenever available.
    """

    dim_state: int
    dim_obs: int
    drift: Callable[[Array], Array]
    diffusion: Callable[[float], Array]
    obs_map: Callable[[Array], Array]
    obs_noise: Callable[[float], Array]
    initial_density: Callable[[Array], Array]
    initial_sampler: Callable[[int, np.random.Generator], Array]
    drift_divergence: Callable[[Array], Array] | None = None
    name: str = "custom"
    divergence_bound: float | None = None
    linear: LinearGaussian | None = None

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_obs < 1:
            raise ConfigurationError("state and observation dimensions must be >= 1")
        if self.drift_divergence is None:
            drift = self.drift
            self.drift_divergence = lambda x: finite_difference_divergence(drift, x)

    @property
    def dim_noise(self) -> int:
        return int(np.asarray(self.diffusion(0.0)).shape[1])


def check_drift_divergence(model: StateSpaceModel, seed: int = 0,
                           n_points: int = 32, rtol: float = 1e-4,
                           scale: float = 2.0) -> None:
    """Cross-check the model's divergence against finite differences.

    Raises ConfigurationError when the relative mismatch at any random probe
    point exceeds ``rtol``; catches hand-derived divergence errors in user
    models before they silently corrupt the prediction step.
    """
    rng = substream(seed, "divergence-check")
    probes = scale * rng.standard_normal((n_points, model.dim_state))
    analytic = np.asarray(model.drift_divergence(probes), dtype=float)
    numeric = finite_difference_divergence(model.drift, probes)
    err = np.abs(analytic - numeric) / (1.0 + np.abs(numeric))
    worst = int(np.argmax(err))
    if err[worst] > rtol:
        raise ConfigurationError(
            "drift_divergence disagrees with finite differences at "
            f"x={probes[worst]}: analytic {analytic[worst]:.6g} vs "
            f"numeric {numeric[worst]:.6g}"
        )


@dataclass
class TimeGrid:
    """Strictly increasing time knots t_0 < t_1 < ... < t_K."""

    knots: Array

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float).ravel()
        if self.knots.size < 2:
            raise ConfigurationError("a time grid needs at least two knots")
        if not np.all(np.diff(self.knots) > 0):
            raise ConfigurationError("time knots must be strictly increasing")

    @classmethod
    def uniform(cls, horizon: float, steps: int, t0: float = 0.0) -> "TimeGrid":
        if steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if horizon <= t0:
            raise ConfigurationError("horizon must exceed t0")
        return cls(np.linspace(t0, horizon, steps + 1))

    @property
    def t0(self) -> float:
        return float(self.knots[0])

    @property
    def horizon(self) -> float:
        return float(self.knots[-1])

    @property
    def steps(self) -> int:
        return int(self.knots.size - 1)

    @property
    def dts(self) -> Array:
        return np.diff(self.knots)

    @property
    def max_dt(self) -> float:
        """Largest step; the step size quoted in convergence studies."""
        return float(np.max(self.dts))

    def time(self, k: int) -> float:
        return float(self.knots[k])

    def dt(self, k: int) -> float:
        """Length of the k-th interval (t_{k-1}, t_k], k = 1..steps."""
        if not 1 <= k <= self.steps:
            raise ConfigurationError(f"step index {k} outside 1..{self.steps}")
        return float(self.knots[k] - self.knots[k - 1])


def _check_finite_state(x: Array, t: float, origin: Array) -> None:
    if not np.all(np.isfinite(x)):
        bad = np.asarray(x)
        idx = np.argwhere(~np.isfinite(bad))
        raise ModelBlowUpError(
            f"non-finite state at t={t:.6g} (first bad entry index {tuple(idx[0])}); "
            f"stepped from {np.asarray(origin).ravel()[:4]}"
        )


def euler_step(model: StateSpaceModel, t: float, x: Array, dt: float,
               dW: Array) -> Array:
    """One explicit forward step: x + drift(x) dt + diffusion(t) dW.

    ``dW`` is supplied by the caller (N(0, dt I) for a plain step) so runs are
    reproducible and couplings with reference solutions are possible.
    """
    if dt < 0:
        raise ConfigurationError("dt must be nonnegative")
    x = np.asarray(x, dtype=float)
    dW = np.asarray(dW, dtype=float)
    out = x + model.drift(x) * dt + matvec(model.diffusion(t), dW)
    _check_finite_state(out, t, x)
    return out


def backward_sample(model: StateSpaceModel, t_k: float, x_k: Array, dt: float,
                    dW: Array) -> Array:
    """Reverse-time sample: x_k - drift(x_k) dt + diffusion(t_k) dW."""
    if dt < 0:
        raise ConfigurationError("dt must be nonnegative")
    x_k = np.asarray(x_k, dtype=float)
    dW = np.asarray(dW, dtype=float)
    out = x_k - model.drift(x_k) * dt + matvec(model.diffusion(t_k), dW)
    _check_finite_state(out, t_k, x_k)
    return out


def simulate_truth(model: StateSpaceModel, grid: TimeGrid, seed: int,
                   obs_rule: str = "right") -> tuple[Array, Array]:
    """Simulate a hidden path and its cumulative observation process.

    The observation starts at zero and accrues ``obs_map(state) * dt`` plus
    Gaussian increments with covariance ``obs_noise obs_noise^T dt``.  The
    drift term uses the right-endpoint state by default (matching the
    likelihood used in the update step); ``obs_rule="left"`` switches to the
    left endpoint.
    """
    if obs_rule not in ("right", "left"):
        raise ConfigurationError("obs_rule must be 'right' or 'left'")
    rng_state = substream(seed, "truth-state")
    rng_obs = substream(seed, "truth-obs")
    n_steps = grid.steps
    states = np.empty((n_steps + 1, model.dim_state))
    obs = np.zeros((n_steps + 1, model.dim_obs))
    states[0] = model.initial_sampler(1, substream(seed, "truth-init"))[0]
    for k in range(1, n_steps + 1):
        dt = grid.dt(k)
        dW = math.sqrt(dt) * rng_state.standard_normal(model.dim_noise)
        states[k] = euler_step(model, grid.time(k - 1), states[k - 1], dt, dW)
        anchor = states[k] if obs_rule == "right" else states[k - 1]
        dV = math.sqrt(dt) * rng_obs.standard_normal(model.dim_obs)
        obs[k] = obs[k - 1] + np.asarray(model.obs_map(anchor), dtype=float) * dt \
            + matvec(model.obs_noise(grid.time(k)), dV)
    return states, obs


# --- exact Ornstein-Uhlenbeck references -----------------------------------

def ou_exact_moments(theta: float, sigma: float, x0: float, t: float) -> tuple[float, float]:
    """Mean and variance of dX = -theta X dt + sigma dW at time t from x0."""
    mean = x0 * math.exp(-theta * t)
    var = sigma * sigma * (1.0 - math.exp(-2.0 * theta * t)) / (2.0 * theta)
    return mean, var


def ou_exact_coupled_step(theta: float, sigma: float, x: Array, dt: float,
                          dW: Array, extra: Array) -> Array:
    """Exact one-step transition coupled to a given Brownian increment.

    The stochastic integral driving the exact transition is jointly Gaussian
    with the plain increment ``dW``; conditioning on ``dW`` leaves an
    independent residual, fed here through ``extra`` (standard normal).  This
    gives a genuine strong coupling against explicit Euler paths built from
    the same ``dW``.
    """
    decay = math.exp(-theta * dt)
    cov_w_i = (1.0 - decay) / theta
    var_i = (1.0 - decay * decay) / (2.0 * theta)
    beta = cov_w_i / dt
    resid_var = max(var_i - cov_w_i * cov_w_i / dt, 0.0)
    integral = beta * np.asarray(dW) + math.sqrt(resid_var) * np.asarray(extra)
    return np.asarray(x) * decay + sigma * integral


# --- model zoo ---------------------------------------------------------------

def _gaussian_density_1d(mean: float, var: float) -> Callable[[Array], Array]:
    norm = 1.0 / math.sqrt(2.0 * math.pi * var)

    def density(x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        z = x[..., 0] - mean
        return norm * np.exp(-0.5 * z * z / var)

    return density


def _gaussian_sampler(mean: Array, stds: Array) -> Callable[[int, np.random.Generator], Array]:
    mean = np.asarray(mean, dtype=float)
    stds = np.asarray(stds, dtype=float)

    def sampler(n: int, rng: np.random.Generator) -> Array:
        return mean + stds * rng.standard_normal((n, mean.size))

    return sampler


def make_linear1d() -> StateSpaceModel:
    """Stable scalar linear model with linear observations (Kalman oracle)."""
    a, sig, h, r = -0.5, 0.5, 1.0, 0.5
    mean0, var0 = 0.5, 0.25
    return StateSpaceModel(
        dim_state=1,
        dim_obs=1,
        drift=lambda x: a * np.asarray(x, dtype=float),
        drift_divergence=lambda x: np.full(np.asarray(x).shape[:-1], a),
        diffusion=lambda t: np.array([[sig]]),
        obs_map=lambda x: h * np.asarray(x, dtype=float),
        obs_noise=lambda t: np.array([[r]]),
        initial_density=_gaussian_density_1d(mean0, var0),
        initial_sampler=_gaussian_sampler([mean0], [math.sqrt(var0)]),
        name="linear1d",
        divergence_bound=abs(a),
        linear=LinearGaussian([[a]], [[h]], [[sig]], [[r]], [mean0], [[var0]]),
    )


def make_ou1d() -> StateSpaceModel:
    """Unit-rate Ornstein-Uhlenbeck model; exact transition density known."""
    theta, sig, h, r = 1.0, 1.0, 1.0, 1.0
    mean0, var0 = 0.0, 0.5  # stationary law
    return StateSpaceModel(
        dim_state=1,
        dim_obs=1,
        drift=lambda x: -theta * np.asarray(x, dtype=float),
        drift_divergence=lambda x: np.full(np.asarray(x).shape[:-1], -theta),
        diffusion=lambda t: np.array([[sig]]),
        obs_map=lambda x: h * np.asarray(x, dtype=float),
        obs_noise=lambda t: np.array([[r]]),
        initial_density=_gaussian_density_1d(mean0, var0),
        initial_sampler=_gaussian_sampler([mean0], [math.sqrt(var0)]),
        name="ou1d",
        divergence_bound=theta,
        linear=LinearGaussian([[-theta]], [[h]], [[sig]], [[r]], [mean0], [[var0]]),
    )


def make_doublewell1d() -> StateSpaceModel:
    """Bistable drift x - x^3; nonlinear stress test, no closed-form filter."""
    sig, r = 0.5, 0.5
    mean0, var0 = 1.0, 0.25

    def drift(x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        return x - x ** 3

    def divergence(x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        return 1.0 - 3.0 * x[..., 0] ** 2

    return StateSpaceModel(
        dim_state=1,
        dim_obs=1,
        drift=drift,
        drift_divergence=divergence,
        diffusion=lambda t: np.array([[sig]]),
        obs_map=lambda x: np.asarray(x, dtype=float),
        obs_noise=lambda t: np.array([[r]]),
        initial_density=_gaussian_density_1d(mean0, var0),
        initial_sampler=_gaussian_sampler([mean0], [math.sqrt(var0)]),
        name="doublewell1d",
        divergence_bound=None,  # unbounded over the whole line
    )


def make_linear2d() -> StateSpaceModel:
    """Damped rotation in the plane; multidimensional consistency check."""
    F = np.array([[-0.5, -1.0], [1.0, -0.5]])
    sig = 0.4 * np.eye(2)
    H = np.eye(2)
    R = 0.5 * np.eye(2)
    mean0 = np.array([0.0, 0.0])
    cov0 = 0.25 * np.eye(2)
    norm = 1.0 / (2.0 * math.pi * 0.25)

    def density(x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        quad = (x ** 2).sum(axis=-1) / 0.25
        return norm * np.exp(-0.5 * quad)

    return StateSpaceModel(
        dim_state=2,
        dim_obs=2,
        drift=lambda x: matvec(F, x),
        drift_divergence=lambda x: np.full(np.asarray(x).shape[:-1], float(np.trace(F))),
        diffusion=lambda t: sig,
        obs_map=lambda x: matvec(H, x),
        obs_noise=lambda t: R,
        initial_density=density,
        initial_sampler=_gaussian_sampler(mean0, [0.5, 0.5]),
        name="linear2d",
        divergence_bound=abs(float(np.trace(F))),
        linear=LinearGaussian(F, H, sig, R, mean0, cov0),
    )


MODEL_ZOO: dict[str, Callable[[], StateSpaceModel]] = {
    "linear1d": make_linear1d,
    "ou1d": make_ou1d,
    "doublewell1d": make_doublewell1d,
    "linear2d": make_linear2d,
}


def get_model(name: str) -> StateSpaceModel:
    try:
        return MODEL_ZOO[name]()
    except KeyError:
        raise ConfigurationError(
            f"unknown model {name!r}; available: {sorted(MODEL_ZOO)}"
        ) from None


def register_model(name: str, factory: Callable[[], StateSpaceModel]) -> None:
    """Register a custom model factory under a selectable name."""
    if name in MODEL_ZOO:
        warnings.warn(f"overwriting registered model {name!r}", stacklevel=2)
    MODEL_ZOO[name] = factory
