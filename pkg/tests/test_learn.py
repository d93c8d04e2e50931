import math

import numpy as np
import pytest

from fbsdefilter.errors import ConfigurationError, DivergentLearningError
from fbsdefilter.kde import SQRT_PI, KernelDensity
from fbsdefilter.learn import (
    TrainConfig,
    hessian,
    loss_and_gradients,
    select_centers,
    sgd_fit,
)
from fbsdefilter.predict import ParticleCloud
from fbsdefilter.rngs import substream


def random_mixture(rng, n_components, dim):
    return KernelDensity(
        rng.standard_normal((n_components, dim)),
        rng.uniform(-1.0, 1.0, n_components),
        rng.uniform(0.3, 2.5, n_components),
    )


def fd_gradients(kd, x, y, step=1e-6):
    """Central-difference loss gradients; the independent check."""
    grad_w = np.empty(kd.n_components)
    grad_b = np.empty(kd.n_components)

    def loss_with(weights, bandwidths):
        shifted = KernelDensity(kd.centers, weights, bandwidths)
        return loss_and_gradients(shifted, x, y)[0]

    for l in range(kd.n_components):
        w_hi, w_lo = kd.weights.copy(), kd.weights.copy()
        w_hi[l] += step
        w_lo[l] -= step
        grad_w[l] = (loss_with(w_hi, kd.bandwidths) - loss_with(w_lo, kd.bandwidths)) / (2 * step)
        b_hi, b_lo = kd.bandwidths.copy(), kd.bandwidths.copy()
        b_hi[l] += step
        b_lo[l] -= step
        grad_b[l] = (loss_with(kd.weights, b_hi) - loss_with(kd.weights, b_lo)) / (2 * step)
    return grad_w, grad_b


def max_relative_gradient_error(kd, x, y, step=1e-6, rtol=1e-5):
    loss, gw, gb = loss_and_gradients(kd, x, y)
    fw, fb = fd_gradients(kd, x, y, step=step)
    analytic = np.concatenate([gw, gb])
    numeric = np.concatenate([fw, fb])
    # central differences of the loss carry ~eps * loss / step of absolute
    # cancellation noise; components below that floor are compared in
    # absolute terms at 16x the noise level instead of their own magnitude
    noise = 16.0 * np.finfo(float).eps * max(1.0, loss) / step
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), noise / rtol)
    return float((np.abs(analytic - numeric) / scale).max())


class TestSelectCenters:
    def _cloud(self, values, rng=None):
        values = np.asarray(values, dtype=float)
        rng = rng or substream(0, "centers-cloud")
        return ParticleCloud(k=1, locations=rng.standard_normal((values.size, 1)),
                             values=values, stage="posterior")

    def test_full_selection_returns_all_locations(self):
        cloud = self._cloud(np.abs(substream(1, "c1").standard_normal(9)))
        centers = select_centers(cloud, 9, "uniform_subsample", substream(2, "c2"))
        assert sorted(centers[:, 0]) == sorted(cloud.locations[:, 0])

    def test_weighted_all_mass_on_one_particle(self):
        values = np.zeros(6)
        values[4] = 2.5
        cloud = self._cloud(values)
        centers = select_centers(cloud, 1, "weighted_subsample", substream(3, "c3"))
        assert centers[0, 0] == cloud.locations[4, 0]

    def test_weighted_frequencies_proportional_to_values(self):
        values = np.array([0.1, 0.2, 0.3, 0.4])
        cloud = self._cloud(values)
        n_trials = 10_000
        counts = np.zeros(4)
        rng = substream(4, "c4")
        for _ in range(n_trials):
            chosen = select_centers(cloud, 1, "weighted_subsample", rng)
            counts[np.flatnonzero(cloud.locations[:, 0] == chosen[0, 0])[0]] += 1
        probs = values / values.sum()
        for j in range(4):
            sd = math.sqrt(n_trials * probs[j] * (1 - probs[j]))
            assert abs(counts[j] - n_trials * probs[j]) < 3.0 * sd

    def test_too_many_centers_rejected(self):
        cloud = self._cloud(np.ones(3))
        with pytest.raises(ConfigurationError):
            select_centers(cloud, 4, "uniform_subsample", substream(5, "c5"))


class TestLossAndGradients:
    def test_zero_residual_zeroes_gradients(self):
        kd = random_mixture(substream(6, "g1"), 3, 2)
        x = np.array([0.4, -0.2])
        y = kd.eval(x)
        loss, gw, gb = loss_and_gradients(kd, x, y)
        assert loss == 0.0
        assert np.all(gw == 0.0) and np.all(gb == 0.0)

    def test_query_at_center_kills_bandwidth_gradient(self):
        kd = KernelDensity([[0.7]], [0.9], [0.6])
        loss, gw, gb = loss_and_gradients(kd, np.array([0.7]), 0.2)
        assert gb[0] == 0.0
        assert gw[0] == pytest.approx(2 * (0.9 - 0.2), rel=1e-12)

    def test_matches_finite_differences(self):
        rng = substream(7, "g2")
        for _ in range(20):
            kd = random_mixture(rng, 3, 2)
            x = rng.standard_normal(2)
            y = 0.5 * rng.standard_normal()
            assert max_relative_gradient_error(kd, x, y) < 1e-5


class TestSgdFit:
    def _cloud_from(self, locations, values):
        return ParticleCloud(k=1, locations=locations, values=values, stage="posterior")

    def test_exact_fixed_point_keeps_parameters(self):
        # one pair, width 1/sqrt(pi): the initial mixture already interpolates
        # (up to one rounding of width * sqrt(pi)), so descent must not move
        width = 1.0 / SQRT_PI
        cloud = self._cloud_from([[0.8]], [0.37])
        cfg = TrainConfig(sgd_steps=200, init_bandwidth=width)
        kd, report = sgd_fit(cloud, 1, cfg, substream(8, "fit-fixed"))
        assert kd.weights[0] == pytest.approx(0.37, rel=1e-13)
        assert kd.bandwidths[0] == width
        assert report.final_loss < 1e-25

    def test_single_pair_converges_to_value(self):
        cloud = self._cloud_from([[0.3]], [0.85])
        cfg = TrainConfig(sgd_steps=500, rate_weights=0.4, init_bandwidth=1.0)
        kd, report = sgd_fit(cloud, 1, cfg, substream(9, "fit-single"))
        assert report.final_loss < 1e-10
        assert kd.weights[0] == pytest.approx(0.85, abs=1e-5)

    def test_gaussian_target_fit_reaches_small_loss(self):
        rng = substream(10, "fit-gauss")
        n = 500
        locations = rng.standard_normal((n, 1))
        targets = np.exp(-0.5 * locations[:, 0] ** 2) / math.sqrt(2 * math.pi)
        cloud = self._cloud_from(locations, targets)
        cfg = TrainConfig(sgd_steps=4000)
        kd, report = sgd_fit(cloud, 25, cfg, substream(11, "fit-gauss-run"))
        assert report.final_loss < 1e-3
        assert report.trace.size == cfg.sgd_steps + 1

    def test_realizable_targets_loss_decreases_in_windows(self):
        rng = substream(12, "fit-window")
        truth = KernelDensity([[-1.0], [0.5], [1.5]], [0.3, 0.5, 0.2], [0.9, 0.8, 1.1])
        locations = rng.uniform(-3, 3, (400, 1))
        values = truth.eval(locations)
        cloud = self._cloud_from(locations, values)
        kd, report = sgd_fit(cloud, 3, TrainConfig(sgd_steps=3000),
                             substream(13, "fit-window-run"))
        tail = report.trace[-300:].mean()
        head = report.trace[1:301].mean()
        assert tail <= head

    def test_permutation_of_cloud_reproduces_fit_exactly(self):
        rng = substream(14, "fit-perm")
        n = 60
        locations = rng.standard_normal((n, 1))
        values = np.abs(rng.standard_normal(n)) + 0.1
        cloud = ParticleCloud(k=1, locations=locations, values=values, stage="posterior")
        perm = rng.permutation(n)
        shuffled = ParticleCloud(k=1, locations=locations[perm], values=values[perm],
                                 stage="posterior", ids=np.arange(n)[perm])
        cfg = TrainConfig(sgd_steps=400)
        kd_a, _ = sgd_fit(cloud, 8, cfg, substream(15, "fit-perm-run"))
        kd_b, _ = sgd_fit(shuffled, 8, cfg, substream(15, "fit-perm-run"))
        assert np.array_equal(kd_a.centers, kd_b.centers)
        assert np.array_equal(kd_a.weights, kd_b.weights)
        assert np.array_equal(kd_a.bandwidths, kd_b.bandwidths)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergent_rate_raises_with_step_index(self):
        rng = substream(16, "fit-diverge")
        locations = rng.standard_normal((50, 1))
        cloud = self._cloud_from(locations, np.abs(rng.standard_normal(50)) + 0.5)
        cfg = TrainConfig(sgd_steps=3000, rate_weights=500.0, rate_bandwidths=500.0,
                          decay_steps=1e9)
        with pytest.raises(DivergentLearningError, match="step"):
            sgd_fit(cloud, 10, cfg, substream(17, "fit-diverge-run"))

    def test_loss_report_csv(self, tmp_path):
        cloud = self._cloud_from([[0.0], [1.0]], [0.5, 0.7])
        kd, report = sgd_fit(cloud, 2, TrainConfig(sgd_steps=10),
                             substream(18, "fit-csv"))
        path = tmp_path / "trace.csv"
        report.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,sample_index,loss"
        assert len(lines) == 12
        assert lines[1].startswith("0,-1,")


class TestHessian:
    def test_rank_one_structure_single_component(self):
        kd = KernelDensity([[0.4]], [0.7], [0.9])
        x = np.array([1.1])
        h = hessian(kd, x, 0.3, asymptotic=True)
        sq = (x[0] - 0.4) ** 2
        bump = math.exp(-sq / 0.9 ** 2)
        v = np.array([bump, 0.7 * bump * 2 * sq / 0.9 ** 3])
        np.testing.assert_allclose(h, 2 * np.outer(v, v), rtol=1e-14)
        eigs = np.linalg.eigvalsh(h)
        assert abs(eigs[0]) < 1e-12 * abs(eigs[1])
        assert eigs[1] == pytest.approx(2 * (v * v).sum(), rel=1e-12)

    def test_all_two_by_two_minors_vanish(self):
        rng = substream(19, "hess-minor")
        kd = random_mixture(rng, 4, 1)
        h = hessian(kd, rng.standard_normal(1), 0.2, asymptotic=True)
        size = h.shape[0]
        for r1 in range(size):
            for r2 in range(r1 + 1, size):
                for c1 in range(size):
                    for c2 in range(c1 + 1, size):
                        minor = h[np.ix_([r1, r2], [c1, c2])]
                        det = minor[0, 0] * minor[1, 1] - minor[0, 1] * minor[1, 0]
                        scale = max(abs(minor).max() ** 2, 1e-300)
                        assert abs(det) < 1e-12 * scale

    @pytest.mark.parametrize("n_components", [1, 2, 4, 8])
    def test_asymptotic_hessian_is_psd(self, n_components):
        rng = substream(20, "hess-psd", n_components)
        kd = random_mixture(rng, n_components, 2)
        h = hessian(kd, rng.standard_normal(2), 0.4, asymptotic=True)
        norm = np.linalg.norm(h, 2)
        assert np.linalg.eigvalsh(h)[0] >= -1e-10 * norm

    def test_full_hessian_near_fit_is_almost_psd(self):
        cloud = ParticleCloud(k=1, locations=[[0.3]], values=[0.8], stage="posterior")
        kd, report = sgd_fit(cloud, 1, TrainConfig(sgd_steps=600, rate_weights=0.4,
                                                   init_bandwidth=1.0),
                             substream(21, "hess-fit"))
        assert report.final_loss < 1e-6
        h = hessian(kd, np.array([0.3]), 0.8, asymptotic=False)
        norm = np.linalg.norm(h, 2)
        assert np.linalg.eigvalsh(h)[0] >= -1e-4 * norm

    def test_residual_terms_present_only_in_full_hessian(self):
        rng = substream(22, "hess-resid")
        kd = random_mixture(rng, 3, 1)
        x = rng.standard_normal(1)
        y = kd.eval(x) + 0.5  # force a residual
        full = hessian(kd, x, y, asymptotic=False)
        asym = hessian(kd, x, y, asymptotic=True)
        diff = full - asym
        off_diag_rows = ~np.eye(6, dtype=bool)
        # corrections live on the two diagonals that touch one component
        block = diff[:3, 3:]
        assert np.all(diff[:3, :3] == 0.0)
        assert np.all(block[~np.eye(3, dtype=bool)] == 0.0)
        assert np.any(np.diag(block) != 0.0)
