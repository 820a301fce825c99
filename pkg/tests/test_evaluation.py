import math

import numpy as np
import pytest

from bddm.diffusion import DiffusionSpec, NoiseSchedule, forward_diffuse, linear_schedule
from bddm.errors import ContractError, DomainError, ShapeError
from bddm.evaluation import (
    GaussianDataSpec,
    _kernel_sum,
    analytic_eps,
    bound_sweep,
    median_bandwidth,
    mmd_rbf,
    mmse_risk,
    oracle_eps_fn,
)
from bddm.networks import new_score_net, score_predict

SPEC = DiffusionSpec(200, 1e-4, 0.02, 20, 1)


def naive_mmd(x, y, h):
    k = lambda a, b: math.exp(-float(np.sum((a - b) ** 2)) / (2 * h * h))  # noqa: E731
    n, m = len(x), len(y)
    kxx = sum(k(x[i], x[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    kyy = sum(k(y[i], y[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    kxy = sum(k(x[i], y[j]) for i in range(n) for j in range(m)) / (n * m)
    return kxx + kyy - 2 * kxy


class TestAnalyticEps:
    def test_centred_input(self):
        spec = GaussianDataSpec([1.0, -2.0], 0.7)
        np.testing.assert_allclose(analytic_eps(spec, 0.4 * spec.mu, 0.4), 0.0, atol=1e-15)

    def test_point_mass_recovers_eps(self):
        rng = np.random.default_rng(0)
        spec = GaussianDataSpec([1.5], 0.0)
        eps = rng.standard_normal((10, 1))
        x_t = forward_diffuse(np.full((10, 1), 1.5), 0.6, eps)
        np.testing.assert_allclose(analytic_eps(spec, x_t, 0.6), eps, rtol=1e-12)

    @pytest.mark.parametrize("alpha", [0.3, 0.8])
    def test_regression_oracle(self, alpha):
        # least squares of eps on [1, x_t] over 1e6 forward draws
        rng = np.random.default_rng(1)
        spec = GaussianDataSpec([2.0], 0.5)
        n = 1_000_000
        x0 = spec.sample(n, rng)
        eps = rng.standard_normal((n, 1))
        x_t = forward_diffuse(x0, alpha, eps)[:, 0]
        design = np.stack([np.ones(n), x_t], axis=1)
        coef, *_ = np.linalg.lstsq(design, eps[:, 0], rcond=None)
        resid = eps[:, 0] - design @ coef
        cov = np.linalg.inv(design.T @ design) * resid.var()
        se = np.sqrt(np.diag(cov))
        denom = alpha**2 * 0.5 + 1 - alpha**2
        slope = math.sqrt(1 - alpha**2) / denom
        expected = np.array([-slope * alpha * 2.0, slope])
        assert np.all(np.abs(coef - expected) <= 3 * se)

    def test_domain(self):
        spec = GaussianDataSpec([0.0], 1.0)
        with pytest.raises(DomainError):
            analytic_eps(spec, np.zeros(1), 1.0)
        with pytest.raises(ShapeError):
            analytic_eps(spec, np.zeros(2), 0.5)

    def test_negative_variance(self):
        with pytest.raises(DomainError):
            GaussianDataSpec([0.0], -1.0)


class TestMmseRisk:
    def test_point_mass_zero(self):
        assert mmse_risk(GaussianDataSpec([1.0], 0.0), linear_schedule(SPEC)) == 0.0

    def test_vanishing_alpha(self):
        # each term is at most D * alpha_t^2 s2 / (1 - alpha_t^2)
        sched = NoiseSchedule(np.array([1 - 1e-8] * 4))
        assert mmse_risk(GaussianDataSpec([1.0], 1.0), sched) < 1e-8

    def test_monte_carlo(self):
        rng = np.random.default_rng(2)
        spec = GaussianDataSpec([2.0, 0.0], 0.8)
        sched = linear_schedule(DiffusionSpec(200, 1e-4, 0.02, 20, 2))
        n = 200_000
        t = rng.integers(1, 201, size=n)
        a = sched.alphas[t - 1]
        eps = rng.standard_normal((n, 2))
        x_t = forward_diffuse(spec.sample(n, rng), a, eps)
        err = np.sum((eps - analytic_eps(spec, x_t, a)) ** 2, axis=1)
        se = err.std(ddof=1) / math.sqrt(n)
        assert abs(err.mean() - mmse_risk(spec, sched)) <= 3 * se

    @pytest.mark.parametrize("t", [20, 100, 180])
    def test_oracle_beats_networks(self, t):
        rng = np.random.default_rng(3)
        spec = GaussianDataSpec([2.0], 1.0)
        a = linear_schedule(SPEC).alpha(t)
        n = 50_000
        eps = rng.standard_normal((n, 1))
        x_t = forward_diffuse(spec.sample(n, rng), a, eps)
        base = np.sum((eps - analytic_eps(spec, x_t, a)) ** 2, axis=1)
        for k in range(3):
            net = new_score_net(1, np.random.default_rng(10 + k), hidden=(16,))
            diff = np.sum((eps - score_predict(net, x_t, a)) ** 2, axis=1) - base
            assert diff.mean() >= -3 * diff.std(ddof=1) / math.sqrt(n)


class TestMmd:
    def test_identical_samples(self):
        x = np.random.default_rng(4).standard_normal((200, 2))
        v = mmd_rbf(x, x)
        assert v <= 0 and abs(v) < 1e-2

    def test_two_point_masses(self):
        d, h = 1.3, 0.7
        x = np.zeros((5, 2))
        y = np.tile([d, 0.0], (7, 1))
        assert mmd_rbf(x, y, h) == pytest.approx(2 * (1 - math.exp(-d * d / (2 * h * h))), rel=1e-12)

    def test_naive_oracle(self):
        rng = np.random.default_rng(5)
        x, y = rng.standard_normal((30, 2)), rng.standard_normal((25, 2)) + 0.5
        assert abs(mmd_rbf(x, y, 0.9) - naive_mmd(x, y, 0.9)) < 1e-12

    def test_chunking_invisible(self):
        rng = np.random.default_rng(6)
        x, y = rng.standard_normal((300, 2)), rng.standard_normal((250, 2))
        assert _kernel_sum(x, y, 1.0, chunk=7) == pytest.approx(_kernel_sum(x, y, 1.0, chunk=10_000), rel=1e-12)

    def test_symmetric_and_permutation_invariant(self):
        rng = np.random.default_rng(7)
        x, y = rng.standard_normal((40, 3)), rng.standard_normal((50, 3)) * 1.5
        h = median_bandwidth(np.vstack([x, y]))
        assert mmd_rbf(x, y, h) == pytest.approx(mmd_rbf(y, x, h), rel=1e-12)
        assert mmd_rbf(x[::-1], rng.permutation(y), h) == pytest.approx(mmd_rbf(x, y, h), rel=1e-12)

    def test_too_small(self):
        with pytest.raises(ContractError):
            mmd_rbf(np.zeros((1, 2)), np.zeros((5, 2)))

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            mmd_rbf(np.zeros((3, 2)), np.zeros((3, 1)))

    def test_median_bandwidth(self):
        x = np.array([[0.0], [1.0], [3.0]])
        assert median_bandwidth(x) == 2.0


class TestBoundSweep:
    DATA = GaussianDataSpec([2.0], 1.0)

    def test_ordering_with_oracle(self):
        sweep = bound_sweep(oracle_eps_fn(self.DATA), SPEC, self.DATA, range(20, 181, 20), 2000, np.random.default_rng(0))
        assert sweep.ordering_fraction() >= 0.95

    def test_range(self):
        with pytest.raises(DomainError):
            bound_sweep(oracle_eps_fn(self.DATA), SPEC, self.DATA, [19], 10, np.random.default_rng(0))
        with pytest.raises(DomainError):
            bound_sweep(oracle_eps_fn(self.DATA), SPEC, self.DATA, [181], 10, np.random.default_rng(0))

    def test_empty(self):
        with pytest.raises(ContractError):
            bound_sweep(oracle_eps_fn(self.DATA), SPEC, self.DATA, [], 10, np.random.default_rng(0))

    def test_half_width_scaling(self):
        fn = oracle_eps_fn(self.DATA)
        a = bound_sweep(fn, SPEC, self.DATA, [40, 100, 160], 20_000, np.random.default_rng(1))
        b = bound_sweep(fn, SPEC, self.DATA, [40, 100, 160], 40_000, np.random.default_rng(2))
        np.testing.assert_allclose(a.f_elbo_half_width / b.f_elbo_half_width, math.sqrt(2), rtol=0.1)
        np.testing.assert_allclose(a.f_bddm_half_width / b.f_bddm_half_width, math.sqrt(2), rtol=0.1)

    def test_csv(self):
        sweep = bound_sweep(oracle_eps_fn(self.DATA), SPEC, self.DATA, [20, 180], 50, np.random.default_rng(0))
        lines = sweep.to_csv().splitlines()
        assert lines[0] == "t,f_elbo,f_elbo_half_width,f_bddm,f_bddm_half_width"
        assert len(lines) == 3 and lines[1].startswith("20,")
        assert float(lines[2].split(",")[3]) == sweep.f_bddm[1]
