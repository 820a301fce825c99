import json
import math
import random

import numpy as np
import pytest

from bddm.diffusion import beta_upper_bound
from bddm.errors import ContractError, DomainError, EmptyScheduleError, SearchFailure
from bddm.evaluation import GaussianDataSpec, oracle_eps_fn
from bddm.networks import new_schedule_net, new_score_net
from bddm.scheduling import (
    Metric,
    PredictedSchedule,
    ScheduleSeed,
    grid_search_seed,
    gs_baseline,
    gs_candidates,
    predict_schedule,
)

DATA = GaussianDataSpec([1.0, -1.0], 0.2)
ORACLE = oracle_eps_fn(DATA)


def const_ratio(r):
    return lambda x: np.full(len(x), r)


def recurrence_oracle(a, b, r, floor, n_max):
    """Scalar backward recurrence for a constant ratio."""
    betas = [b]
    while len(betas) < n_max:
        nb = r * min(1 - a * a / (1 - b), b)
        a = a / math.sqrt(1 - b)
        if nb < floor:
            break
        betas.append(nb)
        b = nb
    return betas[::-1]


class TestScheduleSeed:
    @pytest.mark.parametrize("a,b", [(0.68, 0.53), (0.62, 0.42), (0.67, 0.12)])
    def test_reference_seeds_valid(self, a, b):
        seed = ScheduleSeed(a, b, 200, 1e-4)
        sched = predict_schedule(const_ratio(0.3), ORACLE, seed, np.random.default_rng(0), dim=2)
        assert len(sched) >= 1

    @pytest.mark.parametrize("a,b", [(0.9, 0.5), (0.0, 0.1), (0.5, 1.0)])
    def test_invalid(self, a, b):
        with pytest.raises(DomainError):
            ScheduleSeed(a, b, 10, 1e-4)

    def test_round_trip(self):
        s = ScheduleSeed(0.3, 0.2, 12, 1e-4)
        assert ScheduleSeed.from_dict(json.loads(json.dumps(s.to_dict()))) == s


class TestPredictSchedule:
    @pytest.mark.parametrize("r", [0.1, 0.5, 0.9])
    def test_constant_ratio_recurrence(self, r):
        seed = ScheduleSeed(0.2, 0.6, 40, 1e-4)
        got = predict_schedule(const_ratio(r), ORACLE, seed, np.random.default_rng(1), dim=2)
        np.testing.assert_allclose(got.betas_hat, recurrence_oracle(0.2, 0.6, r, 1e-4, 40), rtol=1e-12)
        # each backward step shrinks beta by at least the ratio
        assert np.all(got.betas_hat[:-1] <= r * got.betas_hat[1:] * (1 + 1e-12))

    def test_floor_above_seed(self):
        with pytest.raises(EmptyScheduleError):
            predict_schedule(const_ratio(0.5), ORACLE, ScheduleSeed(0.2, 0.1, 10, 0.2), np.random.default_rng(0), dim=2)

    def test_n_max_caps_length(self):
        got = predict_schedule(const_ratio(0.9), ORACLE, ScheduleSeed(0.2, 0.5, 3, 1e-6), np.random.default_rng(0), dim=2)
        assert len(got) == 3

    def test_network_schedule_invariants(self):
        net = new_schedule_net(2, np.random.default_rng(2), hidden=(8,))
        score = new_score_net(2, np.random.default_rng(3), hidden=(8,))
        got = predict_schedule(net, score, ScheduleSeed(0.3, 0.5, 50, 1e-4), np.random.default_rng(4))
        b, a = got.betas_hat, got.alphas_hat
        assert np.all(np.diff(b) > 0) and np.all(b >= 1e-4)
        assert np.all(b[:-1] < beta_upper_bound(a[1:], b[1:]))
        np.testing.assert_allclose(a[:-1], a[1:] / np.sqrt(1 - b[1:]), rtol=1e-14)

    def test_deterministic(self):
        net = new_schedule_net(2, np.random.default_rng(2), hidden=(8,))
        seed = ScheduleSeed(0.3, 0.5, 50, 1e-4)
        a = predict_schedule(net, ORACLE, seed, np.random.default_rng(4))
        b = predict_schedule(net, ORACLE, seed, np.random.default_rng(4))
        assert a.betas_hat.tobytes() == b.betas_hat.tobytes()


class TestPredictedSchedule:
    def test_rejects_non_increasing(self):
        with pytest.raises(DomainError):
            PredictedSchedule([0.1, 0.1])

    def test_rejects_below_floor(self):
        with pytest.raises(DomainError):
            PredictedSchedule([1e-5, 0.1], ScheduleSeed(0.1, 0.1, 5, 1e-4))

    def test_rejects_bound_violation(self):
        with pytest.raises(DomainError):
            PredictedSchedule([0.2, 0.3], alphas_hat=[0.9, 0.8])

    def test_rejects_empty(self):
        with pytest.raises(EmptyScheduleError):
            PredictedSchedule([])

    def test_round_trip(self):
        got = predict_schedule(const_ratio(0.4), ORACLE, ScheduleSeed(0.2, 0.6, 20, 1e-3), np.random.default_rng(0), dim=2)
        back = PredictedSchedule.from_dict(json.loads(json.dumps(got.to_dict())))
        np.testing.assert_array_equal(back.betas_hat, got.betas_hat)
        assert back.seed == got.seed


@pytest.fixture(scope="module")
def eval_set():
    return DATA.sample(64, np.random.default_rng(5))


class TestGridSearch:
    def run(self, eval_set, M, **kw):
        kw.setdefault("beta_floor", 1e-4)
        kw.setdefault("N_max", 30)
        return grid_search_seed(const_ratio(0.3), ORACLE, eval_set, M, 0.5, **kw)

    def test_m9_has_81_rows(self, eval_set):
        report = self.run(eval_set, 9)
        assert len(report.candidates) == 81
        assert {(c.i, c.j) for c in report.candidates} == {(i, j) for i in range(1, 10) for j in range(1, 10)}

    def test_m1_single_candidate(self, eval_set):
        report = self.run(eval_set, 1)
        (c,) = report.candidates
        assert (c.alpha_hat_N, c.beta_hat_N) == pytest.approx((0.05, 0.1))

    def test_winner_is_table_minimum(self, eval_set):
        report = self.run(eval_set, 4)
        values = [c.metric for c in report.candidates if c.ok]
        assert report.winner.metric == min(values)

    def test_max_direction(self, eval_set):
        metric = Metric("mean", lambda s, r: float(s.mean()), "max")
        report = self.run(eval_set, 3, metric=metric)
        assert report.winner.metric == max(c.metric for c in report.candidates if c.ok)

    def test_invalid_seeds_recorded(self, eval_set):
        # alpha_hat = 0.9 * i / 10 with beta_hat = 0.9 violates alpha^2 < 1 - beta for i >= 4
        report = grid_search_seed(const_ratio(0.3), ORACLE, eval_set, 9, 0.9, beta_floor=1e-4, N_max=10)
        failed = [c for c in report.candidates if not c.ok]
        assert failed and all(c.schedule is None for c in failed)
        assert len(report.candidates) == 81

    def test_shuffle_invariant(self, eval_set):
        base = self.run(eval_set, 3)
        grid = [(i, j) for i in range(1, 4) for j in range(1, 4)]
        random.Random(0).shuffle(grid)
        shuffled = self.run(eval_set, 3, order=grid)
        assert [c.i for c in shuffled.candidates] == [g[0] for g in grid]
        w, v = base.winner, shuffled.winner
        assert (w.i, w.j, w.metric) == (v.i, v.j, v.metric)

    def test_all_fail(self, eval_set):
        with pytest.raises(SearchFailure):
            self.run(eval_set, 1, beta_floor=0.5)

    def test_bad_inputs(self, eval_set):
        with pytest.raises(ContractError):
            self.run(eval_set, 0)
        with pytest.raises(ContractError):
            self.run(np.empty((0, 2)), 1)

    def test_report_json(self, eval_set):
        d = json.loads(json.dumps(self.run(eval_set, 2).to_dict()))
        assert len(d["candidates"]) == 4 and d["metric_name"] == "mmd2"


class TestGsBaseline:
    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_count(self, n):
        assert sum(1 for _ in gs_candidates(n)) == 9**n

    def test_n1_values(self):
        np.testing.assert_allclose([c[0] for c in gs_candidates(1)], np.arange(1, 10) * 1e-6)

    def test_n2_exponents(self):
        cands = np.array(list(gs_candidates(2)))
        np.testing.assert_allclose(np.unique(cands[:, 0]), np.arange(1, 10) * 1e-6)
        np.testing.assert_allclose(np.unique(cands[:, 1]), np.arange(1, 10) * 1e-3)

    def test_refuses_large_n(self):
        with pytest.raises(DomainError, match="9\\^7"):
            next(gs_candidates(7))

    def test_baseline_best(self, eval_set):
        report = gs_baseline(ORACLE, eval_set[:16], 2, sample_count=16)
        assert report.candidate_count == 81
        assert report.best_metric == min(v for v in report.metrics if math.isfinite(v))
        assert report.best_betas.shape == (2,)
