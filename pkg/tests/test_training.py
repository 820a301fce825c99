import json

import numpy as np
import pytest

import bddm.training as training
from bddm.data import gaussian
from bddm.diffusion import DiffusionSpec, linear_schedule
from bddm.errors import ContractError, DomainError, ShapeError
from bddm.evaluation import GaussianDataSpec, oracle_eps_fn
from bddm.networks import new_score_net
from bddm.nn import autodiff as ad
from bddm.training import TrainConfig, sample_junction, train_schedule, train_score

SPEC = DiffusionSpec(200, 1e-4, 0.02, 20, 1)
SMALL = (16, 16)


def cfg(steps, **kw):
    kw.setdefault("hidden", SMALL)
    kw.setdefault("batch_size", 32)
    return TrainConfig(SPEC, steps=steps, **kw)


class TestConfig:
    @pytest.mark.parametrize(
        "kw", [{"steps": 0}, {"steps": 1, "batch_size": 0}, {"steps": 1, "lr": 0.0}, {"steps": 1, "loss_variant": "x"}]
    )
    def test_rejected(self, kw):
        with pytest.raises(ContractError):
            TrainConfig(SPEC, **kw)

    def test_tau_66_accepted(self):
        spec = DiffusionSpec(200, 1e-4, 0.02, 66, 1)
        _, report = train_schedule(
            oracle_eps_fn(GaussianDataSpec([2.0], 1.0)), gaussian([2.0], 1.0), TrainConfig(spec, steps=3, hidden=SMALL)
        )
        assert len(report.loss_curve) == 3

    def test_tau_ge_t_is_domain_error(self):
        with pytest.raises(DomainError):
            DiffusionSpec(10, 1e-4, 0.02, 10, 1)

    def test_tau_beyond_half_t(self):
        spec = DiffusionSpec(10, 1e-4, 0.02, 6, 1)
        with pytest.raises(DomainError):
            train_schedule(lambda x, a: x, gaussian([0.0], 1.0), TrainConfig(spec, steps=1, hidden=SMALL))


class TestTrainScore:
    def test_deterministic(self):
        a, ra = train_score(gaussian([2.0], 1.0, seed=3), cfg(20, seed=5))
        b, rb = train_score(gaussian([2.0], 1.0, seed=3), cfg(20, seed=5))
        for p, q in zip(a.mlp.params, b.mlp.params):
            assert p.tobytes() == q.tobytes()
        assert ra.loss_curve == rb.loss_curve

    def test_seed_matters(self):
        a, _ = train_score(gaussian([2.0], 1.0), cfg(5, seed=1))
        b, _ = train_score(gaussian([2.0], 1.0), cfg(5, seed=2))
        assert not np.array_equal(a.mlp.params[0], b.mlp.params[0])

    def test_curve_length_and_finite(self):
        _, report = train_score(gaussian([2.0], 1.0), cfg(30))
        assert len(report.loss_curve) == 30
        assert np.all(np.isfinite(report.loss_curve))

    def test_wrong_dim(self):
        with pytest.raises(ShapeError):
            train_score(gaussian([0.0, 1.0], 1.0), cfg(2))

    def test_report_json(self):
        _, report = train_score(gaussian([2.0], 1.0), cfg(3, seed=9))
        d = json.loads(json.dumps(report.to_dict()))
        assert set(d) == {"loss_curve", "skipped", "seed"}
        assert d["seed"] == 9

    def test_checkpoints(self):
        seen = []
        _, report = train_score(gaussian([2.0], 1.0), cfg(10, checkpoint_every=4), lambda k, net: seen.append(k))
        assert seen == [4, 8] == report.checkpoints

    def test_loss_goes_down(self):
        _, report = train_score(gaussian([2.0], 1.0), cfg(400, lr=3e-3))
        curve = np.array(report.loss_curve)
        assert np.mean(curve[-50:]) < np.mean(curve[:50])


class TestTrainSchedule:
    def test_score_params_frozen(self):
        score = new_score_net(1, np.random.default_rng(0), hidden=SMALL)
        before = [p.tobytes() for p in score.mlp.params]
        train_schedule(score, gaussian([2.0], 1.0), cfg(5))
        assert [p.tobytes() for p in score.mlp.params] == before

    def test_deterministic(self):
        oracle = oracle_eps_fn(GaussianDataSpec([2.0], 1.0))
        a, _ = train_schedule(oracle, gaussian([2.0], 1.0), cfg(10, seed=4))
        b, _ = train_schedule(oracle, gaussian([2.0], 1.0), cfg(10, seed=4))
        for p, q in zip(a.mlp.params, b.mlp.params):
            assert p.tobytes() == q.tobytes()

    def test_loss_decreases_with_oracle_score(self):
        # narrow data so that x_t carries information about the noise level
        oracle = oracle_eps_fn(GaussianDataSpec([2.0], 0.01))
        _, report = train_schedule(oracle, gaussian([2.0], 0.01), TrainConfig(SPEC, steps=1000, batch_size=64, seed=0))
        curve = np.array(report.loss_curve)
        k = len(curve) // 10
        assert np.median(curve[-k:]) < np.median(curve[:k])
        assert np.all(np.isfinite(curve))

    def test_junction_steps_in_range(self):
        schedule = linear_schedule(SPEC)
        t, a_t, a_up, b_up = sample_junction(schedule, SPEC, np.random.default_rng(0), 100_000)
        assert t.min() == SPEC.tau and t.max() == SPEC.T - SPEC.tau
        np.testing.assert_allclose(a_t, schedule.alphas[t - 1])
        np.testing.assert_allclose(b_up, 1 - schedule.alphas[t + SPEC.tau - 1] ** 2 / a_t**2)
        # the step above always caps beta_hat_n below delta_t
        assert np.all(np.minimum(1 - a_up**2 / (1 - b_up), b_up) <= 1 - a_t**2 + 1e-15)

    def test_out_of_range_elements_skipped(self, monkeypatch):
        real = training.f_phi

        def inflated(net, x, a, b, params=None):
            scale = np.where(np.arange(len(x)) % 2 == 0, 1.0, 1e6)
            return ad.mul(real(net, x, a, b, params), scale)

        monkeypatch.setattr(training, "f_phi", inflated)
        _, report = train_schedule(lambda x, a: np.zeros_like(x), gaussian([2.0], 1.0), cfg(4, batch_size=10))
        assert report.skipped == 4 * 5
        assert np.all(np.isfinite(report.loss_curve))

    def test_all_skipped_keeps_curve_length(self, monkeypatch):
        real = training.f_phi
        monkeypatch.setattr(training, "f_phi", lambda *a, **k: ad.mul(real(*a, **k), 1e6))
        _, report = train_schedule(lambda x, a: np.zeros_like(x), gaussian([2.0], 1.0), cfg(3, batch_size=4))
        assert report.skipped == 12
        assert len(report.loss_curve) == 3
