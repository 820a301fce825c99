"""Seeded training loops for the score network and the schedule network."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from bddm.data import DatasetSampler
from bddm.diffusion import C_VARIANTS, DiffusionSpec, forward_diffuse, l_ddpm, linear_schedule, step_loss_terms
from bddm.errors import ContractError, DomainError, ShapeError
from bddm.networks import (
    SCHEDULE_HIDDEN,
    SCORE_HIDDEN,
    ScheduleNet,
    ScoreNet,
    eps_fn_of,
    f_phi,
    new_schedule_net,
    new_score_net,
    score_predict,
)
from bddm.nn import AdamState, Tape, adam_step, clip_global_norm
from bddm.nn import autodiff as ad
from bddm.rng import stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    spec: DiffusionSpec
    steps: int
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    loss_variant: str = "paper"
    grad_clip: float = 10.0
    hidden: tuple[int, ...] | None = None
    activation: str = "tanh"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps <= 0:
            raise ContractError(f"steps must be positive, got {self.steps}")
        if self.batch_size <= 0:
            raise ContractError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if self.loss_variant not in C_VARIANTS:
            raise ContractError(f"loss_variant must be one of {C_VARIANTS}")


@dataclass
class TrainReport:
    loss_curve: list[float]
    seed: int
    skipped: int = 0
    wall_time: float = 0.0
    checkpoints: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        # wall time is left out so identical runs give identical files
        return {"loss_curve": self.loss_curve, "skipped": self.skipped, "seed": self.seed}


CheckpointFn = Callable[[int, object], None]


def _check_dim(x0: np.ndarray, dim: int):
    if x0.ndim != 2 or x0.shape[1] != dim:
        raise ShapeError(f"data sampler yielded shape {x0.shape}, expected (batch, {dim})")


def _optimise(params, grads, state, config):
    grads, _ = clip_global_norm(grads, config.grad_clip)
    return adam_step(params, grads, state, lr=config.lr)


def train_score(
    data_sampler: DatasetSampler,
    config: TrainConfig,
    on_checkpoint: CheckpointFn | None = None,
) -> tuple[ScoreNet, TrainReport]:
    """Fit ``eps(x_t, alpha_t)`` with the DDPM noise-regression loss.

    Each batch element gets its own ``t ~ U{1..T}`` and ``eps ~ N(0, I)``.
    """
    spec = config.spec
    schedule = linear_schedule(spec)
    net = new_score_net(spec.dim, stream(config.seed, "score-init"), config.hidden or SCORE_HIDDEN, config.activation)
    mlp = net.mlp
    state = AdamState.zeros_like(mlp.params)
    report = TrainReport([], config.seed)
    start = time.perf_counter()
    for step in range(config.steps):
        rng = stream(config.seed, "score-step", step)
        x0 = data_sampler.sample(config.batch_size, index=step)
        _check_dim(x0, spec.dim)
        t = rng.integers(1, spec.T + 1, size=config.batch_size)
        eps = rng.standard_normal(x0.shape)
        alpha = schedule.alphas[t - 1]
        x_t = forward_diffuse(x0, alpha, eps)

        tape = Tape()
        params = [tape.variable(p) for p in mlp.params]
        pred = score_predict(ScoreNet(mlp), x_t, alpha, params)
        loss = ad.mean(l_ddpm(eps, pred))
        grads = tape.backward(loss)
        new_params, state = _optimise(mlp.params, [grads[p] for p in params], state, config)
        mlp = mlp.with_params(new_params)

        value = float(loss.value)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite score loss at step {step}")
        report.loss_curve.append(value)
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            report.checkpoints.append(step + 1)
            if on_checkpoint:
                on_checkpoint(step + 1, ScoreNet(mlp))
        if step % 5000 == 0:
            log.debug("score step %d loss %.5f", step, value)
    report.wall_time = time.perf_counter() - start
    return ScoreNet(mlp), report


def sample_junction(schedule, spec: DiffusionSpec, rng: np.random.Generator, batch: int):
    """Draw ``t ~ U{tau..T-tau}`` and the matching step-above quantities.

    Returns ``(t, alpha_t, alpha_hat_next, beta_hat_next)`` where the step above
    spans ``tau`` training steps: ``beta_hat_next = 1 - alpha_{t+tau}^2 / alpha_t^2``
    and ``alpha_hat_next = alpha_{t+tau}``.
    """
    t = rng.integers(spec.tau, spec.T - spec.tau + 1, size=batch)
    if np.any(t < spec.tau) or np.any(t > spec.T - spec.tau):
        raise AssertionError("junction step outside [tau, T - tau]")
    a_t = schedule.alphas[t - 1]
    a_up = schedule.alphas[t + spec.tau - 1]
    return t, a_t, a_up, 1.0 - (a_up / a_t) ** 2


def train_schedule(
    score_net,
    data_sampler: DatasetSampler,
    config: TrainConfig,
    on_checkpoint: CheckpointFn | None = None,
) -> tuple[ScheduleNet, TrainReport]:
    """Fit the schedule network with the step loss while the score net stays frozen.

    Per element: junction ``x_t = alpha_t x_0 + sqrt(1 - alpha_t^2) eps``, the
    step above from :func:`sample_junction`, ``beta_hat_n = f_phi(x_t)``.
    Elements whose ``beta_hat_n`` falls outside ``(0, 1 - alpha_t^2)`` are
    skipped and counted in ``report.skipped``.
    """
    spec = config.spec
    if 2 * spec.tau > spec.T:
        raise DomainError(f"tau={spec.tau} leaves no junction step in [tau, T - tau] for T={spec.T}")
    schedule = linear_schedule(spec)
    eps_fn = eps_fn_of(score_net)
    frozen = [p.copy() for p in score_net.mlp.params] if isinstance(score_net, ScoreNet) else None

    net = new_schedule_net(spec.dim, stream(config.seed, "schedule-init"), config.hidden or SCHEDULE_HIDDEN, config.activation)
    mlp = net.mlp
    state = AdamState.zeros_like(mlp.params)
    report = TrainReport([], config.seed)
    start = time.perf_counter()
    for step in range(config.steps):
        rng = stream(config.seed, "schedule-step", step)
        x0 = data_sampler.sample(config.batch_size, index=step, label="schedule-data")
        _check_dim(x0, spec.dim)
        _, a_t, a_up, b_up = sample_junction(schedule, spec, rng, config.batch_size)
        eps = rng.standard_normal(x0.shape)
        x_t = forward_diffuse(x0, a_t, eps)
        eps_hat = eps_fn(x_t, a_t)
        delta = 1.0 - a_t * a_t

        tape = Tape()
        params = [tape.variable(p) for p in mlp.params]
        beta_n = f_phi(ScheduleNet(mlp), x_t, a_up, b_up, params)
        bv = beta_n.value
        ok = (bv > 0.0) & (bv < delta)
        report.skipped += int(np.count_nonzero(~ok))
        if not ok.any():
            report.loss_curve.append(report.loss_curve[-1] if report.loss_curve else 0.0)
            continue
        safe_beta = ad.where(ok, beta_n, 0.5 * delta)
        norm, log_term, trace = step_loss_terms(eps, eps_hat, a_t, safe_beta, spec.dim, config.loss_variant)
        per_elem = ad.add(ad.add(norm, log_term), trace)
        loss = ad.div(ad.sum(ad.mul(per_elem, ok.astype(np.float64))), float(ok.sum()))
        grads = tape.backward(loss)
        new_params, state = _optimise(mlp.params, [grads[p] for p in params], state, config)
        mlp = mlp.with_params(new_params)

        value = float(loss.value)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite step loss at step {step}")
        report.loss_curve.append(value)
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            report.checkpoints.append(step + 1)
            if on_checkpoint:
                on_checkpoint(step + 1, ScheduleNet(mlp))
    report.wall_time = time.perf_counter() - start
    if frozen is not None:
        for before, after in zip(frozen, score_net.mlp.params):
            if before.tobytes() != after.tobytes():
                raise AssertionError("score network parameters changed during schedule training")
    if report.skipped:
        log.info("schedule training skipped %d of %d elements", report.skipped, config.steps * config.batch_size)
    return ScheduleNet(mlp), report
