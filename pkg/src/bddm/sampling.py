"""Generation with a short schedule through the DDPM or DDIM reverse process."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from bddm.diffusion import VARIANCE_MODES, cumulative_alpha, ddpm_reverse
from bddm.errors import ContractError
from bddm.networks import eps_fn_of
from bddm.rng import per_row_normals
from bddm.scheduling import PredictedSchedule

PROCESSES = ("ddpm", "ddim")


@dataclass(frozen=True)
class SamplerConfig:
    process: str = "ddpm"
    ddim_eta: float = 0.0
    variance_mode: str = "beta_tilde"
    seed: int = 0

    def __post_init__(self):
        if self.process not in PROCESSES:
            raise ContractError(f"process must be one of {PROCESSES}, got {self.process!r}")
        if not (self.ddim_eta >= 0.0 and math.isfinite(self.ddim_eta)):
            raise ContractError("ddim_eta must be a finite non-negative number")
        if self.variance_mode not in VARIANCE_MODES:
            raise ContractError(f"variance_mode must be one of {VARIANCE_MODES}")

    def to_dict(self) -> dict:
        return {"process": self.process, "ddim_eta": self.ddim_eta, "variance_mode": self.variance_mode, "seed": self.seed}


@dataclass(frozen=True)
class SampleBatch:
    samples: np.ndarray
    schedule: PredictedSchedule
    seed: int
    process: str = "ddpm"

    def __post_init__(self):
        if not np.all(np.isfinite(self.samples)):
            raise FloatingPointError("non-finite sample")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{k}" for k in range(self.samples.shape[1])])
        for row in self.samples:
            w.writerow([format(float(v), ".17g") for v in row])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {"count": int(self.samples.shape[0]), "seed": self.seed, "process": self.process, "schedule": self.schedule.to_dict()}


def _as_schedule(schedule) -> PredictedSchedule:
    if isinstance(schedule, PredictedSchedule):
        return schedule
    b = np.asarray(schedule, dtype=np.float64)
    if b.size == 0:
        raise ContractError("cannot sample with an empty schedule")
    return PredictedSchedule(b)


def _prepare(score_net, schedule, count: int, dim: int | None):
    sched = _as_schedule(schedule)
    if count < 0:
        raise ContractError("count must be non-negative")
    if dim is None:
        if not hasattr(score_net, "dim"):
            raise ContractError("pass dim when the score model is a plain callable")
        dim = int(score_net.dim)
    betas = sched.betas_hat
    return sched, betas, cumulative_alpha(betas), eps_fn_of(score_net), dim


def sample_ddpm(score_net, schedule, count: int, config: SamplerConfig, dim: int | None = None) -> SampleBatch:
    """Ancestral sampling: ``x_N ~ N(0, I)`` then reverse steps ``n = N..1``.

    ``alpha_hat`` is the cumulative product of the schedule. The last step
    returns the mean without injected noise.
    """
    sched, betas, alphas, eps_fn, dim = _prepare(score_net, schedule, count, dim)
    n_steps = betas.size
    x = per_row_normals(config.seed, "init", count, (dim,))
    if count == 0:
        return SampleBatch(x, sched, config.seed, "ddpm")
    noise = per_row_normals(config.seed, "noise", count, (n_steps, dim))
    for n in range(n_steps, 0, -1):
        a, b = alphas[n - 1], betas[n - 1]
        post = ddpm_reverse(x, eps_fn(x, a), b, a, config.variance_mode)
        x = post.mean if n == 1 else post.mean + math.sqrt(float(post.variance)) * noise[:, n - 1]
    return SampleBatch(x, sched, config.seed, "ddpm")


def ddim_coefficients(alpha_n: float, alpha_prev: float, beta_n: float, eta: float) -> tuple[float, float]:
    """``(varsigma, sigma)`` for one DDIM step from ``alpha_n`` down to ``alpha_prev``."""
    sigma = eta * math.sqrt((1.0 - alpha_prev**2) / (1.0 - alpha_n**2)) * math.sqrt(beta_n)
    rest = max(1.0 - alpha_prev**2 - sigma**2, 0.0)
    varsigma = math.sqrt(1.0 - alpha_n**2) - (alpha_n / alpha_prev) * math.sqrt(rest)
    return varsigma, sigma


def sample_ddim(score_net, schedule, count: int, config: SamplerConfig, dim: int | None = None) -> SampleBatch:
    """Non-Markovian sampling: ``x_{n-1} = (alpha_{n-1} / alpha_n)(x_n - varsigma eps) + sigma z``.

    ``alpha_0 = 1``. With ``ddim_eta = 0`` no noise is drawn after ``x_N``.
    """
    sched, betas, alphas, eps_fn, dim = _prepare(score_net, schedule, count, dim)
    n_steps = betas.size
    x = per_row_normals(config.seed, "init", count, (dim,))
    if count == 0:
        return SampleBatch(x, sched, config.seed, "ddim")
    noise = per_row_normals(config.seed, "noise", count, (n_steps, dim)) if config.ddim_eta > 0 else None
    for n in range(n_steps, 0, -1):
        a_n = alphas[n - 1]
        a_prev = alphas[n - 2] if n > 1 else 1.0
        varsigma, sigma = ddim_coefficients(a_n, a_prev, betas[n - 1], config.ddim_eta)
        x = (a_prev / a_n) * (x - varsigma * eps_fn(x, a_n))
        if noise is not None and n > 1 and sigma > 0.0:
            x = x + sigma * noise[:, n - 1]
    return SampleBatch(x, sched, config.seed, "ddim")


def sample(score_net, schedule, count: int, config: SamplerConfig, dim: int | None = None) -> SampleBatch:
    fn = sample_ddim if config.process == "ddim" else sample_ddpm
    return fn(score_net, schedule, count, config, dim)
