"""Analytic Gaussian oracle, sample metrics and the bound-tightness sweep."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from bddm.diffusion import (
    DiffusionSpec,
    NoiseSchedule,
    elbo_kl_draws,
    forward_diffuse,
    l_score,
    l_step,
    linear_schedule,
)
from bddm.errors import ContractError, DomainError, ShapeError
from bddm.networks import eps_fn_of

Z95 = 1.959963984540054


@dataclass(frozen=True)
class GaussianDataSpec:
    """Data distribution ``N(mu, s2 I)``."""

    mu: np.ndarray
    s2: float

    def __post_init__(self):
        object.__setattr__(self, "mu", np.atleast_1d(np.asarray(self.mu, dtype=np.float64)))
        if self.s2 < 0:
            raise DomainError("s2 must be non-negative")

    @property
    def dim(self) -> int:
        return self.mu.size

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return self.mu + math.sqrt(self.s2) * rng.standard_normal((count, self.dim))


def analytic_eps(spec: GaussianDataSpec, x_t, alpha_t):
    """``E[eps | x_t]`` under Gaussian data, the exact minimiser of the DDPM loss."""
    a = np.asarray(alpha_t, dtype=np.float64)
    if np.any(a <= 0.0) or np.any(a >= 1.0):
        raise DomainError("alpha_t must lie in (0, 1)")
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape[-1] != spec.dim:
        raise ShapeError(f"expected {spec.dim} features")
    a = a[..., None] if a.ndim else a
    return np.sqrt(1.0 - a * a) * (x_t - a * spec.mu) / (a * a * spec.s2 + 1.0 - a * a)


def oracle_eps_fn(spec: GaussianDataSpec) -> Callable:
    return lambda x, alpha: analytic_eps(spec, x, alpha)


def mmse_risk(spec: GaussianDataSpec, schedule: NoiseSchedule) -> float:
    """Irreducible DDPM loss, averaged uniformly over the training steps."""
    a2 = schedule.alphas**2
    per_t = spec.dim * a2 * spec.s2 / (a2 * spec.s2 + 1.0 - a2)
    return float(np.mean(per_t))


def _as_matrix(batch) -> np.ndarray:
    samples = getattr(batch, "samples", batch)
    return np.atleast_2d(np.asarray(samples, dtype=np.float64))


def median_bandwidth(x, max_points: int = 2000) -> float:
    """Median pairwise distance over (the first ``max_points`` of) ``x``."""
    x = _as_matrix(x)[:max_points]
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    iu = np.triu_indices(len(x), k=1)
    return float(np.sqrt(np.median(d2[iu])))


def _kernel_sum(x, y, h, chunk=2048) -> float:
    """Sum of ``exp(-|x_i - y_j|^2 / 2h^2)`` over all pairs, chunked over rows."""
    total = 0.0
    ysq = np.sum(y * y, axis=1)
    for s in range(0, len(x), chunk):
        xc = x[s : s + chunk]
        d2 = np.maximum(np.sum(xc * xc, axis=1)[:, None] + ysq[None, :] - 2.0 * xc @ y.T, 0.0)
        total += float(np.sum(np.exp(-d2 / (2.0 * h * h))))
    return total


def mmd_rbf(a, b, bandwidth: float | None = None) -> float:
    """Unbiased MMD^2 with an RBF kernel; median heuristic when no bandwidth given."""
    x, y = _as_matrix(a), _as_matrix(b)
    if x.shape[1] != y.shape[1]:
        raise ShapeError("sample sets differ in dimension")
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise ContractError("each sample set needs at least two points")
    h = bandwidth if bandwidth is not None else median_bandwidth(np.vstack([x, y]))
    kxx = (_kernel_sum(x, x, h) - n) / (n * (n - 1))
    kyy = (_kernel_sum(y, y, h) - m) / (m * (m - 1))
    kxy = _kernel_sum(x, y, h) / (n * m)
    return kxx + kyy - 2.0 * kxy


@dataclass(frozen=True)
class BoundSweep:
    """Per-step KL-only bounds; larger (less negative) is tighter."""

    t_values: np.ndarray
    f_elbo: np.ndarray
    f_elbo_half_width: np.ndarray
    f_bddm: np.ndarray
    f_bddm_half_width: np.ndarray
    mc_draws: int
    eval_size: int

    def ordering_fraction(self) -> float:
        return float(np.mean(self.f_bddm >= self.f_elbo))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "f_elbo", "f_elbo_half_width", "f_bddm", "f_bddm_half_width"])
        for row in zip(self.t_values, self.f_elbo, self.f_elbo_half_width, self.f_bddm, self.f_bddm_half_width):
            w.writerow([int(row[0])] + [format(float(v), ".17g") for v in row[1:]])
        return buf.getvalue()


def _mean_hw(x: np.ndarray) -> tuple[float, float]:
    return float(x.mean()), Z95 * float(x.std(ddof=1)) / math.sqrt(x.size)


def bound_sweep(
    score_net_or_oracle,
    spec: DiffusionSpec,
    data_spec: GaussianDataSpec,
    t_values,
    mc_draws: int,
    rng: np.random.Generator,
    eval_size: int = 256,
    c_variant: str = "paper",
) -> BoundSweep:
    """Compare the standard per-step ELBO term with the bilateral bound.

    With the sampling schedule set equal to the training one, at each ``t``:
    ``F_elbo = -KL(q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t))`` and
    ``F_bddm = -L_score + L_step``. The shared reconstruction term is left
    out of both. ``x_0`` cycles through a fixed evaluation set.
    """
    t_values = np.asarray(list(t_values), dtype=int)
    if t_values.size == 0:
        raise ContractError("t_values must be non-empty")
    if np.any(t_values < spec.tau) or np.any(t_values > spec.T - spec.tau):
        raise DomainError(f"t values must lie in [{spec.tau}, {spec.T - spec.tau}]")
    if mc_draws < 2:
        raise ContractError("need at least two draws per step for an interval")
    eps_fn = eps_fn_of(score_net_or_oracle)
    schedule = linear_schedule(spec)
    eval_set = data_spec.sample(eval_size, rng)
    x0 = eval_set[np.arange(mc_draws) % eval_size]
    cols = [[] for _ in range(4)]
    for t in t_values:
        a, b = float(schedule.alpha(t)), float(schedule.beta(t))
        eps = rng.standard_normal(x0.shape)
        elbo = -elbo_kl_draws(schedule, int(t), x0, eps_fn, eps)
        x_t = forward_diffuse(x0, a, eps)
        eps_hat = eps_fn(x_t, a)
        score = l_score(x_t, eps, eps_hat, b, a)
        step = l_step(x0, eps, eps_hat, a, b, spec.dim, c_variant).total
        bddm = -score + step
        for col, v in zip(cols, (*_mean_hw(elbo), *_mean_hw(bddm))):
            col.append(v)
    return BoundSweep(t_values, *(np.array(c) for c in cols), mc_draws=mc_draws, eval_size=eval_size)
