"""Closed-form quantities of Gaussian diffusion processes.

Notation: ``alpha`` is always the *noise scale* ``prod_i sqrt(1 - beta_i)``
(not its square), so ``x_t = alpha_t * x_0 + sqrt(1 - alpha_t**2) * eps``.
Hatted quantities (``beta_hat``, ``alpha_hat``) belong to the short sampling
process, plain ones to the long training process.

The loss functions accept tape variables from :mod:`bddm.nn.autodiff` for the
arguments that are learned (``eps_pred``, ``beta_hat_n``), so the same code
serves as the training objective and as the verification target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from bddm.errors import ContractError, DomainError, ShapeError
from bddm.nn import autodiff as ad

EpsFn = Callable[[np.ndarray, "float | np.ndarray"], np.ndarray]

VARIANCE_MODES = ("beta", "beta_tilde")
C_VARIANTS = ("paper", "exact")


@dataclass(frozen=True)
class DiffusionSpec:
    """Configuration of the training diffusion process and its skip factor."""

    T: int
    beta_start: float
    beta_end: float
    tau: int
    dim: int

    def __post_init__(self):
        if self.T < 1:
            raise DomainError(f"T must be >= 1, got {self.T}")
        if not 0.0 < self.beta_start <= self.beta_end:
            raise DomainError(
                f"need 0 < beta_start <= beta_end, got {self.beta_start}, {self.beta_end}"
            )
        if self.beta_end >= 1.0:
            raise DomainError(f"beta_end must be < 1, got {self.beta_end}")
        if not 1 <= self.tau < self.T:
            raise DomainError(f"need 1 <= tau < T, got tau={self.tau}, T={self.T}")
        if self.dim < 1:
            raise DomainError(f"dim must be >= 1, got {self.dim}")

    @property
    def N(self) -> int:
        return self.T // self.tau

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "tau": self.tau,
            "dim": self.dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSpec":
        return cls(
            T=int(d["T"]),
            beta_start=float(d["beta_start"]),
            beta_end=float(d["beta_end"]),
            tau=int(d["tau"]),
            dim=int(d["dim"]),
        )


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step variances ``betas`` and the derived noise scales ``alphas``.

    ``alphas[k]`` is the noise scale after step ``k + 1``; the boundary value
    for "step 0" is 1 and is available through :meth:`alpha`.
    """

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64).reshape(-1)
        alphas = cumulative_alpha(betas)
        betas.flags.writeable = False
        alphas.flags.writeable = False
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)

    def __len__(self) -> int:
        return len(self.betas)

    def alpha(self, t):
        """Noise scale at (1-based) step ``t``; ``t = 0`` gives 1."""
        padded = np.concatenate([[1.0], self.alphas])
        return padded[t]

    def beta(self, t):
        """Variance of (1-based) step ``t``."""
        return self.betas[np.asarray(t) - 1]


@dataclass(frozen=True)
class IsotropicGaussian:
    """``N(mean, variance * I)``; a zero variance denotes a point mass."""

    mean: np.ndarray
    variance: float | np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.variance) < 0.0):
            raise DomainError("variance must be non-negative")

    @property
    def dim(self) -> int:
        return np.shape(self.mean)[-1]


@dataclass(frozen=True)
class StepLossBreakdown:
    norm_term: float | np.ndarray
    log_term: float | np.ndarray
    trace_term: float | np.ndarray
    total: float | np.ndarray
    delta_t: float | np.ndarray


def linear_betas(T: int, beta_start: float, beta_end: float) -> np.ndarray:
    """``beta_t = beta_start + (t / T)(beta_end - beta_start)`` for ``t = 1..T``."""
    if not 0.0 < beta_start <= beta_end:
        raise DomainError("need 0 < beta_start <= beta_end")
    if beta_end >= 1.0:
        raise DomainError("beta_end must be < 1")
    t = np.arange(1, T + 1, dtype=np.float64)
    betas = beta_start + (t / T) * (beta_end - beta_start)
    betas[-1] = beta_end
    return betas


def linear_schedule(spec: DiffusionSpec) -> NoiseSchedule:
    return NoiseSchedule(linear_betas(spec.T, spec.beta_start, spec.beta_end))


def cumulative_alpha(betas) -> np.ndarray:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.size and not np.all((betas > 0.0) & (betas < 1.0)):
        raise DomainError("every beta must lie strictly inside (0, 1)")
    return np.sqrt(np.cumprod(1.0 - betas))


def forward_diffuse(x0, alpha_t, eps):
    """Sample of ``q(x_t | x_0)`` given the standard normal draw ``eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape[-1:] != eps.shape[-1:]:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} disagree")
    alpha_t = np.asarray(alpha_t, dtype=np.float64)
    if np.any(alpha_t <= 0.0) or np.any(alpha_t > 1.0):
        raise DomainError("alpha_t must lie in (0, 1]")
    a = alpha_t[..., None] if alpha_t.ndim else alpha_t
    return a * x0 + np.sqrt(1.0 - a * a) * eps


def skipped_forward_variance(alpha_t, alpha_t_plus_tau):
    """Variance of ``q(x_{t+tau} | x_t)``, i.e. ``1 - alpha_{t+tau}^2 / alpha_t^2``."""
    a0 = np.asarray(alpha_t, dtype=np.float64)
    a1 = np.asarray(alpha_t_plus_tau, dtype=np.float64)
    if np.any(a1 <= 0.0) or np.any(a1 >= a0) or np.any(a0 > 1.0):
        raise DomainError("need 0 < alpha_{t+tau} < alpha_t <= 1")
    return 1.0 - (a1 / a0) ** 2


def _col(v):
    """Broadcast a per-row scalar against a trailing feature axis."""
    v = ad.value(v)
    return v[..., None] if np.ndim(v) else v


def reparam_posterior(x_t, eps_hat, beta_hat_n, alpha_hat_n) -> IsotropicGaussian:
    """Posterior of the short process with ``x_0`` re-expressed through ``eps_hat``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ShapeError(f"x_t {x_t.shape} and eps_hat {eps_hat.shape} disagree")
    b = np.asarray(beta_hat_n, dtype=np.float64)
    a2 = np.asarray(alpha_hat_n, dtype=np.float64) ** 2
    if np.any(b <= 0.0) or np.any(b >= 1.0 - a2):
        raise DomainError("need 0 < beta_hat_n < 1 - alpha_hat_n^2 (degenerate posterior)")
    bc, a2c = _col(b), _col(a2)
    mean = x_t / np.sqrt(1.0 - bc) - bc * eps_hat / np.sqrt((1.0 - bc) * (1.0 - a2c))
    alpha_prev2 = a2 / (1.0 - b)
    variance = (1.0 - alpha_prev2) / (1.0 - a2) * b
    return IsotropicGaussian(mean, variance)


def ddpm_reverse(x_t, eps_pred, beta_t, alpha_t, variance_mode: str = "beta_tilde") -> IsotropicGaussian:
    """Reverse transition ``p(x_{t-1} | x_t)`` of a noise-predicting DDPM."""
    if variance_mode not in VARIANCE_MODES:
        raise ContractError(f"variance_mode must be one of {VARIANCE_MODES}, got {variance_mode!r}")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if x_t.shape != eps_pred.shape:
        raise ShapeError(f"x_t {x_t.shape} and eps_pred {eps_pred.shape} disagree")
    b = np.asarray(beta_t, dtype=np.float64)
    a = np.asarray(alpha_t, dtype=np.float64)
    if np.any(b <= 0.0) or np.any(b >= 1.0) or np.any(a <= 0.0) or np.any(a >= 1.0):
        raise DomainError("need beta_t and alpha_t inside (0, 1)")
    bc, ac = _col(b), _col(a)
    mean = (x_t - bc * eps_pred / np.sqrt(1.0 - ac * ac)) / np.sqrt(1.0 - bc)
    if variance_mode == "beta":
        variance = b
    else:
        alpha_prev2 = np.minimum(a * a / (1.0 - b), 1.0)
        variance = (1.0 - alpha_prev2) / (1.0 - a * a) * b
    return IsotropicGaussian(mean, variance)


def forward_posterior(x_t, x0, beta_t, alpha_t) -> IsotropicGaussian:
    """``q(x_{t-1} | x_t, x_0)`` of the training process (mean linear in x_t, x_0)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    b = np.asarray(beta_t, dtype=np.float64)
    a2 = np.asarray(alpha_t, dtype=np.float64) ** 2
    alpha_prev2 = np.minimum(a2 / (1.0 - b), 1.0)
    bc, a2c, ap2c = _col(b), _col(a2), _col(alpha_prev2)
    mean = (np.sqrt(ap2c) * bc / (1.0 - a2c)) * x0 + (
        np.sqrt(1.0 - bc) * (1.0 - ap2c) / (1.0 - a2c)
    ) * x_t
    variance = (1.0 - alpha_prev2) / (1.0 - a2) * b
    return IsotropicGaussian(mean, variance)


def l_ddpm(eps_true, eps_pred):
    """Squared error ``||eps_true - eps_pred||^2`` summed over the last axis."""
    if np.shape(ad.value(eps_true)) != np.shape(ad.value(eps_pred)):
        raise ShapeError("eps_true and eps_pred disagree in shape")
    return ad.sum(ad.square(ad.sub(eps_true, eps_pred)), axis=-1)


def beta_upper_bound(alpha_hat_next, beta_hat_next):
    """Largest admissible ``beta_hat_n`` given the step above it.

    ``min(1 - alpha_hat_{n+1}^2 / (1 - beta_hat_{n+1}), beta_hat_{n+1})``; any
    value strictly below keeps the schedule increasing and ``alpha_hat_{n-1} < 1``.
    """
    a = np.asarray(alpha_hat_next, dtype=np.float64)
    b = np.asarray(beta_hat_next, dtype=np.float64)
    ok = (a > 0.0) & (a < 1.0) & (b > 0.0) & (b < 1.0) & (a * a < 1.0 - b)
    if not np.all(ok):
        raise DomainError(
            "need alpha_hat, beta_hat in (0, 1) and alpha_hat^2 < 1 - beta_hat"
        )
    return np.minimum(1.0 - a * a / (1.0 - b), b)


def gaussian_kl_isotropic(p: IsotropicGaussian, q: IsotropicGaussian):
    """``KL(p || q)`` for isotropic Gaussians of equal dimension."""
    mp, mq = np.asarray(p.mean, dtype=np.float64), np.asarray(q.mean, dtype=np.float64)
    if mp.shape[-1] != mq.shape[-1]:
        raise ShapeError(f"dimension mismatch: {mp.shape[-1]} vs {mq.shape[-1]}")
    vp, vq = np.asarray(p.variance, dtype=np.float64), np.asarray(q.variance, dtype=np.float64)
    if np.any(vp <= 0.0) or np.any(vq <= 0.0):
        raise DomainError("KL needs strictly positive variances")
    d = mp.shape[-1]
    sq = np.sum((mp - mq) ** 2, axis=-1)
    return 0.5 * (d * vp / vq - d + d * np.log(vq / vp) + sq / vq)


def l_score(x_t, eps_true, eps_pred, beta_hat_n, alpha_hat_n):
    """KL between the reverse step and the re-parameterised posterior.

    Both share a variance, so the KL collapses to
    ``beta_hat / (2 (1 - beta_hat - alpha_hat^2)) * ||eps_true - eps_pred||^2``.
    ``x_t`` cancels out and is accepted only for interface symmetry.
    """
    b = np.asarray(beta_hat_n, dtype=np.float64)
    denom = 1.0 - b - np.asarray(alpha_hat_n, dtype=np.float64) ** 2
    if np.any(denom <= 0.0) or np.any(b <= 0.0):
        raise DomainError("need 0 < beta_hat_n < 1 - alpha_hat_n^2")
    return ad.mul(b / (2.0 * denom), l_ddpm(eps_true, eps_pred))


def step_loss_terms(eps, eps_pred, alpha_t, beta_hat_n, dim: int, c_variant: str = "paper"):
    """Differentiable pieces ``(norm, log, trace)`` of the step loss.

    No domain checks; :func:`l_step` validates before delegating here.
    ``beta_hat_n`` may be a tape variable.
    """
    delta = 1.0 - np.asarray(alpha_t, dtype=np.float64) ** 2
    ratio = ad.div(beta_hat_n, delta)
    resid = ad.sub(eps, ad.mul(_col_var(ratio), eps_pred))
    norm = ad.mul(ad.div(delta, ad.mul(2.0, ad.sub(delta, beta_hat_n))), ad.sum(ad.square(resid), axis=-1))
    coef = 0.25 if c_variant == "paper" else 0.5 * dim
    log_term = ad.mul(-coef, ad.log(ratio))
    trace = ad.mul(0.5 * dim, ad.sub(ratio, 1.0))
    return norm, log_term, trace


def _col_var(v):
    if isinstance(v, ad.Var):
        if v.ndim == 0:
            return v
        return _expand_last(v)
    return _col(v)


def _expand_last(v: ad.Var) -> ad.Var:
    return v.tape.record(v.value[..., None], [(v, lambda g: g[..., 0])])


def l_step(x0, eps, eps_pred, alpha_t, beta_hat_n, dim: int | None = None, c_variant: str = "paper") -> StepLossBreakdown:
    """Loss for the schedule network at junctional noise scale ``alpha_t``.

    ``delta_t / (2 (delta_t - beta_hat)) ||eps - (beta_hat / delta_t) eps_pred||^2 + C``
    with ``delta_t = 1 - alpha_t^2``. The constant ``C`` is
    ``k log(delta_t / beta_hat) + (D/2)(beta_hat / delta_t - 1)`` where ``k`` is
    1/4 for ``c_variant="paper"`` and ``D/2`` for ``"exact"``; only the exact
    variant equals the Gaussian KL. ``x0`` is implied by ``eps`` and ``alpha_t``.
    """
    if c_variant not in C_VARIANTS:
        raise ContractError(f"c_variant must be one of {C_VARIANTS}, got {c_variant!r}")
    eps_v = np.asarray(ad.value(eps))
    if eps_v.shape != np.shape(ad.value(eps_pred)) or eps_v.shape != np.shape(x0):
        raise ShapeError("x0, eps and eps_pred must share a shape")
    if dim is None:
        dim = eps_v.shape[-1]
    if dim != eps_v.shape[-1]:
        raise ShapeError(f"dim={dim} but data has {eps_v.shape[-1]} entries")
    a = np.asarray(alpha_t, dtype=np.float64)
    delta = 1.0 - a * a
    b = np.asarray(ad.value(beta_hat_n), dtype=np.float64)
    if np.any(b <= 0.0) or np.any(b >= delta) or np.any(delta >= 1.0):
        raise DomainError("need 0 < beta_hat_n < delta_t < 1")
    norm, log_term, trace = step_loss_terms(eps, eps_pred, a, beta_hat_n, dim, c_variant)
    total = ad.add(ad.add(norm, log_term), trace)
    return StepLossBreakdown(norm, log_term, trace, total, delta)


def step_loss_pair(x0, alpha_t, beta_hat_n, eps_pred, x_t) -> tuple[IsotropicGaussian, IsotropicGaussian]:
    """The two Gaussians whose KL the exact step loss equals.

    First: the reverse step from ``x_t`` with ``alpha_hat_n = alpha_t``.
    Second: ``N(alpha_t x0 / sqrt(1 - b), (1 - alpha_t^2 - b) / (1 - b))``.
    """
    b = np.asarray(beta_hat_n, dtype=np.float64)
    a = np.asarray(alpha_t, dtype=np.float64)
    p = ddpm_reverse(x_t, eps_pred, b, a, "beta_tilde")
    q = IsotropicGaussian(
        _col(a) * np.asarray(x0) / np.sqrt(1.0 - _col(b)), (1.0 - a * a - b) / (1.0 - b)
    )
    return p, q


def r_theta(x0, x1_samples, eps_pred_fn: EpsFn, beta_1: float, alpha_1: float) -> float:
    """Monte-Carlo reconstruction term ``-E log p(x_0 | x_1)``.

    ``(D/2) log(2 pi beta_1) + E||x0 - (x1 - sqrt(beta_1) eps(x1, alpha_1)) / sqrt(1 - beta_1)||^2 / (2 beta_1)``.
    """
    x1 = np.atleast_2d(np.asarray(x1_samples, dtype=np.float64))
    if x1.shape[0] == 0:
        raise ContractError("r_theta needs at least one x1 sample")
    if not 0.0 < beta_1 < 1.0:
        raise DomainError("beta_1 must lie in (0, 1)")
    x0 = np.asarray(x0, dtype=np.float64)
    d = x1.shape[-1]
    recon = (x1 - math.sqrt(beta_1) * eps_pred_fn(x1, alpha_1)) / math.sqrt(1.0 - beta_1)
    sq = np.sum((x0 - recon) ** 2, axis=-1)
    return 0.5 * d * math.log(2.0 * math.pi * beta_1) + float(np.mean(sq)) / (2.0 * beta_1)


@dataclass(frozen=True)
class ElboTerms:
    """Per-step KL terms (``t = 2..T``) with their standard errors."""

    t_values: np.ndarray
    kl: np.ndarray
    kl_stderr: np.ndarray
    reconstruction: float
    prior: float

    @property
    def f_elbo(self) -> float:
        return -float(np.sum(self.kl)) - self.reconstruction - self.prior


def elbo_kl_draws(schedule: NoiseSchedule, t: int, x0, eps_pred_fn: EpsFn, eps, variance_mode="beta_tilde"):
    """``KL(q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t))`` for each row of ``eps`` (t >= 2)."""
    a_t = float(schedule.alpha(t))
    b_t = float(schedule.beta(t))
    x_t = forward_diffuse(x0, a_t, eps)
    q = forward_posterior(x_t, x0, b_t, a_t)
    p = ddpm_reverse(x_t, eps_pred_fn(x_t, a_t), b_t, a_t, variance_mode)
    return gaussian_kl_isotropic(q, p)


def elbo_terms(
    schedule: NoiseSchedule,
    x0,
    eps_pred_fn: EpsFn,
    mc_draws: int,
    rng: np.random.Generator,
    variance_mode: str = "beta_tilde",
) -> ElboTerms:
    """Monte-Carlo estimate of every term of the standard diffusion ELBO.

    ``x0`` is one data point ``(D,)`` or an evaluation set ``(B, D)`` that is
    cycled through the ``mc_draws`` draws of each step. The decoder
    ``p(x_0 | x_1)`` uses variance ``beta_1``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if mc_draws < 1:
        raise ContractError("mc_draws must be positive")
    d = x0.shape[1]
    rows = x0[np.arange(mc_draws) % x0.shape[0]]
    T = len(schedule)
    ts = np.arange(2, T + 1)
    kl = np.zeros(len(ts))
    se = np.zeros(len(ts))
    for k, t in enumerate(ts):
        draws = elbo_kl_draws(schedule, int(t), rows, eps_pred_fn, rng.standard_normal(rows.shape), variance_mode)
        kl[k] = draws.mean()
        se[k] = draws.std(ddof=1) / math.sqrt(mc_draws) if mc_draws > 1 else 0.0
    a1, b1 = float(schedule.alpha(1)), float(schedule.beta(1))
    x1 = forward_diffuse(rows, a1, rng.standard_normal(rows.shape))
    mean1 = ddpm_reverse(x1, eps_pred_fn(x1, a1), b1, a1, "beta").mean
    recon = float(np.mean(0.5 * d * math.log(2.0 * math.pi * b1) + np.sum((rows - mean1) ** 2, axis=-1) / (2.0 * b1)))
    aT = float(schedule.alpha(T))
    prior_each = 0.5 * (d * (1.0 - aT**2) - d + np.sum((aT * x0) ** 2, axis=-1) - d * math.log(1.0 - aT**2))
    return ElboTerms(ts, kl, se, recon, float(np.mean(prior_each)))
