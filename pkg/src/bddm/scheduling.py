"""Noise-schedule prediction, the seed grid search and the exhaustive baseline."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from bddm.diffusion import beta_upper_bound, ddpm_reverse
from bddm.evaluation import median_bandwidth, mmd_rbf
from bddm.errors import ContractError, DomainError, EmptyScheduleError, SearchFailure
from bddm.networks import ScheduleNet, eps_fn_of, sigma_ratio
from bddm.rng import stream

log = logging.getLogger(__name__)

GS_MAX_STEPS = 6


@dataclass(frozen=True)
class ScheduleSeed:
    alpha_hat_N: float
    beta_hat_N: float
    N_max: int
    beta_floor: float

    def __post_init__(self):
        a, b = self.alpha_hat_N, self.beta_hat_N
        if not (0.0 < a < 1.0 and 0.0 < b < 1.0):
            raise DomainError(f"seed ({a}, {b}) must lie in (0, 1)^2")
        if not a * a < 1.0 - b:
            raise DomainError(f"seed ({a}, {b}) violates alpha_hat_N^2 < 1 - beta_hat_N")
        if self.N_max < 1:
            raise ContractError("N_max must be at least 1")
        if not 0.0 < self.beta_floor < 1.0:
            raise DomainError("beta_floor must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "alpha_hat_N": self.alpha_hat_N,
            "beta_hat_N": self.beta_hat_N,
            "N_max": self.N_max,
            "beta_floor": self.beta_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleSeed":
        return cls(float(d["alpha_hat_N"]), float(d["beta_hat_N"]), int(d["N_max"]), float(d["beta_floor"]))


@dataclass(frozen=True)
class PredictedSchedule:
    """Ascending sampling schedule ``betas_hat[0] = beta_hat_1``.

    ``alphas_hat`` holds the noise scales computed backwards from the seed
    during prediction; the sampler rebuilds its own from the betas.
    """

    betas_hat: np.ndarray
    seed: ScheduleSeed | None = None
    alphas_hat: np.ndarray | None = None

    def __post_init__(self):
        b = np.asarray(self.betas_hat, dtype=np.float64).copy()
        b.setflags(write=False)
        object.__setattr__(self, "betas_hat", b)
        if self.alphas_hat is not None:
            a = np.asarray(self.alphas_hat, dtype=np.float64).copy()
            a.setflags(write=False)
            object.__setattr__(self, "alphas_hat", a)
        validate_schedule(self)

    def __len__(self) -> int:
        return self.betas_hat.size

    def to_dict(self) -> dict:
        d = {"betas_hat": self.betas_hat.tolist()}
        if self.seed is not None:
            d["seed"] = {"alpha_hat_N": self.seed.alpha_hat_N, "beta_hat_N": self.seed.beta_hat_N}
            d["N_max"] = self.seed.N_max
            d["beta_floor"] = self.seed.beta_floor
        if self.alphas_hat is not None:
            d["alphas_hat"] = self.alphas_hat.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictedSchedule":
        seed = None
        if "seed" in d:
            seed = ScheduleSeed(
                float(d["seed"]["alpha_hat_N"]), float(d["seed"]["beta_hat_N"]), int(d["N_max"]), float(d["beta_floor"])
            )
        alphas = d.get("alphas_hat")
        return cls(np.asarray(d["betas_hat"], dtype=np.float64), seed, None if alphas is None else np.asarray(alphas))


def validate_schedule(schedule: PredictedSchedule) -> None:
    """Check the emission invariants; raise :class:`DomainError` on violation."""
    b = schedule.betas_hat
    if b.ndim != 1 or b.size == 0:
        raise EmptyScheduleError("schedule must be a non-empty vector")
    if not np.all(np.isfinite(b)) or np.any(b <= 0.0) or np.any(b >= 1.0):
        raise DomainError("schedule entries must lie in (0, 1)")
    if np.any(np.diff(b) <= 0.0):
        raise DomainError("schedule must be strictly increasing")
    seed = schedule.seed
    if seed is not None:
        if b.size > seed.N_max:
            raise DomainError(f"schedule has {b.size} steps, more than N_max={seed.N_max}")
        if np.any(b < seed.beta_floor):
            raise DomainError("schedule entry below beta_floor")
    a = schedule.alphas_hat
    if a is not None:
        if a.shape != b.shape:
            raise DomainError("alphas_hat and betas_hat differ in length")
        if b.size > 1 and np.any(b[:-1] >= beta_upper_bound(a[1:], b[1:])):
            raise DomainError("schedule entry violates the upper bound set by its successor")


def _ratio_fn(schedule_net) -> Callable:
    if isinstance(schedule_net, ScheduleNet):
        return lambda x: sigma_ratio(schedule_net, x)
    if callable(schedule_net):
        return schedule_net
    raise TypeError("expected a ScheduleNet or a ratio(x) callable")


def predict_schedule(
    schedule_net,
    score_net,
    seed: ScheduleSeed,
    rng: np.random.Generator,
    probe_size: int = 16,
    dim: int | None = None,
) -> PredictedSchedule:
    """Predict a short schedule backwards from ``seed``.

    Starting from ``x_N ~ N(0, I)`` on a probe batch, each iteration takes a
    DDPM reverse step (tilde-beta variance) with the current step, updates
    ``alpha_hat_n = alpha_hat_{n+1} / sqrt(1 - beta_hat_{n+1})`` and sets
    ``beta_hat_n`` to ``f_phi`` averaged over the probe batch. Prediction stops
    once ``beta_hat_n`` drops below ``seed.beta_floor`` or ``N_max`` steps exist.
    """
    if probe_size < 1:
        raise ContractError("probe_size must be positive")
    ratio = _ratio_fn(schedule_net)
    eps_fn = eps_fn_of(score_net)
    if seed.beta_hat_N < seed.beta_floor:
        raise EmptyScheduleError(
            f"beta_hat_N={seed.beta_hat_N} is already below beta_floor={seed.beta_floor}; no step survives"
        )
    dim = dim or _dim_of(schedule_net, score_net)
    x = rng.standard_normal((probe_size, dim))
    alphas, betas = [seed.alpha_hat_N], [seed.beta_hat_N]
    while len(betas) < seed.N_max:
        a_next, b_next = alphas[-1], betas[-1]
        post = ddpm_reverse(x, eps_fn(x, a_next), b_next, a_next, "beta_tilde")
        x = post.mean + np.sqrt(post.variance) * rng.standard_normal(x.shape)
        a_n = a_next / math.sqrt(1.0 - b_next)
        b_n = float(np.mean(beta_upper_bound(a_next, b_next) * np.asarray(ratio(x))))
        if b_n < seed.beta_floor:
            break
        alphas.append(a_n)
        betas.append(b_n)
    return PredictedSchedule(np.array(betas[::-1]), seed, np.array(alphas[::-1]))


def _dim_of(schedule_net, score_net) -> int:
    for net in (schedule_net, score_net):
        if hasattr(net, "dim"):
            return int(net.dim)
    raise ContractError("cannot infer the data dimension from callables; pass a network")


@dataclass(frozen=True)
class Metric:
    """Sample-quality metric ``fn(samples, reference) -> float``."""

    name: str
    fn: Callable[[np.ndarray, np.ndarray], float]
    direction: str = "min"

    def __post_init__(self):
        if self.direction not in ("min", "max"):
            raise ContractError("direction must be 'min' or 'max'")

    def better(self, a: float, b: float) -> bool:
        return a < b if self.direction == "min" else a > b


def mmd_metric(reference: np.ndarray) -> Metric:
    """MMD^2 with the bandwidth fixed from ``reference`` so candidates share a kernel."""
    h = median_bandwidth(reference)
    return Metric("mmd2", lambda s, r: mmd_rbf(s, r, h), "min")


@dataclass(frozen=True)
class Candidate:
    i: int
    j: int
    alpha_hat_N: float
    beta_hat_N: float
    schedule: PredictedSchedule | None
    metric: float | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {
            "i": self.i,
            "j": self.j,
            "alpha_hat_N": self.alpha_hat_N,
            "beta_hat_N": self.beta_hat_N,
            "steps": None if self.schedule is None else len(self.schedule),
            "betas_hat": None if self.schedule is None else self.schedule.betas_hat.tolist(),
            "metric": self.metric,
            "error": self.error,
        }


@dataclass(frozen=True)
class ScheduleSearchReport:
    candidates: list[Candidate]
    best: int
    metric_name: str
    direction: str

    @property
    def winner(self) -> Candidate:
        return self.candidates[self.best]

    def to_dict(self) -> dict:
        return {
            "metric_name": self.metric_name,
            "direction": self.direction,
            "best": self.best,
            "candidates": [c.to_dict() for c in self.candidates],
        }


def _select(candidates: list[Candidate], metric: Metric) -> int:
    best = None
    for k, c in enumerate(candidates):
        if not c.ok:
            continue
        if best is None:
            best = k
            continue
        b = candidates[best]
        # ties go to the smaller (i, j) so the result never depends on order
        if metric.better(c.metric, b.metric) or (c.metric == b.metric and (c.i, c.j) < (b.i, b.j)):
            best = k
    if best is None:
        raise SearchFailure("every seed candidate failed")
    return best


def grid_search_seed(
    schedule_net,
    score_net,
    eval_set: np.ndarray,
    M: int,
    alpha_T: float,
    metric: Metric | None = None,
    *,
    beta_floor: float,
    N_max: int,
    seed: int = 0,
    sample_count: int | None = None,
    sampler_config=None,
    probe_size: int = 16,
    order: list[tuple[int, int]] | None = None,
) -> ScheduleSearchReport:
    """Try every seed ``(0.1 alpha_T i, 0.1 j)`` for ``i, j = 1..M``.

    Each candidate predicts a schedule, draws ``sample_count`` points with it
    and scores them against ``eval_set``. Randomness for a candidate depends
    only on ``(seed, i, j)``, so ``order`` (a permutation of the grid) changes
    the row order but not the winner.
    """
    from bddm.sampling import SamplerConfig, sample

    if M < 1:
        raise ContractError("M must be at least 1")
    eval_set = np.atleast_2d(np.asarray(eval_set, dtype=np.float64))
    if eval_set.shape[0] == 0:
        raise ContractError("eval_set must be non-empty")
    metric = metric or mmd_metric(eval_set)
    cfg = sampler_config or SamplerConfig()
    count = sample_count or eval_set.shape[0]
    grid = [(i, j) for i in range(1, M + 1) for j in range(1, M + 1)]
    if order is not None:
        if sorted(order) != grid:
            raise ContractError("order must be a permutation of the seed grid")
        grid = list(order)
    candidates = []
    for i, j in grid:
        a, b = 0.1 * alpha_T * i, 0.1 * j
        try:
            s = ScheduleSeed(a, b, N_max, beta_floor)
            sched = predict_schedule(schedule_net, score_net, s, stream(seed, "seed-predict", i, j), probe_size, eval_set.shape[1])
            cand_cfg = replace(cfg, seed=_label_seed(seed, i, j))
            batch = sample(score_net, sched, count, cand_cfg, eval_set.shape[1])
            value = float(metric.fn(batch.samples, eval_set))
            if not math.isfinite(value):
                raise DomainError("metric is not finite")
            candidates.append(Candidate(i, j, a, b, sched, value))
        except (DomainError, FloatingPointError) as exc:
            candidates.append(Candidate(i, j, a, b, None, None, str(exc)))
    best = _select(candidates, metric)
    w = candidates[best]
    log.info("seed search: %d candidates, best (%.4g, %.4g) with %d steps", len(candidates), w.alpha_hat_N, w.beta_hat_N, len(w.schedule))
    return ScheduleSearchReport(candidates, best, metric.name, metric.direction)


def _label_seed(seed: int, *labels) -> int:
    return int(stream(seed, "candidate-seed", *labels).integers(0, 2**63 - 1))


def gs_candidates(N: int):
    """All ``9^N`` ascending schedules ``beta_n = m_n 10^{-6 (N - n + 1) / N}``."""
    if N < 1:
        raise ContractError("N must be at least 1")
    if N > GS_MAX_STEPS:
        raise DomainError(
            f"grid search over N={N} steps needs 9^{N} = {9**N} schedule evaluations; refusing N > {GS_MAX_STEPS}"
        )
    scales = np.array([10.0 ** (-6.0 * (N - n + 1) / N) for n in range(1, N + 1)])
    for mantissas in itertools.product(range(1, 10), repeat=N):
        yield np.array(mantissas, dtype=np.float64) * scales


@dataclass(frozen=True)
class GsBaselineReport:
    best_betas: np.ndarray
    best_metric: float
    candidate_count: int
    metric_name: str
    metrics: list[float] = field(repr=False, default_factory=list)


def gs_baseline(
    score_net,
    eval_set: np.ndarray,
    N: int,
    metric: Metric | None = None,
    *,
    seed: int = 0,
    sample_count: int | None = None,
    sampler_config=None,
) -> GsBaselineReport:
    """Exhaustive search over the ``9^N`` candidate schedules of :func:`gs_candidates`."""
    from bddm.sampling import SamplerConfig, sample

    eval_set = np.atleast_2d(np.asarray(eval_set, dtype=np.float64))
    metric = metric or mmd_metric(eval_set)
    cfg = sampler_config or SamplerConfig(seed=seed)
    count = sample_count or eval_set.shape[0]
    best, best_value, values = None, None, []
    for betas in gs_candidates(N):
        try:
            value = float(metric.fn(sample(score_net, PredictedSchedule(betas), count, cfg, eval_set.shape[1]).samples, eval_set))
        except (DomainError, FloatingPointError):
            value = math.nan
        values.append(value)
        if math.isfinite(value) and (best is None or metric.better(value, best_value)):
            best, best_value = betas, value
    log.info("gs baseline: %d candidates evaluated", len(values))
    if best is None:
        raise SearchFailure("every grid-search schedule failed")
    return GsBaselineReport(best, best_value, len(values), metric.name, values)
