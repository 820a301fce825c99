"""Score network ``eps(x, alpha)`` and schedule network ``sigma(x)``.

Both are thin wrappers around :class:`~bddm.nn.MlpModel`. Every function takes
an optional ``params`` list of tape variables so that the losses built on top
can be differentiated with respect to the network weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bddm.diffusion import beta_upper_bound
from bddm.errors import DomainError, ShapeError
from bddm.nn import MlpModel, init_mlp, mlp_forward
from bddm.nn import autodiff as ad

SCORE_HIDDEN = (128, 128)
SCHEDULE_HIDDEN = (64, 64)


@dataclass(frozen=True)
class ScoreNet:
    """Noise predictor; input is ``x`` concatenated with ``[alpha, sqrt(1 - alpha^2)]``."""

    mlp: MlpModel

    @property
    def dim(self) -> int:
        return self.mlp.layer_dims[-1]

    def __post_init__(self):
        if self.mlp.layer_dims[0] != self.mlp.layer_dims[-1] + 2:
            raise ShapeError("score MLP must map D + 2 inputs to D outputs")


@dataclass(frozen=True)
class ScheduleNet:
    """Ratio predictor with a sigmoid head, mean-pooled to one scalar per sample."""

    mlp: MlpModel

    @property
    def dim(self) -> int:
        return self.mlp.layer_dims[0]

    def __post_init__(self):
        if self.mlp.output_activation != "sigmoid":
            raise ShapeError("schedule MLP needs a sigmoid output head")


def new_score_net(dim: int, rng: np.random.Generator, hidden=SCORE_HIDDEN, activation="tanh") -> ScoreNet:
    return ScoreNet(init_mlp([dim + 2, *hidden, dim], rng, activation, "identity"))


def new_schedule_net(dim: int, rng: np.random.Generator, hidden=SCHEDULE_HIDDEN, activation="tanh") -> ScheduleNet:
    return ScheduleNet(init_mlp([dim, *hidden, 1], rng, activation, "sigmoid"))


def noise_embedding(alpha, batch_shape) -> np.ndarray:
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), batch_shape)
    return np.stack([alpha, np.sqrt(1.0 - alpha * alpha)], axis=-1)


def score_predict(net: ScoreNet, x, alpha, params=None):
    """Predicted noise with the same shape as ``x``.

    ``x`` is ``(D,)`` or ``(B, D)``; ``alpha`` is a scalar or one value per row.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (net.dim,):
        raise ShapeError(f"expected {net.dim} features, got shape {x.shape}")
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(a <= 0.0) or np.any(a > 1.0):
        raise DomainError("alpha must lie in (0, 1]")
    inp = np.concatenate([x, noise_embedding(a, x.shape[:-1])], axis=-1)
    return mlp_forward(net.mlp, inp, params)


def sigma_ratio(net: ScheduleNet, x, params=None):
    """Ratio in (0, 1): mean of the sigmoid outputs, one value per sample."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (net.dim,):
        raise ShapeError(f"expected {net.dim} features, got shape {x.shape}")
    return ad.mean(mlp_forward(net.mlp, x, params), axis=-1)


def f_phi(net: ScheduleNet, x_t, alpha_hat_next, beta_hat_next, params=None):
    """Next-lower noise scale: upper bound times the predicted ratio."""
    bound = beta_upper_bound(alpha_hat_next, beta_hat_next)
    return ad.mul(bound, sigma_ratio(net, x_t, params))


def eps_fn_of(model):
    """Accept a :class:`ScoreNet` or any ``eps(x, alpha)`` callable."""
    if isinstance(model, ScoreNet):
        return lambda x, alpha: score_predict(model, x, alpha)
    if callable(model):
        return model
    raise TypeError("expected a ScoreNet or an eps(x, alpha) callable")


def net_to_dict(net: ScoreNet | ScheduleNet) -> dict:
    d = net.mlp.to_dict()
    d["kind"] = "score" if isinstance(net, ScoreNet) else "schedule"
    return d


def net_from_dict(d: dict) -> ScoreNet | ScheduleNet:
    mlp = MlpModel.from_dict(d)
    if d.get("kind") == "score":
        return ScoreNet(mlp)
    if d.get("kind") == "schedule":
        return ScheduleNet(mlp)
    raise ShapeError(f"unknown network kind {d.get('kind')!r}")
