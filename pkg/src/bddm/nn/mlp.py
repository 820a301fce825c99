"""Dense multilayer perceptrons on top of :mod:`bddm.nn.autodiff`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from bddm.errors import ContractError, ShapeError
from bddm.nn import autodiff as ad

HIDDEN_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}
OUTPUT_ACTIVATIONS = {"identity": ad.identity, "sigmoid": ad.sigmoid}


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Fully connected network; layer ``i`` maps ``dims[i]`` to ``dims[i+1]``.

    ``weights[i]`` has shape ``(dims[i+1], dims[i])`` and ``biases[i]`` shape
    ``(dims[i+1],)``. Instances are treated as immutable values; training
    produces new instances via :meth:`with_params`.
    """

    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ShapeError(f"need at least two positive layer widths, got {dims}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ContractError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ContractError(f"unknown output activation {self.output_activation!r}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError("one weight/bias pair per layer is required")
        ws, bs = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ShapeError(
                    f"layer {i}: expected W {(dims[i + 1], dims[i])} and b {(dims[i + 1],)}, "
                    f"got {w.shape} and {b.shape}"
                )
            w.flags.writeable = False
            b.flags.writeable = False
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        d = self.layer_dims
        return sum(d[i + 1] * (d[i] + 1) for i in range(len(d) - 1))

    @property
    def params(self) -> list[np.ndarray]:
        """Parameters in the canonical order ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "MlpModel":
        return MlpModel(
            self.layer_dims,
            tuple(params[0::2]),
            tuple(params[1::2]),
            self.hidden_activation,
            self.output_activation,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        dims = [int(x) for x in d["layer_dims"]]
        weights = [
            np.asarray(w, dtype=np.float64).reshape(dims[i + 1], dims[i])
            for i, w in enumerate(d["weights"])
        ]
        return cls(
            tuple(dims),
            tuple(weights),
            tuple(np.asarray(b, dtype=np.float64) for b in d["biases"]),
            d.get("hidden_activation", "tanh"),
            d.get("output_activation", "identity"),
        )


def init_mlp(
    layer_dims: Sequence[int],
    rng: np.random.Generator,
    hidden_activation: str = "tanh",
    output_activation: str = "identity",
) -> MlpModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for weights and biases."""
    dims = list(layer_dims)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpModel(tuple(dims), tuple(weights), tuple(biases), hidden_activation, output_activation)


def zeros_mlp(
    layer_dims: Sequence[int],
    hidden_activation: str = "tanh",
    output_activation: str = "identity",
) -> MlpModel:
    dims = list(layer_dims)
    return MlpModel(
        tuple(dims),
        tuple(np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])),
        tuple(np.zeros(o) for o in dims[1:]),
        hidden_activation,
        output_activation,
    )


def mlp_forward(model: MlpModel, x, params=None):
    """Evaluate the network on ``x`` of shape ``(..., layer_dims[0])``.

    ``params`` optionally overrides the model's parameters with tape
    variables (same canonical order as :attr:`MlpModel.params`), which makes
    the result differentiable. Without it the computation is plain numpy.
    """
    xv = ad.value(x)
    if np.shape(xv)[-1:] != (model.layer_dims[0],):
        raise ShapeError(
            f"input last dimension {np.shape(xv)[-1:]} != layer width {model.layer_dims[0]}"
        )
    ps = model.params if params is None else list(params)
    act = HIDDEN_ACTIVATIONS[model.hidden_activation]
    h = x
    for i in range(model.n_layers):
        w, b = ps[2 * i], ps[2 * i + 1]
        h = ad.add(ad.matmul(h, ad.transpose(w)), b)
        if i < model.n_layers - 1:
            h = act(h)
    out = OUTPUT_ACTIVATIONS[model.output_activation](h)
    if not np.all(np.isfinite(ad.value(out))):
        raise FloatingPointError("non-finite value in MLP output")
    return out
