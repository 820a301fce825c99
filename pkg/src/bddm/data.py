"""Synthetic datasets: isotropic Gaussian, Gaussian mixture and swiss roll."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bddm.errors import ConfigError
from bddm.rng import stream

TAGS = ("gaussian", "mixture", "swiss_roll")


@dataclass(frozen=True)
class DatasetSampler:
    """i.i.d. sampler; batch ``index`` always yields the same draws for a seed."""

    tag: str
    params: dict = field(hash=False)
    seed: int = 0

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ConfigError(f"unknown dataset {self.tag!r}; expected one of {TAGS}")
        if self.tag == "gaussian":
            if float(self.params["s2"]) < 0:
                raise ConfigError("gaussian s2 must be non-negative")
        elif self.tag == "mixture":
            comps = self.params.get("components") or []
            if not comps:
                raise ConfigError("mixture needs at least one component")
            dims = {len(c["mean"]) for c in comps}
            if len(dims) != 1:
                raise ConfigError("mixture components disagree in dimension")

    @property
    def dim(self) -> int:
        if self.tag == "gaussian":
            return len(self.params["mu"])
        if self.tag == "mixture":
            return len(self.params["components"][0]["mean"])
        return 2

    def sample(self, count: int, index: int = 0, label: str = "data") -> np.ndarray:
        rng = stream(self.seed, label, index)
        if self.tag == "gaussian":
            mu = np.asarray(self.params["mu"], dtype=np.float64)
            return mu + np.sqrt(float(self.params["s2"])) * rng.standard_normal((count, mu.size))
        if self.tag == "mixture":
            comps = self.params["components"]
            w = np.array([float(c.get("weight", 1.0)) for c in comps])
            which = rng.choice(len(comps), size=count, p=w / w.sum())
            means = np.array([c["mean"] for c in comps], dtype=np.float64)
            stds = np.sqrt(np.array([float(c["s2"]) for c in comps]))
            z = rng.standard_normal((count, means.shape[1]))
            return means[which] + stds[which, None] * z
        noise = float(self.params.get("noise", 0.1))
        u = 1.5 * np.pi * (1.0 + 2.0 * rng.uniform(size=count))
        pts = np.stack([u * np.cos(u), u * np.sin(u)], axis=1) / 5.0
        return pts + noise * rng.standard_normal((count, 2))

    def to_dict(self) -> dict:
        return {"tag": self.tag, **self.params}

    @classmethod
    def from_dict(cls, d: dict, seed: int = 0) -> "DatasetSampler":
        d = dict(d)
        tag = d.pop("tag", None)
        if tag is None:
            raise ConfigError("dataset.tag is required")
        return cls(tag, d, seed)


def gaussian(mu, s2: float, seed: int = 0) -> DatasetSampler:
    return DatasetSampler("gaussian", {"mu": list(np.atleast_1d(mu).astype(float)), "s2": float(s2)}, seed)


def four_gaussians(spread: float = 1.5, s2: float = 0.05, seed: int = 0) -> DatasetSampler:
    """Four equally weighted blobs at ``(+-spread, +-spread)``."""
    comps = [
        {"mean": [sx * spread, sy * spread], "s2": s2, "weight": 1.0}
        for sx in (-1.0, 1.0)
        for sy in (-1.0, 1.0)
    ]
    return DatasetSampler("mixture", {"components": comps}, seed)
