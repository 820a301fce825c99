"""Experiment configuration and JSON/CSV artifact persistence.

Floats are written with ``repr`` (the shortest string that parses back to the
same double), so every artifact round-trips bit-exactly and reruns with the
same inputs produce identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from bddm.data import DatasetSampler
from bddm.diffusion import DiffusionSpec
from bddm.errors import CompatibilityError, ConfigError, DomainError
from bddm.networks import ScheduleNet, ScoreNet, net_from_dict, net_to_dict
from bddm.sampling import SamplerConfig
from bddm.training import TrainConfig

SPEC_KEYS = ("T", "beta_start", "beta_end", "tau", "dim")


@dataclass(frozen=True)
class TrainSection:
    steps: int = 1000
    batch_size: int = 128
    lr: float = 1e-3
    hidden: tuple[int, ...] | None = None
    activation: str = "tanh"
    loss_variant: str = "paper"
    checkpoint_every: int = 0


@dataclass(frozen=True)
class SearchSection:
    M: int = 9
    N_max: int = 200
    eval_size: int = 512
    sample_count: int = 512
    probe_size: int = 16


@dataclass(frozen=True)
class BoundsSection:
    t_values: tuple[int, ...] | None = None
    mc_draws: int = 10_000
    eval_size: int = 256
    c_variant: str = "paper"


@dataclass(frozen=True)
class ExperimentConfig:
    spec: DiffusionSpec
    dataset: dict
    seed: int = 0
    train_score: TrainSection = field(default_factory=TrainSection)
    train_schedule: TrainSection = field(default_factory=TrainSection)
    search: SearchSection = field(default_factory=SearchSection)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    bounds: BoundsSection = field(default_factory=BoundsSection)

    def data_sampler(self) -> DatasetSampler:
        return DatasetSampler.from_dict(self.dataset, self.seed)

    def train_config(self, section: str) -> TrainConfig:
        s: TrainSection = getattr(self, section)
        return TrainConfig(
            self.spec,
            steps=s.steps,
            batch_size=s.batch_size,
            lr=s.lr,
            seed=self.seed,
            loss_variant=s.loss_variant,
            hidden=s.hidden,
            activation=s.activation,
            checkpoint_every=s.checkpoint_every,
        )

    def to_dict(self) -> dict:
        def section(obj):
            out = {}
            for f in fields(obj):
                v = getattr(obj, f.name)
                out[f.name] = list(v) if isinstance(v, tuple) else v
            return out

        return {
            "spec": self.spec.to_dict(),
            "dataset": dict(self.dataset),
            "seed": self.seed,
            "train_score": section(self.train_score),
            "train_schedule": section(self.train_schedule),
            "search": section(self.search),
            "sampler": self.sampler.to_dict(),
            "bounds": section(self.bounds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        spec_d = _require(d, "spec", dict)
        for k in SPEC_KEYS:
            _require(spec_d, k, (int, float), prefix="spec")
        try:
            spec = DiffusionSpec.from_dict(spec_d)
        except DomainError as exc:
            raise ConfigError(f"spec: {exc}") from exc
        dataset = _require(d, "dataset", dict)
        _require(dataset, "tag", str, prefix="dataset")
        seed = d.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        cfg = cls(
            spec=spec,
            dataset=dict(dataset),
            seed=seed,
            train_score=_section(TrainSection, d, "train_score"),
            train_schedule=_section(TrainSection, d, "train_schedule"),
            search=_section(SearchSection, d, "search"),
            sampler=_section(SamplerConfig, d, "sampler"),
            bounds=_section(BoundsSection, d, "bounds"),
        )
        if cfg.data_sampler().dim != spec.dim:
            raise ConfigError(f"dataset dimension {cfg.data_sampler().dim} differs from spec.dim={spec.dim}")
        return cfg


def _require(d: dict, key: str, kind, prefix: str = ""):
    name = f"{prefix}.{key}" if prefix else key
    if key not in d:
        raise ConfigError(f"missing required key {name!r}")
    v = d[key]
    if not isinstance(v, kind) or isinstance(v, bool):
        raise ConfigError(f"key {name!r} has the wrong type")
    return v


def _section(cls, d: dict, key: str):
    raw = d.get(key, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"section {key!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key {key}.{unknown[0]!r}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {key!r}: {exc}") from exc


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def read_json(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def load_config(path: str | Path, seed: int | None = None) -> ExperimentConfig:
    d = read_json(path)
    if seed is not None and isinstance(d, dict):
        d = {**d, "seed": seed}
    return ExperimentConfig.from_dict(d)


def checkpoint_dict(net: ScoreNet | ScheduleNet, spec: DiffusionSpec, seed: int, extra: dict | None = None) -> dict:
    return {"spec": spec.to_dict(), "seed": seed, "net": net_to_dict(net), **(extra or {})}


def load_checkpoint(path: str | Path, kind: type, spec: DiffusionSpec | None = None):
    """Return ``(net, spec)``; raise :class:`CompatibilityError` on a spec mismatch."""
    d = read_json(path)
    try:
        net = net_from_dict(d["net"])
        ckpt_spec = DiffusionSpec.from_dict(d["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: not a checkpoint ({exc})") from exc
    if not isinstance(net, kind):
        raise CompatibilityError(f"{path} holds a {type(net).__name__}, expected {kind.__name__}")
    if spec is not None:
        check_spec(ckpt_spec, spec, str(path))
    return net, ckpt_spec


def check_spec(found: DiffusionSpec, expected: DiffusionSpec, what: str) -> None:
    if found != expected:
        diff = [k for k in SPEC_KEYS if getattr(found, k) != getattr(expected, k)]
        raise CompatibilityError(f"{what} was produced with a different diffusion spec (differs in {', '.join(diff)})")
