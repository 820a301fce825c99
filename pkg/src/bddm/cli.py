"""Command-line entry point: ``bddm <command> [options]``.

Exit codes: 0 success, 2 configuration or usage error, 3 domain or numerical
error, 4 incompatible artifacts.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from bddm import io
from bddm.diffusion import DiffusionSpec, linear_schedule
from bddm.errors import CompatibilityError, ConfigError, ContractError, DomainError, ShapeError
from bddm.evaluation import GaussianDataSpec, bound_sweep, median_bandwidth, mmd_rbf, oracle_eps_fn
from bddm.networks import ScheduleNet, ScoreNet
from bddm.rng import stream
from bddm.sampling import PROCESSES, SamplerConfig, sample
from bddm.scheduling import PredictedSchedule, grid_search_seed, gs_baseline, mmd_metric
from bddm.training import train_schedule, train_score

log = logging.getLogger("bddm")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _heldout(cfg: io.ExperimentConfig, count: int, label: str = "heldout") -> np.ndarray:
    return cfg.data_sampler().sample(count, index=0, label=label)


def default_t_grid(spec, points: int = 9) -> list[int]:
    return sorted({int(round(t)) for t in np.linspace(spec.tau, spec.T - spec.tau, points)})


def cmd_train_score(args) -> int:
    cfg = io.load_config(args.config, args.seed)
    out = _out(args)

    def save(step, net):
        io.write_json(out / f"score_step{step}.json", io.checkpoint_dict(net, cfg.spec, cfg.seed, {"step": step}))

    net, report = train_score(cfg.data_sampler(), cfg.train_config("train_score"), save)
    path = io.write_json(out / "score.json", io.checkpoint_dict(net, cfg.spec, cfg.seed, {"config": cfg.to_dict()}))
    io.write_json(out / "score_report.json", {**report.to_dict(), "spec": cfg.spec.to_dict()})
    log.info("wrote %s", path)
    return 0


def cmd_train_schedule(args) -> int:
    cfg = io.load_config(args.config, args.seed)
    score, _ = io.load_checkpoint(args.score, ScoreNet, cfg.spec)
    out = _out(args)

    def save(step, net):
        io.write_json(out / f"schedule_net_step{step}.json", io.checkpoint_dict(net, cfg.spec, cfg.seed, {"step": step}))

    net, report = train_schedule(score, cfg.data_sampler(), cfg.train_config("train_schedule"), save)
    path = io.write_json(
        out / "schedule_net.json", io.checkpoint_dict(net, cfg.spec, cfg.seed, {"config": cfg.to_dict()})
    )
    io.write_json(out / "schedule_net_report.json", {**report.to_dict(), "spec": cfg.spec.to_dict()})
    log.info("wrote %s (%d elements skipped)", path, report.skipped)
    return 0


def cmd_schedule(args) -> int:
    cfg = io.load_config(args.config, args.seed)
    score, _ = io.load_checkpoint(args.score, ScoreNet, cfg.spec)
    sched_net, _ = io.load_checkpoint(args.schedule_net, ScheduleNet, cfg.spec)
    s = cfg.search
    M = args.grid_m if args.grid_m is not None else s.M
    eval_set = _heldout(cfg, s.eval_size, "search-eval")
    schedule = linear_schedule(cfg.spec)
    sampler = _sampler_config(cfg.sampler, args)
    report = grid_search_seed(
        sched_net,
        score,
        eval_set,
        M,
        float(schedule.alphas[-1]),
        beta_floor=float(schedule.betas[0]),
        N_max=s.N_max,
        seed=cfg.seed,
        sample_count=s.sample_count,
        sampler_config=sampler,
        probe_size=s.probe_size,
    )
    out = _out(args)
    best = report.winner.schedule
    io.write_json(out / "schedule.json", {**best.to_dict(), "spec": cfg.spec.to_dict(), "master_seed": cfg.seed})
    io.write_json(out / "search_report.json", {**report.to_dict(), "M": M, "spec": cfg.spec.to_dict(), "seed": cfg.seed})
    log.info("best seed (%.6g, %.6g): %d steps", report.winner.alpha_hat_N, report.winner.beta_hat_N, len(best))
    return 0


def _sampler_config(base: SamplerConfig, args) -> SamplerConfig:
    return SamplerConfig(
        process=args.process or base.process,
        ddim_eta=base.ddim_eta if args.eta is None else args.eta,
        variance_mode=base.variance_mode,
        seed=base.seed if args.seed is None else args.seed,
    )


def cmd_sample(args) -> int:
    d = io.read_json(args.schedule)
    try:
        spec = DiffusionSpec.from_dict(d["spec"])
        schedule = PredictedSchedule.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{args.schedule}: not a schedule file ({exc})") from exc
    score, _ = io.load_checkpoint(args.score, ScoreNet, spec)
    if args.count is None or args.count < 0:
        raise ConfigError("--count must be a non-negative integer")
    base = SamplerConfig(seed=int(d.get("master_seed", 0)))
    if args.config:
        base = io.load_config(args.config).sampler
    cfg = _sampler_config(base, args)
    batch = sample(score, schedule, args.count, cfg)
    out = _out(args)
    (out / "samples.csv").write_text(batch.to_csv())
    io.write_json(out / "samples.json", {**batch.sidecar(), "sampler": cfg.to_dict(), "spec": spec.to_dict()})
    log.info("wrote %d samples with %d steps", args.count, len(schedule))
    return 0


def _gaussian_spec(cfg: io.ExperimentConfig) -> GaussianDataSpec:
    if cfg.dataset.get("tag") != "gaussian":
        raise ConfigError("compare-bounds needs a gaussian dataset")
    return GaussianDataSpec(np.asarray(cfg.dataset["mu"], dtype=np.float64), float(cfg.dataset["s2"]))


def cmd_compare_bounds(args) -> int:
    cfg = io.load_config(args.config, args.seed)
    data = _gaussian_spec(cfg)
    model = io.load_checkpoint(args.score, ScoreNet, cfg.spec)[0] if args.score else oracle_eps_fn(data)
    b = cfg.bounds
    t_values = list(b.t_values) if b.t_values else default_t_grid(cfg.spec)
    sweep = bound_sweep(model, cfg.spec, data, t_values, b.mc_draws, stream(cfg.seed, "bounds"), b.eval_size, b.c_variant)
    out = _out(args)
    (out / "bounds.csv").write_text(sweep.to_csv())
    io.write_json(
        out / "bounds.json",
        {"spec": cfg.spec.to_dict(), "seed": cfg.seed, "mc_draws": b.mc_draws, "eval_size": b.eval_size,
         "ordering_fraction": sweep.ordering_fraction(), "score": args.score or "analytic"},
    )
    log.info("F_bddm >= F_elbo on %.0f%% of %d steps", 100 * sweep.ordering_fraction(), len(t_values))
    return 0


def cmd_gs_baseline(args) -> int:
    cfg = io.load_config(args.config, args.seed)
    score, _ = io.load_checkpoint(args.score, ScoreNet, cfg.spec)
    if args.n is None:
        raise ConfigError("--n is required")
    s = cfg.search
    eval_set = _heldout(cfg, s.eval_size, "search-eval")
    sampler = _sampler_config(cfg.sampler, args)
    report = gs_baseline(score, eval_set, args.n, mmd_metric(eval_set), seed=cfg.seed, sample_count=s.sample_count,
                         sampler_config=sampler)
    log.info("gs-baseline evaluated %d candidates", report.candidate_count)
    out = _out(args)
    io.write_json(
        out / "gs_schedule.json",
        {"betas_hat": report.best_betas.tolist(), "metric": report.best_metric, "metric_name": report.metric_name,
         "candidate_count": report.candidate_count, "spec": cfg.spec.to_dict(), "master_seed": cfg.seed},
    )
    return 0


def cmd_evaluate(args) -> int:
    cfg = io.load_config(args.config, args.seed)
    if not args.samples:
        raise ConfigError("--samples is required")
    try:
        samples = np.loadtxt(args.samples, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read samples from {args.samples}: {exc}") from exc
    if samples.shape[0] and samples.shape[1] != cfg.spec.dim:
        raise ShapeError(f"samples have {samples.shape[1]} columns, spec.dim={cfg.spec.dim}")
    heldout = _heldout(cfg, args.count or 4096)
    h = median_bandwidth(heldout)
    result = {
        "spec": cfg.spec.to_dict(),
        "seed": cfg.seed,
        "count": int(samples.shape[0]),
        "heldout_count": int(heldout.shape[0]),
        "bandwidth": h,
        "mmd2": mmd_rbf(samples, heldout, h),
        "sample_mean": samples.mean(axis=0).tolist(),
        "heldout_mean": heldout.mean(axis=0).tolist(),
    }
    io.write_json(_out(args) / "evaluate.json", result)
    log.info("MMD^2 = %.6g", result["mmd2"])
    return 0


COMMANDS = {
    "train-score": cmd_train_score,
    "train-schedule": cmd_train_schedule,
    "schedule": cmd_schedule,
    "sample": cmd_sample,
    "compare-bounds": cmd_compare_bounds,
    "gs-baseline": cmd_gs_baseline,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bddm", description="Bilateral denoising diffusion on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", help="experiment config JSON")
        c.add_argument("--seed", type=int, help="override the master seed")
        c.add_argument("--out", default="runs", help="output directory (default: runs)")
        c.add_argument("--score", help="score-network checkpoint")
        if name == "schedule":
            c.add_argument("--schedule-net", required=True, help="schedule-network checkpoint")
        if name == "sample":
            c.add_argument("--schedule", required=True, help="schedule file from `schedule` or `gs-baseline`")
        if name in ("schedule", "sample", "gs-baseline"):
            c.add_argument("--process", choices=PROCESSES)
            c.add_argument("--eta", type=float)
        if name in ("sample", "evaluate"):
            c.add_argument("--count", type=int)
        if name == "evaluate":
            c.add_argument("--samples", help="samples CSV to score")
        if name == "schedule":
            c.add_argument("--grid-m", type=int, help="seed grid size M (M^2 candidates)")
        if name == "gs-baseline":
            c.add_argument("--n", type=int, help="schedule length N (at most 6)")
    return p


NEEDS = {
    "train-score": ("config",),
    "train-schedule": ("config", "score"),
    "schedule": ("config", "score"),
    "sample": ("score",),
    "compare-bounds": ("config",),
    "gs-baseline": ("config", "score"),
    "evaluate": ("config",),
}


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("BDDM_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        for key in NEEDS[args.command]:
            if getattr(args, key) is None:
                raise ConfigError(f"--{key} is required for {args.command}")
        return COMMANDS[args.command](args)
    except (ConfigError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DomainError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
