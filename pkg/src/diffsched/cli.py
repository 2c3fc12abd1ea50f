"""Operator surface: config parsing, subcommands, reports, SVG plots.

Every command is driven by a flat `key = value` config file plus `--seed`
and `--out` overrides, writes fixed-format CSV/text outputs into the run
directory, and is byte-reproducible given the same config and seed.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import losses
from .data import DatasetSpec, load_dataset, save_dataset
from .diffusion import ddim_reverse_step, ddim_prediction, predict_eps, sample
from .evaluation import (
    direct_beta_ablation,
    energy_distance,
    estimate_bounds,
    sample_with_noise_estimator,
    train_ne_baseline,
    valid_bound_ts,
    write_bound_curves,
)
from .neuralnet import load_model, save_model
from .numerics import RngState, format_float, gaussian_sample, load_tensor, save_tensor
from .schedule import (
    inference_from_ladder,
    linear_schedule,
    load_schedule,
    save_schedule,
    validate_inference_schedule,
)
from .scheduling import legacy_grid_search, predict_schedule, search_init, write_search_report
from .training import TrainConfig, train_schedule, train_score, write_loss_trace

__all__ = ["RunConfig", "load_config", "main"]


@dataclass(frozen=True)
class RunConfig:
    seed: int = -1  # mandatory; -1 marks "unset"
    # data
    data_kind: str = "gaussian"
    data_dim: int = 2
    data_mu0: float = 0.0
    data_s0: float = 1.0
    data_scale: float = 0.3
    n_train: int = 4096
    n_val: int = 2048
    n_test: int = 2048
    # training schedule
    T: int = 1000
    eps: float = 0.02
    # optimization
    batch_size: int = 64
    lr: float = 1e-3
    score_iters: int = 20000
    sched_iters: int = 10000
    tau: int = 20
    ct_variant: str = losses.CT_EXACT_KL
    # scheduling phase
    N: int = 8
    M: int = 9
    beta_min: float = -1.0  # -1 means "use beta_1 of the training schedule"
    search_samples: int = 256
    # sampling
    n_samples: int = 2048
    reverse_kind: str = "ddpm"
    # bounds
    bound_t_count: int = 20
    bound_mc: int = 1000
    bound_drop_r: int = 1
    # benchmark
    bench_budgets: str = "8 16 128"
    bench_seeds: int = 5

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            T=self.T,
            eps=self.eps,
            tau=self.tau,
            batch_size=self.batch_size,
            score_iters=self.score_iters,
            sched_iters=self.sched_iters,
            lr=self.lr,
            seed=self.seed,
            ct_variant=self.ct_variant,
        )

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            kind=self.data_kind,
            dim=self.data_dim,
            mu0=self.data_mu0,
            s0=self.data_s0,
            scale=self.data_scale,
            n_train=self.n_train,
            n_val=self.n_val,
            n_test=self.n_test,
            seed=self.seed,
        )

    def stop_threshold(self) -> float:
        if self.beta_min > 0.0:
            return self.beta_min
        return float(linear_schedule(self.T, self.eps).beta(1))

    def budgets(self):
        return [int(tok) for tok in self.bench_budgets.split()]


def load_config(path) -> RunConfig:
    """Flat `key = value` lines; `#` starts a comment; unknown keys rejected."""
    types = {f.name: f.type for f in fields(RunConfig)}
    casts = {"int": int, "float": float, "str": str}
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected `key = value`")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = casts[types[key]](val)
    return RunConfig(**values)


# --- svg line plot --------------------------------------------------------

_SVG_COLORS = ("#1f6fb2", "#c44e52", "#55a868", "#8172b3", "#ccb974", "#64b5cd")


def write_svg_lines(path, xs, series, title: str) -> None:
    """Minimal polyline chart; `series` maps label -> y values."""
    width, height, pad = 720, 440, 56
    xs = np.asarray(xs, dtype=np.float64)
    ys_all = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    x_lo, x_hi = float(xs.min()), float(xs.max())
    y_lo, y_hi = float(ys_all.min()), float(ys_all.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def sx(x):
        return pad + (x - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-size="15">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{height - pad + 18}" font-size="11">{x_lo:.4g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 18}" text-anchor="end" font-size="11">{x_hi:.4g}</text>',
        f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end" font-size="11">{y_lo:.4g}</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end" font-size="11">{y_hi:.4g}</text>',
    ]
    for k, (label, ys) in enumerate(series.items()):
        color = _SVG_COLORS[k % len(_SVG_COLORS)]
        pts = " ".join(f"{sx(x):.3f},{sy(y):.3f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(
            f'<text x="{width - pad - 4}" y="{pad + 16 + 16 * k}" text-anchor="end" '
            f'font-size="12" fill="{color}">{label}</text>'
        )
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


# --- commands -------------------------------------------------------------


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    save_dataset(out, cfg.dataset_spec())


def cmd_train_score(cfg: RunConfig, out: Path) -> None:
    train, _, _ = load_dataset(_require(out, "dataset directory"))
    rng = RngState(cfg.seed, ("train-score",))
    model, trace = train_score(train, cfg.train_config(), rng)
    save_model(out / "score.ckpt", model)
    write_loss_trace(out / "score_loss.csv", trace)


def cmd_train_schedule(cfg: RunConfig, out: Path) -> None:
    train, _, _ = load_dataset(out)
    score = load_model(_require(out / "score.ckpt", "score checkpoint"))
    rng = RngState(cfg.seed, ("train-schedule",))
    schedule = linear_schedule(cfg.T, cfg.eps)
    result = train_schedule(score, train, schedule, cfg.train_config(), rng)
    save_model(out / "sched.ckpt", result.model)
    write_loss_trace(out / "sched_loss.csv", result.trace)


def cmd_search(cfg: RunConfig, out: Path) -> None:
    _, val, _ = load_dataset(out)
    score = load_model(_require(out / "score.ckpt", "score checkpoint"))
    sched_net = load_model(_require(out / "sched.ckpt", "schedule-network checkpoint"))
    rng = RngState(cfg.seed, ("search",))
    result = search_init(
        score,
        sched_net,
        cfg.N,
        cfg.stop_threshold(),
        val,
        energy_distance,
        rng,
        grid_size=cfg.M,
        n_eval_samples=cfg.search_samples,
        reverse_kind=cfg.reverse_kind,
    )
    save_schedule(out / "schedule.txt", result.best.schedule)
    write_search_report(out / "search_report.csv", result)


def cmd_sample(cfg: RunConfig, out: Path) -> None:
    score = load_model(_require(out / "score.ckpt", "score checkpoint"))
    schedule = load_schedule(_require(out / "schedule.txt", "schedule file"))
    report = validate_inference_schedule(schedule)
    if not report:
        raise ValueError(f"schedule file invalid at n={report.index}: {report.reason}")
    rng = RngState(cfg.seed, ("sample",))
    x = sample(score, schedule, rng, cfg.reverse_kind, cfg.n_samples, cfg.data_dim)
    save_tensor(out / "samples.txt", x)


def cmd_eval_bounds(cfg: RunConfig, out: Path) -> None:
    train, _, _ = load_dataset(out)
    score = load_model(_require(out / "score.ckpt", "score checkpoint"))
    sched_net = load_model(_require(out / "sched.ckpt", "schedule-network checkpoint"))
    schedule = linear_schedule(cfg.T, cfg.eps)
    ts_all = valid_bound_ts(schedule, cfg.tau)
    if not ts_all:
        raise ValueError("no step with a consistent skip window; raise eps or lower tau")
    pick = np.unique(np.linspace(0, len(ts_all) - 1, cfg.bound_t_count).astype(int))
    rng = RngState(cfg.seed, ("bounds",))
    reports = [
        estimate_bounds(
            score,
            sched_net,
            train,
            schedule,
            int(ts_all[i]),
            cfg.bound_mc,
            rng.derive(int(ts_all[i])),
            tau=cfg.tau,
            ct_variant=cfg.ct_variant,
            drop_reconstruction=bool(cfg.bound_drop_r),
        )
        for i in pick
    ]
    write_bound_curves(out / "bounds.csv", reports)
    write_svg_lines(
        out / "bounds.svg",
        [r.t for r in reports],
        {"f_elbo": [r.f_elbo for r in reports], "f_bddm": [r.f_bddm for r in reports]},
        "per-step evidence bounds",
    )


def _ddim_subsequence(score, schedule, n_steps, rng, n_samples, dim):
    """Deterministic transport along an evenly spaced subsequence of the
    training schedule scales."""
    idx = np.unique(np.linspace(1, len(schedule), n_steps).astype(int))
    alphas = [schedule.alpha(int(i)) for i in idx]
    x = gaussian_sample(rng, (n_samples, dim))
    for k in range(len(alphas) - 1, -1, -1):
        a = alphas[k]
        eps_hat = predict_eps(score, x, a)
        if k == 0:
            x = ddim_prediction(x, eps_hat, a)
        else:
            x = ddim_reverse_step(x, eps_hat, a, alphas[k - 1], 0.0, np.zeros_like(x))
    return x


def cmd_bench(cfg: RunConfig, out: Path) -> None:
    """One row per (method, steps, seed): energy distance to held-out data at
    matched step budgets."""
    train, val, test = load_dataset(out)
    score = load_model(_require(out / "score.ckpt", "score checkpoint"))
    sched_net = load_model(_require(out / "sched.ckpt", "schedule-network checkpoint"))
    schedule = linear_schedule(cfg.T, cfg.eps)
    dim = cfg.data_dim
    threshold = cfg.stop_threshold()
    tcfg = cfg.train_config()
    root = RngState(cfg.seed, ("bench",))

    ne_model, _ = train_ne_baseline(train, schedule, tcfg, root.derive("ne-train"))

    rows = []
    for budget in cfg.budgets():
        # one searched init / learned vector per budget, shared across seeds
        search = search_init(
            score,
            sched_net,
            budget,
            threshold,
            val,
            energy_distance,
            root.derive("search", budget),
            grid_size=cfg.M,
            n_eval_samples=cfg.search_samples,
            reverse_kind=cfg.reverse_kind,
        )
        init = (search.best.init_alpha, search.best.init_beta)
        ablation_sched, _ = direct_beta_ablation(
            score,
            train,
            init[0],
            budget,
            tcfg,
            root.derive("ablation", budget),
        )
        if budget <= 6:
            legacy_betas, _, _ = legacy_grid_search(
                score,
                budget,
                val,
                energy_distance,
                root.derive("legacy", budget),
                n_eval_samples=cfg.search_samples,
                reverse_kind=cfg.reverse_kind,
            )
        for seed_idx in range(cfg.bench_seeds):
            arms = {}
            lin_sched = inference_from_ladder(linear_schedule(budget, cfg.eps).betas)
            arms["linear"] = sample(
                score, lin_sched, root.derive("lin", budget, seed_idx), "ddpm", cfg.n_samples, dim
            )
            arms["ddim"] = _ddim_subsequence(
                score, schedule, budget, root.derive("ddim", budget, seed_idx), cfg.n_samples, dim
            )
            arms["ne"] = sample_with_noise_estimator(
                score, ne_model, budget, cfg.eps, root.derive("ne", budget, seed_idx), cfg.n_samples, dim
            )
            run = predict_schedule(
                score,
                sched_net,
                init,
                budget,
                threshold,
                root.derive("bddm-predict", budget, seed_idx),
                dim,
            )
            arms["bddm"] = sample(
                score,
                run.schedule,
                root.derive("bddm", budget, seed_idx),
                cfg.reverse_kind,
                cfg.n_samples,
                dim,
            )
            arms["direct_beta"] = sample(
                score,
                ablation_sched,
                root.derive("direct", budget, seed_idx),
                cfg.reverse_kind,
                cfg.n_samples,
                dim,
            )
            if budget <= 6:
                legacy_sched = inference_from_ladder(legacy_betas)
                arms["legacy_grid"] = sample(
                    score,
                    legacy_sched,
                    root.derive("legacy-s", budget, seed_idx),
                    "ddpm",
                    cfg.n_samples,
                    dim,
                )
            for method in sorted(arms):
                rows.append(
                    (method, budget, seed_idx, energy_distance(arms[method], test))
                )
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "steps", "energy_distance", "seed"])
        for method, budget, seed_idx, value in rows:
            writer.writerow([method, budget, f"{value:.17g}", seed_idx])


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-score": cmd_train_score,
    "train-schedule": cmd_train_schedule,
    "search": cmd_search,
    "sample": cmd_sample,
    "eval-bounds": cmd_eval_bounds,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="diffsched",
        description="Train, schedule, sample and benchmark a toy diffusion model.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--out", default=None, help="run directory (default: runs/<seed>)")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(_require(Path(args.config), "config file"))
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if cfg.seed < 0:
            raise ValueError("seed is mandatory: set it in the config or pass --seed")
        out = Path(args.out) if args.out else Path("runs") / str(cfg.seed)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
    except Exception as exc:  # one-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
