"""Inference phase one: predicting a short sampling schedule.

Starting from white noise and an initial (alpha_N, beta_N) pair, the ratio
network proposes each earlier step size as a fraction of its strict upper
bound while the reverse chain walks one ancestral step at a time; the walk
stops once a proposal falls below the smallest step size seen in training.
Two searches pick the init pair: a quadratic-cost scan over a coarse grid,
and the exponential-cost full-schedule scan kept as a legacy baseline.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .diffusion import DiffusionStep, ddpm_reverse_step, predict_eps, sample
from .neuralnet import MlpModel, ScheduleNetwork
from .numerics import RngState, gaussian_sample
from .schedule import (
    InferenceSchedule,
    beta_upper_bound,
    inference_from_ladder,
    validate_inference_schedule,
)

__all__ = [
    "SchedulingRun",
    "predict_schedule",
    "SearchResult",
    "search_init",
    "write_search_report",
    "legacy_grid_search",
]


@dataclass(frozen=True)
class SchedulingRun:
    init_alpha: float
    init_beta: float
    max_steps: int
    stop_threshold: float
    schedule: InferenceSchedule | None
    ratio_outputs: np.ndarray
    degenerate: bool = False


def predict_schedule(
    score,
    sched_net: ScheduleNetwork,
    init,
    max_steps: int,
    beta_min: float,
    rng: RngState,
    dim: int | None = None,
) -> SchedulingRun:
    """Run the backward schedule-prediction walk; returns the collected steps.

    The init pair supplies the top-of-chain (alpha, beta); the ratio network
    is first consulted for the step below it.  Each accepted step advances
    the state with a noisy ancestral update so the network sees realistic
    noisy observations.  Collected steps are returned in ascending order.
    """
    init_alpha, init_beta = float(init[0]), float(init[1])
    if not 0.0 < init_alpha < 1.0 or not 0.0 < init_beta < 1.0:
        raise ValueError("init pair must lie in (0, 1)")
    if init_alpha * init_alpha >= 1.0 - init_beta:
        raise ValueError("inconsistent scales")
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    if dim is None:
        if not isinstance(score, MlpModel):
            raise ValueError("dim is required for non-network models")
        dim = score.input_dim
    if init_beta < beta_min:
        return SchedulingRun(
            init_alpha, init_beta, max_steps, beta_min, None, np.empty(0), degenerate=True
        )
    x = gaussian_sample(rng, (dim,))
    alpha, beta = init_alpha, init_beta
    collected = [beta]
    ratios = []
    for remaining in range(max_steps, 0, -1):
        eps_hat = predict_eps(score, x, alpha)
        step = DiffusionStep(remaining, beta, alpha, alpha / math.sqrt(1.0 - beta))
        z = gaussian_sample(rng, (dim,))
        x = ddpm_reverse_step(x, eps_hat, step, z)
        if remaining == 1:
            break
        ratio = sched_net.predict(x)
        ratios.append(ratio)
        candidate = beta_upper_bound(alpha, beta) * ratio
        if candidate < beta_min:
            break
        alpha = alpha / math.sqrt(1.0 - beta)
        beta = candidate
        collected.append(candidate)
    schedule = InferenceSchedule(np.array(collected[::-1]), init_alpha)
    return SchedulingRun(
        init_alpha, init_beta, max_steps, beta_min, schedule, np.array(ratios)
    )


@dataclass(frozen=True)
class SearchResult:
    best: SchedulingRun | None
    best_metric: float
    rows: list  # (alpha_N, beta_N, steps, metric, skipped)
    evaluated: int


def search_init(
    score,
    sched_net: ScheduleNetwork,
    max_steps: int,
    beta_min: float,
    validation: np.ndarray,
    metric,
    rng: RngState,
    grid_size: int = 9,
    n_eval_samples: int = 256,
    reverse_kind: str = "ddpm",
) -> SearchResult:
    """Scan init pairs (0.1 i, 0.1 j) for i, j in 1..grid_size.

    Each valid pair runs one schedule prediction and one sampling pass on a
    derived stream; pairs failing the scale precondition (or stopping before
    producing any step) are recorded as skipped.  Ties break toward fewer
    steps, then the lower (i, j) index, so the result is deterministic.
    """
    if grid_size < 1 or grid_size > 9:
        raise ValueError("grid_size must lie in 1..9")
    validation = np.asarray(validation, dtype=np.float64)
    dim = validation.shape[1]
    rows = []
    best, best_key = None, None
    evaluated = 0
    for i, j in itertools.product(range(1, grid_size + 1), repeat=2):
        alpha_n, beta_n = 0.1 * i, 0.1 * j
        if alpha_n * alpha_n >= 1.0 - beta_n:
            rows.append((alpha_n, beta_n, 0, math.nan, 1))
            continue
        run = predict_schedule(
            score, sched_net, (alpha_n, beta_n), max_steps, beta_min, rng.derive("predict", i, j), dim
        )
        if run.degenerate or run.schedule is None:
            rows.append((alpha_n, beta_n, 0, math.nan, 1))
            continue
        evaluated += 1
        samples = sample(
            score, run.schedule, rng.derive("eval", i, j), reverse_kind, n_eval_samples, dim
        )
        value = float(metric(samples, validation))
        rows.append((alpha_n, beta_n, len(run.schedule), value, 0))
        key = (value, len(run.schedule), i, j)
        if best_key is None or key < best_key:
            best, best_key = run, key
    if best is None:
        raise ValueError("all init pairs invalid")
    return SearchResult(best, best_key[0], rows, evaluated)


def write_search_report(path, result: SearchResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha_N", "beta_N", "steps", "metric", "skipped"])
        for alpha_n, beta_n, steps, value, skipped in result.rows:
            writer.writerow(
                [f"{alpha_n:.17g}", f"{beta_n:.17g}", steps, f"{value:.17g}", skipped]
            )


def legacy_grid_search(
    score,
    n_steps: int,
    validation: np.ndarray,
    metric,
    rng: RngState,
    n_eval_samples: int = 256,
    reverse_kind: str = "ddpm",
):
    """Exhaustive scan over whole schedules; cost 9^N, refused for N > 6.

    Step position k draws from the magnitude rung 10^(-6 (N-k+1) / N) times
    a digit 1..9, one rung per position, so every candidate is monotone
    non-decreasing by construction.
    """
    if n_steps > 6:
        raise ValueError("legacy search unscalable")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    validation = np.asarray(validation, dtype=np.float64)
    dim = validation.shape[1]
    rungs = [10.0 ** (-6.0 * (n_steps - k) / n_steps) for k in range(n_steps)]
    best_betas, best_key = None, None
    count = 0
    for digits in itertools.product(range(1, 10), repeat=n_steps):
        count += 1
        betas = np.array([d * r for d, r in zip(digits, rungs)])
        schedule = inference_from_ladder(betas)
        samples = sample(
            score, schedule, rng.derive("legacy", *digits), reverse_kind, n_eval_samples, dim
        )
        value = float(metric(samples, validation))
        key = (value, digits)
        if best_key is None or key < best_key:
            best_betas, best_key = betas, key
    return best_betas, best_key[0], count
