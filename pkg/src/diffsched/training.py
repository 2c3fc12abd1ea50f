"""The two training loops.

The noise-prediction network minimizes the plain squared noise error at a
uniformly drawn step.  The schedule-ratio network is trained afterwards
against the frozen predictor: each iteration samples a successor step size
from the skip-window family, turns the network output into a step size via
the monotonicity bound, and descends the per-step loss through that single
scalar path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .diffusion import forward_marginal_sample
from .neuralnet import (
    AdamState,
    MlpModel,
    ScheduleNetwork,
    adam_step,
    mlp_backward,
    mlp_forward,
    mlp_predict,
    schedule_network,
    score_network,
)
from .numerics import RngState
from .schedule import NoiseSchedule, beta_upper_bound, linear_schedule

__all__ = [
    "TrainConfig",
    "TraceRow",
    "TrainingDiverged",
    "train_score",
    "sample_beta_next",
    "train_schedule",
    "write_loss_trace",
]


@dataclass(frozen=True)
class TrainConfig:
    T: int = 1000
    eps: float = 0.02
    tau: int = 20
    batch_size: int = 64
    score_iters: int = 20000
    sched_iters: int = 10000
    lr: float = 1e-3
    seed: int = 0
    ct_variant: str = losses.CT_EXACT_KL

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not 1 <= self.tau < self.T:
            raise ValueError("tau must satisfy 1 <= tau < T")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.eps)


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    loss: float
    quadratic: float
    constant: float


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace):
        super().__init__(message)
        self.trace = trace


def write_loss_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "quadratic", "constant"])
        for row in trace:
            writer.writerow(
                [row.iteration, f"{row.loss:.17g}", f"{row.quadratic:.17g}", f"{row.constant:.17g}"]
            )


def train_score(data: np.ndarray, cfg: TrainConfig, rng: RngState, model: MlpModel | None = None):
    """Minimize the squared noise-prediction error; returns (model, trace).

    Per iteration: a data batch, one uniform step per sample, fresh noise,
    the noisy state at that step, one optimizer update.
    """
    data = np.asarray(data, dtype=np.float64)
    n, dim = data.shape
    if model is None:
        model = score_network(dim, rng.derive("score-init"))
    if model.input_dim != dim:
        raise ValueError(f"model input dim {model.input_dim} != data dim {dim}")
    schedule = cfg.schedule()
    adam = AdamState.for_model(model, lr=cfg.lr)
    trace = []
    b = cfg.batch_size
    for it in range(cfg.score_iters):
        x0 = data[rng.integers(0, n, b)]
        t = rng.integers(1, cfg.T + 1, b)
        alpha = schedule.alphas[t - 1]
        eps = rng.standard_normal((b, dim))
        x_t = alpha[:, None] * x0 + np.sqrt(1.0 - alpha * alpha)[:, None] * eps
        pred, tape = mlp_forward(model, x_t, alpha)
        loss = losses.l_ddpm(eps, pred)
        if not np.isfinite(loss.value):
            raise TrainingDiverged(f"non-finite loss at iteration {it}", trace)
        grads, _ = mlp_backward(tape, 2.0 * (pred - eps) / b)
        adam_step(adam, model, grads)
        trace.append(TraceRow(it, loss.value, loss.value, 0.0))
    return model, trace


def sample_beta_next(schedule: NoiseSchedule, tau: int, rng: RngState):
    """Draw a successor step size from {1 - (alpha_{t+tau}/alpha_t)^2 : t in 2..T-tau}.

    Returns (beta_hat_next, t).  With tau=1 the candidate set is exactly
    {beta_3, ..., beta_T}.
    """
    T = len(schedule)
    if tau >= T - 1:
        raise ValueError("skip factor too large")
    t = int(rng.integers(2, T - tau + 1))
    ratio = schedule.alpha(t + tau) / schedule.alpha(t)
    return 1.0 - ratio * ratio, t


@dataclass
class ScheduleTrainResult:
    model: ScheduleNetwork
    trace: list
    ratio_trace: np.ndarray  # per-iteration mean network output
    skipped: int


def _predict_frozen(score, x, alpha):
    if isinstance(score, MlpModel):
        return mlp_predict(score, x, alpha)
    return score.predict_eps(x, alpha)


def train_schedule(
    score,
    data: np.ndarray,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    rng: RngState,
    objective: str = "step",
) -> ScheduleTrainResult:
    """Train the schedule-ratio network against a frozen noise predictor.

    objective "step" uses the per-step loss; "elbo_reparam" reweights the
    plain score loss by the predicted step size instead (contrast arm: its
    coefficient is increasing in the step size, so it drives the network
    output toward zero).

    Draws whose noise level is inconsistent with the sampled successor step
    (alpha_t^2 >= 1 - beta_next) are skipped, not clamped; the count is
    reported on the result.
    """
    if objective not in ("step", "elbo_reparam"):
        raise ValueError(f"unknown objective {objective!r}")
    data = np.asarray(data, dtype=np.float64)
    n, dim = data.shape
    sched_net = schedule_network(dim, rng.derive("sched-init"))
    adam = AdamState.for_model(sched_net.mlp, lr=cfg.lr)
    trace, ratio_means = [], []
    skipped = 0
    b = cfg.batch_size
    for it in range(cfg.sched_iters):
        # one (t, successor step) pair per iteration, shared by the batch
        for _ in range(1000):
            beta_next, t = sample_beta_next(schedule, cfg.tau, rng)
            alpha_t = schedule.alpha(t)
            if alpha_t * alpha_t < 1.0 - beta_next:
                break
            skipped += 1
        else:
            raise RuntimeError("no valid skip-window draw found")
        bound = beta_upper_bound(alpha_t, beta_next)
        x0 = data[rng.integers(0, n, b)]
        eps = rng.standard_normal((b, dim))
        x_t = forward_marginal_sample(x0, alpha_t, eps)
        eps_hat = _predict_frozen(score, x_t, alpha_t)
        ratios, tape = sched_net.forward(x_t)
        beta_hat = bound * ratios
        if objective == "step":
            loss = losses.l_step(eps, eps_hat, beta_hat, alpha_t, dim, cfg.ct_variant)
            dbeta = losses.l_step_beta_grad(eps, eps_hat, beta_hat, alpha_t, dim, cfg.ct_variant)
        else:
            loss = losses.l_score_simplified(eps, eps_hat, beta_hat, alpha_t)
            dbeta = losses.l_score_beta_grad(eps, eps_hat, beta_hat, alpha_t)
        if not np.isfinite(loss.value):
            raise TrainingDiverged(f"non-finite loss at iteration {it}", trace)
        grads = sched_net.backward(tape, dbeta * bound / b)
        adam_step(adam, sched_net.mlp, grads)
        comp = loss.components or {}
        trace.append(
            TraceRow(it, loss.value, comp.get("quadratic", loss.value), comp.get("constant", 0.0))
        )
        ratio_means.append(float(np.mean(ratios)))
    return ScheduleTrainResult(sched_net, trace, np.array(ratio_means), skipped)
