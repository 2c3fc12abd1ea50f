"""Gaussian diffusion kernels and the reverse-process sampler.

The forward process blends data with white noise at a cumulative scale
alpha; the reverse process walks back from white noise using a noise
predictor, with either the ancestral (stochastic) step or the deterministic
transport step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import GaussianParams, RngState, gaussian_sample
from .neuralnet import MlpModel, mlp_predict
from .schedule import InferenceSchedule, validate_inference_schedule

__all__ = [
    "DiffusionStep",
    "forward_marginal_sample",
    "forward_posterior",
    "reverse_gaussian",
    "marginal_before_step",
    "ddpm_reverse_step",
    "ddim_reverse_step",
    "ddim_prediction",
    "predict_eps",
    "sample",
]


@dataclass(frozen=True)
class DiffusionStep:
    """One (beta_t, alpha_t, alpha_prev) triple; consistency is enforced."""

    t: int
    beta_t: float
    alpha_t: float
    alpha_prev: float

    def __post_init__(self):
        if not 0.0 < self.beta_t < 1.0:
            raise ValueError("beta_t must lie in (0, 1)")
        expected = self.alpha_prev * math.sqrt(1.0 - self.beta_t)
        if abs(self.alpha_t - expected) > 1e-12:
            raise ValueError(
                f"inconsistent step scales: alpha_t={self.alpha_t}, "
                f"alpha_prev*sqrt(1-beta_t)={expected}"
            )

    @classmethod
    def from_training(cls, schedule, t: int) -> "DiffusionStep":
        return cls(t, schedule.beta(t), schedule.alpha(t), schedule.alpha(t - 1))

    @classmethod
    def from_inference(cls, schedule: InferenceSchedule, n: int) -> "DiffusionStep":
        return cls(n, schedule.beta_hat(n), schedule.alpha_hat(n), schedule.alpha_hat(n - 1))


def forward_marginal_sample(x0: np.ndarray, alpha_t: float, eps: np.ndarray) -> np.ndarray:
    """x_t = alpha_t * x0 + sqrt(1 - alpha_t^2) * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {eps.shape}")
    if not 0.0 < alpha_t <= 1.0:
        raise ValueError("alpha_t must lie in (0, 1]")
    return alpha_t * x0 + math.sqrt(1.0 - alpha_t * alpha_t) * eps


def forward_posterior(x0: np.ndarray, x_t: np.ndarray, step: DiffusionStep) -> GaussianParams:
    """Conditional of the previous state given (x_t, x0) under the forward chain.

    mean = (alpha_prev beta_t / (1-alpha_t^2)) x0
         + (sqrt(1-beta_t)(1-alpha_prev^2) / (1-alpha_t^2)) x_t
    variance = (1-alpha_prev^2) beta_t / (1-alpha_t^2)
    """
    if step.t <= 1:
        raise ValueError("no posterior at t=1")
    x0 = np.asarray(x0, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x0.shape != x_t.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x_t.shape}")
    denom = 1.0 - step.alpha_t ** 2
    coef0 = step.alpha_prev * step.beta_t / denom
    coeft = math.sqrt(1.0 - step.beta_t) * (1.0 - step.alpha_prev ** 2) / denom
    variance = (1.0 - step.alpha_prev ** 2) * step.beta_t / denom
    return GaussianParams(coef0 * x0 + coeft * x_t, variance)


def reverse_gaussian(x_t: np.ndarray, eps_hat: np.ndarray, beta: float, alpha: float) -> GaussianParams:
    """Learned reverse conditional for an arbitrary (beta, alpha) pair.

    mean = (x_t - (beta/sqrt(1-alpha^2)) eps_hat) / sqrt(1-beta)
    variance = (1-beta-alpha^2) beta / ((1-beta)(1-alpha^2))
    """
    denom = 1.0 - alpha * alpha
    if denom <= 0.0:
        raise ValueError("alpha must lie strictly below 1")
    if not 0.0 < beta < 1.0 or 1.0 - beta - alpha * alpha <= 0.0:
        raise ValueError("inconsistent scales")
    mean = (x_t - (beta / math.sqrt(denom)) * eps_hat) / math.sqrt(1.0 - beta)
    variance = (1.0 - beta - alpha * alpha) * beta / ((1.0 - beta) * denom)
    return GaussianParams(mean, variance)


def marginal_before_step(x0: np.ndarray, beta_hat: float, alpha_t: float) -> GaussianParams:
    """Previous-state marginal implied by scale alpha_t and step size beta_hat.

    N(alpha_t x0 / sqrt(1-beta_hat), (1 - alpha_t^2/(1-beta_hat)) I); with the
    training beta at step t this is exactly the forward marginal at t-1.
    """
    if not 0.0 < beta_hat < 1.0:
        raise ValueError("beta_hat must lie in (0, 1)")
    scale = alpha_t / math.sqrt(1.0 - beta_hat)
    variance = 1.0 - alpha_t * alpha_t / (1.0 - beta_hat)
    if variance <= 0.0:
        raise ValueError("inconsistent scales")
    return GaussianParams(scale * np.asarray(x0, dtype=np.float64), variance)


def ddpm_reverse_step(x_t, eps_hat, step: DiffusionStep, z) -> np.ndarray:
    """Ancestral reverse step: posterior-shaped mean plus scaled noise z."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if eps_hat.shape != x_t.shape or z.shape != x_t.shape:
        raise ValueError("shape mismatch")
    denom = 1.0 - step.alpha_t ** 2
    if denom <= 0.0:
        raise ValueError("degenerate scales: alpha_t == 1")
    mean = (x_t - (step.beta_t / math.sqrt(denom)) * eps_hat) / math.sqrt(1.0 - step.beta_t)
    variance = (1.0 - step.alpha_prev ** 2) / denom * step.beta_t
    return mean + math.sqrt(variance) * z


def ddim_prediction(x_t, eps_hat, alpha_t: float) -> np.ndarray:
    """Direct estimate of the clean signal: (x_t - sqrt(1-alpha_t^2) eps_hat) / alpha_t."""
    return (x_t - math.sqrt(1.0 - alpha_t * alpha_t) * eps_hat) / alpha_t


def ddim_reverse_step(x_t, eps_hat, alpha_t: float, alpha_prev: float, eta: float, z) -> np.ndarray:
    """Non-Markovian reverse step; deterministic transport at eta=0.

    x_prev = alpha_prev * f + sqrt(1 - alpha_prev^2 - sigma^2) * eps_hat + sigma * z
    with f the clean-signal prediction and
    sigma = eta * sqrt((1-alpha_prev^2)/(1-alpha_t^2)) * sqrt(1 - alpha_t^2/alpha_prev^2).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if not 0.0 < alpha_t < 1.0 or not 0.0 < alpha_prev < 1.0:
        raise ValueError("alpha values must lie in (0, 1)")
    sigma = eta * math.sqrt((1.0 - alpha_prev ** 2) / (1.0 - alpha_t ** 2)) * math.sqrt(
        max(1.0 - alpha_t ** 2 / alpha_prev ** 2, 0.0)
    )
    residual = 1.0 - alpha_prev ** 2 - sigma ** 2
    if residual < 0.0:
        raise ValueError("invalid sigma")
    f = ddim_prediction(x_t, eps_hat, alpha_t)
    return alpha_prev * f + math.sqrt(residual) * eps_hat + sigma * z


def predict_eps(model, x, alpha):
    """Noise prediction from either a trained net or an analytic stand-in."""
    if isinstance(model, MlpModel):
        return mlp_predict(model, x, alpha)
    return model.predict_eps(x, alpha)


def sample(
    model,
    schedule: InferenceSchedule,
    rng: RngState,
    reverse_kind: str = "ddpm",
    n_samples: int = 1,
    dim: int | None = None,
) -> np.ndarray:
    """Run the full reverse chain from white noise; returns (n_samples, dim).

    The schedule is validated up front; no noise is injected at the final
    step (ancestral kind) and the final transport step maps straight to the
    clean-signal prediction (deterministic kind).
    """
    report = validate_inference_schedule(schedule)
    if not report:
        raise ValueError(f"invalid schedule at n={report.index}: {report.reason}")
    if reverse_kind not in ("ddpm", "ddim"):
        raise ValueError(f"unknown reverse kind {reverse_kind!r}")
    if dim is None:
        if not isinstance(model, MlpModel):
            raise ValueError("dim is required for non-network models")
        dim = model.input_dim
    x = gaussian_sample(rng, (n_samples, dim))
    n_steps = len(schedule)
    for n in range(n_steps, 0, -1):
        alpha_n = schedule.alpha_hat(n)
        beta_n = schedule.beta_hat(n)
        eps_hat = predict_eps(model, x, alpha_n)
        if reverse_kind == "ddpm":
            z = np.zeros_like(x) if n == 1 else gaussian_sample(rng, (n_samples, dim))
            step = DiffusionStep.from_inference(schedule, n)
            x = ddpm_reverse_step(x, eps_hat, step, z)
        else:
            if n == 1:
                x = ddim_prediction(x, eps_hat, alpha_n)
            else:
                x = ddim_reverse_step(
                    x, eps_hat, alpha_n, schedule.alpha_hat(n - 1), 0.0, np.zeros_like(x)
                )
    return x
