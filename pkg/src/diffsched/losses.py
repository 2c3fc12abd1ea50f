"""Training objectives and their closed-form terms.

Every function accepts a single vector pair or a batch (leading axis); batch
inputs return the mean of the per-sample values so the contract scalar and
the training path share one code path.  The per-step schedule loss exposes
its quadratic/constant breakdown plus an analytic derivative in the step
size, which is the only path gradients take into the schedule network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LossValue",
    "CT_EXACT_KL",
    "CT_QUARTER_LOG",
    "l_ddpm",
    "l_score_simplified",
    "l_score_beta_grad",
    "reconstruction_loss",
    "step_loss_constant",
    "step_loss_constant_grad",
    "l_step",
    "l_step_beta_grad",
    "l_noise_estimation",
]

# Two choices for the constant part of the per-step loss: the variance terms
# of the exact Gaussian KL, and a quarter-log variant kept for fidelity
# comparisons.  They differ by exactly (D/2 - 1/4) * log((1-alpha^2)/beta).
CT_EXACT_KL = "exact_kl"
CT_QUARTER_LOG = "quarter_log"
_CT_VARIANTS = (CT_EXACT_KL, CT_QUARTER_LOG)


@dataclass(frozen=True)
class LossValue:
    value: float
    components: dict | None = None


def _pair(eps_true, eps_pred):
    a = np.asarray(eps_true, dtype=np.float64)
    b = np.asarray(eps_pred, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _sq_norm(diff: np.ndarray) -> float:
    """Mean over leading axes of the per-vector squared L2 norm."""
    if diff.ndim <= 1:
        return float(np.dot(diff.ravel(), diff.ravel()))
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def l_ddpm(eps_true, eps_pred) -> LossValue:
    """Squared error between true and predicted noise."""
    a, b = _pair(eps_true, eps_pred)
    q = _sq_norm(a - b)
    return LossValue(q, {"quadratic": q})


def _check_score_scales(beta_t, alpha_t: float) -> None:
    beta_t = np.asarray(beta_t, dtype=np.float64)
    if np.any(beta_t <= 0.0) or np.any(beta_t >= 1.0):
        raise ValueError("beta must lie in (0, 1)")
    if not 0.0 < alpha_t < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if np.any(1.0 - beta_t - alpha_t * alpha_t <= 0.0):
        raise ValueError("inconsistent scales")


def _per_sample_sq(diff: np.ndarray):
    if diff.ndim > 1:
        return np.sum(diff * diff, axis=-1)
    return float(np.dot(diff.ravel(), diff.ravel()))


def l_score_simplified(eps_true, eps_pred, beta_t, alpha_t: float) -> LossValue:
    """Scaled noise-prediction error: beta/(2(1-beta-alpha^2)) * ||diff||^2.

    Equals the KL between the learned reverse conditional and the forward
    posterior built from the same scales (they share one variance, so the
    KL collapses to a scaled mean difference).  beta_t may be one scalar or
    one value per batch row.
    """
    _check_score_scales(beta_t, alpha_t)
    a, b = _pair(eps_true, eps_pred)
    beta_arr = np.asarray(beta_t, dtype=np.float64)
    coef = beta_arr / (2.0 * (1.0 - beta_arr - alpha_t * alpha_t))
    q = float(np.mean(coef * _per_sample_sq(a - b)))
    return LossValue(q, {"quadratic": q})


def l_score_beta_grad(eps_true, eps_pred, beta_t, alpha_t: float):
    """d l_score_simplified / d beta, per sample (coefficient is increasing in beta)."""
    _check_score_scales(beta_t, alpha_t)
    a, b = _pair(eps_true, eps_pred)
    sq = _per_sample_sq(a - b)
    beta_arr = np.asarray(beta_t, dtype=np.float64)
    rest = 1.0 - beta_arr - alpha_t * alpha_t
    return sq * (1.0 - alpha_t * alpha_t) / (2.0 * rest * rest)


def reconstruction_loss(eps_true, eps_pred, beta_1: float, dim: int) -> LossValue:
    """Negative reconstruction log-likelihood through a one-step decoder.

    value = ||eps_true - eps_pred||^2 / (2 (1-beta_1)) + (dim/2) ln(2 pi beta_1);
    the log constant may make the total negative.
    """
    if not 0.0 < beta_1 < 1.0:
        raise ValueError("beta_1 must lie in (0, 1)")
    a, b = _pair(eps_true, eps_pred)
    quadratic = _sq_norm(a - b) / (2.0 * (1.0 - beta_1))
    log_constant = 0.5 * dim * math.log(2.0 * math.pi * beta_1)
    return LossValue(
        quadratic + log_constant,
        {"quadratic": quadratic, "log_constant": log_constant},
    )


def _check_step_scales(beta_hat, alpha_t: float) -> None:
    beta_hat = np.asarray(beta_hat, dtype=np.float64)
    if np.any(beta_hat <= 0.0) or np.any(beta_hat >= 1.0):
        raise ValueError("beta_hat must lie in (0, 1)")
    if not 0.0 < alpha_t < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if np.any(beta_hat >= 1.0 - alpha_t * alpha_t):
        raise ValueError("inconsistent scales")


def step_loss_constant(beta_hat: float, alpha_t: float, dim: int, variant: str = CT_EXACT_KL):
    """Noise-free part of the per-step loss.

    exact_kl: (dim/2) ln((1-a^2)/b) + (dim/2) (b/(1-a^2) - 1)  -- the variance
    terms of the closed-form Gaussian KL.  quarter_log replaces the first
    coefficient with 1/4.
    """
    _check_step_scales(beta_hat, alpha_t)
    if variant not in _CT_VARIANTS:
        raise ValueError(f"unknown constant variant {variant!r}")
    beta_hat = np.asarray(beta_hat, dtype=np.float64)
    denom = 1.0 - alpha_t * alpha_t
    log_coef = 0.5 * dim if variant == CT_EXACT_KL else 0.25
    out = log_coef * np.log(denom / beta_hat) + 0.5 * dim * (beta_hat / denom - 1.0)
    return float(out) if out.ndim == 0 else out


def step_loss_constant_grad(beta_hat, alpha_t: float, dim: int, variant: str = CT_EXACT_KL):
    _check_step_scales(beta_hat, alpha_t)
    beta_hat = np.asarray(beta_hat, dtype=np.float64)
    denom = 1.0 - alpha_t * alpha_t
    log_coef = 0.5 * dim if variant == CT_EXACT_KL else 0.25
    out = -log_coef / beta_hat + 0.5 * dim / denom
    return float(out) if out.ndim == 0 else out


def _step_quadratic(eps_true, eps_pred, beta_hat, alpha_t):
    """Per-sample quadratic term and the residual vector it is built from."""
    a, b = _pair(eps_true, eps_pred)
    denom = 1.0 - alpha_t * alpha_t
    root = math.sqrt(denom)
    beta_hat = np.asarray(beta_hat, dtype=np.float64)
    if a.ndim > 1 and beta_hat.ndim == 1:
        scale = beta_hat[:, None]
    else:
        scale = beta_hat
    resid = root * a - (scale / root) * b
    sq = np.sum(resid * resid, axis=-1) if resid.ndim > 1 else np.dot(resid.ravel(), resid.ravel())
    coef = 1.0 / (2.0 * (1.0 - beta_hat - alpha_t * alpha_t))
    return coef * sq, resid, b


def l_step(eps_true, eps_pred, beta_hat, alpha_t: float, dim: int, variant: str = CT_EXACT_KL) -> LossValue:
    """Per-step schedule loss: weighted quadratic plus the chosen constant.

    quadratic = || sqrt(1-a^2) eps_true - (b/sqrt(1-a^2)) eps_pred ||^2
                / (2 (1 - b - a^2))
    With the exact_kl constant this equals the KL between the learned
    reverse conditional and the step-size-adjusted previous-state marginal.
    beta_hat may be one scalar or one value per batch row.
    """
    _check_step_scales(beta_hat, alpha_t)
    quad, _, _ = _step_quadratic(eps_true, eps_pred, beta_hat, alpha_t)
    const = step_loss_constant(beta_hat, alpha_t, dim, variant)
    q = float(np.mean(quad))
    c = float(np.mean(const))
    return LossValue(q + c, {"quadratic": q, "constant": c})


def l_step_beta_grad(eps_true, eps_pred, beta_hat, alpha_t: float, dim: int, variant: str = CT_EXACT_KL):
    """Analytic d l_step / d beta_hat, per sample.

    Three contributions: the coefficient 1/(2(1-b-a^2)), the residual's
    -(b/sqrt(1-a^2)) eps_pred term, and the constant's derivative.
    """
    _check_step_scales(beta_hat, alpha_t)
    quad, resid, b_arr = _step_quadratic(eps_true, eps_pred, beta_hat, alpha_t)
    denom = 1.0 - alpha_t * alpha_t
    root = math.sqrt(denom)
    beta_hat_arr = np.asarray(beta_hat, dtype=np.float64)
    rest = 1.0 - beta_hat_arr - alpha_t * alpha_t
    # d coef / d b  *  ||resid||^2 == quad / rest
    g = quad / rest
    inner = np.sum(resid * b_arr, axis=-1) if resid.ndim > 1 else float(np.dot(resid.ravel(), b_arr.ravel()))
    g = g + 2.0 * (1.0 / (2.0 * rest)) * (-inner / root)
    g = g + step_loss_constant_grad(beta_hat_arr, alpha_t, dim, variant)
    return float(g) if np.ndim(g) == 0 else g


def l_noise_estimation(alpha_true, alpha_pred) -> LossValue:
    """Log-scale regression error between true and estimated noise levels.

    (ln(1 - a^2) - ln(1 - a_hat^2))^2, symmetric in its arguments.
    """
    a = np.asarray(alpha_true, dtype=np.float64)
    b = np.asarray(alpha_pred, dtype=np.float64)
    if np.any(a <= 0.0) or np.any(a >= 1.0) or np.any(b <= 0.0) or np.any(b >= 1.0):
        raise ValueError("noise levels must lie in (0, 1)")
    d = np.log(1.0 - a * a) - np.log(1.0 - b * b)
    v = float(np.mean(d * d))
    return LossValue(v, {"quadratic": v})


def l_noise_estimation_pred_grad(alpha_true, alpha_pred):
    """d l_noise_estimation / d alpha_pred, per sample."""
    a = np.asarray(alpha_true, dtype=np.float64)
    b = np.asarray(alpha_pred, dtype=np.float64)
    d = np.log(1.0 - a * a) - np.log(1.0 - b * b)
    return d * (4.0 * b / (1.0 - b * b))
