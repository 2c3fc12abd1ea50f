"""Noise-schedule algebra.

A training schedule is a vector of per-step variances beta in (0,1) with
cumulative scales alpha_t = prod_{i<=t} sqrt(1 - beta_i).  An inference
schedule is a (much shorter) beta vector whose alpha values are computed
backward from an initial pair (alpha_N, beta_N); each of its entries must
stay strictly below the bound min{1 - alpha_next^2 / (1 - beta_next),
beta_next} implied by monotonicity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import format_float

__all__ = [
    "alphas_from_betas",
    "linear_schedule",
    "beta_upper_bound",
    "NoiseSchedule",
    "InferenceSchedule",
    "inference_from_ladder",
    "ScheduleReport",
    "validate_inference_schedule",
    "save_schedule",
    "load_schedule",
]


def alphas_from_betas(betas) -> np.ndarray:
    """Cumulative scales alpha_t = prod_{i<=t} sqrt(1 - beta_i)."""
    betas = np.asarray(betas, dtype=np.float64)
    if betas.size and (np.any(betas <= 0.0) or np.any(betas >= 1.0)):
        raise ValueError("beta values must lie in (0, 1)")
    return np.cumprod(np.sqrt(1.0 - betas))


@dataclass(frozen=True)
class NoiseSchedule:
    """Training noise schedule: betas plus derived cumulative alphas."""

    betas: np.ndarray
    alphas: np.ndarray = field(default=None)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.size < 1:
            raise ValueError("schedule needs at least one step")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas_from_betas(betas))

    def __len__(self) -> int:
        return int(self.betas.size)

    def alpha(self, t: int) -> float:
        """alpha_t for 1-based t; alpha_0 == 1 (empty product)."""
        if t == 0:
            return 1.0
        return float(self.alphas[t - 1])

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])


def linear_schedule(T: int, eps: float) -> NoiseSchedule:
    """Schedule with beta_t = eps / (T - t + 1); the last entry equals eps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    t = np.arange(1, T + 1, dtype=np.float64)
    return NoiseSchedule(eps / (T - t + 1.0))


def inference_from_ladder(betas, margin: float = 1e-9) -> InferenceSchedule:
    """Inference schedule from a plain beta ladder (baseline arms).

    A ladder that matches the forward recursion exactly sits on the boundary
    of the step bound (equality at the first step, fully denoised scale of
    exactly one); shrinking the init scale by `margin` moves it strictly
    inside the valid region without measurably changing the chain.
    """
    betas = np.asarray(betas, dtype=np.float64)
    init_alpha = float(alphas_from_betas(betas)[-1]) * (1.0 - margin)
    return InferenceSchedule(betas, init_alpha)


def beta_upper_bound(alpha_next: float, beta_next: float) -> float:
    """Strict upper limit on the noise scale preceding (alpha_next, beta_next).

    Returns min{1 - alpha_next^2 / (1 - beta_next), beta_next}, which is
    positive whenever alpha_next^2 < 1 - beta_next.  Callers keep the strict
    inequality by multiplying the bound with a ratio in (0, 1).
    """
    if not 0.0 < alpha_next < 1.0:
        raise ValueError(f"alpha_next must lie in (0, 1), got {alpha_next}")
    if not 0.0 < beta_next < 1.0:
        raise ValueError(f"beta_next must lie in (0, 1), got {beta_next}")
    if alpha_next * alpha_next >= 1.0 - beta_next:
        raise ValueError("inconsistent scales")
    return min(1.0 - alpha_next * alpha_next / (1.0 - beta_next), beta_next)


@dataclass(frozen=True)
class InferenceSchedule:
    """Sampling schedule: ascending beta_hats plus the initial (alpha, beta) pair.

    alpha_hats are backward computed from the init:
    alpha_hat_n = alpha_hat_N / prod_{i=n+1..N} sqrt(1 - beta_hat_i),
    so alpha grows as n decreases.  init_beta is beta_hats[-1].
    """

    beta_hats: np.ndarray
    init_alpha: float
    alpha_hats: np.ndarray = field(default=None)

    def __post_init__(self):
        betas = np.asarray(self.beta_hats, dtype=np.float64)
        if betas.size < 1:
            raise ValueError("inference schedule needs at least one step")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("beta_hat values must lie in (0, 1)")
        if not 0.0 < self.init_alpha < 1.0:
            raise ValueError("init alpha must lie in (0, 1)")
        object.__setattr__(self, "beta_hats", betas)
        # alpha_hat_n for n = 1..N; divide the init by the trailing products
        factors = np.sqrt(1.0 - betas)
        trailing = np.cumprod(factors[::-1])[::-1]  # prod_{i=n..N} sqrt(1-b_i)
        alphas = np.empty_like(betas)
        alphas[-1] = self.init_alpha
        if betas.size > 1:
            alphas[:-1] = self.init_alpha / trailing[1:]
        object.__setattr__(self, "alpha_hats", alphas)

    def __len__(self) -> int:
        return int(self.beta_hats.size)

    @property
    def init_beta(self) -> float:
        return float(self.beta_hats[-1])

    def alpha_hat(self, n: int) -> float:
        """1-based n; n == 0 gives the fully denoised scale alpha_1/sqrt(1-beta_1)."""
        if n == 0:
            return float(self.alpha_hats[0] / math.sqrt(1.0 - self.beta_hats[0]))
        return float(self.alpha_hats[n - 1])

    def beta_hat(self, n: int) -> float:
        return float(self.beta_hats[n - 1])


@dataclass(frozen=True)
class ScheduleReport:
    ok: bool
    index: int | None = None  # 1-based position of the first violation
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.ok


def validate_inference_schedule(s: InferenceSchedule) -> ScheduleReport:
    """Check monotonicity and the per-step upper bound; report, never raise."""
    n = len(s)
    for i in range(n - 1):
        if not s.beta_hats[i] < s.beta_hats[i + 1]:
            return ScheduleReport(False, i + 1, "non-monotone")
    for i in range(n - 1):
        try:
            bound = beta_upper_bound(float(s.alpha_hats[i + 1]), float(s.beta_hats[i + 1]))
        except ValueError:
            return ScheduleReport(False, i + 2, "inconsistent scales")
        if not s.beta_hats[i] < bound:
            return ScheduleReport(False, i + 1, "bound violated")
    for i in range(n):
        if not 0.0 < s.alpha_hats[i] < 1.0:
            return ScheduleReport(False, i + 1, "alpha out of range")
    # derived fully-denoised scale must stay below one as well (binds for n=1)
    if not s.alpha_hat(0) < 1.0:
        return ScheduleReport(False, 1, "alpha out of range")
    return ScheduleReport(True)


def save_schedule(path, s: InferenceSchedule) -> None:
    """`N <count>`, one beta_hat per line, then `init <alpha_N> <beta_N>`."""
    with open(path, "w") as fh:
        fh.write(f"N {len(s)}\n")
        for b in s.beta_hats:
            fh.write(format_float(b) + "\n")
        fh.write(f"init {format_float(s.init_alpha)} {format_float(s.init_beta)}\n")


def load_schedule(path) -> InferenceSchedule:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("N "):
        raise ValueError("bad schedule file: missing count line")
    n = int(lines[0].split()[1])
    if len(lines) != n + 2:
        raise ValueError(f"bad schedule file: expected {n + 2} lines, got {len(lines)}")
    betas = np.array([float(ln) for ln in lines[1 : n + 1]])
    init_tok = lines[n + 1].split()
    if init_tok[0] != "init":
        raise ValueError("bad schedule file: missing init line")
    init_alpha, init_beta = float(init_tok[1]), float(init_tok[2])
    sched = InferenceSchedule(betas, init_alpha)
    if abs(sched.init_beta - init_beta) > 1e-12:
        raise ValueError("schedule file init beta disagrees with last beta_hat")
    return sched
