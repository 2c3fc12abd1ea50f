"""Float64 primitives shared by every other module.

Covers the deterministic random stream, standard-normal sampling, the
closed-form KL divergence between isotropic Gaussians, and the plain-text
tensor format used by checkpoints, datasets and schedule files.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RngState",
    "GaussianParams",
    "gaussian_sample",
    "kl_isotropic_gaussians",
    "format_float",
    "save_tensor",
    "load_tensor",
    "write_tensor",
    "read_tensor",
]


def format_float(x: float) -> str:
    """17 significant digits: enough to round-trip any float64 exactly."""
    return f"{float(x):.17g}"


class RngState:
    """Deterministic random stream with explicit state passing.

    Wraps a Philox counter-based bit generator keyed by blake2s(seed, path).
    Normal draws use numpy's ziggurat transform over the Philox counter
    stream, so for a pinned numpy version the sequence of draws is identical
    across runs and platforms.  There is no global state: every consumer
    receives an RngState and advances it; `derive` mints an independent
    stream for a tag so parallel tasks (grid-search candidates, data splits)
    each own their own reproducible source.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(np.random.Philox(key=self.key()))

    def key(self) -> np.ndarray:
        """128-bit Philox key derived from (seed, path); stable across runs."""
        digest = hashlib.blake2s(repr((self.seed, self.path)).encode()).digest()
        return np.frombuffer(digest[:16], dtype=np.uint64).copy()

    def derive(self, *tags) -> "RngState":
        """Independent stream for a tag tuple (ints or strings)."""
        return RngState(self.seed, self.path + tuple(tags))

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        return self._gen.random(size=size, dtype=np.float64)

    def __repr__(self):
        return f"RngState(seed={self.seed}, path={self.path})"


def gaussian_sample(rng: RngState, shape) -> np.ndarray:
    """I.i.d. standard-normal tensor of the given shape.

    Advances `rng` deterministically; identical (seed, path, call sequence)
    gives bit-identical output.
    """
    dims = tuple(int(d) for d in np.atleast_1d(shape))
    if len(dims) == 0 or any(d < 1 for d in dims):
        raise ValueError("empty shape")
    return rng.standard_normal(dims)


@dataclass
class GaussianParams:
    """Isotropic Gaussian: mean vector plus one scalar variance."""

    mean: np.ndarray
    variance: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance = float(self.variance)
        if not self.variance > 0.0:
            raise ValueError(f"variance must be positive, got {self.variance}")
        if not np.all(np.isfinite(self.mean)):
            raise ValueError("non-finite mean")

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        """Log density, summed over the last axis (broadcasts over leading axes)."""
        x = np.asarray(x, dtype=np.float64)
        d = x.shape[-1] if x.ndim > 0 else 1
        sq = np.sum((x - self.mean) ** 2, axis=-1)
        return -0.5 * (sq / self.variance + d * np.log(2.0 * np.pi * self.variance))

    def sample(self, rng: RngState, n: int | None = None) -> np.ndarray:
        shape = self.mean.shape if n is None else (n,) + self.mean.shape
        return self.mean + np.sqrt(self.variance) * rng.standard_normal(shape)


def kl_isotropic_gaussians(p: GaussianParams, q: GaussianParams) -> float:
    """KL(p || q) for isotropic Gaussians, in closed form.

    ||mu_p - mu_q||^2 / (2 s_q) + (D/2) (s_p/s_q - 1 + ln(s_q/s_p))
    with s = variance.  Non-negative, zero iff p == q.
    """
    if p.mean.shape != q.mean.shape:
        raise ValueError(f"mean shape mismatch: {p.mean.shape} vs {q.mean.shape}")
    d = p.dim
    ratio = p.variance / q.variance
    sq = float(np.sum((p.mean - q.mean) ** 2))
    return sq / (2.0 * q.variance) + 0.5 * d * (ratio - 1.0 - np.log(ratio))


# --- text tensor format -------------------------------------------------
#
# One header line `shape: d1 d2 ...` followed by the values in row-major
# order, 17 significant digits.  2-D tensors are written one row per line.


def write_tensor(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to serialize non-finite tensor")
    fh.write("shape: " + " ".join(str(d) for d in arr.shape) + "\n")
    rows = arr.reshape(arr.shape[0], -1) if arr.ndim >= 2 else arr.reshape(1, -1)
    for row in rows:
        fh.write(" ".join(format_float(v) for v in row) + "\n")


def read_tensor(fh) -> np.ndarray:
    header = fh.readline()
    if not header.startswith("shape:"):
        raise ValueError(f"bad tensor header: {header!r}")
    shape = tuple(int(tok) for tok in header.split()[1:])
    count = int(np.prod(shape)) if shape else 1
    values: list[float] = []
    while len(values) < count:
        line = fh.readline()
        if not line:
            raise ValueError("truncated tensor data")
        values.extend(float(tok) for tok in line.split())
    if len(values) != count:
        raise ValueError(f"expected {count} values, got {len(values)}")
    return np.array(values, dtype=np.float64).reshape(shape)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "w") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path) as fh:
        return read_tensor(fh)
