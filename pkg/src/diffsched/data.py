"""Synthetic datasets: generators, splits, and the on-disk layout.

Three families are enough for every experiment here: an isotropic Gaussian
(the case with a closed-form optimal noise predictor), a two-component
mixture, and eight equal-weight components on a circle of radius four
(the hard-enough benchmark for reverse-process fidelity).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngState, load_tensor, save_tensor

__all__ = ["DatasetSpec", "generate", "save_dataset", "load_dataset", "mixture_components"]

KINDS = ("gaussian", "mixture2", "mixture8")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "gaussian"
    dim: int = 2
    mu0: float = 0.0  # gaussian mean (every coordinate)
    s0: float = 1.0  # gaussian scale
    scale: float = 0.3  # mixture component scale
    n_train: int = 4096
    n_val: int = 2048
    n_test: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind.startswith("mixture") and self.dim != 2:
            raise ValueError("mixtures are defined on dim=2")
        if self.s0 <= 0.0 or self.scale <= 0.0:
            raise ValueError("scales must be positive")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("split sizes must be >= 1")


def mixture_components(spec: DatasetSpec):
    """(means, weights, scale) for the mixture kinds."""
    if spec.kind == "mixture2":
        means = np.array([[3.0, 0.0], [-3.0, 0.0]])
        weights = np.array([0.5, 0.5])
    elif spec.kind == "mixture8":
        angles = 2.0 * np.pi * np.arange(8) / 8.0
        means = 4.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        weights = np.full(8, 1.0 / 8.0)
    else:
        raise ValueError(f"{spec.kind} has no mixture components")
    return means, weights, spec.scale


def _draw(spec: DatasetSpec, n: int, rng: RngState) -> np.ndarray:
    if spec.kind == "gaussian":
        return spec.mu0 + spec.s0 * rng.standard_normal((n, spec.dim))
    means, weights, scale = mixture_components(spec)
    # equal weights: a uniform component index keeps the draw cheap and exact
    comp = rng.integers(0, len(weights), n)
    return means[comp] + scale * rng.standard_normal((n, spec.dim))


def generate(spec: DatasetSpec):
    """Deterministic (train, val, test) arrays; one derived stream per split."""
    root = RngState(spec.seed, ("data", spec.kind))
    train = _draw(spec, spec.n_train, root.derive("train"))
    val = _draw(spec, spec.n_val, root.derive("val"))
    test = _draw(spec, spec.n_test, root.derive("test"))
    return train, val, test


def save_dataset(out_dir, spec: DatasetSpec) -> dict:
    """Write the three splits plus a sidecar spec echo; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays = dict(zip(("train", "val", "test"), generate(spec)))
    paths = {}
    for name, arr in arrays.items():
        path = out_dir / f"data_{name}.txt"
        save_tensor(path, arr)
        paths[name] = path
    sidecar = out_dir / "data_spec.txt"
    with open(sidecar, "w") as fh:
        for key in ("kind", "dim", "mu0", "s0", "scale", "n_train", "n_val", "n_test", "seed"):
            fh.write(f"{key} = {getattr(spec, key)}\n")
    paths["spec"] = sidecar
    return paths


def load_dataset(out_dir):
    out_dir = Path(out_dir)
    return tuple(load_tensor(out_dir / f"data_{name}.txt") for name in ("train", "val", "test"))
