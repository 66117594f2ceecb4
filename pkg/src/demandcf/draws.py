"""Fixed draw sets for simulating mixing integrals.

A :class:`DrawSet` is created once per estimation run and shared across all
composite-parameter evaluations (common random numbers), so simulated
objectives are smooth in the parameters and runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.stats import qmc

from .errors import ValidationError

SCHEMES = ("pseudo-mc", "sobol", "gauss-hermite")


@dataclass(frozen=True)
class DrawSet:
    """R x dim standard-normal integration nodes with weights."""

    draws: np.ndarray
    weights: np.ndarray
    scheme: str
    seed: int = 0

    def __post_init__(self):
        draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        object.__setattr__(self, "draws", draws)
        object.__setattr__(self, "weights", weights)
        if self.scheme not in SCHEMES:
            raise ValidationError(f"unknown draw scheme {self.scheme!r}")
        if weights.size != draws.shape[0]:
            raise ValidationError("weights length must match draw count")
        if not np.all(np.isfinite(draws)):
            raise ValidationError("draws contain non-finite values")

    @property
    def count(self) -> int:
        return self.draws.shape[0]

    @property
    def dim(self) -> int:
        return self.draws.shape[1]

    def columns(self, idx: slice | np.ndarray) -> np.ndarray:
        return self.draws[:, idx]


def pseudo_mc(dim: int, count: int, seed: int) -> DrawSet:
    """IID standard-normal draws from a counter-based Philox stream."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    draws = rng.standard_normal((count, dim))
    return DrawSet(draws, np.full(count, 1.0 / count), "pseudo-mc", seed)


def scrambled_sobol(dim: int, count: int, seed: int) -> DrawSet:
    """Scrambled Sobol points mapped through the normal quantile."""
    sampler = qmc.Sobol(d=dim, scramble=True, seed=seed)
    u = sampler.random(count)
    # Keep the quantile transform finite at the corners.
    u = np.clip(u, 1e-12, 1 - 1e-12)
    draws = stats.norm.ppf(u)
    return DrawSet(draws, np.full(count, 1.0 / count), "sobol", seed)


def gauss_hermite(dim: int, nodes: int) -> DrawSet:
    """Tensor-product Gauss-Hermite rule for N(0, I_dim) expectations.

    Offered for dim <= 3 only; the node count grows as ``nodes ** dim``.
    """
    if dim > 3:
        raise ValidationError("gauss-hermite tensor draws are offered for dim <= 3 only")
    x, w = np.polynomial.hermite.hermgauss(nodes)
    x = x * np.sqrt(2.0)
    w = w / np.sqrt(np.pi)
    if dim == 0:
        return DrawSet(np.zeros((1, 0)), np.ones(1), "gauss-hermite", 0)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    draws = np.column_stack([g.ravel() for g in grids])
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    weights = np.ones(draws.shape[0])
    for g in wgrids:
        weights = weights * g.ravel()
    return DrawSet(draws, weights, "gauss-hermite", 0)


def degenerate(dim: int) -> DrawSet:
    """Single draw at the origin (collapses the mixing integral)."""
    return DrawSet(np.zeros((1, dim)), np.ones(1), "gauss-hermite", 0)


def make(scheme: str, dim: int, count: int, seed: int) -> DrawSet:
    """Build a draw set by scheme name; for gauss-hermite, ``count`` is nodes per dim."""
    if scheme == "pseudo-mc":
        return pseudo_mc(dim, count, seed)
    if scheme == "sobol":
        return scrambled_sobol(dim, count, seed)
    if scheme == "gauss-hermite":
        return gauss_hermite(dim, count)
    raise ValidationError(f"unknown draw scheme {scheme!r}")
