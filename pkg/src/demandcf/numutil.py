"""Shared numerical helpers: guarded inverses, deterministic reductions.

Symmetric inverses go through an eigendecomposition so that conditioning can
be checked and refused rather than silently regularized.
"""

from __future__ import annotations

import numpy as np

from .errors import RankError

# Relative eigenvalue floor below which a symmetric matrix is refused.
COND_FLOOR = 1e-12


def sym_inverse(a: np.ndarray, name: str = "matrix", floor: float = COND_FLOOR) -> np.ndarray:
    """Invert a symmetric PSD matrix, refusing when it is numerically singular.

    Raises
    ------
    RankError
        If ``lambda_min <= floor * lambda_max``, naming ``name``.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim == 0 or a.size == 1:
        val = float(np.reshape(a, ()))
        if val <= 0.0:
            raise RankError(f"{name} is not positive definite (value {val:.3e})")
        return np.reshape(np.array(1.0 / val), a.shape)
    sym = 0.5 * (a + a.T)
    lam, vec = np.linalg.eigh(sym)
    lmax = float(lam[-1])
    if lmax <= 0.0 or lam[0] <= floor * lmax:
        raise RankError(
            f"{name} is numerically singular: lambda_min/lambda_max = "
            f"{lam[0] / lmax if lmax > 0 else float('-inf'):.3e} <= {floor:.1e}"
        )
    return (vec / lam) @ vec.T


def sym_inv_sqrt(a: np.ndarray, name: str = "matrix", floor: float = COND_FLOOR) -> np.ndarray:
    """Inverse symmetric square root with the same conditioning refusal."""
    a = np.asarray(a, dtype=float)
    sym = 0.5 * (a + a.T)
    lam, vec = np.linalg.eigh(sym)
    lmax = float(lam[-1])
    if lmax <= 0.0 or lam[0] <= floor * lmax:
        raise RankError(
            f"{name} is numerically singular: lambda_min/lambda_max = "
            f"{lam[0] / lmax if lmax > 0 else float('-inf'):.3e} <= {floor:.1e}"
        )
    return (vec / np.sqrt(lam)) @ vec.T


def condition_report(a: np.ndarray) -> tuple[float, float, float]:
    """Return (lambda_min, lambda_max, lambda_min/lambda_max) of a symmetric matrix."""
    lam = np.linalg.eigvalsh(0.5 * (a + a.T))
    lmax = float(lam[-1])
    return float(lam[0]), lmax, float(lam[0] / lmax) if lmax != 0 else float("nan")


def pairwise_sum(blocks: list[np.ndarray]) -> np.ndarray:
    """Fixed-order pairwise summation of partial blocks.

    The tree shape depends only on ``len(blocks)``, so a parallel map that
    produces the same per-block partials yields bit-identical totals for any
    worker count.
    """
    if not blocks:
        raise ValueError("pairwise_sum needs at least one block")
    level = list(blocks)
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            nxt.append(level[i] + level[i + 1])
        if len(level) % 2 == 1:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def chunk_slices(n: int, chunk: int) -> list[slice]:
    """Fixed chunking of ``range(n)``, independent of worker count."""
    return [slice(i, min(i + chunk, n)) for i in range(0, n, chunk)]


def chunked_mean(fn, n: int, chunk: int = 2048) -> np.ndarray:
    """Deterministic mean of ``fn(slice)`` partial sums over fixed chunks.

    ``fn`` must return the *sum* of its chunk's contributions.
    """
    parts = [fn(s) for s in chunk_slices(n, chunk)]
    return pairwise_sum(parts) / n
