"""Structural parameters, attribute matrices, and composite-parameter maps.

Three model families are supported, each with a fixed, documented block
order for both the structural vector ``theta`` and the composite vector
``gamma``:

``blp-aggregate``
    theta = (alpha_mean, alpha_scale, beta_xbar_mean, beta_e_mean,
    chol_xbar, chol_e); gamma = (alpha_mean, alpha_scale, beta_xbar_mean,
    e_beta_e, chol_xbar, attr_factor).

``mixed-logit-fe``
    theta = (alpha_mean, fixed_effects, pi_xbar, pi_e, chol_alpha,
    chol_xbar, chol_e); gamma = (alpha_mean, fixed_effects, pi_xbar,
    e_pi_e, chol_alpha, chol_xbar, attr_factor).

``micro-blp``
    theta = (alpha_mean, alpha_scale, beta_xbar_mean, beta_e_mean, pi_ybar,
    pi_xbar, pi_p, pi_e, chol_xbar, chol_e); gamma = (alpha_mean,
    alpha_scale, beta_xbar_mean, e_beta_e, pi_ybar, pi_xbar, pi_p, e_pi_e,
    chol_xbar, attr_factor).

``attr_factor`` is the lower-trapezoidal positive-diagonal factor of the
J x J gram built from the attribute matrix and the attribute-coefficient
covariance; it has ``J*r - r*(r-1)/2`` entries, stacked row-major. All
stacked Cholesky blocks are row-major lower triangles.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DecompositionError, DimensionError, RankError

FAMILIES = ("blp-aggregate", "mixed-logit-fe", "micro-blp")

# Relative singular-value tolerance for numerical rank decisions.
RANK_RTOL = 1e-10


# ---------------------------------------------------------------------------
# attribute matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttributeMatrix:
    """J x r matrix of latent attributes or their proxies."""

    values: np.ndarray
    kind: str = "proxy"  # "true-latent" or "proxy"

    def __post_init__(self):
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "values", vals)
        if self.kind not in ("true-latent", "proxy"):
            raise ValueError(f"unknown attribute kind {self.kind!r}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("attribute matrix contains non-finite entries")
        j, r = vals.shape
        if r > j:
            raise DimensionError(f"attribute matrix is {j} x {r}; need r <= J")
        sv = np.linalg.svd(vals, compute_uv=False)
        if sv[-1] <= RANK_RTOL * sv[0]:
            raise RankError(
                f"attribute matrix has numerical column rank < {r} "
                f"(sigma_min/sigma_max = {sv[-1] / sv[0]:.3e})"
            )

    @property
    def J(self) -> int:
        return self.values.shape[0]

    @property
    def r(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# Cholesky stacking
# ---------------------------------------------------------------------------


def _tril_index_pairs(dim: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(dim) for j in range(i + 1)]


def chol_stack(cov: np.ndarray) -> np.ndarray:
    """Stack the lower-triangular Cholesky factor of an SPD matrix, row-major.

    Raises
    ------
    DecompositionError
        For non-positive-definite input, naming the offending leading minor.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1]:
        raise DimensionError(f"covariance must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-8 * max(1.0, np.abs(cov).max())):
        raise DecompositionError("covariance matrix is not symmetric")
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        # Locate the first non-positive leading minor for the error message.
        for k in range(1, cov.shape[0] + 1):
            if np.linalg.det(cov[:k, :k]) <= 0.0:
                raise DecompositionError(
                    f"covariance is not positive definite: leading minor of order {k} "
                    "is non-positive"
                ) from None
        raise DecompositionError("covariance is not positive definite") from None
    return np.array([factor[i, j] for i, j in _tril_index_pairs(cov.shape[0])])


def chol_unstack(stacked: np.ndarray, dim: int) -> np.ndarray:
    """Inverse of :func:`chol_stack`: rebuild the lower-triangular factor."""
    stacked = np.asarray(stacked, dtype=float).ravel()
    expected = dim * (dim + 1) // 2
    if stacked.size != expected:
        raise DimensionError(f"expected {expected} stacked entries for dim {dim}, got {stacked.size}")
    factor = np.zeros((dim, dim))
    for idx, (i, j) in enumerate(_tril_index_pairs(dim)):
        factor[i, j] = stacked[idx]
    return factor


def _trapezoid_index_pairs(j_dim: int, r: int) -> list[tuple[int, int]]:
    return [(i, k) for i in range(j_dim) for k in range(min(i + 1, r))]


def trapezoid_size(j_dim: int, r: int) -> int:
    return j_dim * r - r * (r - 1) // 2


def trapezoid_stack(factor: np.ndarray) -> np.ndarray:
    j_dim, r = factor.shape
    return np.array([factor[i, k] for i, k in _trapezoid_index_pairs(j_dim, r)])


def trapezoid_unstack(stacked: np.ndarray, j_dim: int, r: int) -> np.ndarray:
    stacked = np.asarray(stacked, dtype=float).ravel()
    if stacked.size != trapezoid_size(j_dim, r):
        raise DimensionError(
            f"expected {trapezoid_size(j_dim, r)} trapezoid entries, got {stacked.size}"
        )
    factor = np.zeros((j_dim, r))
    for idx, (i, k) in enumerate(_trapezoid_index_pairs(j_dim, r)):
        factor[i, k] = stacked[idx]
    return factor


def lower_trapezoid(a: np.ndarray) -> np.ndarray:
    """Reduce a full-column-rank J x r matrix A to the unique lower-trapezoidal
    factor L with positive diagonal and L L' = A A' (LQ-style reduction)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    j_dim, r = a.shape
    q, rmat = np.linalg.qr(a.T)  # a.T is r x J; rmat is r x J upper-trapezoidal
    factor = rmat.T  # J x r lower-trapezoidal
    scale = max(np.abs(a).max(), 1.0)
    for k in range(r):
        pivot = factor[k, k]
        if abs(pivot) <= RANK_RTOL * scale:
            raise RankError(
                f"trapezoid factor diagonal entry {k} is numerically zero; "
                "sign convention undefined (rank-deficient factor)"
            )
        if pivot < 0:
            factor[:, k] = -factor[:, k]
    # Zero out round-off above the diagonal.
    for i in range(min(j_dim, r)):
        factor[i, i + 1 :] = 0.0
    return factor


def rank_r_chol(gram: np.ndarray, r: int) -> np.ndarray:
    """Rank-r Cholesky factor of a J x J PSD gram of numerical rank r.

    Returns the unique J x r lower-trapezoidal matrix L with positive
    diagonal entries and ``L @ L.T == gram``.

    Raises
    ------
    RankError
        If the numerical rank of ``gram`` differs from ``r``.
    DecompositionError
        If ``gram`` has a significantly negative eigenvalue.
    """
    gram = np.atleast_2d(np.asarray(gram, dtype=float))
    j_dim = gram.shape[0]
    if gram.shape != (j_dim, j_dim):
        raise DimensionError(f"gram must be square, got {gram.shape}")
    if not (1 <= r <= j_dim):
        raise DimensionError(f"need 1 <= r <= J, got r={r}, J={j_dim}")
    lam, vec = np.linalg.eigh(0.5 * (gram + gram.T))
    lmax = float(lam[-1])
    if lmax <= 0.0:
        raise RankError("gram matrix is numerically zero")
    if lam[0] < -RANK_RTOL * lmax * j_dim:
        raise DecompositionError(
            f"gram matrix is not PSD (lambda_min = {lam[0]:.3e})"
        )
    nrank = int(np.sum(lam > RANK_RTOL * lmax))
    if nrank < r:
        raise RankError(f"gram has numerical rank {nrank} < requested r = {r}")
    if nrank > r:
        raise RankError(
            f"gram has numerical rank {nrank} > requested r = {r} (inconsistent input)"
        )
    top = lam[-r:]
    a = vec[:, -r:] * np.sqrt(top)
    return lower_trapezoid(a)


# ---------------------------------------------------------------------------
# block layouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockLayout:
    """Ordered named blocks of a parameter vector with positivity flags."""

    names: tuple[str, ...]
    sizes: tuple[int, ...]
    positive: tuple[np.ndarray, ...]  # boolean mask per block

    @property
    def dim(self) -> int:
        return int(sum(self.sizes))

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, size in zip(self.names, self.sizes):
            out[name] = slice(start, start + size)
            start += size
        return out

    def block(self, values: np.ndarray, name: str) -> np.ndarray:
        return np.asarray(values)[self.slices()[name]]

    def positive_mask(self) -> np.ndarray:
        if not self.names:
            return np.zeros(0, dtype=bool)
        return np.concatenate([np.asarray(m, dtype=bool) for m in self.positive])

    def describe(self) -> list[dict]:
        """Serializable descriptor (one entry per block)."""
        return [
            {"name": n, "size": int(s), "positive": [bool(b) for b in m]}
            for n, s, m in zip(self.names, self.sizes, self.positive)
        ]


def _chol_positive_mask(dim: int) -> np.ndarray:
    mask = np.zeros(dim * (dim + 1) // 2, dtype=bool)
    for idx, (i, j) in enumerate(_tril_index_pairs(dim)):
        mask[idx] = i == j
    return mask


def _trapezoid_positive_mask(j_dim: int, r: int) -> np.ndarray:
    mask = np.zeros(trapezoid_size(j_dim, r), dtype=bool)
    for idx, (i, k) in enumerate(_trapezoid_index_pairs(j_dim, r)):
        mask[idx] = i == k
    return mask


def _layout(blocks: list[tuple[str, int, np.ndarray]]) -> BlockLayout:
    blocks = [(n, s, m) for n, s, m in blocks if s > 0]
    return BlockLayout(
        names=tuple(n for n, _, _ in blocks),
        sizes=tuple(s for _, s, _ in blocks),
        positive=tuple(m for _, _, m in blocks),
    )


def gamma_layout(family: str, J: int, r: int, dim_xbar: int = 0, dim_y: int = 0,
                 dim_ybar: int = 0) -> BlockLayout:
    """Composite-parameter block layout for a family and problem dimensions."""
    free = lambda k: np.zeros(k, dtype=bool)
    cx = dim_xbar * (dim_xbar + 1) // 2
    attr = trapezoid_size(J, r)
    if family == "blp-aggregate":
        blocks = [
            ("alpha_mean", 1, free(1)),
            ("alpha_scale", 1, np.ones(1, dtype=bool)),
            ("beta_xbar_mean", dim_xbar, free(dim_xbar)),
            ("e_beta_e", J, free(J)),
            ("chol_xbar", cx, _chol_positive_mask(dim_xbar)),
            ("attr_factor", attr, _trapezoid_positive_mask(J, r)),
        ]
    elif family == "mixed-logit-fe":
        blocks = [
            ("alpha_mean", 1, free(1)),
            ("fixed_effects", J, free(J)),
            ("pi_xbar", dim_xbar * dim_y, free(dim_xbar * dim_y)),
            ("e_pi_e", J * dim_y, free(J * dim_y)),
            ("chol_alpha", 1, np.ones(1, dtype=bool)),
            ("chol_xbar", cx, _chol_positive_mask(dim_xbar)),
            ("attr_factor", attr, _trapezoid_positive_mask(J, r)),
        ]
    elif family == "micro-blp":
        blocks = [
            ("alpha_mean", 1, free(1)),
            ("alpha_scale", 1, np.ones(1, dtype=bool)),
            ("beta_xbar_mean", dim_xbar, free(dim_xbar)),
            ("e_beta_e", J, free(J)),
            ("pi_ybar", dim_ybar, free(dim_ybar)),
            ("pi_xbar", dim_xbar * dim_y, free(dim_xbar * dim_y)),
            ("pi_p", dim_y, free(dim_y)),
            ("e_pi_e", J * dim_y, free(J * dim_y)),
            ("chol_xbar", cx, _chol_positive_mask(dim_xbar)),
            ("attr_factor", attr, _trapezoid_positive_mask(J, r)),
        ]
    else:
        raise ValueError(f"unknown family {family!r}")
    return _layout(blocks)


@dataclass(frozen=True)
class CompositeParam:
    """Composite parameter vector with its block layout."""

    values: np.ndarray
    layout: BlockLayout
    family: str

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).ravel()
        object.__setattr__(self, "values", vals)
        if vals.size != self.layout.dim:
            raise DimensionError(
                f"gamma has {vals.size} entries but layout dimension is {self.layout.dim}"
            )
        mask = self.layout.positive_mask()
        if np.any(vals[mask] <= 0.0):
            bad = np.where(mask & (vals <= 0.0))[0]
            raise ValueError(f"positivity-flagged gamma entries are non-positive at {bad.tolist()}")

    @property
    def dim(self) -> int:
        return self.values.size

    def block(self, name: str) -> np.ndarray:
        return self.layout.block(self.values, name)

    def with_values(self, values: np.ndarray) -> "CompositeParam":
        return CompositeParam(values, self.layout, self.family)


# ---------------------------------------------------------------------------
# structural parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StructuralParams:
    """Model-native parameter vector theta for one of the three families."""

    family: str
    alpha_mean: float = 0.0
    alpha_scale: Optional[float] = None  # blp-aggregate / micro-blp
    alpha_cov_chol: Optional[np.ndarray] = None  # mixed-logit-fe, stacked
    beta_xbar_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta_e_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    chol_xbar: np.ndarray = field(default_factory=lambda: np.zeros(0))
    chol_e: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fixed_effects: Optional[np.ndarray] = None  # mixed-logit-fe
    pi_xbar: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    pi_p: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pi_e: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    pi_ybar: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        for name in ("beta_xbar_mean", "beta_e_mean", "chol_xbar", "chol_e", "pi_p", "pi_ybar"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        for name in ("pi_xbar", "pi_e"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        if self.alpha_cov_chol is not None:
            object.__setattr__(self, "alpha_cov_chol", np.asarray(self.alpha_cov_chol, dtype=float).ravel())
        if self.fixed_effects is not None:
            object.__setattr__(self, "fixed_effects", np.asarray(self.fixed_effects, dtype=float).ravel())
        self._validate()

    def _validate(self):
        if self.family == "mixed-logit-fe":
            if self.fixed_effects is None:
                raise DimensionError("mixed-logit-fe requires fixed_effects")
            if self.alpha_cov_chol is None or self.alpha_cov_chol.size != 1:
                raise DimensionError("mixed-logit-fe requires a scalar alpha_cov_chol block")
            if self.alpha_cov_chol[0] <= 0:
                raise ValueError("alpha_cov_chol diagonal must be strictly positive")
        else:
            if self.alpha_scale is None or self.alpha_scale <= 0:
                raise ValueError(f"{self.family} requires alpha_scale > 0")
        r = self.r
        if self.chol_e.size != r * (r + 1) // 2:
            raise DimensionError(
                f"chol_e has {self.chol_e.size} entries; expected {r * (r + 1) // 2} for r={r}"
            )
        diag_e = chol_unstack(self.chol_e, r).diagonal() if r else np.zeros(0)
        if np.any(diag_e <= 0):
            raise ValueError("chol_e diagonal entries must be strictly positive")
        dx = self.dim_xbar
        if self.chol_xbar.size != dx * (dx + 1) // 2:
            raise DimensionError("chol_xbar size inconsistent with beta_xbar_mean/pi_xbar")
        if dx and np.any(chol_unstack(self.chol_xbar, dx).diagonal() <= 0):
            raise ValueError("chol_xbar diagonal entries must be strictly positive")

    @property
    def r(self) -> int:
        if self.pi_e.size:
            return self.pi_e.shape[0]
        if self.beta_e_mean.size:
            return self.beta_e_mean.size
        # Infer from the stacked Cholesky length: k(k+1)/2 entries.
        k = int((np.sqrt(8 * self.chol_e.size + 1) - 1) / 2)
        return k

    @property
    def dim_xbar(self) -> int:
        if self.beta_xbar_mean.size:
            return self.beta_xbar_mean.size
        if self.pi_xbar.size:
            return self.pi_xbar.shape[0]
        # mixed-logit-fe carries no xbar mean block; infer from the factor.
        return int((np.sqrt(8 * self.chol_xbar.size + 1) - 1) / 2)

    @property
    def dim_y(self) -> int:
        if self.pi_e.size:
            return self.pi_e.shape[1]
        if self.pi_xbar.size:
            return self.pi_xbar.shape[1]
        return self.pi_p.size

    def to_vector(self) -> np.ndarray:
        """Pack theta into a flat vector in the documented per-family order."""
        if self.family == "blp-aggregate":
            parts = [
                [self.alpha_mean, self.alpha_scale],
                self.beta_xbar_mean, self.beta_e_mean, self.chol_xbar, self.chol_e,
            ]
        elif self.family == "mixed-logit-fe":
            parts = [
                [self.alpha_mean], self.fixed_effects,
                self.pi_xbar.ravel(), self.pi_e.ravel(),
                self.alpha_cov_chol, self.chol_xbar, self.chol_e,
            ]
        else:  # micro-blp
            parts = [
                [self.alpha_mean, self.alpha_scale],
                self.beta_xbar_mean, self.beta_e_mean, self.pi_ybar,
                self.pi_xbar.ravel(), self.pi_p, self.pi_e.ravel(),
                self.chol_xbar, self.chol_e,
            ]
        return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])

    def from_vector(self, vec: np.ndarray) -> "StructuralParams":
        """Unpack a flat vector with this instance's dimensions as template."""
        vec = np.asarray(vec, dtype=float).ravel()
        if vec.size != self.to_vector().size:
            raise DimensionError(f"theta vector has {vec.size} entries, expected {self.to_vector().size}")
        pos = [0]

        def take(k: int) -> np.ndarray:
            out = vec[pos[0] : pos[0] + k]
            pos[0] += k
            return out

        dx, r, dy = self.dim_xbar, self.r, self.dim_y
        cx, ce = dx * (dx + 1) // 2, r * (r + 1) // 2
        if self.family == "blp-aggregate":
            return replace(
                self,
                alpha_mean=float(take(1)[0]), alpha_scale=float(take(1)[0]),
                beta_xbar_mean=take(dx), beta_e_mean=take(r),
                chol_xbar=take(cx), chol_e=take(ce),
            )
        if self.family == "mixed-logit-fe":
            j_dim = self.fixed_effects.size
            return replace(
                self,
                alpha_mean=float(take(1)[0]), fixed_effects=take(j_dim),
                pi_xbar=take(dx * dy).reshape(dx, dy) if dx * dy else np.zeros((0, 0)),
                pi_e=take(r * dy).reshape(r, dy) if r * dy else np.zeros((0, 0)),
                alpha_cov_chol=take(1), chol_xbar=take(cx), chol_e=take(ce),
            )
        return replace(
            self,
            alpha_mean=float(take(1)[0]), alpha_scale=float(take(1)[0]),
            beta_xbar_mean=take(dx), beta_e_mean=take(r), pi_ybar=take(self.pi_ybar.size),
            pi_xbar=take(dx * dy).reshape(dx, dy) if dx * dy else np.zeros((0, 0)),
            pi_p=take(dy), pi_e=take(r * dy).reshape(r, dy) if r * dy else np.zeros((0, 0)),
            chol_xbar=take(cx), chol_e=take(ce),
        )


# ---------------------------------------------------------------------------
# the reparameterization map and its Jacobians
# ---------------------------------------------------------------------------


def gamma_of(theta: StructuralParams, e: AttributeMatrix) -> CompositeParam:
    """Composite parameter gamma(theta, e) for theta's family.

    Blocks that do not interact with the attributes are copied verbatim;
    attribute-interacting blocks are the products ``e @ beta_e_mean``,
    ``e @ pi_e``, and the lower-trapezoidal factor of the attribute gram.
    """
    values, layout = _gamma_values(theta, e)
    return CompositeParam(values, layout, theta.family)


def _gamma_values(theta: StructuralParams, e: AttributeMatrix) -> tuple[np.ndarray, BlockLayout]:
    """Raw gamma vector without the Gamma-membership validation."""
    evals = e.values
    j_dim, r = evals.shape
    if theta.r != r:
        raise DimensionError(f"theta has r={theta.r} but attribute matrix has r={r}")
    if theta.family == "mixed-logit-fe" and theta.fixed_effects.size != j_dim:
        raise DimensionError(
            f"fixed_effects has length {theta.fixed_effects.size} but J={j_dim}"
        )
    c_e = chol_unstack(theta.chol_e, r)
    attr_factor = trapezoid_stack(lower_trapezoid(evals @ c_e))
    dy = theta.dim_y
    layout = gamma_layout(theta.family, j_dim, r, theta.dim_xbar, dy, theta.pi_ybar.size)
    if theta.family == "blp-aggregate":
        parts = [
            [theta.alpha_mean, theta.alpha_scale],
            theta.beta_xbar_mean, evals @ theta.beta_e_mean,
            theta.chol_xbar, attr_factor,
        ]
    elif theta.family == "mixed-logit-fe":
        parts = [
            [theta.alpha_mean], theta.fixed_effects,
            theta.pi_xbar.ravel(),
            (evals @ theta.pi_e).ravel() if dy else np.zeros(0),
            theta.alpha_cov_chol, theta.chol_xbar, attr_factor,
        ]
    else:
        parts = [
            [theta.alpha_mean, theta.alpha_scale],
            theta.beta_xbar_mean, evals @ theta.beta_e_mean, theta.pi_ybar,
            theta.pi_xbar.ravel(), theta.pi_p,
            (evals @ theta.pi_e).ravel() if dy else np.zeros(0),
            theta.chol_xbar, attr_factor,
        ]
    values = np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])
    return values, layout


def gamma_theta_jacobian(theta: StructuralParams, e: AttributeMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Exact d gamma / d theta via forward-mode duals over the packed theta.

    Returns ``(gamma_values, jac)`` with ``jac[m, k] = d gamma_m / d theta_k``.
    The trapezoid block is differentiated through a rank-r Cholesky deflation
    of the attribute gram, which is algebraically the same factor as the
    LQ reduction. Estimation chains use this; the standalone
    :func:`gamma_jacobians` operation stays finite-difference by convention.
    """
    from . import dual as _dual

    evals = e.values
    j_dim, r = evals.shape
    if theta.r != r:
        raise DimensionError(f"theta has r={theta.r} but attribute matrix has r={r}")
    tvec = theta.to_vector()
    dx, dy = theta.dim_xbar, theta.dim_y

    def build(g):
        pos = [0]

        def take(k: int):
            out = g[pos[0] : pos[0] + k]
            pos[0] += k
            return out

        def e_times_vec(coefs):  # returns ``e @ coefs`` as a dual J-vector
            acc = None
            for l in range(r):
                term = coefs[l : l + 1] * evals[:, l]
                acc = term if acc is None else acc + term
            return acc

        def e_times_mat(flat, width):  # ravel of ``e @ M`` for M = flat.reshape(r, width)
            cols = []
            for b in range(width):
                acc = None
                for l in range(r):
                    term = flat[l * width + b : l * width + b + 1] * evals[:, l]
                    acc = term if acc is None else acc + term
                cols.append(acc)
            # interleave columns back to row-major (J x width).ravel()
            parts = []
            for j in range(j_dim):
                for b in range(width):
                    parts.append(cols[b][j : j + 1])
            return _dual.dcat(parts)

        def attr_block(chol_e_flat):
            # gram of e @ C_e, then a pivoted-order-free Cholesky deflation
            c_cols = []
            idx = 0
            rows = [[None] * r for _ in range(r)]
            for i in range(r):
                for j in range(i + 1):
                    rows[i][j] = chol_e_flat[idx : idx + 1]
                    idx += 1
            for k in range(r):
                acc = None
                for l in range(k, r):
                    term = rows[l][k] * evals[:, l]
                    acc = term if acc is None else acc + term
                c_cols.append(acc)  # column k of e @ C_e
            gram = None
            for col in c_cols:
                outer = col.reshape(j_dim, 1) * col.reshape(1, j_dim)
                gram = outer if gram is None else gram + outer
            entries = []
            for k in range(r):
                pivot = gram[k, k]
                if float(_dual.stop_gradient(pivot)) <= 0.0:
                    raise RankError(
                        f"trapezoid factor diagonal entry {k} is numerically zero during "
                        "the gram deflation"
                    )
                col = gram[slice(None), k] / _dual.dsqrt(pivot)
                entries.append(col)
                gram = gram - col.reshape(j_dim, 1) * col.reshape(1, j_dim)
            parts = []
            for i in range(j_dim):
                for k in range(min(i + 1, r)):
                    parts.append(entries[k][i : i + 1])
            return _dual.dcat(parts)

        if theta.family == "blp-aggregate":
            alpha = take(1)
            scale = take(1)
            bx = take(dx)
            be = take(r)
            cx = take(dx * (dx + 1) // 2)
            ce = take(r * (r + 1) // 2)
            parts = [alpha, scale]
            if dx:
                parts.append(bx)
            parts.append(e_times_vec(be))
            if dx:
                parts.append(cx)
            parts.append(attr_block(ce))
        elif theta.family == "mixed-logit-fe":
            alpha = take(1)
            fe = take(theta.fixed_effects.size)
            pix = take(dx * dy)
            pie = take(r * dy)
            ca = take(1)
            cx = take(dx * (dx + 1) // 2)
            ce = take(r * (r + 1) // 2)
            parts = [alpha, fe]
            if dx * dy:
                parts.append(pix)
            if dy:
                parts.append(e_times_mat(pie, dy))
            parts.append(ca)
            if dx:
                parts.append(cx)
            parts.append(attr_block(ce))
        else:
            alpha = take(1)
            scale = take(1)
            bx = take(dx)
            be = take(r)
            pybar = take(theta.pi_ybar.size)
            pix = take(dx * dy)
            pip = take(dy)
            pie = take(r * dy)
            cx = take(dx * (dx + 1) // 2)
            ce = take(r * (r + 1) // 2)
            parts = [alpha, scale]
            if dx:
                parts.append(bx)
            parts.append(e_times_vec(be))
            if theta.pi_ybar.size:
                parts.append(pybar)
            if dx * dy:
                parts.append(pix)
            if dy:
                parts.append(pip)
                parts.append(e_times_mat(pie, dy))
            if dx:
                parts.append(cx)
            parts.append(attr_block(ce))
        return _dual.dcat(parts)

    out = build(_dual.DualArray.identity(tvec))
    return out.val, out.tan.T


def theta_positive_mask(theta: StructuralParams) -> np.ndarray:
    """Boolean mask of positivity-constrained entries in the packed theta vector."""
    vec = theta.to_vector()
    mask = np.zeros(vec.size, dtype=bool)

    def chol_diag_mask(dim: int) -> np.ndarray:
        local = np.zeros(dim * (dim + 1) // 2, dtype=bool)
        for idx, (i, j) in enumerate(_tril_index_pairs(dim)):
            local[idx] = i == j
        return local

    dx, r = theta.dim_xbar, theta.r
    if theta.family == "blp-aggregate":
        blocks = [(1, None), (1, True), (dx, None), (r, None),
                  (dx * (dx + 1) // 2, chol_diag_mask(dx)), (r * (r + 1) // 2, chol_diag_mask(r))]
    elif theta.family == "mixed-logit-fe":
        dy = theta.dim_y
        blocks = [(1, None), (theta.fixed_effects.size, None), (dx * dy, None), (r * dy, None),
                  (1, True),
                  (dx * (dx + 1) // 2, chol_diag_mask(dx)), (r * (r + 1) // 2, chol_diag_mask(r))]
    else:
        dy = theta.dim_y
        blocks = [(1, None), (1, True), (dx, None), (r, None), (theta.pi_ybar.size, None),
                  (dx * dy, None), (dy, None), (r * dy, None),
                  (dx * (dx + 1) // 2, chol_diag_mask(dx)), (r * (r + 1) // 2, chol_diag_mask(r))]
    pos = 0
    for size, flag in blocks:
        if flag is True:
            mask[pos] = True
        elif flag is not None:
            mask[pos : pos + size] = flag
        pos += size
    if pos != vec.size:
        raise DimensionError("theta positivity mask is inconsistent with the packed vector")
    return mask


@dataclass(frozen=True)
class GammaJacobians:
    """Central finite-difference Jacobians of the reparameterization map.

    ``g_theta[k, m] = d gamma_m / d theta_k`` and
    ``g_e[k, m] = d gamma_m / d vec(e)_k`` (vec in row-major order).
    """

    g_theta: np.ndarray
    g_e: np.ndarray
    boundary_warning: bool


def gamma_jacobians(theta: StructuralParams, e: AttributeMatrix, step: float = 1e-6) -> GammaJacobians:
    if step <= 0:
        raise ValueError("step must be positive")
    tvec = theta.to_vector()
    evec = e.values.ravel()
    j_dim, r = e.values.shape
    pos_mask = theta_positive_mask(theta)

    def gamma_vec(tv: np.ndarray, ev: np.ndarray) -> np.ndarray:
        th = theta.from_vector(tv)
        attr = AttributeMatrix(ev.reshape(j_dim, r), kind=e.kind)
        return _gamma_values(th, attr)[0]

    base = gamma_vec(tvec, evec)
    # Positivity blocks within 2*step of the boundary make a central step
    # invalid; use a one-sided difference there and raise the warning flag.
    warn = bool(np.any(tvec[pos_mask] <= 2 * step * np.maximum(1.0, np.abs(tvec[pos_mask]))))
    g_theta = np.empty((tvec.size, base.size))
    for k in range(tvec.size):
        h = step * max(1.0, abs(tvec[k]))
        if pos_mask[k] and tvec[k] - h <= 0.0:
            up = tvec.copy()
            up[k] += h
            g_theta[k] = (gamma_vec(up, evec) - base) / h
            continue
        up, dn = tvec.copy(), tvec.copy()
        up[k] += h
        dn[k] -= h
        g_theta[k] = (gamma_vec(up, evec) - gamma_vec(dn, evec)) / (2 * h)
    g_e = np.empty((evec.size, base.size))
    for k in range(evec.size):
        h = step * max(1.0, abs(evec[k]))
        up, dn = evec.copy(), evec.copy()
        up[k] += h
        dn[k] -= h
        g_e[k] = (gamma_vec(tvec, up) - gamma_vec(tvec, dn)) / (2 * h)
    return GammaJacobians(g_theta=g_theta, g_e=g_e, boundary_warning=warn)
