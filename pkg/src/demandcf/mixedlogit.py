"""Individual-choice engine: simulated mixed logit with product fixed effects.

Utilities are linear in the composite parameter given a fixed draw, so
choice-probability gradients are the logit-kernel derivative contracted
with structured tangent seeds; this is the forward-mode dual propagation
specialized to the model's linear utility layer. The generic
:mod:`demandcf.dual` module carries the low-volume derivative paths and the
test oracles.

Goods are indexed 0..J with 0 the outside option; probability vectors of
length J+1 put the outside good first.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import scipy.optimize

from .draws import DrawSet
from .errors import ConvergenceError, DimensionError, RankError, ValidationError
from .params import (
    AttributeMatrix,
    CompositeParam,
    StructuralParams,
    chol_unstack,
    gamma_layout,
    gamma_of,
    gamma_theta_jacobian,
    theta_positive_mask,
    trapezoid_unstack,
)

__all__ = [
    "MicroDataset",
    "ChoiceProbBundle",
    "MLEOptions",
    "MLEFit",
    "logit_kernel",
    "choice_probs",
    "choice_prob_matrix",
    "choice_prob_gradients",
    "mle_fit",
    "score_hessian",
    "counterfactual_k",
    "counterfactual_all",
    "load_micro_csv",
    "save_micro_csv",
]

_CHUNK_DRAWS = 64


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MicroDataset:
    """Single-market individual choice data.

    choices: n x (J+1) one-hot (column 0 = outside option); prices: n x J;
    demographics: n x dim_y; xbar: J x dim_xbar; proxies: J x r.
    """

    choices: np.ndarray
    prices: np.ndarray
    demographics: np.ndarray
    xbar: np.ndarray
    proxies: AttributeMatrix

    def __post_init__(self):
        choices = np.asarray(self.choices)
        prices = np.atleast_2d(np.asarray(self.prices, dtype=float))
        demog = np.asarray(self.demographics, dtype=float)
        if demog.ndim == 1:
            demog = demog.reshape(-1, 1) if demog.size else demog.reshape(prices.shape[0], 0)
        xbar = np.asarray(self.xbar, dtype=float)
        if xbar.ndim == 1:
            xbar = xbar.reshape(-1, 1) if xbar.size else xbar.reshape(prices.shape[1], 0)
        object.__setattr__(self, "choices", choices)
        object.__setattr__(self, "prices", prices)
        object.__setattr__(self, "demographics", demog)
        object.__setattr__(self, "xbar", xbar)
        n, j_plus = choices.shape
        if j_plus != prices.shape[1] + 1:
            raise DimensionError("choices must have J+1 columns (outside option first)")
        if n < 1 or prices.shape[1] < 2:
            raise ValidationError("need n >= 1 consumers and J >= 2 inside goods")
        if not np.all(np.isin(choices, (0, 1))) or not np.all(choices.sum(axis=1) == 1):
            raise ValidationError("each choice row must be one-hot over goods 0..J")
        for name, arr in (("prices", prices), ("demographics", demog), ("xbar", xbar)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contain non-finite values")
        if prices.shape[0] != n or demog.shape[0] != n:
            raise DimensionError("prices/demographics rows must match the number of consumers")
        if self.proxies.J != prices.shape[1]:
            raise DimensionError("proxy matrix rows must match the number of inside goods")
        if xbar.shape[0] != prices.shape[1]:
            raise DimensionError("xbar rows must match the number of inside goods")

    @property
    def n(self) -> int:
        return self.choices.shape[0]

    @property
    def J(self) -> int:
        return self.prices.shape[1]

    @property
    def choice_codes(self) -> np.ndarray:
        return np.argmax(self.choices, axis=1)

    def with_proxies(self, proxies: AttributeMatrix) -> "MicroDataset":
        return MicroDataset(self.choices, self.prices, self.demographics, self.xbar, proxies)


def load_micro_csv(consumers_path: str | Path, products_path: str | Path) -> MicroDataset:
    """Load a dataset from the documented CSV pair.

    Consumers file: consumer_id, choice, price_1..price_J, y_1..y_dimY.
    Products file: product_id, xbar_1..xbar_dx, proxy_1..proxy_r.
    """
    with open(products_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValidationError(f"{products_path}: no product rows")
    xbar_cols = sorted((c for c in rows[0] if c.startswith("xbar_")), key=lambda c: int(c.split("_")[1]))
    proxy_cols = sorted((c for c in rows[0] if c.startswith("proxy_")), key=lambda c: int(c.split("_")[1]))
    if "product_id" not in rows[0] or not proxy_cols:
        raise ValidationError(f"{products_path}: need columns product_id, proxy_1..proxy_r")
    rows.sort(key=lambda row: int(row["product_id"]))
    xbar = np.array([[float(row[c]) for c in xbar_cols] for row in rows])
    proxies = np.array([[float(row[c]) for c in proxy_cols] for row in rows])
    j_dim = len(rows)

    with open(consumers_path, newline="") as fh:
        reader = csv.DictReader(fh)
        price_cols = [f"price_{j}" for j in range(1, j_dim + 1)]
        header = reader.fieldnames or []
        missing = [c for c in ("consumer_id", "choice", *price_cols) if c not in header]
        if missing:
            raise ValidationError(f"{consumers_path}: missing columns {missing}")
        y_cols = sorted((c for c in header if c.startswith("y_")), key=lambda c: int(c.split("_")[1]))
        crows = list(reader)
    if not crows:
        raise ValidationError(f"{consumers_path}: no consumer rows")
    n = len(crows)
    prices = np.array([[float(row[c]) for c in price_cols] for row in crows])
    demog = np.array([[float(row[c]) for c in y_cols] for row in crows]) if y_cols else np.zeros((n, 0))
    choices = np.zeros((n, j_dim + 1), dtype=int)
    for i, row in enumerate(crows):
        code = int(row["choice"])
        if not 0 <= code <= j_dim:
            raise ValidationError(f"{consumers_path}: row {i + 2}: choice {code} out of range 0..{j_dim}")
        choices[i, code] = 1
    attr = AttributeMatrix(proxies, kind="proxy")
    return MicroDataset(choices, prices, demog, xbar if xbar.size else np.zeros((j_dim, 0)), attr)


def save_micro_csv(data: MicroDataset, consumers_path: str | Path, products_path: str | Path) -> None:
    """Write a dataset as the documented CSV pair (17 significant digits)."""
    fmt = lambda x: format(float(x), ".17g")
    j_dim, dx, r, dy = data.J, data.xbar.shape[1], data.proxies.r, data.demographics.shape[1]
    with open(products_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["product_id"]
            + [f"xbar_{a + 1}" for a in range(dx)]
            + [f"proxy_{a + 1}" for a in range(r)]
        )
        for j in range(j_dim):
            writer.writerow(
                [j + 1]
                + [fmt(v) for v in data.xbar[j]]
                + [fmt(v) for v in data.proxies.values[j]]
            )
    codes = data.choice_codes
    with open(consumers_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["consumer_id", "choice"]
            + [f"price_{j + 1}" for j in range(j_dim)]
            + [f"y_{b + 1}" for b in range(dy)]
        )
        for i in range(data.n):
            writer.writerow(
                [i + 1, int(codes[i])]
                + [fmt(v) for v in data.prices[i]]
                + [fmt(v) for v in data.demographics[i]]
            )


# ---------------------------------------------------------------------------
# logit kernel
# ---------------------------------------------------------------------------


def logit_kernel(u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form logit probabilities and their first two derivatives.

    Returns ``(sigma, jac, hess)`` where sigma has length J+1 (outside good
    first), ``jac[j, k] = d sigma_{j+1} / d u_k`` and
    ``hess[j, a, b] = d^2 sigma_{j+1} / d u_a d u_b`` for inside goods.
    """
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValidationError("logit_kernel requires finite utilities")
    guard = max(0.0, float(u.max()))
    expu = np.exp(u - guard)
    denom = np.exp(-guard) + expu.sum()
    s = expu / denom
    sigma = np.concatenate([[np.exp(-guard) / denom], s])
    jac = np.diag(s) - np.outer(s, s)
    j_dim = u.size
    delta = np.eye(j_dim)
    # hess[j,a,b] = s_j [ (d_ja - s_a)(d_jb - s_b) - s_a (d_ab - s_b) ]
    hess = s[:, None, None] * (
        (delta - s)[:, :, None] * (delta - s)[:, None, :]
        - (s[:, None] * (delta - s[None, :]))[None, :, :]
    )
    return sigma, jac, hess


# ---------------------------------------------------------------------------
# composite-parameter view and the utility layer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _GammaBlocks:
    """Parsed mixed-logit-fe composite parameter."""

    alpha_mean: float
    fe: np.ndarray  # J
    pi_xbar: np.ndarray  # dx x dy
    e_pi_e: np.ndarray  # J x dy
    alpha_sd: float
    chol_xbar: np.ndarray  # dx x dx lower factor
    attr_factor: np.ndarray  # J x r trapezoid

    @staticmethod
    def parse(gamma: CompositeParam, J: int, dim_xbar: int, dim_y: int) -> "_GammaBlocks":
        if gamma.family != "mixed-logit-fe":
            raise ValidationError(f"engine expects mixed-logit-fe gamma, got {gamma.family!r}")
        names = set(gamma.layout.names)
        grab = lambda n, k: gamma.block(n) if n in names else np.zeros(k)
        attr_block = gamma.block("attr_factor")
        r = _infer_r(J, attr_block.size)
        return _GammaBlocks(
            alpha_mean=float(gamma.block("alpha_mean")[0]),
            fe=gamma.block("fixed_effects"),
            pi_xbar=grab("pi_xbar", dim_xbar * dim_y).reshape(dim_xbar, dim_y),
            e_pi_e=grab("e_pi_e", J * dim_y).reshape(J, dim_y),
            alpha_sd=float(gamma.block("chol_alpha")[0]),
            chol_xbar=chol_unstack(grab("chol_xbar", dim_xbar * (dim_xbar + 1) // 2), dim_xbar),
            attr_factor=trapezoid_unstack(attr_block, J, r),
        )

    @property
    def r(self) -> int:
        return self.attr_factor.shape[1]


def _infer_r(j_dim: int, trapezoid_entries: int) -> int:
    for r in range(1, j_dim + 1):
        if j_dim * r - r * (r - 1) // 2 == trapezoid_entries:
            return r
    raise DimensionError(f"attr_factor block of size {trapezoid_entries} does not fit J={j_dim}")


class Case2Engine:
    """Vectorized evaluator for one dataset and one fixed draw set.

    Draw columns are laid out as [z_alpha, z_xbar (dx), z_e (r)].
    """

    def __init__(self, data: MicroDataset, draws: DrawSet, r: int):
        self.data = data
        self.draws = draws
        self.r = r
        self.dx = data.xbar.shape[1]
        self.dy = data.demographics.shape[1]
        need = 1 + self.dx + r
        if draws.dim != need:
            raise DimensionError(f"draw set has dim {draws.dim}; engine needs {need}")
        self.z_alpha = draws.draws[:, 0]
        self.z_xbar = draws.draws[:, 1 : 1 + self.dx]
        self.z_e = draws.draws[:, 1 + self.dx :]
        self.w = draws.weights

    # -- layout ------------------------------------------------------------

    def lane_count(self, gamma: CompositeParam) -> int:
        return gamma.dim

    def blocks(self, gamma: CompositeParam) -> _GammaBlocks:
        return _GammaBlocks.parse(gamma, self.data.J, self.dx, self.dy)

    def _demog_shift(self, blocks: _GammaBlocks) -> Optional[np.ndarray]:
        """n x J utility shift from demographic interactions (None if absent)."""
        if self.dy == 0:
            return None
        shift = self.data.demographics @ blocks.e_pi_e.T
        if self.dx:
            shift = shift + self.data.demographics @ (self.data.xbar @ blocks.pi_xbar).T
        return shift

    def _chunk_utilities(self, blocks: _GammaBlocks, sl: slice, demog: Optional[np.ndarray]) -> np.ndarray:
        """Utilities for a draw chunk: (c, n, J)."""
        alpha = blocks.alpha_mean + blocks.alpha_sd * self.z_alpha[sl]
        delta = blocks.fe[None, :] + self.z_e[sl] @ blocks.attr_factor.T
        if self.dx:
            delta = delta + (self.z_xbar[sl] @ blocks.chol_xbar.T) @ self.data.xbar.T
        u = alpha[:, None, None] * self.data.prices[None, :, :] + delta[:, None, :]
        if demog is not None:
            u = u + demog[None, :, :]
        return u

    def iter_prob_chunks(self, gamma: CompositeParam) -> Iterator[tuple[slice, np.ndarray, np.ndarray]]:
        """Yield (draw slice, inside-good kernel probs (c,n,J), outside probs (c,n))."""
        blocks = self.blocks(gamma)
        demog = self._demog_shift(blocks)
        n_draws = self.draws.count
        for start in range(0, n_draws, _CHUNK_DRAWS):
            sl = slice(start, min(start + _CHUNK_DRAWS, n_draws))
            u = self._chunk_utilities(blocks, sl, demog)
            guard = np.maximum(u.max(axis=2), 0.0)
            np.subtract(u, guard[:, :, None], out=u)
            np.exp(u, out=u)
            out0 = np.exp(-guard)
            denom = out0 + u.sum(axis=2)
            u /= denom[:, :, None]
            out0 /= denom
            yield sl, u, out0

    # -- probabilities and their gamma-gradients ----------------------------

    def sigma_matrix(self, gamma: CompositeParam) -> np.ndarray:
        """Choice probabilities, n x (J+1) with the outside good first."""
        n, j_dim = self.data.n, self.data.J
        acc = np.zeros((n, j_dim + 1))
        for sl, inside, outside in self.iter_prob_chunks(gamma):
            w = self.w[sl]
            acc[:, 0] += w @ outside
            acc[:, 1:] += np.einsum("s,snj->nj", w, inside)
        total = acc.sum(axis=1)
        if np.any(np.abs(total - 1.0) > 1e-12 * max(1.0, np.abs(total).max())):
            raise ValidationError("simulated probabilities violate the simplex beyond tolerance")
        return acc

    def moment_tensors(self, gamma: CompositeParam) -> dict:
        """Draw-weighted first and second kernel moments used by gradients.

        Returns sigma (n x (J+1)), first moments m_c (n x J) and second
        moments S2_c (n x J x J) for c in {1} + draw columns.
        """
        n, j_dim = self.data.n, self.data.J
        n_cols = self.draws.dim
        sigma = np.zeros((n, j_dim + 1))
        first = np.zeros((1 + n_cols, n, j_dim))
        second = np.zeros((1 + n_cols, n, j_dim, j_dim))
        for sl, inside, outside in self.iter_prob_chunks(gamma):
            w = self.w[sl]
            sigma[:, 0] += w @ outside
            wz = np.concatenate([w[None, :], w[None, :] * self.draws.draws[sl].T], axis=0)
            first += np.einsum("cs,snj->cnj", wz, inside)
            # Batched (J x c) @ (c x J) per consumer and weight column.
            for c in range(1 + n_cols):
                weighted = inside * wz[c][:, None, None]
                second[c] += np.einsum("snj,snk->njk", weighted, inside, optimize=True)
        sigma[:, 1:] = first[0]
        return {"sigma": sigma, "first": first, "second": second}

    def sigma_grad_matrix(self, gamma: CompositeParam, tensors: Optional[dict] = None) -> tuple[np.ndarray, np.ndarray]:
        """(sigma, dsigma) with dsigma[i, j, m] = d sigma_{i,j+1} / d gamma_m."""
        if tensors is None:
            tensors = self.moment_tensors(gamma)
        sigma, first, second = tensors["sigma"], tensors["first"], tensors["second"]
        n, j_dim = self.data.n, self.data.J
        gdim = gamma.dim
        grad = np.zeros((n, j_dim, gdim))
        slices = gamma.layout.slices()
        p = self.data.prices
        y = self.data.demographics
        xb = self.data.xbar
        sig_in = sigma[:, 1:]

        col_alpha, col_x, col_e = 0, slice(1, 1 + self.dx), slice(1 + self.dx, 1 + self.dx + self.r)

        def dense_lane(m_first: np.ndarray, s2: np.ndarray, g: np.ndarray) -> np.ndarray:
            # sum_s w_s varsigma_j (g_j - varsigma . g) for consumer-specific g (n x J)
            return m_first * g - np.einsum("njk,nk->nj", s2, g)

        grad[:, :, slices["alpha_mean"]] = dense_lane(first[0], second[0], p)[:, :, None]
        fe_cols = slices["fixed_effects"]
        grad[:, :, fe_cols] = -second[0]
        idx = np.arange(j_dim)
        grad[:, idx, fe_cols.start + idx] += sig_in
        if self.dy and "e_pi_e" in slices:
            base = slices["e_pi_e"].start
            fe_part = -second[0].copy()
            fe_part[:, idx, idx] += sig_in
            for b in range(self.dy):
                stop = base + j_dim * self.dy
                grad[:, :, base + b : stop : self.dy] += fe_part * y[:, None, b : b + 1]
        if self.dx and self.dy and "pi_xbar" in slices:
            base = slices["pi_xbar"].start
            for a in range(self.dx):
                lane = dense_lane(first[0], second[0], np.broadcast_to(xb[:, a], (n, j_dim)))
                for b in range(self.dy):
                    grad[:, :, base + a * self.dy + b] = lane * y[:, b : b + 1]
        grad[:, :, slices["chol_alpha"]] = dense_lane(first[1 + col_alpha], second[1 + col_alpha], p)[:, :, None]
        if self.dx:
            base = slices["chol_xbar"].start
            pos = 0
            for a_row in range(self.dx):
                for b_col in range(a_row + 1):
                    c = 1 + 1 + b_col  # weight column for z_xbar[b_col]
                    lane = dense_lane(first[c], second[c], np.broadcast_to(xb[:, a_row], (n, j_dim)))
                    grad[:, :, base + pos] = lane
                    pos += 1
        base = slices["attr_factor"].start
        pos = 0
        for k_row in range(j_dim):
            for l_col in range(min(k_row + 1, self.r)):
                c = 1 + self.dx + l_col + 1
                grad[:, :, base + pos] = -second[c][:, :, k_row]
                grad[:, k_row, base + pos] += first[c][:, k_row]
                pos += 1
        return sigma, grad

    # -- scalar-output tangent contraction ----------------------------------

    def grad_from_sensitivity(self, gamma: CompositeParam, coef_fn) -> np.ndarray:
        """Per-consumer gamma-gradients of scalar draw averages.

        ``coef_fn(sl, inside, outside)`` must return ``L`` of shape (c, n, J)
        with ``L[s, i, k] = d out_i / d u_{s,i,k}`` for that chunk (already
        weighted by the draw weights). Returns (n, dim gamma).
        """
        n, j_dim = self.data.n, self.data.J
        n_cols = self.draws.dim
        r1 = np.zeros((1 + n_cols, n, j_dim))
        for sl, inside, outside in self.iter_prob_chunks(gamma):
            sens = coef_fn(sl, inside, outside)
            z = np.concatenate([np.ones((1, sl.stop - sl.start)), self.draws.draws[sl].T], axis=0)
            r1 += np.einsum("cs,snk->cnk", z, sens)
        return self._assemble_lanes(gamma, r1)

    def _assemble_lanes(self, gamma: CompositeParam, r1: np.ndarray) -> np.ndarray:
        """Assemble per-consumer gradients from weighted sensitivity moments.

        ``r1[c, i, k] = sum_s z_c^s L[s, i, k]`` with column 0 for z == 1.
        """
        n, j_dim = self.data.n, self.data.J
        grad = np.zeros((n, gamma.dim))
        slices = gamma.layout.slices()
        p, y, xb = self.data.prices, self.data.demographics, self.data.xbar
        grad[:, slices["alpha_mean"]] = np.einsum("nk,nk->n", r1[0], p)[:, None]
        grad[:, slices["fixed_effects"]] = r1[0]
        if self.dy and "e_pi_e" in slices:
            base = slices["e_pi_e"].start
            for b in range(self.dy):
                grad[:, base + b : base + j_dim * self.dy : self.dy] = r1[0] * y[:, b : b + 1]
        if self.dx and self.dy and "pi_xbar" in slices:
            base = slices["pi_xbar"].start
            proj = r1[0] @ xb  # n x dx
            for a in range(self.dx):
                for b in range(self.dy):
                    grad[:, base + a * self.dy + b] = proj[:, a] * y[:, b]
        grad[:, slices["chol_alpha"]] = np.einsum("nk,nk->n", r1[1], p)[:, None]
        if self.dx:
            base = slices["chol_xbar"].start
            pos = 0
            for a_row in range(self.dx):
                proj = None
                for b_col in range(a_row + 1):
                    proj = r1[1 + 1 + b_col] @ xb  # n x dx under weight column b_col
                    grad[:, base + pos] = proj[:, a_row]
                    pos += 1
        base = slices["attr_factor"].start
        pos = 0
        for k_row in range(j_dim):
            for l_col in range(min(k_row + 1, self.r)):
                grad[:, base + pos] = r1[1 + self.dx + l_col + 1, :, k_row]
                pos += 1
        return grad

    # -- likelihood ----------------------------------------------------------

    def loglik_and_score(self, gamma: CompositeParam) -> tuple[float, np.ndarray]:
        """Mean log-likelihood and its gamma-gradient (forward/adjoint of the
        same linear-utility dual propagation; equals the dual-number result)."""
        data = self.data
        sigma = self.sigma_matrix(gamma)
        codes = data.choice_codes
        chosen = sigma[np.arange(data.n), codes]
        if np.any(np.isnan(chosen)):
            raise ConvergenceError("choice probabilities are NaN at the current parameter")
        if np.any(chosen <= 0.0):
            # Probability underflow: report -inf so optimizers can backtrack.
            return -np.inf, np.zeros(gamma.dim)
        ll = float(np.mean(np.log(chosen)))
        inv_chosen = 1.0 / chosen
        inside_mask = codes > 0
        inside_idx = codes - 1

        def coef(sl, inside, outside):
            # kernel prob of the chosen good per draw
            kern = np.where(
                inside_mask[None, :],
                inside[:, np.arange(data.n), np.clip(inside_idx, 0, None)],
                outside,
            )
            ratio = kern * inv_chosen[None, :]
            sens = inside * (-ratio[:, :, None])
            pick = inside[:, np.arange(data.n), np.clip(inside_idx, 0, None)] * inv_chosen[None, :]
            sens[:, np.arange(data.n), np.clip(inside_idx, 0, None)] += np.where(inside_mask[None, :], pick, 0.0)
            return sens * self.w[sl, None, None]

        score = self.grad_from_sensitivity(gamma, coef).sum(axis=0) / data.n
        return ll, score


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChoiceProbBundle:
    """Per-consumer probabilities, gamma-gradients, and inside-good covariance.

    The outside-good gradient is not stored: it is recovered from the inside
    rows through the sum-to-zero identity.
    """

    sigma: np.ndarray  # J+1, outside first
    grad: np.ndarray  # J x dim(gamma), inside goods
    vi: np.ndarray  # J x J

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=float)
        if np.any(sigma <= 0.0) or abs(sigma.sum() - 1.0) > 1e-12:
            raise ValidationError("probabilities must be strictly positive and sum to one")

    @property
    def outside_grad(self) -> np.ndarray:
        return -self.grad.sum(axis=0)


def _engine(data: MicroDataset, draws: DrawSet) -> Case2Engine:
    return Case2Engine(data, draws, data.proxies.r)


def choice_prob_matrix(gamma: CompositeParam, data: MicroDataset, draws: DrawSet) -> np.ndarray:
    return _engine(data, draws).sigma_matrix(gamma)


def choice_prob_gradients(
    gamma: CompositeParam, data: MicroDataset, draws: DrawSet, tensors: Optional[dict] = None
) -> tuple[np.ndarray, np.ndarray]:
    return _engine(data, draws).sigma_grad_matrix(gamma, tensors)


def choice_probs(gamma: CompositeParam, consumer: int, data: MicroDataset, draws: DrawSet) -> ChoiceProbBundle:
    """Probabilities, gradients, and V_i for one consumer."""
    engine = _engine(data, draws)
    sigma, grad = engine.sigma_grad_matrix(gamma)
    s_i = sigma[consumer]
    inside = s_i[1:]
    vi = np.diag(inside) - np.outer(inside, inside)
    return ChoiceProbBundle(sigma=s_i, grad=grad[consumer], vi=vi)


def _vi_inverse_apply(sigma: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Apply V_i^{-1} = diag(1/s_in) + 11'/s_0 rowwise; sigma n x (J+1), rhs n x J."""
    return rhs / sigma[:, 1:] + rhs.sum(axis=1, keepdims=True) / sigma[:, :1]


def score_hessian(
    gamma: CompositeParam,
    data: MicroDataset,
    draws: DrawSet,
    tensors: Optional[dict] = None,
    check_pd: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Score and expected Hessian of the composite parameter at ``gamma``.

    S = (1/n) sum_i sum_{j=0..J} (d_ij / sigma_ij) dsigma_ij and
    H = (1/n) sum_i dsigma_i' V_i^{-1} dsigma_i, refusing consumers whose
    probabilities underflow and (unless ``check_pd`` is off) refusing a
    non-PD H. Note H is singular by construction when the composite layout
    carries both conventional-attribute and attribute-demographic
    interaction blocks, since the former's utility directions lie in the
    span of the latter.
    """
    sigma, grad = choice_prob_gradients(gamma, data, draws, tensors)
    bad = np.where(sigma.min(axis=1) <= 1e-12)[0]
    if bad.size:
        raise RankError(
            f"choice probabilities below 1e-12 for consumers {bad[:10].tolist()}"
            f"{' ...' if bad.size > 10 else ''}; refusing to regularize V_i"
        )
    codes = data.choice_codes
    n = data.n
    rows = np.arange(n)
    outside_grad = -grad.sum(axis=1)
    chosen_grad = np.where(
        (codes > 0)[:, None], grad[rows, np.clip(codes - 1, 0, None)], outside_grad
    )
    score = chosen_grad / sigma[rows, codes][:, None]
    s_hat = score.sum(axis=0) / n
    inv_in = 1.0 / sigma[:, 1:]
    h_hat = np.einsum("njm,njl,nj->ml", grad, grad, inv_in, optimize=True)
    row_sums = grad.sum(axis=1)
    h_hat += np.einsum("nm,nl,n->ml", row_sums, row_sums, 1.0 / sigma[:, 0], optimize=True)
    h_hat /= n
    h_hat = 0.5 * (h_hat + h_hat.T)
    if check_pd:
        lam = np.linalg.eigvalsh(h_hat)
        if lam[0] <= 1e-12 * max(lam[-1], 0.0):
            raise RankError(
                f"expected Hessian is not positive definite (lambda_min/lambda_max = {lam[0] / lam[-1]:.3e})"
            )
    return s_hat, h_hat


def score_residuals(
    gamma: CompositeParam, data: MicroDataset, draws: DrawSet, tensors: Optional[dict] = None
) -> np.ndarray:
    """Per-consumer score contributions u_i = dsigma_i' V_i^{-1} (d_i - sigma_i)."""
    sigma, grad = choice_prob_gradients(gamma, data, draws, tensors)
    resid = data.choices[:, 1:] - sigma[:, 1:]
    weights = _vi_inverse_apply(sigma, resid)
    return np.einsum("njm,nj->nm", grad, weights)


# -- counterfactual kernels --------------------------------------------------


def _validate_targets(kind: str, first: int, second: Optional[int], j_dim: int) -> None:
    if kind in ("joint-switch", "diversion"):
        if second is None:
            raise ValidationError(f"{kind} requires two target goods")
        if not (1 <= first <= j_dim and 1 <= second <= j_dim):
            raise ValidationError(f"target goods must lie in 1..{j_dim}")
        if first == second:
            raise ValidationError("source and destination goods must differ")
    elif kind == "own-price-elasticity":
        if not (1 <= first <= j_dim):
            raise ValidationError(f"target good must lie in 1..{j_dim}")
    else:
        raise ValidationError(f"unknown counterfactual kind {kind!r}")


def counterfactual_all(
    gamma: CompositeParam, data: MicroDataset, draws: DrawSet, spec
) -> tuple[np.ndarray, np.ndarray]:
    """Counterfactual values and gamma-gradients for every consumer.

    ``spec`` carries ``kind`` in {"joint-switch", "diversion",
    "own-price-elasticity"} and 1-based target goods ``first`` (and
    ``second`` for the switching kinds). Joint switching is
    P(first choice = A, second choice = B); diversion divides by
    P(first choice = A).
    """
    engine = _engine(data, draws)
    kind = spec.kind
    j_dim = data.J
    _validate_targets(kind, spec.first, getattr(spec, "second", None), j_dim)
    a = spec.first - 1
    n = data.n
    w = engine.w

    if kind in ("joint-switch", "diversion"):
        b = spec.second - 1
        num = np.zeros(n)
        den = np.zeros(n)
        for sl, inside, _ in engine.iter_prob_chunks(gamma):
            sa, sb = inside[:, :, a], inside[:, :, b]
            num += np.einsum("s,sn->n", w[sl], sa * sb / (1.0 - sa))
            den += np.einsum("s,sn->n", w[sl], sa)

        def coef_num(sl, inside, outside):
            sa, sb = inside[:, :, a], inside[:, :, b]
            c2 = sa * sb / (1.0 - sa)  # integrand value
            ca = sb / (1.0 - sa) ** 2 * sa  # d/du_A prefactor on (delta - s)
            cb = c2  # d/du_B prefactor
            sens = inside * (-(ca + cb))[:, :, None]
            sens[:, :, a] += ca
            sens[:, :, b] += cb
            return sens * w[sl, None, None]

        grad_num = engine.grad_from_sensitivity(gamma, coef_num)
        if kind == "joint-switch":
            return num, grad_num

        def coef_den(sl, inside, outside):
            sa = inside[:, :, a]
            sens = inside * (-sa)[:, :, None]
            sens[:, :, a] += sa
            return sens * w[sl, None, None]

        grad_den = engine.grad_from_sensitivity(gamma, coef_den)
        k_val = num / den
        k_grad = grad_num / den[:, None] - (num / den**2)[:, None] * grad_den
        return k_val, k_grad

    # own-price elasticity of good a+1: p_ia * int alpha varsigma_a (1 - varsigma_a) / sigma_ia
    blocks = engine.blocks(gamma)
    alpha_draws = blocks.alpha_mean + blocks.alpha_sd * engine.z_alpha
    slope = np.zeros(n)
    slope_alpha_lane = np.zeros(n)
    slope_cholalpha_lane = np.zeros(n)
    for sl, inside, _ in engine.iter_prob_chunks(gamma):
        sa = inside[:, :, a]
        core = sa * (1.0 - sa)
        slope += np.einsum("s,sn->n", w[sl] * alpha_draws[sl], core)
        slope_alpha_lane += np.einsum("s,sn->n", w[sl], core)
        slope_cholalpha_lane += np.einsum("s,sn->n", w[sl] * engine.z_alpha[sl], core)

    def coef_slope(sl, inside, outside):
        sa = inside[:, :, a]
        ca = (1.0 - 2.0 * sa) * sa
        sens = inside * (-ca)[:, :, None]
        sens[:, :, a] += ca
        return sens * (w[sl] * alpha_draws[sl])[:, None, None]

    grad_slope = engine.grad_from_sensitivity(gamma, coef_slope)
    slices = gamma.layout.slices()
    grad_slope[:, slices["alpha_mean"].start] += slope_alpha_lane
    grad_slope[:, slices["chol_alpha"].start] += slope_cholalpha_lane

    sigma = engine.sigma_matrix(gamma)
    sig_a = sigma[:, 1 + a]
    p_a = data.prices[:, a]
    k_val = p_a * slope / sig_a

    def coef_sig(sl, inside, outside):
        sa = inside[:, :, a]
        sens = inside * (-sa)[:, :, None]
        sens[:, :, a] += sa
        return sens * w[sl, None, None]

    grad_sig = engine.grad_from_sensitivity(gamma, coef_sig)
    k_grad = (p_a / sig_a)[:, None] * grad_slope - (p_a * slope / sig_a**2)[:, None] * grad_sig
    return k_val, k_grad


def counterfactual_k(
    gamma: CompositeParam, consumer: int, data: MicroDataset, draws: DrawSet, spec
) -> tuple[float, np.ndarray]:
    """Counterfactual value and gradient for a single consumer."""
    k_val, k_grad = counterfactual_all(gamma, data, draws, spec)
    return float(k_val[consumer]), k_grad[consumer]


# ---------------------------------------------------------------------------
# maximum likelihood
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MLEOptions:
    tol: float = 1e-6  # sup-norm of the mean-log-likelihood gradient
    max_iter: int = 500
    polish_steps: int = 4  # Fisher-scoring refinements after quasi-Newton exit


@dataclass(frozen=True)
class MLEFit:
    theta: StructuralParams
    gamma: CompositeParam
    loglik: float
    grad_norm: float
    iterations: int
    n_eval: int
    converged: bool
    message: str


def theta_to_free(theta: StructuralParams) -> np.ndarray:
    """Pack theta into the unconstrained optimizer space (log on scale entries)."""
    vec = theta.to_vector()
    mask = theta_positive_mask(theta)
    out = vec.copy()
    out[mask] = np.log(vec[mask])
    return out


def theta_from_free(template: StructuralParams, free: np.ndarray) -> StructuralParams:
    vec = np.asarray(free, dtype=float).copy()
    mask = theta_positive_mask(template)
    vec[mask] = np.exp(vec[mask])
    return template.from_vector(vec)


def _gamma_map_jacobian(
    template: StructuralParams, proxies: AttributeMatrix, free: np.ndarray
) -> tuple[CompositeParam, np.ndarray]:
    """gamma(free) and the exact Jacobian d gamma / d free.

    Composes the dual-number Jacobian of the reparameterization map with the
    log-scale transform (d theta / d free = theta on positivity coordinates).
    """
    theta = theta_from_free(template, free)
    values, jac = gamma_theta_jacobian(theta, proxies)
    mask = theta_positive_mask(template)
    scale = np.where(mask, theta.to_vector(), 1.0)
    jac = jac * scale[None, :]
    layout = gamma_layout(
        theta.family, proxies.J, theta.r, theta.dim_xbar, theta.dim_y, theta.pi_ybar.size
    )
    return CompositeParam(values, layout, theta.family), jac


def mle_fit(
    data: MicroDataset,
    draws: DrawSet,
    init: StructuralParams,
    options: MLEOptions = MLEOptions(),
) -> MLEFit:
    """Maximize the simulated log-likelihood over the structural parameters.

    Scale blocks are log-reparameterized so the quasi-Newton search is
    unconstrained; the chain rule composes the finite-difference Jacobian of
    the reparameterization map with the analytic likelihood score in gamma.
    """
    engine = _engine(data, draws)
    template = init
    x0 = theta_to_free(init)
    evals = {"count": 0}
    # Keep log-scale coordinates away from the degenerate-factor manifold.
    mask = theta_positive_mask(template)
    lower = np.where(mask, -16.0, -np.inf)
    upper = np.where(mask, 12.0, np.inf)
    big = 1e12

    def objective(free: np.ndarray) -> tuple[float, np.ndarray]:
        evals["count"] += 1
        try:
            gamma, jac = _gamma_map_jacobian(template, data.proxies, free)
        except (RankError, ValueError):
            # Boundary of the composite-parameter space: force a backtrack.
            return big, np.zeros_like(free)
        ll, score = engine.loglik_and_score(gamma)
        if np.isnan(ll):
            raise ConvergenceError(
                f"likelihood is NaN at iterate {np.array2string(free, precision=4)}"
            )
        if ll == -np.inf:
            return big, np.zeros_like(free)
        return -ll, -(jac.T @ score)

    result = scipy.optimize.minimize(
        objective,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(lower, upper)),
        options={"maxiter": options.max_iter, "gtol": options.tol, "ftol": 1e-14},
    )
    x_best, f_best, g_best = result.x, float(result.fun), result.jac

    # Fisher-scoring polish: quadratic local convergence pins the optimum far
    # below the quasi-Newton exit tolerance, which downstream identity checks
    # (orthogonality, score conditions) rely on.
    for _ in range(options.polish_steps):
        if np.max(np.abs(g_best)) <= 1e-12:
            break
        try:
            gamma, jac = _gamma_map_jacobian(template, data.proxies, x_best)
            tensors = engine.moment_tensors(gamma)
            _, h_gamma = score_hessian(gamma, data, draws, tensors=tensors, check_pd=False)
            info = jac.T @ h_gamma @ jac
            step = np.linalg.solve(info + 1e-12 * np.eye(info.shape[0]), -g_best)
        except (RankError, ValueError, np.linalg.LinAlgError):
            break
        improved = False
        damping = 1.0
        for _ in range(6):
            x_try = np.clip(x_best + damping * step, lower, upper)
            try:
                f_try, g_try = objective(x_try)
            except ConvergenceError:
                break
            if f_try <= f_best:
                x_best, f_best, g_best = x_try, f_try, g_try
                improved = True
                break
            damping *= 0.5
        if not improved:
            break

    theta_hat = theta_from_free(template, x_best)
    gamma_hat = gamma_of(theta_hat, data.proxies)
    grad_norm = float(np.max(np.abs(g_best)))
    converged = grad_norm <= options.tol
    return MLEFit(
        theta=theta_hat,
        gamma=gamma_hat,
        loglik=float(-f_best),
        grad_norm=grad_norm,
        iterations=int(result.nit),
        n_eval=evals["count"],
        converged=converged,
        message=str(result.message),
    )
