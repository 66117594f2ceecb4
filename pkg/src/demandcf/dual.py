"""Vectorized forward-mode dual numbers.

A :class:`DualArray` carries a value array together with a stack of tangent
arrays (one per derivative lane, lane axis first). Propagating seeded inputs
through ordinary NumPy expressions yields directional derivatives that are
exact to floating point, which is how gradients of choice probabilities,
counterfactual kernels, and moment models are produced. Finite differences
are used only as a test oracle against this module.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def _as_val_tan(x, lanes: int):
    """Split ``x`` into (value, tangent) with a zero tangent for constants."""
    if isinstance(x, DualArray):
        return x.val, x.tan
    arr = np.asarray(x, dtype=float)
    return arr, np.zeros((lanes,) + arr.shape)


def _align(tan: np.ndarray, out_ndim: int) -> np.ndarray:
    """Pad singleton axes after the lane axis so value dims right-align.

    Tangents carry the lane axis first; when two operands have values of
    different rank, their tangents must be padded to a common value rank or
    the lane axis would misalign under NumPy's right-aligned broadcasting.
    """
    missing = out_ndim - (tan.ndim - 1)
    if missing <= 0:
        return tan
    return tan.reshape((tan.shape[0],) + (1,) * missing + tan.shape[1:])


class DualArray:
    """Array of first-order dual numbers with a leading tangent-lane axis."""

    __slots__ = ("val", "tan")

    # Make ndarray operands defer to the reflected operators instead of
    # broadcasting elementwise over this object.
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, val: np.ndarray, tan: np.ndarray):
        self.val = np.asarray(val, dtype=float)
        self.tan = np.asarray(tan, dtype=float)
        if self.tan.shape[1:] != self.val.shape:
            raise ValueError(
                f"tangent shape {self.tan.shape} incompatible with value shape {self.val.shape}"
            )

    @property
    def lanes(self) -> int:
        return self.tan.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.val.shape

    @staticmethod
    def seed(x: np.ndarray, seeds: np.ndarray) -> "DualArray":
        """Wrap ``x`` with explicit tangent seeds of shape ``(lanes,) + x.shape``."""
        x = np.asarray(x, dtype=float)
        seeds = np.asarray(seeds, dtype=float)
        return DualArray(x, seeds)

    @staticmethod
    def identity(x: np.ndarray) -> "DualArray":
        """Wrap a vector with one identity lane per coordinate."""
        x = np.asarray(x, dtype=float).ravel()
        return DualArray(x, np.eye(x.size))

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        ov, ot = _as_val_tan(other, self.lanes)
        val = self.val + ov
        return DualArray(val, _align(self.tan, val.ndim) + _align(ot, val.ndim))

    __radd__ = __add__

    def __neg__(self):
        return DualArray(-self.val, -self.tan)

    def __sub__(self, other):
        ov, ot = _as_val_tan(other, self.lanes)
        val = self.val - ov
        return DualArray(val, _align(self.tan, val.ndim) - _align(ot, val.ndim))

    def __rsub__(self, other):
        ov, ot = _as_val_tan(other, self.lanes)
        val = ov - self.val
        return DualArray(val, _align(ot, val.ndim) - _align(self.tan, val.ndim))

    def __mul__(self, other):
        ov, ot = _as_val_tan(other, self.lanes)
        val = self.val * ov
        tan = _align(self.tan, val.ndim) * ov[None] + self.val[None] * _align(ot, val.ndim)
        return DualArray(val, tan)

    __rmul__ = __mul__

    def __truediv__(self, other):
        ov, ot = _as_val_tan(other, self.lanes)
        inv = 1.0 / ov
        val = self.val * inv
        tan = (_align(self.tan, val.ndim) - val[None] * _align(ot, val.ndim)) * inv[None]
        return DualArray(val, tan)

    def __rtruediv__(self, other):
        ov, ot = _as_val_tan(other, self.lanes)
        inv = 1.0 / self.val
        val = ov * inv
        tan = (_align(ot, val.ndim) - val[None] * _align(self.tan, val.ndim)) * inv[None]
        return DualArray(val, tan)

    def __pow__(self, p: float):
        v = self.val**p
        return DualArray(v, (p * self.val ** (p - 1.0))[None] * self.tan)

    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        return DualArray(self.val[key], self.tan[(slice(None),) + key])

    # -- reductions and reshaping -----------------------------------------

    def _norm_axis(self, axis):
        if axis is None:
            return tuple(range(self.val.ndim))
        if isinstance(axis, int):
            axis = (axis,)
        return tuple(a % self.val.ndim for a in axis)

    def sum(self, axis=None, keepdims: bool = False):
        ax = self._norm_axis(axis)
        tan_ax = tuple(a + 1 for a in ax)
        return DualArray(
            self.val.sum(axis=ax, keepdims=keepdims),
            self.tan.sum(axis=tan_ax, keepdims=keepdims),
        )

    def mean(self, axis=None, keepdims: bool = False):
        ax = self._norm_axis(axis)
        count = int(np.prod([self.val.shape[a] for a in ax]))
        out = self.sum(axis=axis, keepdims=keepdims)
        return DualArray(out.val / count, out.tan / count)

    def weighted_sum(self, weights: np.ndarray, axis: int):
        """Sum ``weights * self`` over ``axis`` with constant weights."""
        w = np.asarray(weights, dtype=float)
        return (self * w).sum(axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return DualArray(self.val.reshape(shape), self.tan.reshape((self.lanes,) + tuple(shape)))

    def __repr__(self):
        return f"DualArray(val={self.val!r}, lanes={self.lanes})"


# -- elementwise transcendentals -------------------------------------------


def dexp(x: DualArray) -> DualArray:
    e = np.exp(x.val)
    return DualArray(e, e[None] * x.tan)


def dlog(x: DualArray) -> DualArray:
    return DualArray(np.log(x.val), x.tan / x.val[None])


def dsqrt(x: DualArray) -> DualArray:
    s = np.sqrt(x.val)
    return DualArray(s, (0.5 / s)[None] * x.tan)


def dabs(x: DualArray) -> DualArray:
    sign = np.sign(x.val)
    return DualArray(np.abs(x.val), sign[None] * x.tan)


def stop_gradient(x) -> np.ndarray:
    """Value of ``x`` with tangents dropped (for overflow guards and pivots)."""
    return x.val.copy() if isinstance(x, DualArray) else np.asarray(x, dtype=float)


def dcat(parts: list) -> DualArray:
    """Concatenate 1-d dual arrays (and constants) along the value axis."""
    lanes = next(p.lanes for p in parts if isinstance(p, DualArray))
    vals, tans = [], []
    for p in parts:
        v, t = _as_val_tan(p, lanes)
        v = np.atleast_1d(v)
        if t.ndim == 1:
            t = t[:, None]
        vals.append(v)
        tans.append(t)
    return DualArray(np.concatenate(vals), np.concatenate(tans, axis=1))


def jacobian(f: Callable[[DualArray], DualArray], x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value and Jacobian of ``f`` at ``x`` via one identity-seeded forward pass.

    Returns ``(f(x), J)`` with ``J[k, ...] = d f(x) / d x[k]`` (lane axis first).
    """
    out = f(DualArray.identity(x))
    return out.val, out.tan
