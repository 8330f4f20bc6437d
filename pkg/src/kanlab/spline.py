"""Uniform B-spline grids, basis evaluation, and least-squares coefficient fits."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

LSQ_DAMPING = 1e-8
COND_WARN = 1e8


@dataclass(frozen=True)
class SplineGrid:
    """Extended uniform knot vector over ``[g_min, g_max]``.

    ``grid_size`` interior intervals of width ``h`` are padded with
    ``spline_order`` extra knots on each side, giving
    ``grid_size + spline_order`` basis functions of degree ``spline_order``.
    """

    g_min: float = -1.0
    g_max: float = 1.0
    grid_size: int = 5
    spline_order: int = 3
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.g_min < self.g_max:
            raise ValueError(f"grid needs g_min < g_max, got [{self.g_min}, {self.g_max}]")
        if self.grid_size < 1:
            raise ValueError(f"grid_size must be positive, got {self.grid_size}")
        if self.spline_order < 0:
            raise ValueError(f"spline_order must be non-negative, got {self.spline_order}")
        k = self.spline_order
        idx = np.arange(-k, self.grid_size + k + 1, dtype=np.float64)
        knots = self.g_min + idx * self.spacing
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def spacing(self) -> float:
        return (self.g_max - self.g_min) / self.grid_size

    @property
    def basis_count(self) -> int:
        return self.grid_size + self.spline_order


def _basis_levels(grid: SplineGrid, x: np.ndarray) -> list[np.ndarray]:
    """Cox-de Boor recursion; returns the basis arrays of every degree 0..k."""
    t = grid.knots.astype(x.dtype)
    k = grid.spline_order
    xe = x[..., None]
    lo, hi = t[:-1], t[1:]
    b = ((xe >= lo) & (xe < hi)).astype(x.dtype)
    # The interval ending at g_max is closed on the right, so x == g_max is covered
    # by the last interior interval rather than by the padding interval after it.
    last = grid.grid_size + k - 1
    at_top = x == t[last + 1]
    b[..., last] = np.where(at_top, 1, b[..., last])
    if last + 1 < b.shape[-1]:
        b[..., last + 1] = np.where(at_top, 0, b[..., last + 1])
    levels = [b]
    for d in range(1, k + 1):
        left = (xe - t[:-(d + 1)]) / (t[d:-1] - t[:-(d + 1)])
        right = (t[d + 1:] - xe) / (t[d + 1:] - t[1:-d])
        b = left * b[..., :-1] + right * b[..., 1:]
        levels.append(b)
    return levels


def bspline_basis(grid: SplineGrid, x: Tensor) -> Tensor:
    """Evaluate all basis functions at every element of ``x``.

    Returns a tensor with one trailing axis of length ``grid.basis_count``.
    Differentiable in ``x`` through the derivative identity
    B'_{i,k} = k/(t_{i+k}-t_i) B_{i,k-1} - k/(t_{i+k+1}-t_{i+1}) B_{i+1,k-1}.
    """
    levels = _basis_levels(grid, x.data)
    out = levels[-1]
    k = grid.spline_order

    def back(g):
        if k == 0:
            return (np.zeros_like(x.data),)
        t = grid.knots.astype(x.dtype)
        prev = levels[-2]
        n = out.shape[-1]
        a = k / (t[k:k + n] - t[:n])
        c = k / (t[k + 1:k + 1 + n] - t[1:1 + n])
        deriv = a * prev[..., :n] - c * prev[..., 1:n + 1]
        return ((g * deriv).sum(axis=-1),)

    return Tensor._make(out, (x,), back)


def bspline_basis_np(grid: SplineGrid, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return _basis_levels(grid, x)[-1]


def least_squares_fit(grid: SplineGrid, sample_x, sample_y, damping: float = LSQ_DAMPING) -> np.ndarray:
    """Fit spline coefficients so that per-feature splines reproduce ``sample_y``.

    ``sample_x`` is (P, D) and ``sample_y`` is (P, D, Out). The damped normal
    equations (A^T A + damping I) c = A^T y are solved per input feature, and
    the result is laid out as (Out, D, basis_count), matching spline weights.
    """
    sx = np.asarray(sample_x.data if isinstance(sample_x, Tensor) else sample_x, dtype=np.float64)
    sy = np.asarray(sample_y.data if isinstance(sample_y, Tensor) else sample_y, dtype=np.float64)
    if sx.ndim != 2 or sy.ndim != 3 or sy.shape[:2] != sx.shape:
        raise ValueError(f"expected sample_x (P, D) and sample_y (P, D, Out), got {sx.shape}, {sy.shape}")
    p, d = sx.shape
    nb = grid.basis_count
    if p < nb:
        raise ValueError(f"need at least {nb} samples for {nb} basis functions, got {p}")
    basis = bspline_basis_np(grid, sx)            # (P, D, K)
    a = basis.transpose(1, 0, 2)                   # (D, P, K)
    ata = a.transpose(0, 2, 1) @ a + damping * np.eye(nb)
    cond = np.linalg.cond(ata)
    if np.max(cond) > COND_WARN:
        warnings.warn(f"spline least-squares system poorly conditioned (cond={np.max(cond):.3g})",
                      RuntimeWarning, stacklevel=2)
    aty = a.transpose(0, 2, 1) @ sy.transpose(1, 0, 2)   # (D, K, Out)
    coef = np.linalg.solve(ata, aty)                     # (D, K, Out)
    return coef.transpose(2, 0, 1)
