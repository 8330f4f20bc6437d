"""KAN layer transforms: B-spline/SiLU linear, RBF fusion, Taylor input map, Morlet wavelets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .module import Module, Parameter
from .spline import SplineGrid, bspline_basis, least_squares_fit
from .tensor import ShapeError, Tensor, concat

OMEGA0 = 5.0
SCALE_FLOOR = 1e-3
INIT_TARGET = 0.1


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # gain for leaky-relu slope sqrt(5): bound collapses to 1/sqrt(fan_in)
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def spline_init(grid: SplineGrid, in_dim: int, out_dim: int, rng: np.random.Generator) -> np.ndarray:
    """Coefficients whose splines interpolate small random targets on a dense grid."""
    pts = np.linspace(grid.g_min, grid.g_max, 4 * grid.grid_size + 1)
    sample_x = np.repeat(pts[:, None], in_dim, axis=1)
    sample_y = rng.uniform(-INIT_TARGET, INIT_TARGET, size=(pts.size, in_dim, out_dim))
    return least_squares_fit(grid, sample_x, sample_y)


def _check_in(x: Tensor, in_dim: int, who: str) -> None:
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ShapeError(f"{who} expects input (B, {in_dim}), got {x.shape}")


class KANLinear(Module):
    """base_weight @ silu(x) + sum_r (spline_scaler * spline_weight)_r C_r(x)."""

    def __init__(self, in_dim: int, out_dim: int, grid: SplineGrid | None = None,
                 rng: np.random.Generator | None = None):
        grid = grid or SplineGrid()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim, self.grid = in_dim, out_dim, grid
        self.base_weight = Parameter(kaiming_uniform(rng, (out_dim, in_dim), in_dim))
        self.spline_weight = Parameter(spline_init(grid, in_dim, out_dim, rng))
        self.spline_scaler = Parameter(np.ones((out_dim, in_dim)))

    def forward(self, x: Tensor) -> Tensor:
        _check_in(x, self.in_dim, "KANLinear")
        base = ops.silu(x) @ self.base_weight.T
        basis = bspline_basis(self.grid, x).reshape(x.shape[0], -1)
        scaled = self.spline_weight * self.spline_scaler.reshape(self.out_dim, self.in_dim, 1)
        return base + basis @ scaled.reshape(self.out_dim, -1).T

    __call__ = forward


def rbf_beta(g_min: float, g_max: float, m: int) -> float:
    """Gaussian width (g_max - g_min) / (m - 1)."""
    if m < 2:
        raise ValueError(f"need at least 2 RBF centers, got {m}")
    return (g_max - g_min) / (m - 1)


def rbf_transform(centers, beta: float, x: Tensor) -> Tensor:
    """R[b, d, j] = exp(-(x[b, d] - g_j)^2 / beta^2); ``centers`` may be a tensor."""
    if not beta > 0:
        raise ValueError(f"RBF width must be positive, got {beta}")
    if not isinstance(centers, Tensor):
        centers = Tensor(np.asarray(centers, dtype=x.dtype))
    diff = x.reshape(*x.shape, 1) - centers
    return (diff * diff * (-1.0 / beta ** 2)).exp()


class SBRBFLayer(Module):
    """LayerNorm, then a SiLU base path plus one linear map over [B-spline || RBF] features.

    The combined weight's columns hold the B-spline block first, then the RBF
    block, each laid out feature-major.
    """

    def __init__(self, in_dim: int, out_dim: int, grid: SplineGrid | None = None,
                 num_centers: int | None = None, rng: np.random.Generator | None = None):
        grid = grid or SplineGrid()
        rng = rng if rng is not None else np.random.default_rng(0)
        m = grid.basis_count if num_centers is None else num_centers
        self.in_dim, self.out_dim, self.grid, self.num_centers = in_dim, out_dim, grid, m
        self.centers = np.linspace(grid.g_min, grid.g_max, m)
        self.beta = rbf_beta(grid.g_min, grid.g_max, m)
        nb = grid.basis_count
        self.ln_weight = Parameter(np.ones(in_dim))
        self.ln_bias = Parameter(np.zeros(in_dim))
        self.base_weight = Parameter(kaiming_uniform(rng, (out_dim, in_dim), in_dim))
        spline_block = spline_init(grid, in_dim, out_dim, rng).reshape(out_dim, in_dim * nb)
        rbf_block = kaiming_uniform(rng, (out_dim, in_dim * m), in_dim * (nb + m))
        self.combined_weight = Parameter(np.concatenate([spline_block, rbf_block], axis=1))

    def features(self, v: Tensor) -> tuple[Tensor, Tensor]:
        """Normalised input and the concatenated [B || R] feature matrix."""
        _check_in(v, self.in_dim, "SBRBFLayer")
        vn = ops.layer_norm(v, self.ln_weight, self.ln_bias)
        n = v.shape[0]
        bs = bspline_basis(self.grid, vn).reshape(n, -1)
        rb = rbf_transform(self.centers, self.beta, vn).reshape(n, -1)
        return vn, concat([bs, rb], axis=1)

    def forward(self, v: Tensor) -> Tensor:
        vn, feats = self.features(v)
        return ops.silu(vn) @ self.base_weight.T + feats @ self.combined_weight.T

    __call__ = forward


@dataclass(frozen=True)
class TaylorConfig:
    n_terms: int = 5

    def __post_init__(self):
        if self.n_terms < 1:
            raise ValueError(f"n_terms must be >= 1, got {self.n_terms}")


def taylor_expand(x: Tensor, n_terms: int = 5) -> Tensor:
    """Truncated sine series sum_{n<N} (-1)^n x^(2n+1) / (2n+1)!.

    The polynomial diverges from sin for |x| beyond a few units, so callers
    should keep inputs bounded. Each term is the previous one times -x^2 and
    a constant, which makes the result exactly odd in x.
    """
    if n_terms < 1:
        raise ValueError(f"n_terms must be >= 1, got {n_terms}")
    x2 = x * x
    term = x
    total = x
    for n in range(1, n_terms):
        term = term * x2 * (-1.0 / ((2 * n) * (2 * n + 1)))
        total = total + term
    return total


def morlet(x: Tensor, omega0: float = OMEGA0) -> Tensor:
    """exp(-x^2/2) cos(omega0 x)."""
    return (x * x * -0.5).exp() * (x * omega0).cos()


def _softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


class WaveletLayer(Module):
    """Softmax-weighted blend of a Morlet wavelet path and a B-spline path, then BatchNorm."""

    _buffer_names = ("bn.running_mean", "bn.running_var")

    def __init__(self, in_dim: int, out_dim: int, grid: SplineGrid | None = None,
                 rng: np.random.Generator | None = None, batch_norm: bool = True):
        grid = grid or SplineGrid()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim, self.grid = in_dim, out_dim, grid
        self.scale_raw = Parameter(np.full(in_dim, _softplus_inverse(1.0 - SCALE_FLOOR)))
        self.translation = Parameter(np.zeros(in_dim))
        self.wavelet_weight = Parameter(kaiming_uniform(rng, (out_dim, in_dim), in_dim))
        self.spline_weight = Parameter(spline_init(grid, in_dim, out_dim, rng))
        self.combine_logits = Parameter(np.zeros(2))
        self.use_bn = batch_norm
        if batch_norm:
            self.bn_weight = Parameter(np.ones(out_dim))
            self.bn_bias = Parameter(np.zeros(out_dim))
            self.bn = ops.BatchNormState(out_dim)
        else:
            self._buffer_names = ()

    def scale(self) -> Tensor:
        """Strictly positive per-feature scale softplus(raw) + floor."""
        return self.scale_raw.softplus() + SCALE_FLOOR

    def wavelet_transform(self, v: Tensor) -> Tensor:
        _check_in(v, self.in_dim, "WaveletLayer")
        w = morlet((v - self.translation) / self.scale())
        return w @ self.wavelet_weight.T

    def spline_transform(self, v: Tensor) -> Tensor:
        basis = bspline_basis(self.grid, v).reshape(v.shape[0], -1)
        return basis @ self.spline_weight.reshape(self.out_dim, -1).T

    def combine_weights(self) -> Tensor:
        return ops.softmax(self.combine_logits)

    def combine(self, v: Tensor) -> Tensor:
        """Pre-normalisation output c1 * wavelet(v) + c2 * spline(v)."""
        c = self.combine_weights()
        return self.wavelet_transform(v) * c[0] + self.spline_transform(v) * c[1]

    def forward(self, v: Tensor) -> Tensor:
        h = self.combine(v)
        if self.use_bn:
            h = ops.batch_norm(h, self.bn, self.bn_weight, self.bn_bias, self.training)
        return h

    __call__ = forward
