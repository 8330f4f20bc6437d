"""Convolutional backbone plus the three KAN heads, and parameter accounting."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import ops
from .layers import KANLinear, SBRBFLayer, WaveletLayer, kaiming_uniform, taylor_expand
from .module import Module, Parameter
from .rng import derive_seed
from .spline import SplineGrid
from .tensor import ShapeError, Tensor

VARIANTS = ("SBTAYLOR", "SBRBF", "SBWAVELET")


class SpecError(ValueError):
    """Raised for an inconsistent model specification."""


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    conv1_out: int = 4
    conv2_out: int = 4
    kernel: int = 3
    pool: int = 2
    input_hw: tuple[int, int] = (64, 64)

    @property
    def flatten_dim(self) -> int:
        h, w = self.input_hw
        d = self.pool * self.pool
        return self.conv2_out * (h // d) * (w // d)


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "SBTAYLOR"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    hidden: tuple[int, int] = (8, 8)
    num_classes: int = 2
    grid_size: int = 5
    spline_order: int = 3
    grid_min: float = -1.0
    grid_max: float = 1.0
    taylor_terms: int = 5
    taylor_norm: bool = True
    rbf_centers: int = 0  # 0 means grid_size + spline_order

    @property
    def kan_dims(self) -> list[int]:
        return [self.backbone.flatten_dim, *self.hidden, self.num_classes]

    def grid(self) -> SplineGrid:
        return SplineGrid(self.grid_min, self.grid_max, self.grid_size, self.spline_order)

    def validate(self) -> "ModelSpec":
        bb = self.backbone
        if self.variant not in VARIANTS:
            raise SpecError(f"variant: expected one of {VARIANTS}, got {self.variant!r}")
        for name in ("in_channels", "conv1_out", "conv2_out", "kernel", "pool"):
            if getattr(bb, name) < 1:
                raise SpecError(f"backbone.{name}: must be positive, got {getattr(bb, name)}")
        if bb.kernel % 2 == 0:
            raise SpecError(f"backbone.kernel: must be odd to preserve size, got {bb.kernel}")
        d = bb.pool * bb.pool
        for axis, n in zip("HW", bb.input_hw):
            if n < d or n % d:
                raise SpecError(f"backbone.input_hw: {axis}={n} must be a positive multiple of {d}")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise SpecError(f"hidden: need two positive widths, got {self.hidden}")
        if self.num_classes < 2:
            raise SpecError(f"num_classes: need at least 2, got {self.num_classes}")
        if self.taylor_terms < 1:
            raise SpecError(f"taylor_terms: must be >= 1, got {self.taylor_terms}")
        if self.rbf_centers == 1 or self.rbf_centers < 0:
            raise SpecError(f"rbf_centers: need 0 (auto) or >= 2, got {self.rbf_centers}")
        try:
            self.grid()
        except ValueError as exc:
            raise SpecError(f"grid: {exc}") from None
        return self

    # -- canonical text form (embedded in checkpoints) -------------------------

    def to_text(self) -> str:
        bb = self.backbone
        items = {
            "variant": self.variant,
            "in_channels": bb.in_channels,
            "conv1_out": bb.conv1_out,
            "conv2_out": bb.conv2_out,
            "kernel": bb.kernel,
            "pool": bb.pool,
            "input_hw": f"{bb.input_hw[0]}x{bb.input_hw[1]}",
            "hidden": ",".join(str(h) for h in self.hidden),
            "num_classes": self.num_classes,
            "grid_size": self.grid_size,
            "spline_order": self.spline_order,
            "grid_min": repr(float(self.grid_min)),
            "grid_max": repr(float(self.grid_max)),
            "taylor_terms": self.taylor_terms,
            "taylor_norm": int(self.taylor_norm),
            "rbf_centers": self.rbf_centers,
        }
        return "".join(f"{k}={items[k]}\n" for k in sorted(items))

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise SpecError(f"malformed spec line {line!r}")
            kv[key.strip()] = val.strip()
        return spec_from_mapping(kv)


_BACKBONE_KEYS = {f.name for f in fields(BackboneConfig)}
_SPEC_KEYS = {f.name for f in fields(ModelSpec)} - {"backbone"}


def _parse_hw(val) -> tuple[int, int]:
    if isinstance(val, (tuple, list)):
        return int(val[0]), int(val[1])
    parts = str(val).lower().replace(",", "x").split("x")
    if len(parts) == 1:
        return int(parts[0]), int(parts[0])
    return int(parts[0]), int(parts[1])


def spec_from_mapping(kv: dict) -> ModelSpec:
    """Build a :class:`ModelSpec` from string (or typed) key/value pairs."""
    bb_kwargs, kwargs = {}, {}
    for key, val in kv.items():
        if key == "input_hw":
            bb_kwargs[key] = _parse_hw(val)
        elif key in _BACKBONE_KEYS:
            bb_kwargs[key] = int(val)
        elif key == "hidden":
            hs = val if isinstance(val, (tuple, list)) else str(val).split(",")
            kwargs[key] = tuple(int(h) for h in hs)
        elif key == "variant":
            kwargs[key] = str(val).upper().replace("-KAN", "")
        elif key in ("grid_min", "grid_max"):
            kwargs[key] = float(val)
        elif key == "taylor_norm":
            kwargs[key] = str(val).lower() in ("1", "true", "yes", "on")
        elif key in _SPEC_KEYS:
            kwargs[key] = int(val)
        else:
            raise SpecError(f"unknown model spec key {key!r}")
    return ModelSpec(backbone=BackboneConfig(**bb_kwargs), **kwargs).validate()


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator):
        fan_in = cin * k * k
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, k, k), fan_in))
        self.bias = Parameter(kaiming_uniform(rng, (cout,), fan_in))
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class Model(Module):
    """Backbone -> flatten -> three variant-specific KAN layers -> logits.

    Softmax is left to the loss and to inference helpers.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.seed = seed
        bb = spec.backbone
        rng = np.random.default_rng(derive_seed(seed, "init"))
        self.conv1 = Conv2d(bb.in_channels, bb.conv1_out, bb.kernel, rng)
        self.conv2 = Conv2d(bb.conv1_out, bb.conv2_out, bb.kernel, rng)
        grid = spec.grid()
        dims = spec.kan_dims
        pairs = list(zip(dims[:-1], dims[1:]))
        if spec.variant == "SBTAYLOR":
            self.kan = [KANLinear(i, o, grid, rng) for i, o in pairs]
        elif spec.variant == "SBRBF":
            m = spec.rbf_centers or None
            self.kan = [SBRBFLayer(i, o, grid, m, rng) for i, o in pairs]
        else:
            self.kan = [WaveletLayer(i, o, grid, rng) for i, o in pairs]

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def has_batch_norm(self) -> bool:
        return self.spec.variant == "SBWAVELET"

    def backbone(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """Returns the flattened features and the last conv feature map (post-ReLU)."""
        pool = self.spec.backbone.pool
        x1 = self.conv1(images).relu()
        x2 = ops.maxpool2d(x1, pool, pool)
        x3 = self.conv2(x2).relu()
        x4 = ops.maxpool2d(x3, pool, pool)
        return ops.flatten(x4), x3

    def head(self, x: Tensor) -> Tensor:
        if self.spec.variant == "SBTAYLOR":
            if self.spec.taylor_norm:
                x = ops.layer_norm(x)
            x = taylor_expand(x, self.spec.taylor_terms)
        last = len(self.kan) - 1
        for i, layer in enumerate(self.kan):
            x = layer(x)
            if i < last:
                x = x.relu()
        return x

    def forward_features(self, images) -> tuple[Tensor, Tensor]:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.conv1.weight.dtype))
        bb = self.spec.backbone
        expect = (bb.in_channels, *bb.input_hw)
        if images.ndim != 4 or tuple(images.shape[1:]) != expect:
            raise ShapeError(f"model expects images (B, {expect[0]}, {expect[1]}, {expect[2]}), "
                             f"got {images.shape}")
        flat, fmap = self.backbone(images)
        return self.head(flat), fmap

    def forward(self, images) -> Tensor:
        return self.forward_features(images)[0]

    __call__ = forward


def build(spec: ModelSpec, seed: int = 0) -> Model:
    """Deterministically initialised model for ``spec``."""
    return Model(spec, seed)


@dataclass
class ParamCount:
    trainable: int
    non_trainable: int
    total: int
    per_layer: list[tuple[str, int, int]]


def parameter_count(model: Module) -> ParamCount:
    """Exact census; batch-norm running statistics are counted as non-trainable."""
    rows: dict[str, list[int]] = {}

    def group(name: str) -> str:
        parts = name.split(".")
        return ".".join(parts[:2]) if parts[0] == "kan" else parts[0]

    for name, p in model.named_parameters():
        rows.setdefault(group(name), [0, 0])[0] += int(p.size)
    for name, b in model.named_buffers():
        rows.setdefault(group(name), [0, 0])[1] += int(b.size)
    per_layer = [(k, v[0], v[1]) for k, v in rows.items()]
    tr = sum(r[1] for r in per_layer)
    nt = sum(r[2] for r in per_layer)
    return ParamCount(tr, nt, tr + nt, per_layer)


def count_formula(spec: ModelSpec) -> tuple[int, int]:
    """Closed-form (trainable, non_trainable) counts without building the model."""
    bb = spec.backbone
    k2 = bb.kernel * bb.kernel
    total = (bb.in_channels * k2 + 1) * bb.conv1_out + (bb.conv1_out * k2 + 1) * bb.conv2_out
    nb = spec.grid_size + spec.spline_order
    m = spec.rbf_centers or nb
    non = 0
    dims = spec.kan_dims
    for i, o in zip(dims[:-1], dims[1:]):
        if spec.variant == "SBTAYLOR":
            total += i * o * (nb + 2)
        elif spec.variant == "SBRBF":
            total += 2 * i + i * o + o * i * (nb + m)
        else:
            total += 2 * i + o * i + o * i * nb + 2 + 2 * o
            non += 2 * o
    return total, non


def search_configs(variant: str, target: int, resolutions=((16, 16), (28, 28), (64, 64)),
                   conv_widths=(2, 4, 8), hidden_widths=(8, 16, 32), num_classes=(2, 3, 4, 6),
                   in_channels: int = 3) -> list[tuple[int, ModelSpec]]:
    """Enumerate small configs and rank them by distance of the trainable count to ``target``."""
    out = []
    for hw, c1, c2, h1, h2, nc in itertools.product(resolutions, conv_widths, conv_widths,
                                                     hidden_widths, hidden_widths, num_classes):
        spec = ModelSpec(variant=variant,
                         backbone=BackboneConfig(in_channels, c1, c2, 3, 2, tuple(hw)),
                         hidden=(h1, h2), num_classes=nc)
        trainable, _ = count_formula(spec)
        out.append((trainable, spec))
    out.sort(key=lambda r: (abs(r[0] - target), r[0], r[1].to_text()))
    return out


def with_dims(spec: ModelSpec, **kw) -> ModelSpec:
    """Convenience: replace backbone or top-level fields by name."""
    bb_kw = {k: kw.pop(k) for k in list(kw) if k in _BACKBONE_KEYS}
    bb = replace(spec.backbone, **bb_kw) if bb_kw else spec.backbone
    return replace(spec, backbone=bb, **kw).validate()
