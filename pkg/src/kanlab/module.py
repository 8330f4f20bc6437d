"""Parameter registry shared by layers and models."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that the optimiser updates."""

    __slots__ = ()

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)


class Module:
    """Walks attributes in definition order to enumerate parameters and buffers.

    Buffers are plain numpy arrays listed in ``_buffer_names``; they are
    saved in checkpoints but never touched by the optimiser.
    """

    _buffer_names: tuple = ()
    training: bool = True

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                out.append((prefix + key, val))
        for key, child in self._children():
            out.extend(child.named_parameters(prefix + key + "."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = [(prefix + name, self._buffer(name)) for name in self._buffer_names]
        for key, child in self._children():
            out.extend(child.named_buffers(prefix + key + "."))
        return out

    def _buffer(self, name: str) -> np.ndarray:
        obj = self
        for part in name.split("."):
            obj = getattr(obj, part)
        return obj

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every stored array: parameters first, then buffers, in registry order."""
        return [(n, p.data) for n, p in self.named_parameters()] + self.named_buffers()

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        owner_path, _, attr = name.rpartition(".")
        owner = self._buffer(owner_path) if owner_path else self
        setattr(owner, attr, value)

    def astype(self, dtype) -> "Module":
        """Convert every parameter and buffer in place to ``dtype``."""
        for val in vars(self).values():
            if isinstance(val, Parameter):
                val.data = val.data.astype(dtype)
                val.grad = None
        for name in self._buffer_names:
            self._set_buffer(name, self._buffer(name).astype(dtype))
        for _, child in self._children():
            child.astype(dtype)
        return self

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        """Overwrite parameters and buffers from ``arrays`` keyed by registry name."""
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                src = arrays[prefix + key]
                if src.shape != val.shape:
                    raise ValueError(f"{prefix + key}: shape {src.shape} != expected {val.shape}")
                val.data = np.array(src, dtype=val.dtype)
        for name in self._buffer_names:
            cur = self._buffer(name)
            src = arrays[prefix + name]
            if src.shape != cur.shape:
                raise ValueError(f"{prefix + name}: shape {src.shape} != expected {cur.shape}")
            self._set_buffer(name, np.array(src, dtype=cur.dtype))
        for key, child in self._children():
            child.load_arrays(arrays, prefix + key + ".")
