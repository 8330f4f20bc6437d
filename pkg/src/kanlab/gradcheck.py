"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import no_grad


@dataclass
class Probe:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


def relative_error(a: float, n: float, floor: float = 1e-3) -> float:
    """|a - n| / max(|a|, |n|, floor).

    Below ``floor`` the comparison becomes absolute: with a 1e-5 threshold
    the default floor means gradients smaller than 1e-3 must agree to 1e-8,
    the roundoff level of a 64-bit difference quotient.
    """
    return abs(a - n) / max(abs(a), abs(n), floor)


def numeric_grad(f, array: np.ndarray, index: tuple, h: float, order: int = 2) -> float:
    """Central difference of ``f`` in one entry of ``array`` (restored afterwards).

    ``order=2`` is the three-point stencil, ``order=4`` the five-point one.
    """
    old = array[index]

    def at(delta):
        array[index] = old + delta
        return f()

    try:
        if order == 2:
            return (at(h) - at(-h)) / (2 * h)
        if order == 4:
            return (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
        raise ValueError(f"order must be 2 or 4, got {order}")
    finally:
        array[index] = old


def check_parameters(loss_fn, named_params, probes: int, rng: np.random.Generator,
                     h: float = 1e-6, order: int = 4, kink_tol: float = 1e-2,
                     max_redraws: int = 50) -> list[Probe]:
    """Compare backward gradients with central differences at ``probes`` random entries.

    ``loss_fn`` builds a fresh scalar Tensor from the current parameter
    values. Probes cycle over the parameter tensors so each one is visited.
    A probe whose estimates at ``h`` and ``10 h`` disagree by more than
    ``kink_tol`` straddles a ReLU or max-pool kink, where no derivative
    exists; such entries are redrawn.
    """
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
    loss_fn().backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in named_params}

    def value() -> float:
        with no_grad():
            return float(loss_fn().data)

    out = []
    for k in range(probes):
        name, p = named_params[k % len(named_params)]
        for _ in range(max_redraws):
            idx = tuple(int(rng.integers(0, d)) for d in p.shape)
            num = numeric_grad(value, p.data, idx, h, order)
            coarse = numeric_grad(value, p.data, idx, 10 * h, order)
            if relative_error(num, coarse) <= kink_tol:
                break
        else:
            raise RuntimeError(f"{name}: every probe straddled a kink")
        out.append(Probe(name, idx, float(analytic[name][idx]), num))
    return out
