"""Central-difference gradient checking for layers and scalar functions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError
from .layers import Layer

FLOOR = 1e-6
REL_STEP = 1e-4


@dataclass
class GradCheckResult:
    max_error: float
    checked: int
    skipped: int


def _max_relative_error(
    objective: Callable[[], float],
    arrays: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    rng: np.random.Generator,
    max_checks: int | None,
    floor: float,
    signature: Callable[[], list] | None = None,
) -> GradCheckResult:
    worst = 0.0
    checked = skipped = 0
    base = signature() if signature is not None else None
    for name, arr in arrays.items():
        grad = analytic[name]
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        for i in idx:
            orig = flat[i]
            h = REL_STEP * max(1.0, abs(orig))
            flat[i] = orig + h
            f_plus = objective()
            crossed = signature is not None and not _same(base, signature())
            flat[i] = orig - h
            f_minus = objective()
            crossed = crossed or (signature is not None and not _same(base, signature()))
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = grad.reshape(-1)[i]
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise DomainError(f"non-finite gradient at {name}[{np.unravel_index(i, arr.shape)}]")
            if crossed:
                # the difference straddles a ReLU or max-pool switch; not a derivative
                skipped += 1
                continue
            checked += 1
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return GradCheckResult(worst, checked, skipped)


def _same(a: list, b: list) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def gradient_check_stats(
    layer: Layer,
    x: np.ndarray,
    seed: int = 0,
    train: bool = True,
    check_input: bool = True,
    max_checks: int | None = None,
    floor: float = FLOOR,
) -> GradCheckResult:
    """Max relative error between backprop and central differences.

    The layer output is reduced to a scalar with a fixed random unit-norm
    projection so that every output element contributes while the objective,
    and with it the round-off in the differences, stays O(1). Inputs and all parameters are
    checked (``max_checks`` caps the number of sampled entries per array).
    Probes whose step moves any ReLU or max-pool unit onto another linear
    piece are skipped and counted, since the central difference there does
    not estimate the derivative.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    buffers = {n: b.copy() for n, b in layer.named_buffers()}

    def restore():
        for n, b in layer.named_buffers():
            b[...] = buffers[n]

    out = layer.forward(x, train)
    proj = rng.standard_normal(out.shape)
    proj /= np.linalg.norm(proj)
    layer.zero_grad()
    dx = layer.backward(proj)
    kinked = [m for m in layer.modules() if m.kink_state() is not None]

    arrays: dict[str, np.ndarray] = {}
    analytic: dict[str, np.ndarray] = {}
    if check_input:
        arrays["input"] = x
        analytic["input"] = dx
    for name, p in layer.named_parameters():
        arrays[name] = p.value
        analytic[name] = p.grad.copy()

    def objective() -> float:
        restore()
        return float(np.sum(layer.forward(x, train) * proj))

    def signature() -> list:
        return [np.copy(m.kink_state()) for m in kinked]

    objective()
    try:
        return _max_relative_error(objective, arrays, analytic, rng, max_checks, floor, signature)
    finally:
        restore()


def gradient_check(layer: Layer, x: np.ndarray, seed: int = 0, train: bool = True,
                   check_input: bool = True, max_checks: int | None = None,
                   floor: float = FLOOR) -> float:
    """Max relative error only; see :func:`gradient_check_stats`."""
    return gradient_check_stats(layer, x, seed, train, check_input, max_checks, floor).max_error


def check_function(
    func: Callable[..., float],
    args: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    seed: int = 0,
    max_checks: int | None = None,
    floor: float = FLOOR,
) -> float:
    """Gradient check for a scalar function of named arrays."""
    args = {k: np.array(v, dtype=np.float64) for k, v in args.items()}
    rng = np.random.default_rng(seed)
    return _max_relative_error(lambda: float(func(**args)), args, analytic, rng, max_checks, floor).max_error
