"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import GradCheckError
from .tensor import Tensor, backward, no_grad


def _rel_err(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def _check_finite(arr: np.ndarray, what: str, idx: np.ndarray | None = None) -> None:
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        i = int(bad[0] if idx is None else idx[bad[0]])
        raise GradCheckError(f"non-finite {what} gradient at element {i}", index=i)


def _sample(size: int, max_elements: int | None, rng: np.random.Generator | None) -> np.ndarray:
    if max_elements is None or size <= max_elements:
        return np.arange(size)
    rng = rng or np.random.default_rng(0)
    return np.sort(rng.choice(size, size=max_elements, replace=False))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between ∂f/∂x from backward and central differences.

    ``x`` should be float64. With ``max_elements`` only a random subset of
    coordinates is perturbed.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    _check_finite(analytic, "analytic")

    flat = leaf.data.reshape(-1)
    idx = _sample(flat.size, max_elements, rng)
    numeric = np.empty(idx.size)
    probe = Tensor(flat.copy().reshape(leaf.shape))
    pflat = probe.data.reshape(-1)
    with no_grad():
        for k, i in enumerate(idx):
            orig = pflat[i]
            pflat[i] = orig + eps
            fp = f(probe).item()
            pflat[i] = orig - eps
            fm = f(probe).item()
            pflat[i] = orig
            numeric[k] = (fp - fm) / (2 * eps)
    _check_finite(numeric, "numeric", idx)
    if idx.size == 0:
        return 0.0
    return float(_rel_err(analytic.reshape(-1)[idx], numeric).max())


def grad_check_params(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Same check against leaf tensors that ``f`` closes over (perturbed in place)."""
    params = list(params)
    for p in params:
        p.grad = None
        p.requires_grad = True
    backward(f())
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        _check_finite(analytic, "analytic")
        flat = p.data.reshape(-1)
        idx = _sample(flat.size, max_elements, rng)
        numeric = np.empty(idx.size)
        with no_grad():
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                numeric[k] = (fp - fm) / (2 * eps)
        _check_finite(numeric, "numeric", idx)
        if idx.size:
            worst = max(worst, float(_rel_err(analytic.reshape(-1)[idx], numeric).max()))
        p.grad = None
    return worst
