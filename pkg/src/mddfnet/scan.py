"""Selective state-space scan.

Recurrence per channel ``c`` (diagonal ``A``, zero-order hold on ``A``,
Euler step on ``B``)::

    h_t = exp(delta_t,c * A_c) * h_{t-1} + delta_t,c * B_t * u_t,c     h_{-1} = 0
    y_t,c = <C_t, h_t> + D_c * u_t,c

The forward and the adjoint recurrences are both evaluated with a
Hillis-Steele associative scan over pairs ``(a, b)`` composed as
``(a1, b1) ∘ (a2, b2) = (a1 a2, a2 b1 + b2)``.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from . import tensor as T
from .tensor import Tensor, _make, _record_flops


def associative_scan(a: np.ndarray, b: np.ndarray, axis: int = -3) -> np.ndarray:
    """All prefixes of ``h_t = a_t h_{t-1} + b_t`` along ``axis`` with ``h_{-1} = 0``."""
    a = np.moveaxis(a, axis, 0).copy()
    b = np.moveaxis(b, axis, 0).copy()
    L = a.shape[0]
    off = 1
    while off < L:
        b[off:] += a[off:] * b[:-off]
        if 2 * off < L:
            a[off:] *= a[:-off]
        off *= 2
    return np.moveaxis(b, 0, axis)


def sequential_scan(a: np.ndarray, b: np.ndarray, axis: int = -3) -> np.ndarray:
    a = np.moveaxis(a, axis, 0)
    b = np.moveaxis(b, axis, 0)
    h = np.empty_like(b)
    prev = np.zeros_like(b[0])
    for t in range(b.shape[0]):
        prev = a[t] * prev + b[t]
        h[t] = prev
    return np.moveaxis(h, 0, axis)


def selective_scan_reference(u, delta, A, B, C, D) -> np.ndarray:
    """Plain time loop over single sequences; the oracle for :func:`selective_scan`.

    Shapes: ``u, delta`` (L, d); ``A`` (d, N); ``B, C`` (L, N); ``D`` (d,).
    """
    L, d = u.shape
    N = A.shape[1]
    h = np.zeros((d, N))
    y = np.zeros((L, d))
    for t in range(L):
        for c in range(d):
            for n in range(N):
                h[c, n] = np.exp(delta[t, c] * A[c, n]) * h[c, n] + delta[t, c] * B[t, n] * u[t, c]
            y[t, c] = np.dot(C[t], h[c]) + D[c] * u[t, c]
    return y


def _check(u, delta, A, B, C, D) -> None:
    L, d = u.shape[-2:]
    if L < 1:
        raise ContractError("selective_scan: sequence length must be ≥ 1")
    if delta.shape != u.shape:
        raise ContractError(f"selective_scan: delta shape {delta.shape} != u shape {u.shape}")
    if A.ndim != 2 or A.shape[0] != d:
        raise ContractError(f"selective_scan: A must be d×N with d={d}, got {A.shape}")
    N = A.shape[1]
    if B.shape != u.shape[:-1] + (N,) or C.shape != B.shape:
        raise ContractError(f"selective_scan: B/C must have shape {u.shape[:-1] + (N,)}, got {B.shape}/{C.shape}")
    if D.shape != (d,):
        raise ContractError(f"selective_scan: D must have shape ({d},), got {D.shape}")
    if not np.all(delta.data > 0):
        raise ContractError("selective_scan: delta must be strictly positive")
    if not np.all(A.data < 0):
        raise ContractError("selective_scan: A must be strictly negative")


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor,
                   method: str = "parallel") -> Tensor:
    """Selective scan over the second-to-last axis; leading axes are batch.

    ``u, delta``: (..., L, d); ``A``: (d, N); ``B, C``: (..., L, N); ``D``: (d,).
    ``method`` is ``"parallel"`` (associative scan) or ``"sequential"``.
    """
    _check(u, delta, A, B, C, D)
    scan = associative_scan if method == "parallel" else sequential_scan
    L, d = u.shape[-2:]
    N = A.shape[1]
    batch = int(np.prod(u.shape[:-2], dtype=np.int64))
    _record_flops("scan", 2 * 2 * batch * L * d * N)
    if T._SHAPE_ONLY:
        return Tensor(np.zeros(u.shape, dtype=u.dtype))

    dl, uu = delta.data, u.data
    abar = np.exp(dl[..., None] * A.data)
    du = dl * uu
    bu = du[..., None] * B.data[..., None, :]
    h = scan(abar, bu)
    y = (h @ C.data[..., :, None])[..., 0] + uu * D.data

    def bw(gy):
        gC = (gy[..., None, :] @ h)[..., 0, :]
        gh = gy[..., None] * C.data[..., None, :]
        # adjoint: lam_t = gh_t + abar_{t+1} lam_{t+1}, run as a forward scan on the reversed sequence
        a_rev = np.empty_like(abar)
        a_rev[..., 0, :, :] = 0.0
        a_rev[..., 1:, :, :] = abar[..., :0:-1, :, :]
        lam = scan(a_rev, gh[..., ::-1, :, :])[..., ::-1, :, :]
        h_prev = np.zeros_like(h)
        h_prev[..., 1:, :, :] = h[..., :-1, :, :]
        g_dA = lam * h_prev * abar
        lamB = (lam @ B.data[..., :, None])[..., 0]
        g_delta = (g_dA * A.data).sum(-1) + lamB * uu
        lead = tuple(range(g_dA.ndim - 2))
        gA = (g_dA * dl[..., None]).sum(axis=lead)
        gB = (du[..., None, :] @ lam)[..., 0, :]
        gu = lamB * dl + gy * D.data
        gD = (gy * uu).reshape(-1, d).sum(axis=0)
        return gu, g_delta, gA, gB, gC, gD

    return _make(y, (u, delta, A, B, C, D), bw)
