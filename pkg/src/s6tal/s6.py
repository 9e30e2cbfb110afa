"""Selective state space (S6) layer.

Input-dependent projections produce per-step ``delta``, ``B`` and ``C``;
zero-order hold turns the diagonal state matrix into per-step decay and input
gains; a linear recurrence runs over time.  Two scan kernels are provided:
a plain sequential loop (the oracle) and a chunked associative scan.

Array kernels here work time-major, ``[L, ...]``, so each step is a
contiguous slab.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, _uniform
from .tensor import Tensor

TAYLOR_EPS = 1e-6


@dataclass
class ScanInputs:
    delta: Tensor  # [B, L, D], non-negative
    Bm: Tensor  # [B, L, N]
    Cm: Tensor  # [B, L, N]
    x: Tensor  # [B, L, D]


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class S6Parameters(Module):
    """Weights of one S6 layer over ``d`` channels with state size ``n``.

    The state matrix is stored as ``A_log`` with ``A = -exp(A_log)``, so every
    diagonal entry stays strictly negative.
    """

    def __init__(self, d: int, n: int, rng: np.random.Generator, use_skip: bool = True,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        dt = T.default_dtype()
        self.d, self.n = d, n
        self.A_log = T.parameter(np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (d, 1)).astype(dt))
        bound = 1.0 / np.sqrt(d)
        self.W_B = T.parameter(_uniform(rng, (n, d), bound))
        self.W_C = T.parameter(_uniform(rng, (n, d), bound))
        self.W_delta = T.parameter(_uniform(rng, (1, d), bound))
        steps = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d))
        self.b_delta = T.parameter(inverse_softplus(steps).astype(dt))
        self.use_skip = use_skip
        self.D_skip = T.parameter(np.ones(d, dtype=dt)) if use_skip else None

    def A(self) -> Tensor:
        return T.mul(T.exp(self.A_log), -1.0)

    def forward(self, x: Tensor, impl: str = "chunked", chunk: int = 64) -> Tensor:
        return s6_forward(x, self, impl=impl, chunk=chunk)


def project_inputs(x: Tensor, p: S6Parameters) -> ScanInputs:
    if x.shape[-1] != p.d:
        raise ValueError(f"project_inputs: channel extent {x.shape[-1]} != {p.d}")
    Bm = T.linear(x, p.W_B)
    Cm = T.linear(x, p.W_C)
    s = T.linear(x, p.W_delta)  # [B, L, 1], broadcast over channels by the add
    delta = T.softplus(T.add(s, p.b_delta))
    return ScanInputs(delta=delta, Bm=Bm, Cm=Cm, x=x)


# ---------------------------------------------------------------------------
# array kernels
# ---------------------------------------------------------------------------


def _zoh(delta_tm: np.ndarray, A: np.ndarray, Bm_tm: np.ndarray):
    """Time-major ZOH: delta [L,B,D], A [D,N], Bm [L,B,N] -> Abar, E, Bbar [L,B,D,N].

    ``E = (exp(delta A) - 1) / A`` is the input gain before multiplying by B.
    """
    d = delta_tm[..., None]
    dA = d * A
    Abar = np.exp(dA)
    small = np.abs(dA) < TAYLOR_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        E = np.where(small, d, np.expm1(dA) / A)
    Bbar = E * Bm_tm[:, :, None, :]
    return Abar, E, Bbar, small


def discretize_zoh(delta, A, Bm):
    """ZOH discretization for a diagonal state matrix.

    ``delta`` [B,L,D], ``A`` [D,N] (strictly negative), ``Bm`` [B,L,N].
    Returns ``(Abar, Bbar)`` shaped [B,L,D,N].
    """
    delta, A, Bm = (np.asarray(getattr(v, "data", v)) for v in (delta, A, Bm))
    if not (A < 0).all():
        raise ValueError("state matrix entries must be strictly negative")
    if (delta < 0).any():
        raise ValueError("step sizes must be non-negative")
    Abar, _, Bbar, _ = _zoh(delta.transpose(1, 0, 2), A, Bm.transpose(1, 0, 2))
    if not ((Abar >= 0) & (Abar <= 1)).all():
        raise FloatingPointError("discretized decay left [0, 1]")
    return np.ascontiguousarray(Abar.transpose(1, 0, 2, 3)), np.ascontiguousarray(Bbar.transpose(1, 0, 2, 3))


def scan_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """h_t = a_t h_{t-1} + b_t along axis 0 with h_{-1} = 0."""
    h = np.empty_like(b)
    carry = np.zeros_like(b[0])
    for t in range(b.shape[0]):
        carry = a[t] * carry + b[t]
        h[t] = carry
    return h


def scan_chunked(a: np.ndarray, b: np.ndarray, chunk: int) -> np.ndarray:
    """Same recurrence as :func:`scan_sequential` via the associative operator.

    Pairs compose as (a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2).  Inside each
    chunk an inclusive Hillis-Steele scan runs vectorized over all chunks at
    once; chunk totals are then carried left to right.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    if chunk == 1:
        return scan_sequential(a, b)
    L = a.shape[0]
    chunk = min(chunk, L)
    nc = -(-L // chunk)
    pad = nc * chunk - L
    rest = a.shape[1:]
    if pad:
        a = np.concatenate([a, np.ones((pad,) + rest, dtype=a.dtype)])
        b = np.concatenate([b, np.zeros((pad,) + rest, dtype=b.dtype)])
    else:
        a, b = a.copy(), b.copy()
    a = a.reshape((nc, chunk) + rest)
    b = b.reshape((nc, chunk) + rest)
    s = 1
    while s < chunk:
        # numpy buffers overlapping operands, so the right side reads pre-update values
        b[:, s:] += a[:, s:] * b[:, :-s]
        a[:, s:] *= a[:, :-s]
        s *= 2
    out = np.empty_like(b)
    carry = np.zeros(rest, dtype=b.dtype)
    for c in range(nc):
        out[c] = a[c] * carry + b[c]
        carry = out[c, -1]
    return out.reshape((nc * chunk,) + rest)[:L]


def run_scan(a: np.ndarray, b: np.ndarray, impl: str, chunk: int) -> np.ndarray:
    if impl == "sequential":
        return scan_sequential(a, b)
    if impl == "chunked":
        return scan_chunked(a, b, chunk)
    raise ValueError(f"unknown scan impl {impl!r}")


# ---------------------------------------------------------------------------
# differentiable scan
# ---------------------------------------------------------------------------


def selective_scan(s: ScanInputs, A: Tensor, D_skip: Tensor | None = None,
                   impl: str = "chunked", chunk: int = 64) -> Tensor:
    """Discretize and scan; returns y [B, L, D].

    The adjoint is itself a linear recurrence run right to left, so the same
    kernel (sequential or chunked) serves the backward pass.
    """
    delta_t, Bm_t, Cm_t, x_t = s.delta, s.Bm, s.Cm, s.x
    Ad = A.data
    if not (Ad < 0).all():
        raise ValueError("state matrix entries must be strictly negative")
    delta = np.ascontiguousarray(delta_t.data.transpose(1, 0, 2))
    Bm = np.ascontiguousarray(Bm_t.data.transpose(1, 0, 2))
    Cm = np.ascontiguousarray(Cm_t.data.transpose(1, 0, 2))
    x = np.ascontiguousarray(x_t.data.transpose(1, 0, 2))
    if (delta < 0).any():
        raise ValueError("step sizes must be non-negative")
    Abar, E, Bbar, small = _zoh(delta, Ad, Bm)
    h = run_scan(Abar, Bbar * x[..., None], impl, chunk)
    y = np.matmul(h, Cm[..., None])[..., 0]
    if D_skip is not None:
        y = y + D_skip.data * x
    parents = [delta_t, Bm_t, Cm_t, x_t, A] + ([D_skip] if D_skip is not None else [])

    def bw(g):
        gy = np.ascontiguousarray(g.transpose(1, 0, 2))
        gh_local = gy[..., None] * Cm[:, :, None, :]
        a_next = np.concatenate([Abar[1:], np.ones_like(Abar[:1])])
        gh = run_scan(a_next[::-1], gh_local[::-1], impl, chunk)[::-1]
        gCm = np.matmul(gy[:, :, None, :], h)[:, :, 0, :]
        h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]])
        gdA = gh * h_prev * Abar
        gx = (gh * Bbar).sum(-1)
        gBbar = gh * x[..., None]
        gE = gBbar * Bm[:, :, None, :]
        gBm = (gBbar * E).sum(2)
        d = delta[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            dE_dA = np.where(small, 0.5 * d * d, (d * Abar - E) / Ad)
        gdelta = (gdA * Ad).sum(-1) + (gE * Abar).sum(-1)
        gA = (gdA * d).sum(axis=(0, 1)) + (gE * dE_dA).sum(axis=(0, 1))
        if D_skip is not None:
            gx = gx + gy * D_skip.data
        out = [gdelta.transpose(1, 0, 2), gBm.transpose(1, 0, 2), gCm.transpose(1, 0, 2),
               gx.transpose(1, 0, 2), gA]
        if D_skip is not None:
            out.append((gy * x).sum(axis=(0, 1)))
        return [np.ascontiguousarray(o) for o in out]

    return T.make_op(np.ascontiguousarray(y.transpose(1, 0, 2)), parents, bw, "selective_scan")


def selective_scan_seq(s: ScanInputs, p: S6Parameters) -> Tensor:
    return selective_scan(s, p.A(), p.D_skip, impl="sequential")


def selective_scan_chunked(s: ScanInputs, p: S6Parameters, chunk: int) -> Tensor:
    return selective_scan(s, p.A(), p.D_skip, impl="chunked", chunk=chunk)


def s6_forward(x: Tensor, p: S6Parameters, impl: str = "chunked", chunk: int = 64) -> Tensor:
    """Full S6 layer on x [B, L, D]."""
    s = project_inputs(x, p)
    return selective_scan(s, p.A(), p.D_skip, impl=impl, chunk=chunk)
