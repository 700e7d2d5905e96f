"""Dense attention math: the plain oracle, online-softmax block steps, and a
finite-difference gradient checker.

Matrices are numpy arrays shaped ``(..., rows, cols)``; any leading axes
(batch, heads) broadcast through every function. Token positions for masking
are either an integer offset or an explicit array of global indices, since
zigzag shards are not contiguous.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels


class ContractError(ValueError):
    """Shapes or arguments violate an operation's preconditions."""


class OracleError(RuntimeError):
    """A reference computation produced an unusable value."""


class MaskKind(str, enum.Enum):
    FULL = "full"
    CAUSAL = "causal"


def positions(pos, n: int) -> np.ndarray:
    """Global token indices for ``n`` rows given an offset or explicit array."""
    if isinstance(pos, (int, np.integer)):
        return np.arange(int(pos), int(pos) + n, dtype=np.int64)
    arr = np.asarray(pos, dtype=np.int64)
    if arr.shape != (n,):
        raise ContractError(f"position array has shape {arr.shape}, expected ({n},)")
    return arr


@dataclass(frozen=True)
class AttnState:
    """Running output and per-row log-sum-exp of a partially merged softmax."""

    out: np.ndarray
    lse: np.ndarray

    def __post_init__(self):
        if self.lse.shape != self.out.shape[:-1]:
            raise ContractError(f"lse shape {self.lse.shape} does not match out rows {self.out.shape[:-1]}")

    @classmethod
    def initial(cls, lead: tuple, rows: int, cols: int, dtype=np.float64) -> "AttnState":
        # lse = -inf makes the first merge an exact identity
        return cls(np.zeros((*lead, rows, cols), dtype=dtype), np.full((*lead, rows), -np.inf, dtype=dtype))


def _scale(q: np.ndarray, k: np.ndarray, head_dim: int | None) -> float:
    if q.ndim < 2 or k.ndim < 2:
        raise ContractError("attention operands must be at least 2-D")
    d = q.shape[-1]
    if head_dim is None:
        head_dim = d
    if d != head_dim or k.shape[-1] != head_dim:
        raise ContractError(f"q/k columns ({d}, {k.shape[-1]}) must equal head_dim={head_dim}")
    return 1.0 / np.sqrt(head_dim)


def _check_kv(k: np.ndarray, v: np.ndarray) -> None:
    if k.shape[:-1] != v.shape[:-1]:
        raise ContractError(f"k rows {k.shape[:-1]} and v rows {v.shape[:-1]} differ")


def reference_attention(q, k, v, mask=MaskKind.FULL, q_offset=0, k_offset=0, head_dim=None) -> np.ndarray:
    """softmax(q k^T / sqrt(head_dim)) v, computed densely in one shot."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    scale = _scale(q, k, head_dim)
    _check_kv(k, v)
    s = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    if MaskKind(mask) is MaskKind.CAUSAL:
        qp = positions(q_offset, q.shape[-2])
        kp = positions(k_offset, k.shape[-2])
        s = np.where(kp[None, :] <= qp[:, None], s, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    live = np.isfinite(m)
    w = np.exp(s - np.where(live, m, 0.0))
    z = w.sum(axis=-1, keepdims=True)
    w = w / np.where(live, z, 1.0)
    return np.matmul(w, v)


def _flat(x: np.ndarray, tail: int) -> np.ndarray:
    return x.reshape((-1,) + x.shape[x.ndim - tail:])


def block_attention(q, k_block, v_block, mask=MaskKind.FULL, q_offset=0, k_offset=0, head_dim=None) -> AttnState:
    """Output and lse of ``q`` attending only to one key/value block."""
    q, k_block, v_block = np.asarray(q), np.asarray(k_block), np.asarray(v_block)
    scale = _scale(q, k_block, head_dim)
    _check_kv(k_block, v_block)
    lead = q.shape[:-2]
    if k_block.shape[:-2] != lead:
        raise ContractError(f"leading axes differ: q {lead}, k {k_block.shape[:-2]}")
    qp = positions(q_offset, q.shape[-2])
    kp = positions(k_offset, k_block.shape[-2])
    out, lse = kernels.block_forward(
        _flat(q, 2), _flat(k_block, 2), _flat(v_block, 2), qp, kp, MaskKind(mask) is MaskKind.CAUSAL, scale
    )
    return AttnState(out.reshape(*lead, q.shape[-2], v_block.shape[-1]), lse.reshape(*lead, q.shape[-2]))


def merge_states(a: AttnState, b: AttnState) -> AttnState:
    """Combine two partial softmax states over disjoint key sets."""
    if a.out.shape != b.out.shape:
        raise ContractError(f"cannot merge states of shape {a.out.shape} and {b.out.shape}")
    new_lse = np.logaddexp(a.lse, b.lse)
    live = np.isfinite(new_lse)
    safe = np.where(live, new_lse, 0.0)
    wa = np.where(live, np.exp(a.lse - safe), 0.0)[..., None]
    wb = np.where(live, np.exp(b.lse - safe), 0.0)[..., None]
    return AttnState(wa * a.out + wb * b.out, new_lse)


def forward_iteration(state: AttnState, q, k_block, v_block, mask=MaskKind.FULL, q_offset=0, k_offset=0, head_dim=None) -> AttnState:
    """One online-softmax step: fold a key/value block into ``state``."""
    q, v_block = np.asarray(q), np.asarray(v_block)
    expected = (*q.shape[:-1], v_block.shape[-1])
    if state.out.shape != expected:
        raise ContractError(f"state shape {state.out.shape} does not match q/v ({expected})")
    return merge_states(state, block_attention(q, k_block, v_block, mask, q_offset, k_offset, head_dim))


def backward_iteration(q, k_block, v_block, d_out, lse, out, mask=MaskKind.FULL, q_offset=0, k_offset=0, head_dim=None, delta=None):
    """Partial ``(dq, dk_block, dv_block)`` for one key block.

    ``lse`` and ``out`` are the final forward statistics of ``q`` over every
    key, which makes the per-block contributions additive. ``delta`` (the row
    sums of ``d_out * out``) may be passed instead of being recomputed.
    """
    q, k_block, v_block, d_out = (np.asarray(a) for a in (q, k_block, v_block, d_out))
    scale = _scale(q, k_block, head_dim)
    _check_kv(k_block, v_block)
    lse = np.asarray(lse)
    if d_out.shape != (*q.shape[:-1], v_block.shape[-1]) or lse.shape != q.shape[:-1]:
        raise ContractError("d_out/lse shapes do not match q and v")
    if delta is None:
        out = np.asarray(out)
        if out.shape != d_out.shape:
            raise ContractError("out and d_out shapes differ")
        delta = np.sum(d_out * out, axis=-1)
    lead = q.shape[:-2]
    qp = positions(q_offset, q.shape[-2])
    kp = positions(k_offset, k_block.shape[-2])
    dq, dk, dv = kernels.block_backward(
        _flat(q, 2), _flat(k_block, 2), _flat(v_block, 2), _flat(d_out, 2),
        _flat(lse, 1), _flat(np.asarray(delta), 1), qp, kp, MaskKind(mask) is MaskKind.CAUSAL, scale,
    )
    return dq.reshape(q.shape), dk.reshape(k_block.shape), dv.reshape(v_block.shape)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one entry at a time."""
    if not step > 0:
        raise ContractError(f"step must be positive, got {step}")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise OracleError(f"f is not finite around entry {i}")
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad
