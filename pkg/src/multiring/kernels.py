"""Hot block-attention kernels.

Every kernel works on a flattened leading axis ``G = batch * heads``:
``q`` is ``(G, n_q, d)``, ``k``/``v`` are ``(G, n_k, d)``, and ``q_pos``/``k_pos``
hold the global token index of every row so causal masking never depends on
local ordering. Two implementations exist per kernel and must agree to
round-off; ``BACKEND`` picks the one used by the public dispatchers.
"""

from __future__ import annotations

import math

import numpy as np

from ._accel import BACKEND, njit

# ---------------------------------------------------------------- numpy path


def _allowed_np(q_pos: np.ndarray, k_pos: np.ndarray, causal: bool) -> np.ndarray | None:
    if not causal:
        return None
    return k_pos[None, :] <= q_pos[:, None]


def block_forward_numpy(q, k, v, q_pos, k_pos, causal, scale):
    s = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    allowed = _allowed_np(q_pos, k_pos, causal)
    if allowed is not None:
        s = np.where(allowed, s, -np.inf)
    m = s.max(axis=-1)
    live = np.isfinite(m)
    m_safe = np.where(live, m, 0.0)
    p = np.exp(s - m_safe[..., None])
    l = p.sum(axis=-1)
    l_safe = np.where(live, l, 1.0)
    out = np.matmul(p, v) / l_safe[..., None]
    lse = np.where(live, m_safe + np.log(l_safe), -np.inf)
    return out.astype(q.dtype, copy=False), lse.astype(q.dtype, copy=False)


def block_backward_numpy(q, k, v, do, lse, delta, q_pos, k_pos, causal, scale):
    s = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    live = np.isfinite(lse)
    lse_safe = np.where(live, lse, 0.0)
    p = np.exp(s - lse_safe[..., None])
    keep = live[..., None]
    allowed = _allowed_np(q_pos, k_pos, causal)
    if allowed is not None:
        keep = keep & allowed
    p = np.where(keep, p, 0.0)
    dv = np.matmul(np.swapaxes(p, -1, -2), do)
    dp = np.matmul(do, np.swapaxes(v, -1, -2))
    ds = p * (dp - delta[..., None])
    dq = np.matmul(ds, k) * scale
    dk = np.matmul(np.swapaxes(ds, -1, -2), q) * scale
    return dq, dk, dv


# ---------------------------------------------------------------- numba path


@njit(cache=True)
def block_forward_numba(q, k, v, q_pos, k_pos, causal, scale):
    G, n_q, d = q.shape
    n_k = k.shape[1]
    dv = v.shape[2]
    out = np.zeros((G, n_q, dv), dtype=q.dtype)
    lse = np.empty((G, n_q), dtype=q.dtype)
    row = np.empty(n_k, dtype=np.float64)
    for g in range(G):
        for i in range(n_q):
            m = -np.inf
            for j in range(n_k):
                if causal and k_pos[j] > q_pos[i]:
                    row[j] = -np.inf
                    continue
                acc = 0.0
                for c in range(d):
                    acc += q[g, i, c] * k[g, j, c]
                acc *= scale
                row[j] = acc
                if acc > m:
                    m = acc
            if m == -np.inf:
                lse[g, i] = -np.inf
                continue
            l = 0.0
            for j in range(n_k):
                if row[j] == -np.inf:
                    continue
                p = math.exp(row[j] - m)
                l += p
                for c in range(dv):
                    out[g, i, c] += p * v[g, j, c]
            for c in range(dv):
                out[g, i, c] /= l
            lse[g, i] = m + math.log(l)
    return out, lse


@njit(cache=True)
def block_backward_numba(q, k, v, do, lse, delta, q_pos, k_pos, causal, scale):
    G, n_q, d = q.shape
    n_k = k.shape[1]
    dvd = v.shape[2]
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for g in range(G):
        for i in range(n_q):
            if lse[g, i] == -np.inf:
                continue
            for j in range(n_k):
                if causal and k_pos[j] > q_pos[i]:
                    continue
                s = 0.0
                for c in range(d):
                    s += q[g, i, c] * k[g, j, c]
                p = math.exp(s * scale - lse[g, i])
                dp = 0.0
                for c in range(dvd):
                    dv[g, j, c] += p * do[g, i, c]
                    dp += do[g, i, c] * v[g, j, c]
                ds = p * (dp - delta[g, i]) * scale
                for c in range(d):
                    dq[g, i, c] += ds * k[g, j, c]
                    dk[g, j, c] += ds * q[g, i, c]
    return dq, dk, dv


# ---------------------------------------------------------------- dispatch


def block_forward(q, k, v, q_pos, k_pos, causal, scale, backend: str | None = None):
    """Attention of ``q`` over one key block: returns ``(out, lse)``.

    Rows with no admissible key get ``out = 0`` and ``lse = -inf``.
    """
    if (backend or BACKEND) == "numba":
        return block_forward_numba(
            np.ascontiguousarray(q), np.ascontiguousarray(k), np.ascontiguousarray(v),
            np.ascontiguousarray(q_pos, dtype=np.int64), np.ascontiguousarray(k_pos, dtype=np.int64),
            bool(causal), float(scale),
        )
    return block_forward_numpy(q, k, v, np.asarray(q_pos), np.asarray(k_pos), causal, scale)


def block_backward(q, k, v, do, lse, delta, q_pos, k_pos, causal, scale, backend: str | None = None):
    """Flash-style gradients of one (query block, key block) pair.

    ``lse`` and ``delta = rowsum(do * out)`` must be the final forward
    statistics over the full key set, so per-block results simply add up.
    """
    if (backend or BACKEND) == "numba":
        return block_backward_numba(
            np.ascontiguousarray(q), np.ascontiguousarray(k), np.ascontiguousarray(v),
            np.ascontiguousarray(do), np.ascontiguousarray(lse), np.ascontiguousarray(delta),
            np.ascontiguousarray(q_pos, dtype=np.int64), np.ascontiguousarray(k_pos, dtype=np.int64),
            bool(causal), float(scale),
        )
    return block_backward_numpy(q, k, v, do, lse, delta, np.asarray(q_pos), np.asarray(k_pos), causal, scale)
