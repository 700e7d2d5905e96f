"""Single-device references the distributed runs are checked against."""

from __future__ import annotations

import numpy as np

from .executor import AttentionInputs, from_heads, to_heads
from .tensor import AttnState, MaskKind, backward_iteration, finite_diff_grad, forward_iteration, reference_attention


def reference_forward(inputs: AttentionInputs, mask=MaskKind.FULL) -> np.ndarray:
    h = inputs.heads
    q, k, v = (to_heads(a, h) for a in (inputs.q, inputs.k, inputs.v))
    return from_heads(reference_attention(q, k, v, mask), inputs.shape[0])


def reference_grads(inputs: AttentionInputs, d_out: np.ndarray, mask=MaskKind.FULL):
    """Analytic ``(dq, dk, dv)`` with the whole sequence as a single key block."""
    h, B = inputs.heads, inputs.shape[0]
    q, k, v, do = (to_heads(a, h) for a in (inputs.q, inputs.k, inputs.v, d_out))
    st = forward_iteration(AttnState.initial(q.shape[:-2], q.shape[-2], v.shape[-1], q.dtype), q, k, v, mask)
    return tuple(from_heads(g, B) for g in backward_iteration(q, k, v, do, st.lse, st.out, mask))


def attention_loss(q, k, v, d_out, heads: int, mask=MaskKind.FULL) -> float:
    """``sum(attention(q, k, v) * d_out)``, whose gradient is the backward pass with upstream ``d_out``."""
    inp = AttentionInputs(q, k, v, heads)
    return float(np.sum(reference_forward(inp, mask) * d_out))


def fd_grads(inputs: AttentionInputs, d_out: np.ndarray, mask=MaskKind.FULL, step: float = 1e-6, entries=None):
    """Central finite differences of :func:`attention_loss` w.r.t. q, k and v.

    With ``entries`` (an iterable of flat indices) only those entries are
    differenced and returned as 1-D arrays; otherwise full gradients.
    """
    base = [np.array(a, dtype=np.float64) for a in (inputs.q, inputs.k, inputs.v)]
    d_out = np.asarray(d_out, dtype=np.float64)
    out = []
    for which in range(3):
        x = base[which]
        if entries is None:
            def f(y, which=which):
                args = list(base)
                args[which] = y
                return attention_loss(*args, d_out, inputs.heads, mask)

            out.append(finite_diff_grad(f, x, step))
            continue
        flat = x.reshape(-1)
        idx = list(entries)
        g = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            hi = attention_loss(*base, d_out, inputs.heads, mask)
            flat[i] = orig - step
            lo = attention_loss(*base, d_out, inputs.heads, mask)
            flat[i] = orig
            g[j] = (hi - lo) / (2 * step)
        out.append(g)
    return tuple(out)


def rel_err(a, b) -> float:
    """Max absolute difference scaled by the reference's largest magnitude."""
    a, b = np.asarray(a), np.asarray(b)
    scale = np.abs(b).max()
    return float(np.abs(a - b).max() / (scale if scale > 0 else 1.0))
