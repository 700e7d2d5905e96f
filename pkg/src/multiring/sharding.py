"""Sequence sharding across devices.

Full-mask runs split the sequence into ``P`` contiguous pieces. Causal runs
cut it into ``2P`` chunks and give device ``r`` chunks ``r`` and ``2P-1-r``,
pairing an early (cheap) chunk with a late (expensive) one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import MaskKind
from .topology import ConfigError

Chunk = tuple[int, int, int]  # (chunk_id, start, stop)


@dataclass(frozen=True)
class ShardAssignment:
    n_tokens: int
    chunks: tuple[tuple[Chunk, ...], ...]
    chunk_count: int
    tokens_per_chunk: int

    @property
    def world_size(self) -> int:
        return len(self.chunks)

    def positions(self, rank: int) -> np.ndarray:
        return np.concatenate([np.arange(a, b, dtype=np.int64) for _, a, b in self.chunks[rank]])

    def scatter(self, x: np.ndarray, axis: int = -2) -> list[np.ndarray]:
        """Per-device slices of a full-sequence array along ``axis``."""
        return [np.take(x, self.positions(r), axis=axis) for r in range(self.world_size)]

    def gather(self, shards: list[np.ndarray], axis: int = -2) -> np.ndarray:
        """Inverse of :meth:`scatter`: place every shard row at its global index."""
        shards = [np.asarray(s) for s in shards]
        shape = list(shards[0].shape)
        shape[axis] = self.n_tokens
        full = np.empty(shape, dtype=shards[0].dtype)
        ax = axis % full.ndim
        for r, s in enumerate(shards):
            idx = [slice(None)] * full.ndim
            idx[ax] = self.positions(r)
            full[tuple(idx)] = s
        return full

    def dump(self) -> str:
        lines = []
        for r, cs in enumerate(self.chunks):
            body = " ".join(f"{cid}:[{a},{b})" for cid, a, b in cs)
            lines.append(f"{r} {body}")
        return "\n".join(lines) + "\n"


def split_naive(N: int, P: int) -> ShardAssignment:
    if P < 1 or N % P:
        raise ConfigError(f"sequence length {N} is not divisible by {P} devices")
    n = N // P
    return ShardAssignment(N, tuple(((r, r * n, (r + 1) * n),) for r in range(P)), P, n)


def split_zigzag(N: int, P: int) -> ShardAssignment:
    if P < 1 or N % (2 * P):
        raise ConfigError(f"zigzag needs 2P={2 * P} to divide sequence length {N}")
    n = N // (2 * P)
    chunk = lambda c: (c, c * n, (c + 1) * n)  # noqa: E731
    return ShardAssignment(N, tuple((chunk(r), chunk(2 * P - 1 - r)) for r in range(P)), 2 * P, n)


def split_for_mask(N: int, P: int, mask: MaskKind) -> ShardAssignment:
    return split_zigzag(N, P) if MaskKind(mask) is MaskKind.CAUSAL else split_naive(N, P)


def causal_workload(assignment: ShardAssignment, N: int | None = None) -> list[int]:
    """Unmasked causal (q, k) pairs per device, i.e. sum of (q + 1) over its queries."""
    if N is not None and N != assignment.n_tokens:
        raise ValueError(f"assignment covers {assignment.n_tokens} tokens, not {N}")
    return [sum((b * (b + 1) - a * (a + 1)) // 2 for _, a, b in cs) for cs in assignment.chunks]


def block_mask(q_range, k_range, mask: MaskKind) -> np.ndarray:
    """Boolean allow-mask for one block given global ranges or index arrays."""
    qp = np.arange(*q_range) if isinstance(q_range, tuple) else np.asarray(q_range)
    kp = np.arange(*k_range) if isinstance(k_range, tuple) else np.asarray(k_range)
    if MaskKind(mask) is MaskKind.FULL:
        return np.ones((qp.size, kp.size), dtype=bool)
    return kp[None, :] <= qp[:, None]
