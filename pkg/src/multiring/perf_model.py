"""Closed-form communication, memory and step-time model.

Volumes are exact element counts (``int`` when integral, otherwise
``Fraction``); times divide a byte count by a bandwidth and add one latency
per message. Symbols: ``B`` batch, ``N`` sequence length, ``H`` hidden size,
``P`` devices, ``C`` attention parallel size, ``W`` bandwidth, ``L`` latency.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from fractions import Fraction

from .cluster import ClusterSpec, node_table
from .tensor import MaskKind
from .topology import ConfigError, ParallelConfig, Placement, build_plan

GIB = 1 << 30


class Variant(str, enum.Enum):
    RING = "ring"
    MULTIRING = "multiring"


def _exact(x: Fraction) -> int | Fraction:
    return x.numerator if x.denominator == 1 else x


def ring_p2p_volume(B: int, N: int, H: int) -> int:
    """Elements each device sends around a single ring of ``P`` devices."""
    return 2 * B * N * H


def ring_p2p_time(B, N, H, P, W, L, dtype_bytes: int = 1) -> float:
    """``P`` hops of ``2BNH/P`` elements each: ``2BNH/W + P*L``."""
    return ring_p2p_volume(B, N, H) * dtype_bytes / W + P * L


def multiring_collective_volume(B: int, N: int, H: int, P: int, C: int) -> int | Fraction:
    """Per-device all-gather (Q, K, V) plus reduce-scatter (O): ``4BNH(C-1)/P``."""
    if C < 1:
        raise ValueError("C must be >= 1")
    return _exact(Fraction(4 * B * N * H * (C - 1), P))


def multiring_collective_time(B, N, H, P, C, W, dtype_bytes: int = 1) -> float:
    return float(multiring_collective_volume(B, N, H, P, C)) * dtype_bytes / W


def multiring_p2p_volume(B: int, N: int, H: int, C: int) -> int | Fraction:
    """``P/C^2`` hops of ``2CBNH/P`` elements: ``2BNH/C``."""
    return _exact(Fraction(2 * B * N * H, C))


def multiring_p2p_time(B, N, H, P, C, W, L, dtype_bytes: int = 1) -> float:
    if P % (C * C):
        raise ConfigError(f"C^2={C * C} does not divide P={P}")
    return float(multiring_p2p_volume(B, N, H, C)) * dtype_bytes / W + (P // (C * C)) * L


def init_shuffle_volume(B: int, N: int, H: int, P: int, C: int) -> int | Fraction:
    """One team K/V block per device, or nothing for a single ring."""
    return 0 if C == 1 else _exact(Fraction(2 * C * B * N * H, P))


def p2p_savings(C: int) -> Fraction:
    """Fraction of single-ring P2P volume removed by ``C`` teams."""
    return 1 - Fraction(1, C)


def activation_size(B: int, N: int, H: int, P: int) -> int | Fraction:
    """Elements of one activation of a device's sub-sequence, ``BNH/P``."""
    return _exact(Fraction(B * N * H, P))


@dataclass(frozen=True)
class ModelSpec:
    layers: int
    hidden: int
    heads: int = 1
    dtype_bytes: int = 2
    param_memory: int = 0  # model + optimizer bytes, identical for both variants

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"heads={self.heads} must divide hidden={self.hidden}")


def activation_slots(layers: int, C: int, variant: Variant) -> int:
    """Activations held at peak: ``Y+1`` checkpoints plus Q, K, V (``C``-fold for teams)."""
    if Variant(variant) is Variant.RING:
        return layers + 4
    return layers + 3 * C + 1


def peak_memory(model: ModelSpec, A, C: int, variant: Variant = Variant.MULTIRING):
    """Peak bytes: ``M + (Y+4)A`` for a single ring, ``M + (Y+3C+1)A`` with teams."""
    return model.param_memory + activation_slots(model.layers, C, variant) * A * model.dtype_bytes


def memory_overhead_ratio(layers: int, C: int) -> Fraction:
    """Extra activation memory of teams relative to a single ring, ``(3C-3)/(Y+4)``."""
    ring = activation_slots(layers, 1, Variant.RING)
    return Fraction(activation_slots(layers, C, Variant.MULTIRING) - ring, ring)


def figure1_table(seq_lens, B: int = 1, H: int = 4096, dtype_bytes: int = 2) -> list[dict]:
    """P2P volume per device versus sequence length for C = 1, 2, 4."""
    rows = []
    for N in seq_lens:
        ring = ring_p2p_volume(B, N, H)
        c2, c4 = multiring_p2p_volume(B, N, H, 2), multiring_p2p_volume(B, N, H, 4)
        rows.append({
            "N": N,
            "ring_bytes": ring * dtype_bytes,
            "c2_bytes": int(c2 * dtype_bytes),
            "c4_bytes": int(c4 * dtype_bytes),
            "c2_savings_pct": float(1 - Fraction(c2) / ring) * 100,
            "c4_savings_pct": float(1 - Fraction(c4) / ring) * 100,
        })
    return rows


@dataclass(frozen=True)
class CostReport:
    C: int
    placement: str
    p2p_volume: int  # bytes per device
    collective_volume: int
    init_shuffle_volume: int
    latency_term: float  # seconds of ring latency
    peak_memory: int
    est_step_time: float
    est_throughput: float  # tokens / second
    ring_crosses_node: bool
    collective_crosses_node: bool

    def record(self) -> dict:
        return asdict(self)


def link_classes(config: ParallelConfig, cluster: ClusterSpec) -> dict[str, bool]:
    """Whether ring hops, team collectives and the initial shuffle leave a node."""
    nodes = node_table(config, cluster)
    plan = build_plan(config)
    P = config.world_size
    return {
        "ring": any(nodes[r] != nodes[plan.ring_next[r]] for r in range(P)),
        "collective": any(len({nodes[r] for r in team}) > 1 for team in plan.teams),
        "shuffle": any(nodes[r] != nodes[plan.init_send[r]] for r in range(P)),
    }


def _link(cluster: ClusterSpec, inter: bool) -> tuple[float, float]:
    return (cluster.inter_bw, cluster.inter_lat) if inter else (cluster.intra_bw, cluster.intra_lat)


def estimate_step_time(config: ParallelConfig, cluster: ClusterSpec, model: ModelSpec, B: int, N: int,
                       mask=MaskKind.FULL, *, overlap_fraction: float = 2 / 3,
                       include_init_shuffle: bool = False) -> CostReport:
    """Alpha-beta estimate of the attention blocks of one forward pass.

    Each ring iteration costs ``max(compute, comm)`` (double-buffered
    overlap). Collectives overlap the Q/K/V projections by at most
    ``overlap_fraction`` of their time. The time covers all ``Y`` layers.
    """
    config.validate()
    P, C, g = config.world_size, config.attn_parallel_size, config.ring_length
    if N % P:
        raise ConfigError(f"N={N} is not divisible by P={P}")
    H, nbytes = model.hidden, model.dtype_bytes
    links = link_classes(config, cluster)
    W_ring, L_ring = _link(cluster, links["ring"])
    W_coll, _ = _link(cluster, links["collective"])
    flops = cluster.device_tflops * 1e12
    mask_factor = 0.5 if MaskKind(mask) is MaskKind.CAUSAL else 1.0

    rows = C * N // P
    compute_iter = 4 * B * rows * rows * H * mask_factor / flops
    comm_iter = 2 * B * rows * H * nbytes / W_ring + L_ring
    ring_time = g * max(compute_iter, comm_iter)
    coll_time = multiring_collective_time(B, N, H, P, C, W_coll, nbytes)
    proj_time = 6 * B * (N // P) * H * H / flops
    layer = proj_time + ring_time + coll_time - min(overlap_fraction * coll_time, proj_time)
    shuffle = init_shuffle_volume(B, N, H, P, C)
    if include_init_shuffle and shuffle:
        W_sh, L_sh = _link(cluster, links["shuffle"])
        layer += float(shuffle) * nbytes / W_sh + L_sh
    step = model.layers * layer
    A = activation_size(B, N, H, P)
    variant = Variant.RING if C == 1 else Variant.MULTIRING
    return CostReport(
        C=C,
        placement=Placement(config.placement).value,
        p2p_volume=int(multiring_p2p_volume(B, N, H, C) * nbytes),
        collective_volume=int(multiring_collective_volume(B, N, H, P, C) * nbytes),
        init_shuffle_volume=int(shuffle * nbytes),
        latency_term=g * L_ring,
        peak_memory=int(peak_memory(model, A, C, variant)),
        est_step_time=step,
        est_throughput=B * N / step if step > 0 else float("inf"),
        ring_crosses_node=links["ring"],
        collective_crosses_node=links["collective"],
    )
