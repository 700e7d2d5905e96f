"""Cluster description and rank-to-node placement."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from .topology import ConfigError, ParallelConfig, Placement


@dataclass(frozen=True)
class ClusterSpec:
    """Homogeneous cluster; bandwidths in bytes/s, latencies in seconds."""

    num_nodes: int = 1
    devices_per_node: int = 8
    intra_bw: float = 300e9
    inter_bw: float = 25e9
    intra_lat: float = 5e-6
    inter_lat: float = 20e-6
    device_tflops: float = 100.0
    dtype_bytes: int = 2

    def __post_init__(self):
        if self.num_nodes < 1 or self.devices_per_node < 1:
            raise ConfigError("num_nodes and devices_per_node must be positive")
        for name in ("intra_bw", "inter_bw", "device_tflops"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.intra_lat < 0 or self.inter_lat < 0:
            raise ConfigError("latencies must be non-negative")
        if self.dtype_bytes < 1:
            raise ConfigError("dtype_bytes must be positive")

    @property
    def world_size(self) -> int:
        return self.num_nodes * self.devices_per_node

    @classmethod
    def single_node(cls, P: int, **kw) -> "ClusterSpec":
        return cls(num_nodes=1, devices_per_node=P, **kw)


def _packing_check(unit: int, per_node: int, what: str) -> None:
    if unit > per_node and unit % per_node:
        raise ConfigError(f"{what} of {unit} devices cannot be packed onto nodes of {per_node}")
    if unit < per_node and per_node % unit:
        raise ConfigError(f"nodes of {per_node} devices cannot hold whole {what}s of {unit}")


@lru_cache(maxsize=256)
def node_table(config: ParallelConfig, cluster: ClusterSpec) -> tuple[int, ...]:
    """Node id of every logical rank under ``config.placement``."""
    config.validate()
    P, C = config.world_size, config.attn_parallel_size
    if cluster.world_size != P:
        raise ConfigError(f"cluster has {cluster.world_size} devices but world_size is {P}")
    dpn = cluster.devices_per_node
    if cluster.num_nodes == 1:
        return (0,) * P
    if Placement(config.placement) is Placement.COLLECT_INTRA:
        _packing_check(C, dpn, "team")
        return tuple(r // dpn for r in range(P))
    g = config.ring_length
    _packing_check(g, dpn, "ring")
    # ring (group j, intra rank a) = ranks ((j*g + i)*C + a), packed ring by ring
    order = [(j * g + i) * C + a for j in range(P // (C * g)) for a in range(C) for i in range(g)]
    nodes = [0] * P
    for slot, r in enumerate(order):
        nodes[r] = slot // dpn
    return tuple(nodes)


def map_rank_to_node(rank: int, config: ParallelConfig, cluster: ClusterSpec) -> int:
    return node_table(config, cluster)[rank]
