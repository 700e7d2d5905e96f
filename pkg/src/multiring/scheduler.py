"""Grid search over attention parallel size and placement."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field


from .cluster import ClusterSpec, node_table
from .executor import AttentionInputs, run_forward
from .perf_model import CostReport, ModelSpec, estimate_step_time
from .tensor import MaskKind
from .topology import ConfigError, ParallelConfig, Placement

PLACEMENT_ORDER = (Placement.P2P_INTRA, Placement.COLLECT_INTRA)


@dataclass(frozen=True)
class Candidate:
    C: int
    placement: Placement
    feasible: bool
    reason: str = ""

    def config(self, P: int) -> ParallelConfig:
        return ParallelConfig(P, self.C, self.placement)


@dataclass
class SearchSpace:
    world_size: int
    candidates: list[Candidate]
    skipped_c: dict[int, str] = field(default_factory=dict)

    @property
    def feasible(self) -> list[Candidate]:
        return [c for c in self.candidates if c.feasible]

    @property
    def c_values(self) -> list[int]:
        return sorted({c.C for c in self.candidates})


def enumerate_configs(P: int, cluster: ClusterSpec | None = None) -> SearchSpace:
    """All ``(C, placement)`` pairs with ``C <= sqrt(P)`` and ``C^2 | P``."""
    if P < 1:
        raise ConfigError("P must be >= 1")
    skipped = {}
    cands = []
    for C in range(1, math.isqrt(P) + 1):
        if P % (C * C):
            skipped[C] = f"C^2={C * C} does not divide P={P}"
            continue
        for pl in PLACEMENT_ORDER:
            feasible, reason = True, ""
            if cluster is not None:
                try:
                    node_table(ParallelConfig(P, C, pl), cluster)
                except ConfigError as exc:
                    feasible, reason = False, str(exc)
            cands.append(Candidate(C, pl, feasible, reason))
    return SearchSpace(P, cands, skipped)


@dataclass(frozen=True)
class RankedRow:
    candidate: Candidate
    throughput: float
    report: CostReport | None = None
    measured_time: float | None = None

    def record(self) -> dict:
        rec = {"C": self.candidate.C, "placement": self.candidate.placement.value, "throughput": self.throughput}
        if self.report is not None:
            r = self.report
            rec.update(p2p_volume=r.p2p_volume, collective_volume=r.collective_volume, peak_memory=r.peak_memory,
                       est_step_time=r.est_step_time, ring_crosses_node=r.ring_crosses_node)
        if self.measured_time is not None:
            rec["measured_time"] = self.measured_time
        return rec


def _sort_key(row: RankedRow):
    # 12 significant digits: equal-by-construction throughputs tie regardless of rounding order
    return (-float(f"{row.throughput:.12g}"), row.candidate.C, PLACEMENT_ORDER.index(row.candidate.placement))


def measure_config(config: ParallelConfig, cluster: ClusterSpec, N: int, H: int, heads: int, mask=MaskKind.FULL,
                   *, warmup: int = 1, repeats: int = 3, seed: int = 0) -> float:
    """Desk-scale profile: median simulator wall time per device plus the
    alpha-beta price of the busiest device's traced messages."""
    inputs = AttentionInputs.random(1, N, H, heads, seed)
    walls = []
    res = None
    for i in range(warmup + repeats):
        t0 = time.perf_counter()
        res = run_forward(config, cluster, inputs, mask)
        if i >= warmup:
            walls.append(time.perf_counter() - t0)
    comm = [0.0] * config.world_size
    for e in res.trace:
        bw, lat = (cluster.inter_bw, cluster.inter_lat) if e.crosses_node else (cluster.intra_bw, cluster.intra_lat)
        comm[e.src] += e.payload_bytes / bw + lat
    return statistics.median(walls) / config.world_size + max(comm)


def grid_search(P: int, cluster: ClusterSpec, model: ModelSpec, B: int, N: int, profiler: str = "analytic",
                mask=MaskKind.FULL, *, profile_N: int | None = None, warmup: int = 1, repeats: int = 3,
                **estimate_kw) -> tuple[ParallelConfig, list[RankedRow]]:
    """Best configuration by throughput and the full ranking.

    Ties go to the smaller ``C`` (less activation memory), then P2P-intra.
    """
    space = enumerate_configs(P, cluster)
    if not space.feasible:
        raise ConfigError(f"no feasible configuration for P={P}: " + "; ".join(c.reason for c in space.candidates))
    rows = []
    for cand in space.feasible:
        cfg = cand.config(P)
        if profiler == "analytic":
            rep = estimate_step_time(cfg, cluster, model, B, N, mask, **estimate_kw)
            rows.append(RankedRow(cand, rep.est_throughput, rep))
        elif profiler == "measured":
            n = profile_N or max(2 * P, 64)
            n = -(-n // (2 * P)) * 2 * P
            heads = min(model.heads, 2)
            t = measure_config(cfg, cluster, n, 4 * heads, heads, mask, warmup=warmup, repeats=repeats)
            rows.append(RankedRow(cand, B * n / t, None, t))
        else:
            raise ValueError(f"unknown profiler {profiler!r}")
    rows.sort(key=_sort_key)
    return rows[0].candidate.config(P), rows
