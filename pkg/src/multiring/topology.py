"""Teams, team groups and sub-rings.

Devices are grouped into contiguous teams of ``C`` ranks
(``rank = r_t * C + r_a``). At the start of attention every device ships its
team's K/V to the device chosen by :func:`get_init_send`; blocks then
circulate along sub-rings given by :func:`get_p2p_config`. A sub-ring holds
``P / C**2`` devices that share an intra-team rank and a team group.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """A parallel configuration or placement is not realisable."""


class Placement(str, enum.Enum):
    P2P_INTRA = "p2p_intra"
    COLLECT_INTRA = "collect_intra"


@dataclass(frozen=True)
class ParallelConfig:
    world_size: int
    attn_parallel_size: int = 1
    placement: Placement = Placement.P2P_INTRA

    def violations(self) -> list[str]:
        P, C = self.world_size, self.attn_parallel_size
        if P < 1:
            return [f"world_size must be >= 1 (got {P})"]
        if C < 1:
            return [f"attn_parallel_size must be >= 1 (got {C})"]
        out = []
        if C * C > P:
            out.append(f"C={C} exceeds sqrt(P={P})")
        if P % C:
            out.append(f"C={C} does not divide P={P}")
        elif P % (C * C):
            out.append(f"C^2={C * C} does not divide P={P}, ring length P/C^2 is not whole")
        return out

    def validate(self) -> "ParallelConfig":
        bad = self.violations()
        if bad:
            raise ConfigError("; ".join(bad))
        return self

    @property
    def ring_length(self) -> int:
        return self.world_size // self.attn_parallel_size**2

    @property
    def num_teams(self) -> int:
        return self.world_size // self.attn_parallel_size


@dataclass(frozen=True)
class DeviceCoord:
    global_rank: int
    inter_team_rank: int
    intra_team_rank: int

    @classmethod
    def of(cls, rank: int, C: int) -> "DeviceCoord":
        return cls(rank, rank // C, rank % C)


def _check_ranks(r_t: int, r_a: int, d_t: int, d_a: int) -> int:
    if d_a < 1 or d_t < d_a or d_t % d_a:
        raise ValueError(f"invalid dimensions d_t={d_t}, d_a={d_a}")
    if not (0 <= r_t < d_t and 0 <= r_a < d_a):
        raise ValueError(f"ranks (r_t={r_t}, r_a={r_a}) out of range for dims ({d_t}, {d_a})")
    return d_t // d_a


def get_init_send(r_t: int, r_a: int, d_t: int, d_a: int) -> int:
    """Global rank that receives this device's team K/V before the ring loop."""
    group_size = _check_ranks(r_t, r_a, d_t, d_a)
    target_team = r_a * group_size + r_t // d_a
    return target_team * d_a + r_t % d_a


def _send_table(d_t: int, d_a: int) -> list[int]:
    return [get_init_send(t, a, d_t, d_a) for t in range(d_t) for a in range(d_a)]


def get_init_recv(r_t: int, r_a: int, d_t: int, d_a: int) -> int:
    """Global rank whose initial send lands on this device."""
    _check_ranks(r_t, r_a, d_t, d_a)
    me = r_t * d_a + r_a
    return _send_table(d_t, d_a).index(me)


def get_p2p_config(r_t: int, r_a: int, d_t: int, d_a: int) -> tuple[int, int]:
    """``(ring_next, ring_last)`` global ranks of this device's sub-ring."""
    group_size = _check_ranks(r_t, r_a, d_t, d_a)
    group = r_t // group_size
    next_team = (r_t + 1) % group_size + group_size * group
    last_team = (r_t - 1) % group_size + group_size * group  # python % is non-negative
    return r_a + next_team * d_a, r_a + last_team * d_a


@dataclass(frozen=True)
class TopologyPlan:
    config: ParallelConfig
    init_send: tuple[int, ...]
    init_recv: tuple[int, ...]
    ring_next: tuple[int, ...]
    ring_last: tuple[int, ...]
    teams: tuple[tuple[int, ...], ...]
    team_groups: tuple[tuple[int, ...], ...]
    ring_length: int
    # K/V shard (source team id) held by each device after the initial shuffle
    kv_shard: tuple[int, ...] = field(default=())

    @property
    def world_size(self) -> int:
        return self.config.world_size

    def coord(self, rank: int) -> DeviceCoord:
        return DeviceCoord.of(rank, self.config.attn_parallel_size)

    def team_of(self, rank: int) -> int:
        return rank // self.config.attn_parallel_size

    def group_of(self, rank: int) -> int:
        return self.team_of(rank) // self.ring_length

    def rings(self) -> list[list[int]]:
        """Sub-rings as rank lists, each starting at its smallest rank."""
        seen: set[int] = set()
        out = []
        for start in range(self.world_size):
            if start in seen:
                continue
            cyc, r = [], start
            while r not in seen:
                seen.add(r)
                cyc.append(r)
                r = self.ring_next[r]
            out.append(cyc)
        return out

    def dump(self) -> str:
        lines = ["rank team group init_send init_recv ring_next ring_last"]
        for r in range(self.world_size):
            lines.append(
                f"{r} {self.team_of(r)} {self.group_of(r)} {self.init_send[r]} "
                f"{self.init_recv[r]} {self.ring_next[r]} {self.ring_last[r]}"
            )
        return "\n".join(lines) + "\n"


def build_plan(config: ParallelConfig) -> TopologyPlan:
    config.validate()
    P, C = config.world_size, config.attn_parallel_size
    d_t, d_a = P // C, C
    send = _send_table(d_t, d_a)
    recv = [0] * P
    for src, dst in enumerate(send):
        recv[dst] = src
    nxt, lst = zip(*(get_p2p_config(r // C, r % C, d_t, d_a) for r in range(P)))
    g = config.ring_length
    teams = tuple(tuple(range(t * C, (t + 1) * C)) for t in range(d_t))
    groups = tuple(tuple(range(j * g, (j + 1) * g)) for j in range(d_t // g))
    kv = [0] * P
    for src, dst in enumerate(send):
        kv[dst] = src // C
    return TopologyPlan(config, tuple(send), tuple(recv), tuple(nxt), tuple(lst), teams, groups, g, tuple(kv))


def validate_plan(plan: TopologyPlan) -> list[str]:
    """Every structural invariant the executor relies on; empty when sound."""
    P, C = plan.config.world_size, plan.config.attn_parallel_size
    g = P // (C * C) if C and P % (C * C) == 0 else None
    bad: list[str] = []
    if g is None:
        return [f"invalid config: {'; '.join(plan.config.violations())}"]
    if sorted(plan.init_send) != list(range(P)):
        bad.append("init_send is not a permutation of the ranks")
    elif any(plan.init_recv[plan.init_send[r]] != r for r in range(P)):
        bad.append("init_recv is not the inverse of init_send")
    if sorted(plan.ring_next) != list(range(P)):
        bad.append("ring not a disjoint union of cycles: ring_next is not a permutation")
        return bad
    if any(plan.ring_last[plan.ring_next[r]] != r for r in range(P)):
        bad.append("ring_last is not the inverse of ring_next")
    rings = plan.rings()
    if len(rings) != C * C or any(len(c) != g for c in rings):
        bad.append(f"ring not a disjoint union of cycles: expected {C * C} cycles of length {g}, got lengths {sorted(len(c) for c in rings)}")
    for cyc in rings:
        if len({r % C for r in cyc}) != 1 or len({plan.group_of(r) for r in cyc}) != 1:
            bad.append(f"ring {cyc} mixes intra-team ranks or team groups")
        if len({plan.team_of(r) for r in cyc}) != len(cyc):
            bad.append(f"ring {cyc} visits a team more than once")
    if plan.kv_shard:
        for t in range(P // C):
            shards = [plan.kv_shard[r] for r in range(t * C, (t + 1) * C)]
            if len(set(shards)) != C:
                bad.append(f"team {t} members hold duplicate KV shards {shards}")
        for cyc in rings:
            shards = [plan.kv_shard[r] for r in cyc]
            if len(set(shards)) != len(shards):
                bad.append(f"duplicate KV shard within ring {cyc}: {shards}")
        seen = sorted(plan.kv_shard)
        if seen != sorted(s for s in range(P // C) for _ in range(C)):
            bad.append("KV shards are not each replicated exactly C times")
    return bad
