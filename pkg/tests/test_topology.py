import dataclasses
import math

import pytest

from multiring.topology import (
    ConfigError,
    ParallelConfig,
    build_plan,
    get_init_recv,
    get_init_send,
    get_p2p_config,
    validate_plan,
)


def valid_configs(max_p):
    for P in range(1, max_p + 1):
        for C in range(1, math.isqrt(P) + 1):
            if P % (C * C) == 0:
                yield P, C


def test_init_send_hand_trace():
    assert get_init_send(5, 2, 16, 4) == 37


def test_init_send_c1_identity():
    assert [get_init_send(r, 0, 9, 1) for r in range(9)] == list(range(9))


def test_init_send_rank_zero_fixed():
    for d_t, d_a in [(4, 2), (16, 4), (8, 2), (5, 1)]:
        assert get_init_send(0, 0, d_t, d_a) == 0


def test_init_recv_inverse_pair():
    assert get_init_recv(9, 1, 16, 4) == 22


def test_init_recv_inverts_send_p64_c4():
    for x in range(64):
        t, a = x // 4, x % 4
        s = get_init_send(t, a, 16, 4)
        assert get_init_recv(s // 4, s % 4, 16, 4) == x


def test_init_recv_c1_identity():
    assert all(get_init_recv(r, 0, 7, 1) == r for r in range(7))


def test_p2p_config_hand_traces():
    assert get_p2p_config(5, 2, 16, 4) == (26, 18)
    assert get_p2p_config(4, 2, 16, 4)[1] == 30


def test_p2p_config_c1_is_single_ring():
    P = 6
    assert [get_p2p_config(r, 0, P, 1)[0] for r in range(P)] == [(r + 1) % P for r in range(P)]


def test_range_checks():
    with pytest.raises(ValueError):
        get_init_send(16, 0, 16, 4)
    with pytest.raises(ValueError):
        get_p2p_config(0, 4, 16, 4)


def test_build_plan_fully_collective():
    plan = build_plan(ParallelConfig(4, 2))
    assert len(plan.teams) == 2 and plan.ring_length == 1
    assert all(len(g) == 1 for g in plan.team_groups)
    assert plan.ring_next == plan.ring_last == (0, 1, 2, 3)


def test_build_plan_p16_c2():
    plan = build_plan(ParallelConfig(16, 2))
    assert len(plan.teams) == 8
    assert plan.ring_length == 4
    assert all(len(g) == 4 for g in plan.team_groups)


@pytest.mark.parametrize("P,C", [(8, 3), (8, 4), (2, 2), (12, 3)])
def test_build_plan_rejects(P, C):
    with pytest.raises(ConfigError):
        build_plan(ParallelConfig(P, C))


def test_validate_clean():
    for P, C in valid_configs(64):
        assert validate_plan(build_plan(ParallelConfig(P, C))) == []


def test_validate_redirected_edge():
    plan = build_plan(ParallelConfig(16, 2))
    nxt = list(plan.ring_next)
    nxt[0] = nxt[1]
    bad = validate_plan(dataclasses.replace(plan, ring_next=tuple(nxt)))
    assert any("ring not a disjoint union of cycles" in b for b in bad)


def test_validate_duplicate_kv_in_ring():
    plan = build_plan(ParallelConfig(16, 2))
    ring = plan.rings()[0]
    kv = list(plan.kv_shard)
    kv[ring[1]] = kv[ring[0]]
    bad = validate_plan(dataclasses.replace(plan, kv_shard=tuple(kv)))
    assert any("duplicate KV shard within ring" in b for b in bad)


def test_exhaustive_ring_structure():
    for P, C in valid_configs(256):
        plan = build_plan(ParallelConfig(P, C))
        assert sorted(plan.init_send) == list(range(P))
        rings = plan.rings()
        assert len(rings) == C * C
        assert all(len(r) == P // (C * C) for r in rings)
        for r in rings:
            assert len({x % C for x in r}) == 1
            assert len({plan.group_of(x) for x in r}) == 1


def test_kv_shard_tour_visits_each_team_once():
    for P, C in valid_configs(64):
        plan = build_plan(ParallelConfig(P, C))
        g = plan.ring_length
        for src in range(P):
            at = plan.init_send[src] if C > 1 else src
            teams = []
            for _ in range(g):
                teams.append(plan.team_of(at))
                at = plan.ring_next[at]
            assert at == (plan.init_send[src] if C > 1 else src)
            group = plan.group_of(teams[0] * C)
            assert sorted(teams) == list(plan.team_groups[group])


def test_c1_single_ring_identity_init():
    for P in (1, 2, 5, 16):
        plan = build_plan(ParallelConfig(P, 1))
        assert plan.init_send == tuple(range(P))
        assert len(plan.rings()) == 1 and len(plan.rings()[0]) == P


GOLDEN_P4_C2 = """\
rank team group init_send init_recv ring_next ring_last
0 0 0 0 0 0 0
1 0 0 2 2 1 1
2 1 1 1 1 2 2
3 1 1 3 3 3 3
"""


def test_dump_golden():
    assert build_plan(ParallelConfig(4, 2)).dump() == GOLDEN_P4_C2
