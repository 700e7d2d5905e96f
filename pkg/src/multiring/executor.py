"""Deterministic message-passing execution of multi-ring attention.

Each simulated device runs as a generator that yields :class:`Send` and
:class:`Recv` operations. :func:`run_workers` steps the generators in rank
order; sends are buffered, receives block until the message with the exact
``(src, dst, kind, step)`` tag is posted. A sweep in which no worker makes
progress is a deadlock, and any message left undelivered at the end is a
protocol error. No real concurrency is involved, so every run is bit-for-bit
reproducible.

Forward, per device (``C`` = attention parallel size, ``g = P / C**2``):

1. ring all-gather of Q/K/V inside the team,
2. initial K/V shuffle to ``init_send`` (skipped when ``C == 1``),
3. ``g`` ring iterations: forward the current K/V block to ``ring_next``,
   fold it into the running softmax state, receive the next one,
4. ring reduce-scatter that merges the team's partial states by lse.

Backward keeps K/V (and their gradients) fixed and circulates the query
bundle ``(q, d_out, lse, delta, dq)`` instead; one extra hop returns each dq
to the device it came from before a team reduce-scatter sums the pieces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Generator

import numpy as np

from .cluster import ClusterSpec, node_table
from .sharding import ShardAssignment, split_for_mask
from .tensor import AttnState, ContractError, MaskKind, backward_iteration, forward_iteration, merge_states
from .topology import ParallelConfig, TopologyPlan, build_plan
from .trace import CommEvent, CommKind, CommTrace


class ProtocolError(RuntimeError):
    """Deadlock, duplicate tag or unconsumed message in a simulated run."""


@dataclass
class Message:
    payload: dict[str, np.ndarray]
    stats: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Send:
    dst: int
    kind: CommKind
    step: int
    msg: Message


@dataclass(frozen=True)
class Recv:
    src: int
    kind: CommKind
    step: int


Worker = Generator[object, object, object]


class Network:
    """Tagged mailbox plus the trace of everything posted to it."""

    def __init__(self, world_size: int, phase: str, dtype_bytes: int, nodes: tuple[int, ...] | None = None):
        self.world_size = world_size
        self.phase = phase
        self.dtype_bytes = dtype_bytes
        self.nodes = nodes or (0,) * world_size
        self.mailbox: dict[tuple, Message] = {}
        self.trace = CommTrace()

    def post(self, src: int, op: Send) -> None:
        key = (src, op.dst, CommKind(op.kind), op.step)
        if key in self.mailbox:
            raise ProtocolError(f"duplicate message tag {key}")
        # copy on send: the wire must not alias sender buffers
        msg = Message(
            {k: np.array(a) for k, a in op.msg.payload.items()},
            {k: np.array(a) for k, a in op.msg.stats.items()},
            dict(op.msg.meta),
        )
        elems = int(sum(a.size for a in msg.payload.values()))
        self.trace.events.append(CommEvent(
            kind=CommKind(op.kind), src=src, dst=op.dst, payload_elems=elems,
            payload_bytes=elems * self.dtype_bytes, step=op.step,
            crosses_node=self.nodes[src] != self.nodes[op.dst], phase=self.phase,
            stats_elems=int(sum(a.size for a in msg.stats.values())),
            tensors=",".join(msg.payload),
        ))
        self.mailbox[key] = msg

    def take(self, dst: int, op: Recv) -> Message | None:
        return self.mailbox.pop((op.src, dst, CommKind(op.kind), op.step), None)


def run_workers(workers: dict[int, Worker], network: Network) -> dict[int, object]:
    """Drive worker generators to completion; returns each worker's result."""
    results: dict[int, object] = {}
    blocked: dict[int, Recv] = {}
    inbox: dict[int, object] = {r: None for r in workers}
    active = sorted(workers)
    while active:
        progressed = False
        for r in list(active):
            gen = workers[r]
            while True:
                if r in blocked:
                    msg = network.take(r, blocked[r])
                    if msg is None:
                        break
                    del blocked[r]
                    inbox[r] = msg
                try:
                    op = gen.send(inbox[r])
                except StopIteration as stop:
                    results[r] = stop.value
                    active.remove(r)
                    progressed = True
                    break
                progressed = True
                inbox[r] = None
                if isinstance(op, Send):
                    if not 0 <= op.dst < network.world_size:
                        raise ProtocolError(f"rank {r} sent to nonexistent rank {op.dst}")
                    network.post(r, op)
                elif isinstance(op, Recv):
                    blocked[r] = op
                else:
                    raise ProtocolError(f"rank {r} yielded {op!r}")
        if not progressed:
            waits = ", ".join(f"{r}<-{op.src}:{CommKind(op.kind).value}@{op.step}" for r, op in sorted(blocked.items()))
            raise ProtocolError(f"deadlock: {waits}")
    if network.mailbox:
        raise ProtocolError(f"unconsumed messages at end of run: {sorted(network.mailbox)[:8]}")
    return results


# ------------------------------------------------------------------ layout


def to_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """``(B, n, H)`` -> ``(B * heads, n, H / heads)``."""
    B, n, H = x.shape
    if H % heads:
        raise ContractError(f"heads={heads} does not divide hidden size {H}")
    return x.reshape(B, n, heads, H // heads).transpose(0, 2, 1, 3).reshape(B * heads, n, H // heads)


def from_heads(x: np.ndarray, batch: int) -> np.ndarray:
    """Inverse of :func:`to_heads`."""
    G, n, d = x.shape
    heads = G // batch
    return x.reshape(batch, heads, n, d).transpose(0, 2, 1, 3).reshape(batch, n, heads * d)


@dataclass(frozen=True)
class Projection:
    """Linear Q/K/V projections applied to the local input shard."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    @classmethod
    def random(cls, H: int, seed: int = 0, dtype=np.float64) -> "Projection":
        rng = np.random.default_rng(seed)
        return cls(*(rng.standard_normal((H, H)).astype(dtype) / np.sqrt(H) for _ in range(3)))

    def apply(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return x @ self.wq, x @ self.wk, x @ self.wv


@dataclass(frozen=True)
class AttentionInputs:
    """Full-sequence activations in ``(B, N, H)`` layout.

    With a projection, ``x`` is the layer input and q/k/v are derived from it.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    heads: int = 1
    x: np.ndarray | None = None
    projection: Projection | None = None

    @classmethod
    def random(cls, B: int, N: int, H: int, heads: int = 1, seed: int = 0, dtype=np.float64) -> "AttentionInputs":
        rng = np.random.default_rng(seed)
        q, k, v = (rng.standard_normal((B, N, H)).astype(dtype) for _ in range(3))
        return cls(q, k, v, heads)

    @classmethod
    def projected(cls, x: np.ndarray, projection: Projection, heads: int = 1) -> "AttentionInputs":
        q, k, v = projection.apply(x)
        return cls(q, k, v, heads, x, projection)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.q.shape

    @property
    def head_dim(self) -> int:
        return self.q.shape[-1] // self.heads


# ------------------------------------------------------------------ collectives


def all_gather_schedule(C: int) -> list[tuple[int, int, int, int]]:
    """Ring all-gather as ``(step, src_member, dst_member, block)`` tuples."""
    return [(s, a, (a + 1) % C, (a - s) % C) for s in range(C - 1) for a in range(C)]


def reduce_scatter_schedule(C: int) -> list[tuple[int, int, int, int]]:
    """Ring reduce-scatter as ``(step, src_member, dst_member, chunk)``; member ``a`` ends owning chunk ``a``."""
    return [(s, a, (a + 1) % C, (a - s - 1) % C) for s in range(C - 1) for a in range(C)]


def _ring_all_gather(team: tuple[int, ...], me: int, block: Message, kind=CommKind.ALL_GATHER) -> Worker:
    C = len(team)
    blocks: list[Message | None] = [None] * C
    blocks[me] = block
    for s in range(C - 1):
        yield Send(team[(me + 1) % C], kind, s, blocks[(me - s) % C])
        blocks[(me - s - 1) % C] = yield Recv(team[(me - 1) % C], kind, s)
    return blocks


def _ring_reduce_scatter(team: tuple[int, ...], me: int, chunks: list[Message], combine: Callable[[Message, Message], Message]) -> Worker:
    C = len(team)
    acc = list(chunks)
    for s in range(C - 1):
        yield Send(team[(me + 1) % C], CommKind.REDUCE_SCATTER, s, acc[(me - s - 1) % C])
        incoming = yield Recv(team[(me - 1) % C], CommKind.REDUCE_SCATTER, s)
        idx = (me - s - 2) % C
        acc[idx] = combine(acc[idx], incoming)
    return acc[me]


def _state_msg(state: AttnState) -> Message:
    return Message({"o": state.out}, {"lse": state.lse})


def _merge_msgs(a: Message, b: Message) -> Message:
    return _state_msg(merge_states(AttnState(a.payload["o"], a.stats["lse"]), AttnState(b.payload["o"], b.stats["lse"])))


def _sum_msgs(a: Message, b: Message) -> Message:
    return Message({k: a.payload[k] + b.payload[k] for k in a.payload})


def simulate_all_gather(team, payload_elems: int, dtype_bytes: int = 1, phase: str = "fwd") -> list[CommEvent]:
    """Events of a ring all-gather where every member contributes ``payload_elems``."""
    team = tuple(team)
    return [
        CommEvent(CommKind.ALL_GATHER, team[a], team[b], payload_elems, payload_elems * dtype_bytes, s, phase=phase)
        for s, a, b, _ in all_gather_schedule(len(team))
    ]


def simulate_reduce_scatter(team, states: list[AttnState], combine: Callable[[Message, Message], Message] = _merge_msgs,
                            dtype_bytes: int = 1) -> tuple[list[AttnState], list[CommEvent]]:
    """lse-merge the members' states for one shared query block and split the rows.

    Member ``a`` keeps row slice ``a`` of ``C`` equal slices.
    """
    team = tuple(team)
    C = len(team)
    if len(states) != C:
        raise ContractError(f"{len(states)} states for a team of {C}")
    rows = states[0].out.shape[-2]
    if rows % C:
        raise ContractError(f"{rows} rows cannot be split across {C} members")
    n = rows // C
    chunks = [
        [_state_msg(AttnState(st.out[..., c * n:(c + 1) * n, :], st.lse[..., c * n:(c + 1) * n])) for c in range(C)]
        for st in states
    ]
    net = Network(max(team) + 1, "fwd", dtype_bytes)
    workers = {team[a]: _ring_reduce_scatter(team, a, chunks[a], combine) for a in range(C)}
    res = run_workers(workers, net)
    out = [AttnState(res[team[a]].payload["o"], res[team[a]].stats["lse"]) for a in range(C)]
    return out, net.trace.events


# ------------------------------------------------------------------ runs


@dataclass
class ForwardResult:
    out: list[np.ndarray]  # per device, (B, n_local, H)
    lse: list[np.ndarray]  # per device, (B * heads, n_local)
    trace: CommTrace
    plan: TopologyPlan
    assignment: ShardAssignment

    def gathered(self) -> np.ndarray:
        return self.assignment.gather(self.out, axis=1)


@dataclass
class BackwardResult:
    dq: list[np.ndarray]
    dk: list[np.ndarray]
    dv: list[np.ndarray]
    trace: CommTrace
    plan: TopologyPlan
    assignment: ShardAssignment
    dx: list[np.ndarray] | None = None
    dw: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def gathered(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g = self.assignment.gather
        return g(self.dq, axis=1), g(self.dk, axis=1), g(self.dv, axis=1)


def _prepare(config: ParallelConfig, cluster: ClusterSpec | None, inputs: AttentionInputs, mask, assignment):
    plan = build_plan(config)
    B, N, H = inputs.shape
    if assignment is None:
        assignment = split_for_mask(N, config.world_size, mask)
    if assignment.world_size != config.world_size or assignment.n_tokens != N:
        raise ContractError("shard assignment does not match the run")
    if cluster is None:
        nodes, dtype_bytes = None, inputs.q.dtype.itemsize
    else:
        nodes, dtype_bytes = node_table(config, cluster), cluster.dtype_bytes
    return plan, assignment, nodes, dtype_bytes


def _local_qkv(inputs: AttentionInputs, pos: np.ndarray):
    if inputs.projection is not None:
        return inputs.projection.apply(inputs.x[:, pos, :])
    return inputs.q[:, pos, :], inputs.k[:, pos, :], inputs.v[:, pos, :]


def _concat(blocks: list[Message], key: str, where: str = "payload") -> np.ndarray:
    return np.concatenate([getattr(b, where)[key] for b in blocks], axis=-2 if where == "payload" else -1)


def _forward_worker(rank: int, plan: TopologyPlan, q, k, v, pos, mask: MaskKind, head_dim: int, final_send: bool) -> Worker:
    C = plan.config.attn_parallel_size
    g = plan.ring_length
    me = rank % C
    team = plan.teams[rank // C]

    blocks = yield from _ring_all_gather(team, me, Message({"q": q, "k": k, "v": v}, meta={"pos": pos}))
    q_team = _concat(blocks, "q")
    q_pos = np.concatenate([b.meta["pos"] for b in blocks])
    cur = Message({"k": _concat(blocks, "k"), "v": _concat(blocks, "v")}, meta={"pos": q_pos})

    if C > 1:
        yield Send(plan.init_send[rank], CommKind.INIT_SHUFFLE, 0, cur)
        cur = yield Recv(plan.init_recv[rank], CommKind.INIT_SHUFFLE, 0)

    state = AttnState.initial(q_team.shape[:-2], q_team.shape[-2], v.shape[-1], q.dtype)
    for i in range(g):
        sending = i < g - 1 or final_send
        if sending:
            yield Send(plan.ring_next[rank], CommKind.P2P, i, cur)
        state = forward_iteration(state, q_team, cur.payload["k"], cur.payload["v"], mask, q_pos, cur.meta["pos"], head_dim)
        if sending:
            nxt = yield Recv(plan.ring_last[rank], CommKind.P2P, i)
            if i < g - 1:
                cur = nxt

    n = q.shape[-2]
    chunks = [_state_msg(AttnState(state.out[:, c * n:(c + 1) * n], state.lse[:, c * n:(c + 1) * n])) for c in range(C)]
    mine = yield from _ring_reduce_scatter(team, me, chunks, _merge_msgs)
    return mine.payload["o"], mine.stats["lse"]


def run_forward(config: ParallelConfig, cluster: ClusterSpec | None = None, inputs: AttentionInputs | None = None,
                mask=MaskKind.FULL, *, final_send: bool = True, assignment: ShardAssignment | None = None) -> ForwardResult:
    """Execute the forward attention block on ``P`` simulated devices.

    ``final_send`` keeps the trailing ring send of the last iteration, whose
    payload is received and discarded; it is what makes the ring volume equal
    one block per iteration.
    """
    if inputs is None:
        raise ContractError("inputs are required")
    mask = MaskKind(mask)
    plan, assignment, nodes, dtype_bytes = _prepare(config, cluster, inputs, mask, assignment)
    B = inputs.shape[0]
    net = Network(config.world_size, "fwd", dtype_bytes, nodes)
    workers = {}
    for r in range(config.world_size):
        pos = assignment.positions(r)
        q, k, v = (to_heads(a, inputs.heads) for a in _local_qkv(inputs, pos))
        workers[r] = _forward_worker(r, plan, q, k, v, pos, mask, inputs.head_dim, final_send)
    res = run_workers(workers, net)
    outs = [from_heads(res[r][0], B) for r in range(config.world_size)]
    lses = [res[r][1] for r in range(config.world_size)]
    return ForwardResult(outs, lses, net.trace, plan, assignment)


def _backward_worker(rank: int, plan: TopologyPlan, q, k, v, do, lse, out, pos, mask: MaskKind, head_dim: int) -> Worker:
    C = plan.config.attn_parallel_size
    g = plan.ring_length
    me = rank % C
    team = plan.teams[rank // C]
    delta = np.sum(do * out, axis=-1)

    blocks = yield from _ring_all_gather(
        team, me, Message({"q": q, "k": k, "v": v, "do": do}, {"lse": lse, "delta": delta}, {"pos": pos})
    )
    k_team, v_team = _concat(blocks, "k"), _concat(blocks, "v")
    kv_pos = np.concatenate([b.meta["pos"] for b in blocks])
    cur = Message(
        {"q": _concat(blocks, "q"), "do": _concat(blocks, "do"), "dq": np.zeros_like(k_team)},
        {"lse": _concat(blocks, "lse", "stats"), "delta": _concat(blocks, "delta", "stats")},
        {"pos": kv_pos},
    )

    if C > 1:
        yield Send(plan.init_send[rank], CommKind.INIT_SHUFFLE, 0, cur)
        cur = yield Recv(plan.init_recv[rank], CommKind.INIT_SHUFFLE, 0)

    dk = np.zeros_like(k_team)
    dv = np.zeros_like(v_team)
    for i in range(g):
        dq_p, dk_p, dv_p = backward_iteration(
            cur.payload["q"], k_team, v_team, cur.payload["do"], cur.stats["lse"], None, mask,
            cur.meta["pos"], kv_pos, head_dim, delta=cur.stats["delta"],
        )
        cur.payload["dq"] = cur.payload["dq"] + dq_p
        dk += dk_p
        dv += dv_p
        if i < g - 1:
            yield Send(plan.ring_next[rank], CommKind.P2P, i, cur)
            cur = yield Recv(plan.ring_last[rank], CommKind.P2P, i)

    # return hop: the bundle came from init_recv of the device where its loop began
    origin = plan.init_recv[plan.ring_next[rank]]
    source = plan.ring_last[plan.init_send[rank]]
    if origin == rank:
        dq_team = cur.payload["dq"]
    else:
        yield Send(origin, CommKind.P2P, g, Message({"dq": cur.payload["dq"]}))
        dq_team = (yield Recv(source, CommKind.P2P, g)).payload["dq"]

    n = q.shape[-2]
    sl = lambda a, c: a[:, c * n:(c + 1) * n]  # noqa: E731
    chunks = [Message({"dq": sl(dq_team, c), "dk": sl(dk, c), "dv": sl(dv, c)}) for c in range(C)]
    mine = yield from _ring_reduce_scatter(team, me, chunks, _sum_msgs)
    return mine.payload["dq"], mine.payload["dk"], mine.payload["dv"]


def run_backward(config: ParallelConfig, cluster: ClusterSpec | None = None, inputs: AttentionInputs | None = None,
                 d_out: np.ndarray | None = None, mask=MaskKind.FULL, *, forward: ForwardResult | None = None,
                 assignment: ShardAssignment | None = None) -> BackwardResult:
    """Gradients of ``sum(out * d_out)`` with respect to Q, K, V (and the
    projection input and weights when one is attached).

    Uses the per-device ``out``/``lse`` of ``forward``, running it first if
    not given.
    """
    if inputs is None or d_out is None:
        raise ContractError("inputs and d_out are required")
    mask = MaskKind(mask)
    if d_out.shape != inputs.shape:
        raise ContractError(f"d_out shape {d_out.shape} != activation shape {inputs.shape}")
    if forward is None:
        forward = run_forward(config, cluster, inputs, mask, assignment=assignment)
    plan, assignment, nodes, dtype_bytes = _prepare(config, cluster, inputs, mask, forward.assignment)
    B = inputs.shape[0]
    net = Network(config.world_size, "bwd", dtype_bytes, nodes)
    workers = {}
    for r in range(config.world_size):
        pos = assignment.positions(r)
        q, k, v = (to_heads(a, inputs.heads) for a in _local_qkv(inputs, pos))
        do = to_heads(d_out[:, pos, :], inputs.heads)
        out = to_heads(forward.out[r], inputs.heads)
        workers[r] = _backward_worker(r, plan, q, k, v, do, forward.lse[r], out, pos, mask, inputs.head_dim)
    res = run_workers(workers, net)
    P = config.world_size
    dq, dk, dv = ([from_heads(res[r][i], B) for r in range(P)] for i in range(3))
    result = BackwardResult(dq, dk, dv, net.trace, plan, assignment)
    if inputs.projection is not None:
        proj = inputs.projection
        xs = assignment.scatter(inputs.x, axis=1)
        result.dx = [dq[r] @ proj.wq.T + dk[r] @ proj.wk.T + dv[r] @ proj.wv.T for r in range(P)]
        # weight gradients are summed over devices (a data-parallel all-reduce, not traced)
        result.dw = tuple(
            sum(np.einsum("bnh,bnk->hk", xs[r], g[r]) for r in range(P)) for g in (dq, dk, dv)
        )
    return result
