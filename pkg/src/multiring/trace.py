"""Communication trace records and their line-delimited export."""

from __future__ import annotations

import enum
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field


class CommKind(str, enum.Enum):
    P2P = "P2P"
    ALL_GATHER = "AllGather"
    REDUCE_SCATTER = "ReduceScatter"
    INIT_SHUFFLE = "InitShuffle"


@dataclass(frozen=True)
class CommEvent:
    kind: CommKind
    src: int
    dst: int
    payload_elems: int
    payload_bytes: int
    step: int
    crosses_node: bool = False
    phase: str = "fwd"
    # softmax row statistics (lse, delta) riding along with the payload
    stats_elems: int = 0
    tensors: str = ""

    def record(self) -> dict:
        d = asdict(self)
        d["kind"] = CommKind(self.kind).value
        return d


@dataclass
class CommTrace:
    events: list[CommEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def select(self, kind=None, phase=None) -> list[CommEvent]:
        return [
            e for e in self.events
            if (kind is None or e.kind == CommKind(kind)) and (phase is None or e.phase == phase)
        ]

    def sent_elems(self, world_size: int, kind=None, phase=None) -> list[int]:
        out = [0] * world_size
        for e in self.select(kind, phase):
            out[e.src] += e.payload_elems
        return out

    def received_elems(self, world_size: int, kind=None, phase=None) -> list[int]:
        out = [0] * world_size
        for e in self.select(kind, phase):
            out[e.dst] += e.payload_elems
        return out

    def summary(self) -> dict:
        by_kind: dict[str, dict[str, int]] = defaultdict(lambda: {"events": 0, "elems": 0, "bytes": 0})
        by_link = {"intra": {"events": 0, "bytes": 0}, "inter": {"events": 0, "bytes": 0}}
        for e in self.events:
            k = by_kind[f"{e.phase}.{CommKind(e.kind).value}"]
            k["events"] += 1
            k["elems"] += e.payload_elems
            k["bytes"] += e.payload_bytes
            link = by_link["inter" if e.crosses_node else "intra"]
            link["events"] += 1
            link["bytes"] += e.payload_bytes
        return {"record": "summary", "events": len(self.events), "by_kind": dict(sorted(by_kind.items())), "by_link": by_link}

    def to_jsonl(self) -> str:
        lines = [json.dumps(e.record(), sort_keys=True) for e in self.events]
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "CommTrace":
        events = []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("record") == "summary":
                continue
            rec["kind"] = CommKind(rec["kind"])
            events.append(CommEvent(**rec))
        return cls(events)
