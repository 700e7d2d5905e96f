"""``multiring`` command line: verify, trace, estimate, search.

Exit status is 0 when every check passes, 1 on a tolerance or trace
mismatch, 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import perf_model as pm
from .config import RunConfig, load_config
from .executor import AttentionInputs, ProtocolError, run_backward, run_forward
from .oracle import fd_grads, reference_forward, reference_grads, rel_err
from .scheduler import grid_search
from .topology import ConfigError, ParallelConfig, Placement, build_plan, validate_plan
from .trace import CommKind

MAX_DESK_P = 64
MAX_DESK_N = 4096
FD_SAMPLES = 16

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


@dataclass
class Report:
    command: str
    records: list[dict] = field(default_factory=list)
    lines: list[str] = field(default_factory=list)
    ok: bool = True
    artifacts: dict[str, str] = field(default_factory=dict)

    def check(self, name: str, passed: bool, **extra) -> None:
        self.ok &= passed
        self.records.append({"check": name, "status": "PASS" if passed else "FAIL", **extra})


def _gib(nbytes) -> float:
    return float(nbytes) / pm.GIB


def _resolve_auto(cfg: RunConfig) -> RunConfig:
    if cfg.attn_parallel_size is not None and cfg.placement is not None:
        return cfg
    best, rows = grid_search(cfg.P, cfg.cluster(), cfg.model(), cfg.batch, cfg.seq_len, mask=cfg.mask)
    feasible = [r.candidate for r in rows]
    if cfg.attn_parallel_size is not None:
        feasible = [c for c in feasible if c.C == cfg.attn_parallel_size]
    if cfg.placement is not None:
        feasible = [c for c in feasible if c.placement is cfg.placement]
    if not feasible:
        raise ConfigError("no feasible configuration matches the fixed settings")
    return replace(cfg, attn_parallel_size=feasible[0].C, placement=feasible[0].placement)


def _desk_bounds(cfg: RunConfig) -> None:
    if cfg.P > MAX_DESK_P or cfg.seq_len > MAX_DESK_N:
        raise ConfigError(f"desk-scale runs need P <= {MAX_DESK_P} and seq_len <= {MAX_DESK_N}")


def cmd_verify(cfg: RunConfig) -> Report:
    cfg = _resolve_auto(cfg.validate(needs_seed=True))
    _desk_bounds(cfg)
    rep = Report("verify")
    par = cfg.parallel()
    cluster = cfg.cluster()
    f64 = cfg.precision == "float64"
    tol_fwd, tol_grad = (1e-10, 1e-10) if f64 else (1e-4, 1e-3)
    tol_fd = 1e-5 if f64 else 1e-3

    violations = validate_plan(build_plan(par))
    rep.check("plan invariants", not violations, observed=len(violations), detail=violations)

    inputs = AttentionInputs.random(cfg.batch, cfg.seq_len, cfg.hidden, cfg.heads, cfg.seed, cfg.dtype)
    d_out = np.random.default_rng(cfg.seed + 1).standard_normal(inputs.shape).astype(cfg.dtype)
    ref_inputs = AttentionInputs(*(a.astype(np.float64) for a in (inputs.q, inputs.k, inputs.v)), inputs.heads)
    d_out64 = d_out.astype(np.float64)

    fr = run_forward(par, cluster, inputs, cfg.mask, final_send=cfg.final_send)
    err = float(np.abs(fr.gathered() - reference_forward(ref_inputs, cfg.mask)).max())
    rep.check(f"forward max_abs_err < {tol_fwd:g}", err < tol_fwd, observed=err, tolerance=tol_fwd)

    br = run_backward(par, cluster, inputs, d_out, cfg.mask, forward=fr)
    ref_g = reference_grads(ref_inputs, d_out64, cfg.mask)
    got = br.gathered()
    for name, g, r in zip(("dq", "dk", "dv"), got, ref_g):
        e = rel_err(g, r)
        rep.check(f"{name} vs single-device analytic rel_err < {tol_grad:g}", e < tol_grad, observed=e, tolerance=tol_grad)

    rng = np.random.default_rng(cfg.seed + 2)
    size = inputs.q.size
    entries = sorted(rng.choice(size, size=min(FD_SAMPLES, size), replace=False).tolist())
    fd = fd_grads(ref_inputs, d_out64, cfg.mask, entries=entries)
    for name, g, f, r in zip(("dq", "dk", "dv"), got, fd, ref_g):
        e = float(np.abs(g.reshape(-1)[entries] - f).max() / max(np.abs(r).max(), 1e-300))
        rep.check(f"{name} vs finite differences rel_err < {tol_fd:g}", e < tol_fd, observed=e, tolerance=tol_fd)

    again = run_forward(par, cluster, inputs, cfg.mask, final_send=cfg.final_send)
    same = all(np.array_equal(a, b) for a, b in zip(fr.out, again.out)) and fr.trace.events == again.trace.events
    rep.check("determinism (bit-identical rerun)", same)

    rep.lines = [_check_line(r) for r in rep.records]
    rep.lines.insert(0, f"config: P={cfg.P} C={par.attn_parallel_size} placement={par.placement.value} "
                        f"N={cfg.seq_len} H={cfg.hidden} heads={cfg.heads} mask={cfg.mask.value} precision={cfg.precision}")
    return rep


def _check_line(rec: dict) -> str:
    obs = rec.get("observed")
    tail = f" (observed {obs:.3e})" if isinstance(obs, float) else ""
    return f"{rec['check']}: {rec['status']}{tail}"


def _trace_analytic(cfg: RunConfig) -> Report:
    rep = Report("trace")
    B, N, H, P = cfg.batch, cfg.seq_len, cfg.hidden, cfg.P
    C = cfg.attn_parallel_size or 1
    nb = cfg.dtype_bytes
    ring = pm.ring_p2p_volume(B, N, H) * nb
    coll = pm.multiring_collective_volume(B, N, H, P, C) * nb
    p2p = pm.multiring_p2p_volume(B, N, H, C) * nb
    for name, val in (("ring_p2p_volume", ring), ("multiring_collective_volume", coll),
                      ("multiring_p2p_volume", p2p), ("multiring_total_volume", coll + p2p)):
        v = int(val) if float(val).is_integer() else float(val)
        rep.records.append({"quantity": name, "bytes": v, "gib": _gib(val)})
        rep.lines.append(f"{name}: {v} B = {_gib(val):.3f} GiB")
    rep.lines.insert(0, f"analytic: B={B} N={N} H={H} P={P} C={C} dtype_bytes={nb}")
    return rep


def cmd_trace(cfg: RunConfig, analytic: bool = False) -> Report:
    if analytic:
        return _trace_analytic(cfg.validate())
    cfg = _resolve_auto(cfg.validate(needs_seed=True))
    _desk_bounds(cfg)
    rep = Report("trace")
    par = cfg.parallel()
    B, N, H, P, C = cfg.batch, cfg.seq_len, cfg.hidden, cfg.P, par.attn_parallel_size
    g = par.ring_length
    inputs = AttentionInputs.random(B, N, H, cfg.heads, cfg.seed, cfg.dtype)
    d_out = np.random.default_rng(cfg.seed + 1).standard_normal(inputs.shape).astype(cfg.dtype)
    fr = run_forward(par, cfg.cluster(), inputs, cfg.mask, final_send=cfg.final_send)
    br = run_backward(par, cfg.cluster(), inputs, d_out, cfg.mask, forward=fr)

    block = 2 * C * B * N * H // P
    if cfg.final_send:
        label, expected = "2BNH/C", pm.multiring_p2p_volume(B, N, H, C)
    else:
        label, expected = "2BNH/C - 2CBNH/P (final send off)", (g - 1) * block
    p2p = fr.trace.sent_elems(P, CommKind.P2P, "fwd")
    coll = [a + b for a, b in zip(fr.trace.sent_elems(P, CommKind.ALL_GATHER, "fwd"),
                                  fr.trace.sent_elems(P, CommKind.REDUCE_SCATTER, "fwd"))]
    exp_coll = pm.multiring_collective_volume(B, N, H, P, C)
    shuffle = fr.trace.sent_elems(P, CommKind.INIT_SHUFFLE, "fwd")
    exp_shuffle = pm.init_shuffle_volume(B, N, H, P, C)

    def exact(name, got, want):
        ok = all(x == want for x in got)
        rep.check(name, ok, expected=int(want), observed=sorted(set(got)))
        rep.lines.append(f"{name} = {label if name.startswith('p2p') else _formula(name)}: {'EXACT' if ok else 'MISMATCH'} ({int(want)})")

    exact("p2p_per_device_elems", p2p, expected)
    exact("collective_per_device_elems", coll, exp_coll)
    exact("init_shuffle_per_device_elems", shuffle, exp_shuffle)
    if C == 1:
        n_coll = len(fr.trace.select(CommKind.ALL_GATHER)) + len(fr.trace.select(CommKind.REDUCE_SCATTER))
        rep.check("collective_elems = 0", n_coll == 0, observed=n_coll)
        rep.lines.append(f"collective_elems = 0: {'EXACT' if n_coll == 0 else 'MISMATCH'}")
    moved = [e for e in br.trace.select(CommKind.P2P, "bwd") if {"dk", "dv"} & set(e.tensors.split(","))]
    rep.check("dk/dv stay put during backward loop", not moved, observed=len(moved))
    rep.lines.append(f"dk/dv stay put during backward loop: {'PASS' if not moved else 'FAIL'}")
    rep.records.append(fr.trace.summary() | {"phase": "fwd"})
    rep.records.append(br.trace.summary() | {"phase": "bwd"})
    rep.lines.insert(0, f"config: P={P} C={C} placement={par.placement.value} N={N} H={H} mask={cfg.mask.value} final_send={cfg.final_send}")
    rep.artifacts["trace.jsonl"] = fr.trace.to_jsonl() + br.trace.to_jsonl()
    return rep


def _formula(name: str) -> str:
    return {"collective_per_device_elems": "4BNH(C-1)/P", "init_shuffle_per_device_elems": "2CBNH/P (0 if C=1)"}[name]


def cmd_estimate(cfg: RunConfig) -> Report:
    cfg = cfg.validate()
    rep = Report("estimate")
    P, cluster, model = cfg.P, cfg.cluster(), cfg.model()
    cs = [cfg.attn_parallel_size] if cfg.attn_parallel_size else [c for c in range(1, math.isqrt(P) + 1) if P % (c * c) == 0]
    placements = [cfg.placement] if cfg.placement else list(Placement)
    rep.lines.append("C placement p2p_GiB coll_GiB savings_pct mem_overhead_pct step_s tokens_per_s")
    for C in cs:
        for pl in placements:
            try:
                r = pm.estimate_step_time(ParallelConfig(P, C, pl), cluster, model, cfg.batch, cfg.seq_len, cfg.mask)
            except ConfigError as exc:
                rep.records.append({"C": C, "placement": pl.value, "feasible": False, "reason": str(exc)})
                rep.lines.append(f"{C} {pl.value} infeasible: {exc}")
                continue
            savings = float(pm.p2p_savings(C)) * 100
            overhead = float(pm.memory_overhead_ratio(cfg.layers, C)) * 100
            rep.records.append(r.record() | {"feasible": True, "savings_pct": savings, "memory_overhead_pct": overhead})
            rep.lines.append(f"{C} {pl.value} {_gib(r.p2p_volume):.3f} {_gib(r.collective_volume):.3f} "
                             f"{savings:.1f} {overhead:.1f} {r.est_step_time:.6g} {r.est_throughput:.6g}")
    rep.lines.append("N ring_bytes c2_bytes c4_bytes c2_savings_pct c4_savings_pct")
    sweep = sorted({max(cfg.seq_len // d, 1) for d in (8, 4, 2, 1)})
    for row in pm.figure1_table(sweep, cfg.batch, cfg.hidden, cfg.dtype_bytes):
        rep.records.append({"table": "figure1"} | row)
        rep.lines.append(f"{row['N']} {row['ring_bytes']} {row['c2_bytes']} {row['c4_bytes']} "
                         f"{row['c2_savings_pct']:.1f} {row['c4_savings_pct']:.1f}")
    return rep


def cmd_search(cfg: RunConfig, profiler: str = "analytic") -> Report:
    cfg = cfg.validate()
    if profiler == "measured":
        _desk_bounds(cfg)
    rep = Report("search")
    best, rows = grid_search(cfg.P, cfg.cluster(), cfg.model(), cfg.batch, cfg.seq_len, profiler, cfg.mask,
                             profile_N=cfg.profile_seq_len)
    rep.lines.append("rank C placement throughput ring_crosses_node")
    for i, row in enumerate(rows):
        rec = row.record() | {"rank": i}
        rep.records.append(rec)
        rep.lines.append(f"{i} {row.candidate.C} {row.candidate.placement.value} {row.throughput:.6g} {rec.get('ring_crosses_node', '')}")
    rep.records.append({"chosen": True, "C": best.attn_parallel_size, "placement": best.placement.value})
    rep.lines.append(f"chosen: C={best.attn_parallel_size} placement={best.placement.value}")
    return rep


# ------------------------------------------------------------------ output


def render(rep: Report, fmt: str) -> str:
    if fmt == "text":
        return "\n".join(rep.lines) + "\n"
    if fmt == "json":
        return "".join(json.dumps(r, sort_keys=True, default=str) + "\n" for r in rep.records)
    if fmt == "csv":
        keys = sorted({k for r in rep.records for k in r})
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rep.records:
            w.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in r.items()})
        return buf.getvalue()
    raise ValueError(f"unknown format {fmt!r}")


def write_report(rep: Report, out_dir: str | Path, fmt: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    path = out / f"{rep.command}.{ {'text': 'txt'}.get(fmt, fmt) }"
    path.write_text(f"# generated {stamp}\n" + render(rep, fmt))
    for name, body in rep.artifacts.items():
        (out / name).write_text(body)
    return path


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="multiring", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--out", help="directory for report files")
    common.add_argument("--format", choices=("json", "csv", "text"), default="text")
    common.add_argument("--seed", type=int)
    common.add_argument("--profiler", choices=("analytic", "measured"), default="analytic")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("verify", parents=[common], help="compare distributed runs with single-device oracles")
    tr = sub.add_parser("trace", parents=[common], help="export the message trace and check it against the closed forms")
    tr.add_argument("--analytic", action="store_true", help="print closed-form volumes without executing")
    sub.add_parser("estimate", parents=[common], help="cost and memory report per configuration")
    sub.add_parser("search", parents=[common], help="grid search for the highest-throughput configuration")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides={"seed": args.seed})
        if args.command == "verify":
            rep = cmd_verify(cfg)
        elif args.command == "trace":
            rep = cmd_trace(cfg, analytic=args.analytic)
        elif args.command == "estimate":
            rep = cmd_estimate(cfg)
        else:
            rep = cmd_search(cfg, args.profiler)
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    sys.stdout.write(render(rep, args.format))
    if args.out:
        write_report(rep, args.out, args.format)
    if not rep.ok:
        failed = [r["check"] for r in rep.records if r.get("status") == "FAIL"]
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
