"""Run configuration files.

A config is a flat list of ``key = value`` lines (``#`` starts a comment);
units are part of the key name. Any key can be overridden from the
environment as ``MULTIRING_CFG_<KEY>``, e.g. ``MULTIRING_CFG_SEQ_LEN=256``.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields

import numpy as np

from .cluster import ClusterSpec
from .perf_model import ModelSpec
from .tensor import MaskKind
from .topology import ConfigError, ParallelConfig, Placement

ENV_PREFIX = "MULTIRING_CFG_"

GB = 1e9
US = 1e-6


@dataclass(frozen=True)
class RunConfig:
    # cluster
    num_nodes: int = 1
    devices_per_node: int = 4
    intra_bw_gbytes_per_s: float = 300.0
    inter_bw_gbytes_per_s: float = 25.0
    intra_lat_us: float = 5.0
    inter_lat_us: float = 20.0
    device_tflops: float = 100.0
    dtype_bytes: int = 2
    # model
    layers: int = 1
    hidden: int = 8
    heads: int = 2
    param_memory_gbytes: float = 0.0
    # run
    batch: int = 1
    seq_len: int = 64
    world_size: int | None = None
    attn_parallel_size: int | None = None  # None = auto
    placement: Placement | None = None  # None = auto
    mask: MaskKind = MaskKind.FULL
    seed: int | None = None
    precision: str = "float64"
    final_send: bool = True
    profile_seq_len: int | None = None

    @property
    def P(self) -> int:
        return self.world_size if self.world_size is not None else self.num_nodes * self.devices_per_node

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def cluster(self) -> ClusterSpec:
        return ClusterSpec(
            num_nodes=self.num_nodes, devices_per_node=self.devices_per_node,
            intra_bw=self.intra_bw_gbytes_per_s * GB, inter_bw=self.inter_bw_gbytes_per_s * GB,
            intra_lat=self.intra_lat_us * US, inter_lat=self.inter_lat_us * US,
            device_tflops=self.device_tflops, dtype_bytes=self.dtype_bytes,
        )

    def model(self) -> ModelSpec:
        return ModelSpec(self.layers, self.hidden, self.heads, self.dtype_bytes, int(self.param_memory_gbytes * GB))

    def parallel(self) -> ParallelConfig:
        if self.attn_parallel_size is None or self.placement is None:
            raise ConfigError("attn_parallel_size/placement are 'auto'; resolve them with a search first")
        return ParallelConfig(self.P, self.attn_parallel_size, self.placement)

    def validate(self, *, needs_seed: bool = False) -> "RunConfig":
        bad = []
        if self.num_nodes * self.devices_per_node != self.P:
            bad.append(f"num_nodes*devices_per_node={self.num_nodes * self.devices_per_node} != world_size={self.P}")
        if self.precision not in ("float64", "float32"):
            bad.append(f"precision must be float64 or float32, got {self.precision!r}")
        if self.hidden % self.heads:
            bad.append(f"heads={self.heads} does not divide hidden={self.hidden}")
        if self.attn_parallel_size is not None:
            bad += ParallelConfig(self.P, self.attn_parallel_size).violations()
        divisor = 2 * self.P if self.mask is MaskKind.CAUSAL else self.P
        if self.seq_len % divisor:
            bad.append(f"seq_len={self.seq_len} is not divisible by {divisor}")
        if needs_seed and self.seed is None:
            bad.append("seed is required for this command")
        if bad:
            raise ConfigError("; ".join(bad))
        return self


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _convert(name: str, raw: str):
    raw = raw.strip()
    if name in ("attn_parallel_size", "placement") and raw.lower() == "auto":
        return None
    if name == "placement":
        return Placement(raw.lower())
    if name == "mask":
        return MaskKind(raw.lower())
    if name == "final_send":
        return _parse_bool(raw)
    if name == "precision":
        return raw.lower()
    if name in ("world_size", "seed", "profile_seq_len", "attn_parallel_size") or name in _INT_FIELDS:
        return int(raw)
    return float(raw)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_INT_FIELDS = {"num_nodes", "devices_per_node", "dtype_bytes", "layers", "hidden", "heads", "batch", "seq_len"}


def parse_config(text: str, env: dict | None = None, overrides: dict | None = None) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.read_string("[run]\n" + text)
    raw = dict(parser["run"])
    env = os.environ if env is None else env
    for key, val in env.items():
        if key.startswith(ENV_PREFIX):
            raw[key[len(ENV_PREFIX):].lower()] = val
    raw.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    values = {}
    for key, val in raw.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = _convert(key, val)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    return RunConfig(**values)


def load_config(path: str | None, env: dict | None = None, overrides: dict | None = None) -> RunConfig:
    text = ""
    if path is not None:
        with open(path) as fh:
            text = fh.read()
    return parse_config(text, env, overrides)
