"""Multi-ring sequence-parallel attention: topology, sharding, a deterministic
executor, and the analytic cost model and scheduler built on it."""

from ._accel import BACKEND
from .cluster import ClusterSpec, map_rank_to_node
from .executor import AttentionInputs, Projection, ProtocolError, run_backward, run_forward
from .perf_model import CostReport, ModelSpec, estimate_step_time
from .scheduler import enumerate_configs, grid_search
from .sharding import ShardAssignment, causal_workload, split_naive, split_zigzag
from .tensor import AttnState, MaskKind, backward_iteration, forward_iteration, reference_attention
from .topology import ConfigError, ParallelConfig, Placement, TopologyPlan, build_plan, validate_plan

__all__ = [
    "BACKEND", "ClusterSpec", "map_rank_to_node", "AttentionInputs", "Projection", "ProtocolError",
    "run_backward", "run_forward", "CostReport", "ModelSpec", "estimate_step_time", "enumerate_configs",
    "grid_search", "ShardAssignment", "causal_workload", "split_naive", "split_zigzag", "AttnState",
    "MaskKind", "backward_iteration", "forward_iteration", "reference_attention", "ConfigError",
    "ParallelConfig", "Placement", "TopologyPlan", "build_plan", "validate_plan",
]
