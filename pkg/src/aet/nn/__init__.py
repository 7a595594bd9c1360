from .adam import AdamState, adam_step
from .engine import GraphError, ShapeError, Tensor, no_grad
from .model import (NetConfig, NetworkParams, ObsBatch, forward, forward_policy, forward_value,
                    infer, init_params, sample_action, sample_actions, stack_obs)
from .snapshot import SnapshotError, deserialize, serialize

__all__ = [
    "AdamState", "adam_step", "GraphError", "ShapeError", "Tensor", "no_grad", "NetConfig",
    "NetworkParams", "ObsBatch", "forward", "forward_policy", "forward_value", "infer",
    "init_params", "sample_action", "sample_actions", "stack_obs", "SnapshotError",
    "deserialize", "serialize",
]
