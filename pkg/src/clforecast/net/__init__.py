from .checkpoint import CheckpointError, load_checkpoint, loads_checkpoint, save_checkpoint, dumps_checkpoint
from .decoder import (
    PARAM_GROUPS,
    ContextEmbedding,
    DecoderNet,
    GoalToken,
    NetConfig,
    StaticTokens,
    TrajectorySet,
    to_local,
    to_world,
)

__all__ = [
    "PARAM_GROUPS", "CheckpointError", "ContextEmbedding", "DecoderNet", "GoalToken", "NetConfig",
    "StaticTokens", "TrajectorySet", "dumps_checkpoint", "load_checkpoint", "loads_checkpoint",
    "save_checkpoint", "to_local", "to_world",
]
