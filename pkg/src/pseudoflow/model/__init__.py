"""Recurrent correlation-volume flow network and checkpoint format."""

from .checkpoint import (
    MAGIC,
    VERSION,
    CheckpointError,
    load_checkpoint,
    params_hash,
    save_checkpoint,
)
from .network import (
    Conv,
    ConvGRU,
    FlowNet,
    ModelConfig,
    ParamStore,
    coordinate_encode,
    correlation_pyramid,
    correlation_volume,
    lookup,
)

__all__ = [
    "MAGIC",
    "VERSION",
    "CheckpointError",
    "load_checkpoint",
    "params_hash",
    "save_checkpoint",
    "Conv",
    "ConvGRU",
    "FlowNet",
    "ModelConfig",
    "ParamStore",
    "coordinate_encode",
    "correlation_pyramid",
    "correlation_volume",
    "lookup",
]
