from .arch import (
    ArchDescriptor,
    BatchNorm,
    Conv2D,
    DescriptorError,
    Flatten,
    FullyConnected,
    MaxPool,
    ReLU,
    desk_descriptor,
    frontnet,
    reference_descriptor,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .engine import (
    ActivationCache,
    ContractError,
    ModelParams,
    ParameterCorruptionError,
    backward,
    backward_start,
    forward,
    predict,
)
from .strategy import (
    ALL_WB,
    BIAS_ONLY,
    BN_WB,
    FC_WB,
    PRESETS,
    UpdateStrategy,
    count_selected_params,
    strategy_from_name,
)

__all__ = [
    "ALL_WB",
    "BIAS_ONLY",
    "BN_WB",
    "FC_WB",
    "PRESETS",
    "ActivationCache",
    "ArchDescriptor",
    "BatchNorm",
    "Conv2D",
    "ContractError",
    "DescriptorError",
    "Flatten",
    "FullyConnected",
    "MaxPool",
    "ModelParams",
    "ParameterCorruptionError",
    "ReLU",
    "UpdateStrategy",
    "backward",
    "backward_start",
    "count_selected_params",
    "desk_descriptor",
    "forward",
    "frontnet",
    "load_checkpoint",
    "predict",
    "reference_descriptor",
    "save_checkpoint",
    "strategy_from_name",
]
