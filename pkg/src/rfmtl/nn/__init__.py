from .counting import FLOP_CONVENTION, ParamCount, count_flops, count_params
from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    DimensionError,
    Dropout,
    Flatten,
    GaussianNoise,
    LayerSpec,
    MaxPool2D,
    NNStateError,
    ReLU,
    Sequential,
    Softmax,
    make_layer,
    softmax,
)
from .optim import OptimizerError, ParamGroup, adam_step

__all__ = [
    "FLOP_CONVENTION", "ParamCount", "count_flops", "count_params",
    "BatchNorm", "Conv2D", "Dense", "DimensionError", "Dropout", "Flatten", "GaussianNoise",
    "LayerSpec", "MaxPool2D", "NNStateError", "ReLU", "Sequential", "Softmax", "make_layer", "softmax",
    "OptimizerError", "ParamGroup", "adam_step",
]
