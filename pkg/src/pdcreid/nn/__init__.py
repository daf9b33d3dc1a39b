from .layers import (AvgPool2d, BatchNorm2d, Conv2d, GlobalAvgPool, Layer, Linear,
                     MaxPool2d, ReLU, Sequential, Tanh)
from .losses import softmax, softmax_xent
from .optim import SGD, SgdConfig, sgd_step

__all__ = [
    "AvgPool2d", "BatchNorm2d", "Conv2d", "GlobalAvgPool", "Layer", "Linear", "MaxPool2d",
    "ReLU", "Sequential", "Tanh", "softmax", "softmax_xent", "SGD", "SgdConfig", "sgd_step",
]
