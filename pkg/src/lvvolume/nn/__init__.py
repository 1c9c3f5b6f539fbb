from .layers import BatchNorm, Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2, ReLU
from .network import Network, VGGConfig, build_network, build_vgg20bn, vgg20bn_spec
from . import checkpoint

__all__ = [
    "BatchNorm",
    "Conv2D",
    "Dense",
    "Dropout",
    "Flatten",
    "Layer",
    "MaxPool2",
    "ReLU",
    "Network",
    "VGGConfig",
    "build_network",
    "build_vgg20bn",
    "vgg20bn_spec",
    "checkpoint",
]
