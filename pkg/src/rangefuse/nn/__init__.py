"""Minimal differentiable tensor core and network layers."""

from .layers import Backbone, BackboneConfig, ConvBlock, HeadLayout, Heads, ParamStore, PointPredictions
from .tensor import Tensor, as_tensor, conv2d, softmax

__all__ = ["Backbone", "BackboneConfig", "ConvBlock", "HeadLayout", "Heads", "ParamStore",
           "PointPredictions", "Tensor", "as_tensor", "conv2d", "softmax"]
