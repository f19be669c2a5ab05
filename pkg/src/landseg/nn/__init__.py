"""Layers, the encoder-decoder builder, and receptive-field measurement."""

from . import functional
from .functional import (
    conv2d,
    conv2d_backward,
    conv_transpose2d,
    conv_transpose2d_backward,
    maxpool2,
    maxpool2_backward,
    relu,
    relu_backward,
    softmax_channels,
    softmax_channels_backward,
)
from .layers import BatchNorm2d, Concat, Conv2d, ConvTranspose2d, Layer, Mark, MaxPool2, ReLU, Softmax
from .network import (
    Box,
    Network,
    NetworkSpec,
    build_network,
    default_spec,
    load_checkpoint,
    receptive_field,
    save_checkpoint,
    toy_spec,
)
