"""
Atrous convolutions and the receptive field
===========================================

A 3x3 kernel with dilation 2 covers a 5x5 footprint without extra weights.
Stacking such layers in the bridge of the encoder-decoder grows the region
of the input that each output pixel can see.
"""

import numpy as np

from landseg.nn import Conv2d, build_network, functional as F, receptive_field, toy_spec

# A single dilated convolution: its impulse response spans 5x5 pixels.
conv = Conv2d(1, 1, kernel=3, dilation=2, padding=2, rng=np.random.default_rng(0))
box = receptive_field(conv, (10, 10), (1, 1, 21, 21))
print("dilated 3x3 conv sees", box.height, "x", box.width)

# The same result by zero-inflating the kernel and running an ordinary conv.
x = np.random.default_rng(1).normal(size=(1, 1, 9, 9))
w = np.random.default_rng(2).normal(size=(1, 1, 3, 3))
inflated = np.zeros((1, 1, 5, 5))
inflated[:, :, ::2, ::2] = w
diff = np.abs(F.conv2d(x, w, dilation=2) - F.conv2d(x, inflated)).max()
print("dilated vs zero-inflated kernel, max difference:", diff)

# Whole networks: the AC variant (dilated bridge) against the SC variant
# (plain bridge) of the same depth.
shape = (1, 4, 96, 96)
for variant in ("SC", "AC"):
    net = build_network(toy_spec(variant), seed=0)
    b = receptive_field(net, (48, 48), shape)
    print(f"{variant} toy network receptive field: {b.height} x {b.width}")
