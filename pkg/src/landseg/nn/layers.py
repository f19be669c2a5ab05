"""Stateful layers with cached forward inputs for backpropagation.

Each layer exposes ``forward(x)``, ``backward(grad)``, and the dictionaries
``params`` / ``grads`` keyed by short parameter names.  Layers without
parameters return empty dictionaries.
"""

import numpy as np

from . import functional as F


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.training = True

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, x):
        return self.forward(x)

    def buffers(self):
        """Non-trainable state that must be checkpointed."""
        return {}


def he_normal(rng, shape, fan_in, dtype=np.float64):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Layer):
    def __init__(self, c_in, c_out, kernel=3, stride=1, dilation=1, padding=0, rng=None, dtype=np.float64):
        super().__init__()
        if stride < 1 or dilation < 1 or padding < 0:
            raise ValueError(f"invalid conv geometry stride={stride} dilation={dilation} padding={padding}")
        rng = np.random.default_rng() if rng is None else rng
        self.stride, self.dilation, self.padding = stride, dilation, padding
        self.params["weight"] = he_normal(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel, dtype)
        self.params["bias"] = np.zeros(c_out, dtype=dtype)
        self._x = None

    @property
    def kernel(self):
        return self.params["weight"].shape[-1]

    @property
    def effective_kernel(self):
        return F.effective_kernel(self.kernel, self.dilation)

    def out_extent(self, n):
        return F.conv_out_extent(n, self.kernel, self.stride, self.dilation, self.padding)

    def forward(self, x):
        self._x = x
        return F.conv2d(x, self.params["weight"], self.params["bias"], self.stride, self.dilation, self.padding)

    def backward(self, grad):
        gx, gw, gb = F.conv2d_backward(self._x, self.params["weight"], grad, self.stride, self.dilation, self.padding)
        self.grads["weight"] = gw
        self.grads["bias"] = gb
        return gx


class ConvTranspose2d(Layer):
    def __init__(self, c_in, c_out, kernel=5, stride=2, padding=0, output_padding=0, rng=None, dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        # each output pixel sees about c_in * (kernel / stride)^2 taps
        fan_in = max(1, c_in * kernel * kernel // (stride * stride))
        self.params["weight"] = he_normal(rng, (c_in, c_out, kernel, kernel), fan_in, dtype)
        self.params["bias"] = np.zeros(c_out, dtype=dtype)
        self._x = None

    @property
    def kernel(self):
        return self.params["weight"].shape[-1]

    def out_extent(self, n):
        return F.tconv_out_extent(n, self.kernel, self.stride, self.padding, self.output_padding)

    def forward(self, x):
        self._x = x
        return F.conv_transpose2d(
            x, self.params["weight"], self.params["bias"], self.stride, self.padding, self.output_padding
        )

    def backward(self, grad):
        gx, gw, gb = F.conv_transpose2d_backward(
            self._x, self.params["weight"], grad, self.stride, self.padding, self.output_padding
        )
        self.grads["weight"] = gw
        self.grads["bias"] = gb
        return gx


class BatchNorm2d(Layer):
    """Per-channel batch normalization.

    Running statistics start at mean 0 / variance 1, so evaluation mode is
    well defined before any training step.  The running variance tracks the
    unbiased batch variance.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._cache = None

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if self.training:
            out, cache, mean, var = F.batchnorm_train(x, gamma, beta, self.eps)
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * m / (m - 1)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
            self._cache = ("train", cache)
            return out
        xhat = (x - self.running_mean[None, :, None, None]) / np.sqrt(self.running_var + self.eps)[None, :, None, None]
        self._cache = ("eval", xhat)
        return F.batchnorm_eval(x, gamma, beta, self.running_mean, self.running_var, self.eps)

    def backward(self, grad):
        mode, cache = self._cache
        gamma = self.params["gamma"]
        if mode == "train":
            gx, gg, gb = F.batchnorm_train_backward(cache, gamma, grad)
        else:
            gx, gg, gb = F.batchnorm_eval_backward(gamma, self.running_var, self.eps, cache, grad)
        self.grads["gamma"] = gg
        self.grads["beta"] = gb
        return gx


class ReLU(Layer):
    def forward(self, x):
        self._x = x
        return F.relu(x)

    def backward(self, grad):
        return F.relu_backward(self._x, grad)


class MaxPool2(Layer):
    def forward(self, x):
        out, self._argmax = F.maxpool2(x)
        return out

    def backward(self, grad):
        return F.maxpool2_backward(self._argmax, grad)


class Softmax(Layer):
    """Softmax over the channel axis."""

    def forward(self, x):
        self._p = F.softmax_channels(x)
        return self._p

    def backward(self, grad):
        return F.softmax_channels_backward(self._p, grad)


class Mark(Layer):
    """Identity that records its input under `tag` for a later :class:`Concat`."""

    def __init__(self, tag):
        super().__init__()
        self.tag = tag

    def forward(self, x):
        return x

    def backward(self, grad):
        return grad


class Concat(Layer):
    """Channel-concatenates the tensor recorded by the matching :class:`Mark` (first) with the input."""

    def __init__(self, tag):
        super().__init__()
        self.tag = tag
        self._split = None

    def forward(self, x, skip=None):
        if skip is None:
            raise ValueError(f"concat '{self.tag}' needs its recorded skip tensor")
        if skip.shape[0] != x.shape[0] or skip.shape[2:] != x.shape[2:]:
            raise ValueError(f"skip '{self.tag}' shape {skip.shape} does not match decoder map {x.shape}")
        self._split = skip.shape[1]
        return np.concatenate([skip, x], axis=1)

    def backward(self, grad):
        """Returns (grad_skip, grad_input)."""
        return grad[:, :self._split], grad[:, self._split:]
