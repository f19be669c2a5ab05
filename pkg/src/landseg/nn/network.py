"""Declarative encoder-decoder specs, network construction and checkpoints."""

import json
import os
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from . import layers as L

VARIANTS = ("AC", "SC")


@dataclass
class NetworkSpec:
    """Ordered layer list plus the metadata needed to validate it.

    ``layers`` is a list of plain dicts, one per layer, e.g.
    ``{"name": "enc1.conv1", "type": "conv", "out": 32, "kernel": 3,
    "dilation": 1, "padding": 1}``.  Skip connections are expressed by a
    ``mark`` entry on the encoder side and a ``concat`` entry with the same
    ``tag`` on the decoder side.
    """

    variant: str
    layers: list
    in_channels: int = 4
    classes: int = 6
    atrous_blocks: int = 4

    @property
    def pool_depth(self):
        return sum(1 for l in self.layers if l["type"] == "maxpool")

    @property
    def skip_pairs(self):
        marks = {l["tag"]: i for i, l in enumerate(self.layers) if l["type"] == "mark"}
        return [(marks[l["tag"]], i) for i, l in enumerate(self.layers) if l["type"] == "concat"]

    def to_dict(self):
        return {
            "variant": self.variant,
            "in_channels": self.in_channels,
            "classes": self.classes,
            "atrous_blocks": self.atrous_blocks,
            "layers": [dict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            variant=d["variant"],
            layers=[dict(l) for l in d["layers"]],
            in_channels=int(d.get("in_channels", 4)),
            classes=int(d.get("classes", 6)),
            atrous_blocks=int(d.get("atrous_blocks", 4)),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def validate(self):
        """Check the structural invariants; raise ValueError on the first violation."""
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        dilated = [l for l in self.layers if l["type"] == "conv" and l.get("dilation", 1) > 1]
        expected = self.atrous_blocks if self.variant == "AC" else 0
        if len(dilated) != expected:
            raise ValueError(f"{self.variant} spec must have {expected} dilated convolutions, found {len(dilated)}")
        if len(self.layers) < 2 or self.layers[-1]["type"] != "softmax":
            raise ValueError("spec must end with a softmax layer")
        last = self.layers[-2]
        if last["type"] != "conv" or last.get("kernel", 3) != 1 or last["out"] != self.classes:
            raise ValueError(f"penultimate layer must be a 1x1 conv with {self.classes} filters")
        # shape propagation on the smallest admissible input
        size = 2 ** self.pool_depth * 2
        _infer_shapes(self, size, size)


def _conv_geometry(l):
    k = l.get("kernel", 3)
    d = l.get("dilation", 1)
    pad = l.get("padding", d * (k - 1) // 2)
    return k, l.get("stride", 1), d, pad


def _infer_shapes(spec, h, w):
    c = spec.in_channels
    marks = {}
    shapes = []
    for l in spec.layers:
        t = l["type"]
        if t == "conv":
            k, s, d, p = _conv_geometry(l)
            ke = k + (k - 1) * (d - 1)
            h = (h + 2 * p - ke) // s + 1
            w = (w + 2 * p - ke) // s + 1
            c = l["out"]
        elif t == "tconv":
            k, s = l.get("kernel", 5), l.get("stride", 2)
            p, op = l.get("padding", 0), l.get("output_padding", 0)
            h = (h - 1) * s - 2 * p + k + op
            w = (w - 1) * s - 2 * p + k + op
            c = l["out"]
        elif t == "maxpool":
            if h % 2 or w % 2:
                raise ValueError(f"maxpool '{l.get('name')}' receives odd extent {h}x{w}")
            h, w = h // 2, w // 2
        elif t == "mark":
            marks[l["tag"]] = (c, h, w)
        elif t == "concat":
            if l["tag"] not in marks:
                raise ValueError(f"concat '{l['tag']}' has no preceding mark")
            cs, hs, ws = marks[l["tag"]]
            if (hs, ws) != (h, w):
                raise ValueError(f"skip '{l['tag']}' joins {hs}x{ws} encoder map to {h}x{w} decoder map")
            c = cs + c
        elif t not in ("bn", "relu", "softmax"):
            raise ValueError(f"unknown layer type {t!r}")
        if h <= 0 or w <= 0:
            raise ValueError(f"layer '{l.get('name')}' produces non-positive extent {h}x{w}")
        shapes.append((c, h, w))
    return shapes


def default_spec(variant="AC", widths=(32, 64, 128), atrous_blocks=4, in_channels=4, classes=6):
    """Symmetric encoder-decoder with skip connections.

    Each encoder level is two 3x3 conv/BN/ReLU units followed by 2x2 max
    pooling; the bridge is `atrous_blocks` 3x3 conv/BN/ReLU units at the
    deepest width, dilated by 2 for the AC variant.  The decoder mirrors the
    encoder: upsample, concatenate the encoder map, two conv units.  AC
    upsamples with 5x5 stride-2 transpose convs followed by BN and ReLU; SC
    uses bare 2x2 stride-2 transpose convs.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    layers = []

    def unit(name, out, dilation=1):
        layers.append({"name": f"{name}.conv", "type": "conv", "out": out, "kernel": 3,
                       "dilation": dilation, "padding": dilation})
        layers.append({"name": f"{name}.bn", "type": "bn"})
        layers.append({"name": f"{name}.relu", "type": "relu"})

    for i, wd in enumerate(widths, 1):
        unit(f"enc{i}.a", wd)
        unit(f"enc{i}.b", wd)
        layers.append({"name": f"enc{i}.skip", "type": "mark", "tag": f"skip{i}"})
        layers.append({"name": f"enc{i}.pool", "type": "maxpool"})

    dil = 2 if variant == "AC" else 1
    for j in range(1, atrous_blocks + 1):
        unit(f"bridge{j}", widths[-1], dilation=dil)

    for i in range(len(widths), 0, -1):
        wd = widths[i - 1]
        if variant == "AC":
            layers.append({"name": f"dec{i}.up", "type": "tconv", "out": wd, "kernel": 5, "stride": 2,
                           "padding": 2, "output_padding": 1})
            layers.append({"name": f"dec{i}.up_bn", "type": "bn"})
            layers.append({"name": f"dec{i}.up_relu", "type": "relu"})
        else:
            layers.append({"name": f"dec{i}.up", "type": "tconv", "out": wd, "kernel": 2, "stride": 2,
                           "padding": 0, "output_padding": 0})
        layers.append({"name": f"dec{i}.merge", "type": "concat", "tag": f"skip{i}"})
        unit(f"dec{i}.a", wd)
        unit(f"dec{i}.b", wd)

    layers.append({"name": "head.conv", "type": "conv", "out": classes, "kernel": 1, "dilation": 1, "padding": 0})
    layers.append({"name": "head.softmax", "type": "softmax"})
    return NetworkSpec(variant, layers, in_channels, classes, atrous_blocks)


def toy_spec(variant="AC", widths=(4, 8), atrous_blocks=2, in_channels=4, classes=6):
    """Small two-level network for tests and quick experiments."""
    return default_spec(variant, widths, atrous_blocks, in_channels, classes)


class Network:
    """A sequence of layers with named skip connections.

    ``forward`` returns per-pixel class probabilities; the pre-softmax logits
    of the last call are kept in ``self.logits``.
    """

    def __init__(self, named_layers, spec=None):
        self.layers = list(named_layers)
        self.spec = spec
        self.logits = None

    @property
    def pool_depth(self):
        return sum(1 for _, l in self.layers if isinstance(l, L.MaxPool2))

    def train(self, mode=True):
        for _, l in self.layers:
            l.train(mode)
        return self

    def eval(self):
        return self.train(False)

    @property
    def training(self):
        return any(l.training for _, l in self.layers)

    def parameters(self):
        return {f"{n}.{k}": v for n, l in self.layers for k, v in l.params.items()}

    def gradients(self):
        return {f"{n}.{k}": v for n, l in self.layers for k, v in l.grads.items()}

    def buffers(self):
        return {f"{n}.{k}": v for n, l in self.layers for k, v in l.buffers().items()}

    @property
    def dtype(self):
        for _, l in self.layers:
            for v in l.params.values():
                return v.dtype
        return np.dtype(np.float64)

    def zero_grad(self):
        for _, l in self.layers:
            l.grads.clear()

    def _check_input(self, x):
        if x.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) input, got shape {x.shape}")
        if self.spec is not None and x.shape[1] != self.spec.in_channels:
            raise ValueError(f"network expects {self.spec.in_channels} input channels, got {x.shape[1]}")
        m = 2 ** self.pool_depth
        if x.shape[2] % m or x.shape[3] % m:
            raise ValueError(f"input extent {x.shape[2]}x{x.shape[3]} must be divisible by {m}")

    def forward(self, x):
        self._check_input(x)
        x = np.asarray(x, dtype=self.dtype)
        skips = {}
        for _, layer in self.layers:
            if isinstance(layer, L.Mark):
                skips[layer.tag] = x
            elif isinstance(layer, L.Concat):
                x = layer.forward(x, skips.pop(layer.tag))
                continue
            if isinstance(layer, L.Softmax):
                self.logits = x
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, grad, wrt="probs"):
        """Backpropagate `grad` and return the gradient w.r.t. the input.

        With ``wrt="logits"`` the gradient is taken to be with respect to the
        pre-softmax logits and the softmax layer is skipped (fused
        softmax/cross-entropy path).
        """
        if wrt not in ("probs", "logits"):
            raise ValueError(f"wrt must be 'probs' or 'logits', got {wrt!r}")
        grad = np.asarray(grad, dtype=self.dtype)
        skip_grads = {}
        for _, layer in reversed(self.layers):
            if isinstance(layer, L.Softmax) and wrt == "logits":
                continue
            if isinstance(layer, L.Concat):
                g_skip, grad = layer.backward(grad)
                skip_grads[layer.tag] = g_skip
            elif isinstance(layer, L.Mark):
                grad = grad + skip_grads.pop(layer.tag)
            else:
                grad = layer.backward(grad)
        return grad


def build_network(spec, seed=0, dtype=np.float64):
    """Instantiate `spec` with He fan-in initialization drawn from `seed`."""
    spec.validate()
    rng = np.random.default_rng(seed)
    c = spec.in_channels
    marks = {}
    named = []
    for i, l in enumerate(spec.layers):
        t = l["type"]
        name = l.get("name", f"layer{i}")
        if t == "conv":
            k, s, d, p = _conv_geometry(l)
            layer = L.Conv2d(c, l["out"], k, s, d, p, rng=rng, dtype=dtype)
            c = l["out"]
        elif t == "tconv":
            layer = L.ConvTranspose2d(c, l["out"], l.get("kernel", 5), l.get("stride", 2), l.get("padding", 0),
                                      l.get("output_padding", 0), rng=rng, dtype=dtype)
            c = l["out"]
        elif t == "bn":
            layer = L.BatchNorm2d(c, eps=l.get("eps", 1e-5), momentum=l.get("momentum", 0.1), dtype=dtype)
        elif t == "relu":
            layer = L.ReLU()
        elif t == "maxpool":
            layer = L.MaxPool2()
        elif t == "softmax":
            layer = L.Softmax()
        elif t == "mark":
            layer = L.Mark(l["tag"])
            marks[l["tag"]] = c
        elif t == "concat":
            layer = L.Concat(l["tag"])
            c = marks[l["tag"]] + c
        else:
            raise ValueError(f"unknown layer type {t!r}")
        named.append((name, layer))
    return Network(named, spec)


def save_checkpoint(net, directory):
    """Write the spec, every parameter and buffer as RT01 files, and a manifest."""
    os.makedirs(directory, exist_ok=True)
    manifest = {}
    for key, arr in {**net.parameters(), **net.buffers()}.items():
        fname = key.replace("/", "_") + ".rt"
        T.save(np.asarray(arr, dtype=np.float64).reshape(1, 1, 1, -1), os.path.join(directory, fname))
        manifest[key] = fname
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    if net.spec is not None:
        with open(os.path.join(directory, "spec.json"), "w") as fh:
            fh.write(net.spec.to_json())


def load_checkpoint(directory, dtype=np.float64):
    with open(os.path.join(directory, "spec.json")) as fh:
        spec = NetworkSpec.from_json(fh.read())
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    net = build_network(spec, seed=0, dtype=dtype)
    layers = dict(net.layers)
    for key, fname in manifest.items():
        lname, attr = key.rsplit(".", 1)
        layer = layers[lname]
        flat = T.load(os.path.join(directory, fname)).ravel()
        if attr in layer.params:
            layer.params[attr] = flat.reshape(layer.params[attr].shape).astype(dtype)
        else:
            setattr(layer, attr, flat.copy())
    return net


@dataclass
class Box:
    """Half-open pixel box [top, bottom) x [left, right)."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self):
        return self.bottom - self.top

    @property
    def width(self):
        return self.right - self.left

    def contains(self, other):
        return (self.top <= other.top and self.left <= other.left
                and self.bottom >= other.bottom and self.right >= other.right)

    def strictly_contains(self, other):
        return self.contains(other) and self != other


def receptive_field(model, output_pixel, input_shape, trials=3, seed=0):
    """Input box whose pixels influence `output_pixel` (row, col) of `model`.

    Measured by backpropagating a one-hot gradient at the chosen output pixel
    (all channels) through the model in eval mode, for `trials` random inputs;
    the result is the bounding box of the union of nonzero input gradients.
    Networks are differentiated at their logits because the softmax Jacobian
    annihilates a gradient that is uniform over channels.
    """
    rng = np.random.default_rng(seed)
    was_training = getattr(model, "training", False)
    model.eval()
    r, c = output_pixel
    hit = np.zeros(input_shape[2:], dtype=bool)
    try:
        for _ in range(trials):
            x = rng.standard_normal(input_shape)
            y = model.forward(x)
            g = np.zeros_like(y)
            g[:, :, r, c] = 1.0
            if isinstance(model, Network):
                gx = model.backward(g, wrt="logits")
            else:
                gx = model.backward(g)
            hit |= np.any(gx != 0, axis=(0, 1))
    finally:
        model.train(was_training)
    rows = np.flatnonzero(hit.any(axis=1))
    cols = np.flatnonzero(hit.any(axis=0))
    if rows.size == 0:
        return Box(r, c, r, c)
    return Box(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)
