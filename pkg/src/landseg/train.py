"""Weighted cross-entropy, Adam, dataset splitting/augmentation and the training loop."""

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .nn import build_network, save_checkpoint

log = logging.getLogger(__name__)

# order: background, building, car, impervious surface, low vegetation, tree
DEFAULT_CLASS_WEIGHTS = (5.0, 1.0, 100.0, 1.0, 2.0, 1.0)
PROB_FLOOR = 1e-12


class LossResult(NamedTuple):
    total: float
    mean: float
    grad: np.ndarray  # d(total)/d(logits)


def weighted_cross_entropy(probs, onehot, weights):
    """Class-weighted cross entropy summed over pixels.

    Returns the summed loss, the per-pixel mean, and the gradient of the
    summed loss with respect to the pre-softmax logits, which is
    ``w[y] * (p - y)`` per pixel.
    """
    probs = np.asarray(probs)
    onehot = np.asarray(onehot)
    weights = np.asarray(weights, dtype=np.float64)
    if probs.shape != onehot.shape:
        raise ValueError(f"probs {probs.shape} and onehot {onehot.shape} differ in shape")
    if weights.shape != (probs.shape[1],):
        raise ValueError(f"need {probs.shape[1]} class weights, got {weights.shape}")
    if np.any(weights <= 0):
        raise ValueError("class weights must be positive")
    if not np.allclose(onehot.sum(axis=1), 1.0):
        raise ValueError("every onehot pixel must sum to 1")
    # per-pixel weight of the true class
    wpix = np.tensordot(weights, onehot, axes=([0], [1]))[:, None]
    logp = np.log(np.maximum(probs, PROB_FLOOR))
    total = float(-(wpix * onehot * logp).sum(dtype=np.float64))
    n_pix = probs.shape[0] * probs.shape[2] * probs.shape[3]
    grad = wpix * (probs - onehot)
    return LossResult(total, total / max(n_pix, 1), grad)


class Adam:
    """Bias-corrected Adam over a dict of named parameter arrays (updated in place)."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k!r}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p, dtype=np.float64)
                self.v[k] = np.zeros_like(p, dtype=np.float64)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            p -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)


def split_dataset(items, ratio=(3, 1), seed=0):
    """Seeded random split; the first part gets floor(n * a / (a + b)) items."""
    n = len(items)
    if n < 2:
        raise ValueError(f"need at least 2 items to split, got {n}")
    a, b = ratio
    if a <= 0 or b <= 0:
        raise ValueError(f"split ratio components must be positive, got {ratio}")
    n_train = (n * a) // (a + b)
    perm = np.random.default_rng(seed).permutation(n)
    return [items[i] for i in perm[:n_train]], [items[i] for i in perm[n_train:]]


def augment(image, label):
    """Identity, horizontal flip, vertical flip and 180 degree rotation.

    `image` is (C, H, W) and `label` (H, W); both are transformed alike.
    """
    if image.shape[-1] != image.shape[-2]:
        raise ValueError(f"augmentation expects square patches, got {image.shape[-2]}x{image.shape[-1]}")
    return [
        (image, label),
        (image[..., ::-1].copy(), label[..., ::-1].copy()),
        (image[..., ::-1, :].copy(), label[..., ::-1, :].copy()),
        (image[..., ::-1, ::-1].copy(), label[..., ::-1, ::-1].copy()),
    ]


def one_hot_batch(labels, classes):
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], classes) + labels.shape[1:])
    np.put_along_axis(out, labels[:, None], 1.0, axis=1)
    return out


def pixel_accuracy(probs, labels):
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def train_step(net, opt, images, labels, weights):
    """One forward/backward/Adam update on a batch.  Returns (mean loss, accuracy)."""
    net.train()
    probs = net.forward(images)
    onehot = one_hot_batch(labels, probs.shape[1])
    res = weighted_cross_entropy(probs, onehot, weights)
    if not math.isfinite(res.total):
        raise FloatingPointError("non-finite loss")
    n_pix = labels.size
    net.zero_grad()
    net.backward(res.grad / n_pix, wrt="logits")
    opt.step(net.parameters(), net.gradients())
    return res.mean, pixel_accuracy(probs, labels)


def evaluate_batches(net, images, labels, weights, batch_size):
    net.eval()
    total, correct, count = 0.0, 0, 0
    for i in range(0, len(images), batch_size):
        x, y = images[i:i + batch_size], labels[i:i + batch_size]
        p = net.forward(x)
        total += weighted_cross_entropy(p, one_hot_batch(y, p.shape[1]), weights).total
        correct += int(np.sum(np.argmax(p, axis=1) == y))
        count += y.size
    return total / max(count, 1), correct / max(count, 1)


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    epochs: int = 10
    seed: int = 0
    split_ratio: tuple = (3, 1)
    class_weights: tuple = DEFAULT_CLASS_WEIGHTS
    augment: bool = True
    checkpoint_dir: str = None

    def __post_init__(self):
        self.split_ratio = tuple(self.split_ratio)
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(self.split_ratio) != 2 or min(self.split_ratio) <= 0:
            raise ValueError(f"split_ratio must be two positive numbers, got {self.split_ratio}")

    def to_dict(self):
        d = asdict(self)
        d["split_ratio"] = list(self.split_ratio)
        d["class_weights"] = list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class History:
    rows: list = field(default_factory=list)

    def append(self, epoch, train_loss, val_loss, train_acc, val_acc):
        self.rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                          "train_acc": train_acc, "val_acc": val_acc})

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "train_acc", "val_acc"])
            w.writeheader()
            w.writerows(self.rows)


def _stack(pairs):
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def train_loop(config, spec, dataset, val_dataset=None, net=None):
    """Train a network on (image, label) pairs and return (network, history).

    Images are (C, H, W), labels (H, W) integer class maps.  Without an
    explicit `val_dataset` the data is split by ``config.split_ratio``.
    Losses in the history are per-pixel means of the weighted cross entropy.
    When ``config.checkpoint_dir`` is set, the best-validation model is
    written there.
    """
    if val_dataset is None:
        train_set, val_set = split_dataset(list(dataset), config.split_ratio, config.seed)
    else:
        train_set, val_set = list(dataset), list(val_dataset)
    if config.augment:
        train_set = [aug for img, lab in train_set for aug in augment(img, lab)]
    x_train, y_train = _stack(train_set)
    x_val, y_val = _stack(val_set) if val_set else (None, None)

    if net is None:
        net = build_network(spec, seed=config.seed)
    opt = Adam(lr=config.lr)
    rng = np.random.default_rng(config.seed)
    weights = np.asarray(config.class_weights)
    history = History()
    best = math.inf
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x_train))
        losses, accs, sizes = [], [], []
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            loss, acc = train_step(net, opt, x_train[idx], y_train[idx], weights)
            losses.append(loss)
            accs.append(acc)
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes))
        train_acc = float(np.average(accs, weights=sizes))
        if x_val is not None:
            val_loss, val_acc = evaluate_batches(net, x_val, y_val, weights, config.batch_size)
        else:
            val_loss, val_acc = float("nan"), float("nan")
        history.append(epoch, train_loss, val_loss, train_acc, val_acc)
        log.info("epoch %d train_loss %.5f val_loss %.5f train_acc %.4f val_acc %.4f",
                 epoch, train_loss, val_loss, train_acc, val_acc)
        score = val_loss if x_val is not None else train_loss
        if config.checkpoint_dir and score < best:
            best = score
            save_checkpoint(net, config.checkpoint_dir)
    if config.checkpoint_dir:
        history.to_csv(os.path.join(config.checkpoint_dir, "history.csv"))
    return net, history
