"""Fully connected CRF with Gaussian pairwise kernels and Potts compatibility.

Pixel i carries a spatial feature p_i (row, column) and a colour feature I_i
(the first three image bands in 8-bit intensity units).  The pairwise kernel
is

    k(f_i, f_j) = w1 exp(-|p_i - p_j|^2 / 2 sa^2 - |I_i - I_j|^2 / 2 sb^2)
                + w2 exp(-|p_i - p_j|^2 / 2 sg^2)

Mean-field messages are Gaussian filters of the current marginals, computed
either exactly (O(N^2), small images) or with the permutohedral lattice.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .lattice import DEFAULT_SHIFTS, PermutohedralLattice

PROB_FLOOR = 1e-12
MAX_EXACT_PIXELS = 10_000
INTENSITY_SCALE = 255.0
_ROW_CHUNK = 1024


@dataclass(frozen=True)
class CrfParams:
    w1: float = 10.0
    w2: float = 3.0
    sigma_alpha: float = 80.0
    sigma_beta: float = 13.0
    sigma_gamma: float = 3.0
    iterations: int = 10

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError(f"kernel weights must be non-negative, got w1={self.w1}, w2={self.w2}")
        for name in ("sigma_alpha", "sigma_beta", "sigma_gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError(f"iterations must be a positive integer, got {self.iterations}")

    def to_dict(self):
        return asdict(self)


def unary_from_probs(probs):
    """Negative log-probabilities, with probabilities clamped at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(probs)):
        raise ValueError("probabilities contain non-finite values")
    return -np.log(np.maximum(probs, PROB_FLOOR))


def kernel_eval(fi, fj, params):
    """Pairwise kernel between two pixels.

    `fi` and `fj` are 1-D arrays: two position coordinates followed by the
    colour values.
    """
    fi = np.asarray(fi, dtype=np.float64)
    fj = np.asarray(fj, dtype=np.float64)
    if fi.shape != fj.shape:
        raise ValueError(f"feature shapes differ: {fi.shape} vs {fj.shape}")
    dp = np.sum((fi[:2] - fj[:2]) ** 2)
    dc = np.sum((fi[2:] - fj[2:]) ** 2)
    appearance = np.exp(-dp / (2 * params.sigma_alpha ** 2) - dc / (2 * params.sigma_beta ** 2))
    smoothness = np.exp(-dp / (2 * params.sigma_gamma ** 2))
    return float(params.w1 * appearance + params.w2 * smoothness)


def potts(a, b):
    return int(a != b)


def _image_hwc(image, include_ndsm=False):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 4:
        if image.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {image.shape[0]}")
        image = image[0]
    if image.ndim != 3:
        raise ValueError(f"image must be (C, H, W), got shape {image.shape}")
    bands = 4 if include_ndsm else 3
    if image.shape[0] < bands:
        raise ValueError(f"image needs at least {bands} bands, got {image.shape[0]}")
    return image[:bands]


def pixel_features(image, include_ndsm=False, intensity_scale=INTENSITY_SCALE):
    """Unscaled per-pixel features: positions (N, 2) and colours (N, 3 or 4).

    Colours are the first three bands multiplied by `intensity_scale`, so a
    [0, 1] image becomes 8-bit intensity units.
    """
    bands = _image_hwc(image, include_ndsm)
    _, h, w = bands.shape
    rows, cols = np.mgrid[:h, :w]
    pos = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    colour = bands.reshape(bands.shape[0], -1).T * intensity_scale
    if not np.all(np.isfinite(colour)):
        raise ValueError("image contains non-finite values")
    return pos, colour


def kernel_features(image, params, include_ndsm=False, intensity_scale=INTENSITY_SCALE):
    """Bandwidth-scaled (appearance, smoothness) feature arrays."""
    pos, colour = pixel_features(image, include_ndsm, intensity_scale)
    appearance = np.concatenate([pos / params.sigma_alpha, colour / params.sigma_beta], axis=1)
    smoothness = pos / params.sigma_gamma
    return appearance, smoothness


def _scaled(features, bandwidths):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"features must be (N, d), got shape {features.shape}")
    if bandwidths is not None:
        features = features / np.asarray(bandwidths, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise ValueError("features contain non-finite values")
    return features


def gaussian_filter_bruteforce(values, features, bandwidths=None, max_pixels=MAX_EXACT_PIXELS):
    """Exact sum_{j != i} exp(-|f_i - f_j|^2 / 2) v_j over all pixel pairs.

    Features are divided by `bandwidths` (scalar or per-dimension) when given.
    """
    f = _scaled(features, bandwidths)
    values = np.asarray(values, dtype=np.float64)
    n = f.shape[0]
    if n > max_pixels:
        raise ValueError(f"{n} pixels exceed the exact-filter limit of {max_pixels}")
    if values.shape[0] != n:
        raise ValueError(f"values have {values.shape[0]} rows, features have {n}")
    sq = np.sum(f * f, axis=1)
    out = np.empty_like(values)
    for start in range(0, n, _ROW_CHUNK):
        stop = min(start + _ROW_CHUNK, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * f[start:stop] @ f.T
        k = np.exp(-0.5 * np.maximum(d2, 0.0))
        k[np.arange(stop - start), np.arange(start, stop)] = 0.0
        out[start:stop] = k @ values
    return out


def permutohedral_filter(values, features, bandwidths=None, shifts=DEFAULT_SHIFTS):
    """Lattice approximation of :func:`gaussian_filter_bruteforce`."""
    return PermutohedralLattice(_scaled(features, bandwidths), shifts=shifts).filter(values)


class _ExactFilter:
    def __init__(self, features, max_pixels):
        self.features = features
        self.max_pixels = max_pixels
        if len(features) > max_pixels:
            raise ValueError(f"{len(features)} pixels exceed the exact-filter limit of {max_pixels}")

    def filter(self, values):
        return gaussian_filter_bruteforce(values, self.features, max_pixels=self.max_pixels)


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_unary(unary):
    unary = np.asarray(unary, dtype=np.float64)
    if unary.ndim != 4 or unary.shape[0] != 1:
        raise ValueError(f"unary must be (1, K, H, W), got shape {unary.shape}")
    if not np.all(np.isfinite(unary)):
        raise ValueError("unary contains non-finite values")
    return unary


def meanfield_infer(unary, image, params=CrfParams(), method="lattice", shifts=DEFAULT_SHIFTS,
                    include_ndsm=False, max_exact_pixels=MAX_EXACT_PIXELS, init=None):
    """Parallel mean-field updates under Potts compatibility.

    Returns (Q, labels): Q is (1, K, H, W) and labels (H, W) is the per-pixel
    argmax of the final update, ties going to the lowest class index.
    `method` selects the message filter: "lattice" or "exact".  The
    marginals start at softmax(-unary) unless `init` (1, K, H, W) is given.
    """
    unary = _check_unary(unary)
    _, k, h, w = unary.shape
    if _image_hwc(image, include_ndsm).shape[1:] != (h, w):
        raise ValueError(f"image size does not match unary size {h}x{w}")
    if method not in ("lattice", "exact"):
        raise ValueError(f"method must be 'lattice' or 'exact', got {method!r}")
    appearance, smoothness = kernel_features(image, params, include_ndsm)
    kernels = []
    for weight, feats in ((params.w1, appearance), (params.w2, smoothness)):
        if weight == 0:
            continue
        if method == "exact":
            kernels.append((weight, _ExactFilter(feats, max_exact_pixels)))
        else:
            kernels.append((weight, PermutohedralLattice(feats, shifts=shifts)))

    u = unary[0].reshape(k, -1).T
    logits = -u
    if init is None:
        q = _softmax_rows(logits)
    else:
        init = np.asarray(init, dtype=np.float64)
        if init.shape != unary.shape:
            raise ValueError(f"init shape {init.shape} does not match unary {unary.shape}")
        q = init[0].reshape(k, -1).T
    for _ in range(params.iterations):
        if kernels:
            msg = sum(weight * filt.filter(q) for weight, filt in kernels)
            # Potts: the penalty for label l is the message mass on every other label
            pairwise = msg.sum(axis=1, keepdims=True) - msg
            logits = -u - pairwise
        q = _softmax_rows(logits)
        if not np.all(np.isfinite(q)):
            raise FloatingPointError("mean-field marginals became non-finite")
    labels = np.argmax(logits, axis=1).reshape(h, w)
    return q.T.reshape(1, k, h, w), labels


def energy(labels, unary, image, params=CrfParams(), include_ndsm=False, max_pixels=MAX_EXACT_PIXELS):
    """Gibbs energy of a labelling with the pairwise sum over ordered pairs i != j."""
    unary = _check_unary(unary)
    labels = np.asarray(labels)
    _, k, h, w = unary.shape
    if labels.shape != (h, w):
        raise ValueError(f"labels shape {labels.shape} does not match unary size {(h, w)}")
    n = h * w
    if n > max_pixels:
        raise ValueError(f"{n} pixels exceed the exact-energy limit of {max_pixels}")
    flat = labels.ravel()
    e_unary = float(np.take_along_axis(unary[0].reshape(k, -1), flat[None], axis=0).sum())
    onehot = np.eye(k)[flat]
    appearance, smoothness = kernel_features(image, params, include_ndsm)
    e_pair = 0.0
    for weight, feats in ((params.w1, appearance), (params.w2, smoothness)):
        if weight == 0:
            continue
        same = np.sum(onehot * gaussian_filter_bruteforce(onehot, feats, max_pixels=max_pixels))
        total = np.sum(gaussian_filter_bruteforce(np.ones((n, 1)), feats, max_pixels=max_pixels))
        e_pair += weight * (total - same)
    return e_unary + float(e_pair)
