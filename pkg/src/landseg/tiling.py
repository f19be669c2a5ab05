"""Training-patch extraction and overlapped, centre-cropped tiled prediction."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TileScheme:
    """Patches of `patch` pixels taken every `core` pixels; only the central core is kept."""

    patch: int = 256
    core: int = 128
    pad_mode: str = "reflect"

    def __post_init__(self):
        if self.core < 2 or self.core % 2:
            raise ValueError(f"core must be a positive even number, got {self.core}")
        if self.patch != 2 * self.core:
            raise ValueError(f"patch must be twice the core, got patch={self.patch} core={self.core}")

    @property
    def stride(self):
        return self.core

    @property
    def margin(self):
        return (self.patch - self.core) // 2


def grid_offsets(extent, size, stride):
    """Start offsets along one axis; the last one is shifted inward to end at `extent`."""
    if extent < size:
        raise ValueError(f"extent {extent} is smaller than the patch size {size}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    offs = list(range(0, extent - size + 1, stride))
    if offs[-1] != extent - size:
        offs.append(extent - size)
    return offs


def extract_training_patches(image, labels, size=128, stride=None):
    """Aligned (image patch, label patch, (row, col)) triples on a regular grid.

    `image` is (C, H, W) and `labels` (H, W).
    """
    image = np.asarray(image)
    labels = np.asarray(labels)
    stride = size if stride is None else stride
    if image.ndim != 3:
        raise ValueError(f"image must be (C, H, W), got shape {image.shape}")
    if labels.shape != image.shape[1:]:
        raise ValueError(f"labels shape {labels.shape} does not match image {image.shape[1:]}")
    h, w = labels.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than the patch size {size}")
    out = []
    for r in grid_offsets(h, size, stride):
        for c in grid_offsets(w, size, stride):
            out.append((image[:, r:r + size, c:c + size], labels[r:r + size, c:c + size], (r, c)))
    return out


def tile_predict(image, predict_fn, scheme=TileScheme(), batch_size=4, return_coverage=False):
    """Stitch per-patch predictions into a full-size probability map.

    `image` is (C, H, W) or (1, C, H, W).  `predict_fn` maps a batch
    (B, C, patch, patch) to (B, K, patch, patch).  The image is reflect-padded
    by the margin on every side and up to a multiple of the core on the far
    edges; each patch contributes only its central core, so every output
    pixel has exactly one owner.  Returns (1, K, H, W), plus the per-pixel
    write count when `return_coverage` is set.
    """
    image = np.asarray(image)
    if image.ndim == 4:
        if image.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {image.shape[0]}")
        image = image[0]
    if image.ndim != 3:
        raise ValueError(f"image must be (C, H, W), got shape {image.shape}")
    _, h, w = image.shape
    m, core, patch = scheme.margin, scheme.core, scheme.patch
    extra_h, extra_w = (-h) % core, (-w) % core
    padded = np.pad(image, ((0, 0), (m, m + extra_h), (m, m + extra_w)), mode=scheme.pad_mode)
    rows = range(0, h + extra_h, core)
    cols = range(0, w + extra_w, core)
    origins = [(r, c) for r in rows for c in cols]

    out = None
    coverage = np.zeros((h + extra_h, w + extra_w), dtype=np.int64)
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        batch = np.stack([padded[:, r:r + patch, c:c + patch] for r, c in chunk])
        pred = np.asarray(predict_fn(batch))
        if pred.ndim != 4 or pred.shape[0] != len(chunk) or pred.shape[2:] != (patch, patch):
            raise ValueError(
                f"predict_fn returned shape {pred.shape}, expected ({len(chunk)}, K, {patch}, {patch})"
            )
        if out is None:
            out = np.zeros((pred.shape[1], h + extra_h, w + extra_w), dtype=pred.dtype)
        elif pred.shape[1] != out.shape[0]:
            raise ValueError(f"predict_fn changed its class count from {out.shape[0]} to {pred.shape[1]}")
        for (r, c), p in zip(chunk, pred):
            out[:, r:r + core, c:c + core] = p[:, m:m + core, m:m + core]
            coverage[r:r + core, c:c + core] += 1
    result = out[None, :, :h, :w]
    if return_coverage:
        return result, coverage[:h, :w]
    return result
