"""Raster and label codecs, input stacking and dataset manifests.

Rasters are 8-bit PNG (1 or 3 bands) or RT01 tensor files.  Loaded rasters
are (1, C, H, W) float64 arrays in [0, 1].  Label images are RGB PNGs using
the palette below.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import tensor as T

PALETTE = np.array([
    (255, 0, 0),      # background / clutter
    (0, 0, 255),      # building
    (255, 255, 0),    # car
    (255, 255, 255),  # impervious surface
    (0, 255, 255),    # low vegetation
    (0, 255, 0),      # tree
], dtype=np.uint8)

RASTER_EXTENSIONS = (".png", ".rt01")


class DataError(ValueError):
    """Input data that cannot be decoded or does not match its contract."""


def _ext(path):
    return os.path.splitext(str(path))[1].lower()


def load_raster(path):
    ext = _ext(path)
    if ext == ".rt01":
        try:
            t = T.load(path)
        except T.TensorFormatError as e:
            raise DataError(f"{path}: {e}") from e
        return t.astype(np.float64)
    if ext != ".png":
        raise DataError(f"{path}: unsupported raster format {ext!r}; use PNG or RT01")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, SyntaxError) as e:
        raise DataError(f"{path}: cannot decode PNG ({e})") from e
    if mode not in ("L", "RGB"):
        raise DataError(f"{path}: need an 8-bit 1- or 3-band PNG, got mode {mode!r}")
    if arr.dtype != np.uint8:
        raise DataError(f"{path}: bit depth must be 8, got {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return (arr.transpose(2, 0, 1)[None] / 255.0).astype(np.float64)


def save_raster(t, path):
    t = np.asarray(t)
    if t.ndim == 3:
        t = t[None]
    if t.ndim != 4 or t.shape[0] != 1:
        raise ValueError(f"raster must be (1, C, H, W), got shape {t.shape}")
    ext = _ext(path)
    if ext == ".rt01":
        T.save(t, path)
        return
    if ext != ".png":
        raise ValueError(f"unsupported raster format {ext!r}; use PNG or RT01")
    c = t.shape[1]
    if c not in (1, 3):
        raise ValueError(f"PNG rasters need 1 or 3 bands, got {c}")
    if not np.all(np.isfinite(t)) or t.min() < 0 or t.max() > 1:
        raise ValueError("PNG rasters need finite values in [0, 1]")
    arr = np.round(t[0] * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr[:, :, 0] if c == 1 else arr).save(path)


def labels_to_colors(labels):
    """(H, W) class indices to an (H, W, 3) uint8 image."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= len(PALETTE)):
        raise ValueError(f"labels must lie in [0, {len(PALETTE)}), found {labels.min()}..{labels.max()}")
    return PALETTE[labels]


def colors_to_labels(rgb):
    """(H, W, 3) palette image to class indices; any other colour is an error."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"label image must be (H, W, 3), got shape {rgb.shape}")
    code = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    pal = (PALETTE[:, 0].astype(np.int64) << 16) | (PALETTE[:, 1].astype(np.int64) << 8) | PALETTE[:, 2]
    order = np.argsort(pal)
    pos = np.minimum(np.searchsorted(pal[order], code), len(pal) - 1)
    bad = pal[order][pos] != code
    if np.any(bad):
        r, c = np.argwhere(bad)[0]
        raise DataError(f"unknown label colour {tuple(int(v) for v in rgb[r, c])} at pixel (row {r}, col {c})")
    return order[pos]


def load_labels(path):
    if _ext(path) != ".png":
        raise DataError(f"{path}: label maps must be RGB PNG files")
    try:
        with Image.open(path) as im:
            im = im.convert("RGB") if im.mode == "P" else im
            if im.mode != "RGB":
                raise DataError(f"{path}: label image must be RGB, got mode {im.mode!r}")
            rgb = np.asarray(im)
    except (OSError, SyntaxError) as e:
        raise DataError(f"{path}: cannot decode PNG ({e})") from e
    try:
        return colors_to_labels(rgb)
    except DataError as e:
        raise DataError(f"{path}: {e}") from e


def save_labels(labels, path):
    Image.fromarray(labels_to_colors(labels)).save(path)


def one_hot(labels, k):
    """(H, W) labels to a (1, K, H, W) indicator tensor."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), found {labels.min()}..{labels.max()}")
    return np.moveaxis(np.eye(k)[labels], -1, 0)[None]


def stack_inputs(irrg, ndsm=None):
    """Concatenate IRRG (1,3,H,W) and nDSM (1,1,H,W) to (1,4,H,W); without nDSM return IRRG."""
    irrg = np.asarray(irrg)
    if irrg.ndim != 4 or irrg.shape[1] != 3:
        raise ValueError(f"IRRG must be (N, 3, H, W), got shape {irrg.shape}")
    if ndsm is None:
        return irrg
    ndsm = np.asarray(ndsm)
    if ndsm.ndim != 4 or ndsm.shape[1] != 1:
        raise ValueError(f"nDSM must be (N, 1, H, W), got shape {ndsm.shape}")
    if irrg.shape[0] != ndsm.shape[0] or irrg.shape[2:] != ndsm.shape[2:]:
        raise ValueError(f"IRRG {irrg.shape} and nDSM {ndsm.shape} extents differ")
    return np.concatenate([irrg, ndsm.astype(irrg.dtype, copy=False)], axis=1)


@dataclass
class TileRecord:
    image: str
    ndsm: str
    labels: str
    split: str


def read_manifest(path):
    """Tab-separated records: image path, nDSM path (or '-'), label path, split tag.

    Relative paths are resolved against the manifest's directory.  Blank
    lines and lines starting with '#' are skipped.
    """
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row or not "".join(row).strip() or row[0].startswith("#"):
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(row)}")
            image, ndsm, labels, split = (f.strip() for f in row)
            if split not in ("train", "test"):
                raise DataError(f"{path}:{lineno}: split tag must be 'train' or 'test', got {split!r}")

            def resolve(p):
                return p if p == "-" or os.path.isabs(p) else os.path.join(base, p)

            out.append(TileRecord(resolve(image), resolve(ndsm), resolve(labels), split))
    return out


def write_manifest(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for r in records:
            w.writerow([r.image, r.ndsm, r.labels, r.split])


def load_tile(record, use_ndsm=True):
    """(1, C, H, W) input stack and (H, W) labels for one manifest record."""
    irrg = load_raster(record.image)
    if irrg.shape[1] != 3:
        raise DataError(f"{record.image}: IRRG image needs 3 bands, got {irrg.shape[1]}")
    ndsm = None
    if use_ndsm:
        if record.ndsm == "-":
            raise DataError(f"{record.image}: no nDSM listed; pass --no-ndsm to train without it")
        ndsm = load_raster(record.ndsm)
        if ndsm.shape[1] != 1:
            raise DataError(f"{record.ndsm}: nDSM needs 1 band, got {ndsm.shape[1]}")
    try:
        x = stack_inputs(irrg, ndsm)
    except ValueError as e:
        raise DataError(str(e)) from e
    labels = load_labels(record.labels)
    if labels.shape != x.shape[2:]:
        raise DataError(f"{record.labels}: label size {labels.shape} differs from image {x.shape[2:]}")
    return x, labels

