"""Procedural aerial-like scenes with IRRG, nDSM and 6-class labels.

The scenes are crude on purpose: roads on a vegetated background, boxy
buildings, round tree crowns, cars on the roads and a few clutter patches.
Each class has a distinct mean IRRG colour and height so that a small
network can learn the task in minutes, while per-pixel noise leaves room for
CRF refinement.
"""

import numpy as np

BACKGROUND, BUILDING, CAR, IMPERVIOUS, LOW_VEG, TREE = range(6)

# IRRG means per class (near infrared, red, green) in [0, 1]
CLASS_COLORS = np.array([
    [0.55, 0.20, 0.25],  # background / clutter
    [0.45, 0.50, 0.55],  # building roofs
    [0.20, 0.75, 0.20],  # car
    [0.40, 0.40, 0.40],  # impervious surface
    [0.80, 0.35, 0.45],  # low vegetation
    [0.70, 0.15, 0.30],  # tree
])
CLASS_HEIGHTS = np.array([0.05, 0.80, 0.15, 0.0, 0.0, 0.50])


def make_scene(size=128, seed=0, noise=0.08, height_noise=0.05):
    """Return (irrg (3,H,W), ndsm (1,H,W), labels (H,W)) for a square scene."""
    rng = np.random.default_rng(seed)
    h = w = size
    lab = np.full((h, w), LOW_VEG, dtype=np.int64)
    yy, xx = np.mgrid[:h, :w]

    n_roads = max(1, size // 64)
    for _ in range(n_roads):
        width = int(rng.integers(6, 11))
        if rng.random() < 0.5:
            r = int(rng.integers(0, h - width))
            lab[r:r + width, :] = IMPERVIOUS
        else:
            c = int(rng.integers(0, w - width))
            lab[:, c:c + width] = IMPERVIOUS

    n_buildings = max(1, (size * size) // 2500)
    for _ in range(n_buildings):
        bh, bw = rng.integers(min(12, size // 4), min(28, size // 2), 2)
        r, c = rng.integers(0, h - bh), rng.integers(0, w - bw)
        lab[r:r + bh, c:c + bw] = BUILDING

    n_trees = max(2, (size * size) // 1500)
    for _ in range(n_trees):
        rad = rng.uniform(4, 9)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        lab[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2] = TREE

    road = np.argwhere(lab == IMPERVIOUS)
    n_cars = max(1, (size * size) // 3000)
    for _ in range(min(n_cars, len(road))):
        r, c = road[rng.integers(len(road))]
        ch, cw = (3, 6) if rng.random() < 0.5 else (6, 3)
        lab[r:r + ch, c:c + cw] = CAR

    for _ in range(max(1, size // 64)):
        ph, pw = rng.integers(4, 10, 2)
        r, c = rng.integers(0, h - ph), rng.integers(0, w - pw)
        lab[r:r + ph, c:c + pw] = BACKGROUND

    irrg = CLASS_COLORS[lab].transpose(2, 0, 1) + rng.normal(0.0, noise, (3, h, w))
    ndsm = CLASS_HEIGHTS[lab][None] + rng.normal(0.0, height_noise, (1, h, w))
    return np.clip(irrg, 0.0, 1.0), np.clip(ndsm, 0.0, 1.0), lab


def make_patches(n, size=64, seed=0, **kw):
    """`n` independent scenes as a list of ((4,H,W) input stack, (H,W) labels)."""
    out = []
    for i in range(n):
        irrg, ndsm, lab = make_scene(size, seed=seed * 100003 + i, **kw)
        out.append((np.concatenate([irrg, ndsm]), lab))
    return out


def two_class_denoise_task(size=32, flip_fraction=0.05, confidence=0.9, seed=0):
    """Clean binary mask plus unary probabilities with a fraction of confident flips.

    The clean mask splits the image into a left and a right half.  Returns
    (mask (H,W), probs (1,2,H,W)); every pixel is `confidence` confident and
    the flipped pixels are confidently wrong.
    """
    rng = np.random.default_rng(seed)
    mask = np.zeros((size, size), dtype=np.int64)
    mask[:, size // 2:] = 1
    noisy = mask.copy()
    n_flip = int(round(flip_fraction * size * size))
    idx = rng.choice(size * size, n_flip, replace=False)
    noisy.flat[idx] = 1 - noisy.flat[idx]
    probs = np.where(noisy[None] == np.arange(2)[:, None, None], confidence, 1.0 - confidence)
    return mask, probs[None].astype(np.float64)


def three_class_crf_instance(size=16, seed=0, colour_noise=0.03, mix=0.5):
    """Small piecewise-constant 3-class scene for CRF checks.

    Returns (image (3,H,W) in [0,1], probs (1,3,H,W), labels (H,W)).  The
    probabilities blend the true one-hot map with a random Dirichlet field,
    `mix` being the weight of the random part.
    """
    rng = np.random.default_rng(seed)
    lab = np.zeros((size, size), dtype=np.int64)
    cy, cx = rng.integers(size // 4, 3 * size // 4, 2)
    lab[:cy] = 1
    lab[cy:, cx:] = 2
    colours = rng.uniform(0, 1, (3, 3))
    image = np.clip(colours[lab] + rng.normal(0, colour_noise, (size, size, 3)), 0, 1).transpose(2, 0, 1)
    noise = rng.dirichlet(np.ones(3), (size, size)).transpose(2, 0, 1)
    probs = (1 - mix) * np.eye(3)[lab].transpose(2, 0, 1) + mix * noise
    return image, probs[None], lab
