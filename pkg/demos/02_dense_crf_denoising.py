"""
Dense CRF denoising
===================

A two-class mask with 5% confidently flipped pixels is cleaned up by
mean-field inference.  The messages are Gaussian filters over pixel
positions, computed either exactly or on a permutohedral lattice.
"""

import time

import numpy as np

from landseg.densecrf import CrfParams, PermutohedralLattice, gaussian_filter_bruteforce, meanfield_infer, \
    unary_from_probs
from landseg.synthetic import two_class_denoise_task

mask, probs = two_class_denoise_task(size=32, flip_fraction=0.05, confidence=0.9, seed=0)
print("unary accuracy:", np.mean(probs[0].argmax(axis=0) == mask))

# Smoothness kernel only: the image colours play no role here.
params = CrfParams(w1=0, w2=3, sigma_gamma=3, iterations=10)
image = np.zeros((3, 32, 32))
for method in ("exact", "lattice"):
    t = time.time()
    _, labels = meanfield_infer(unary_from_probs(probs), image, params, method=method)
    print(f"{method:7s} CRF accuracy: {np.mean(labels == mask):.4f}  ({time.time() - t:.2f}s)")

# How close is the lattice to the exact filter on a 5-D bilateral feature?
rng = np.random.default_rng(0)
rows, cols = np.mgrid[:16, :16]
colours = rng.uniform(0, 255, (1, 3)) + rng.normal(0, 5, (256, 3))
features = np.concatenate([np.stack([rows.ravel(), cols.ravel()], 1) / 8.0, colours / 13.0], axis=1)
values = rng.dirichlet(np.ones(3), 256)
exact = gaussian_filter_bruteforce(values, features)
approx = PermutohedralLattice(features).filter(values)
print("lattice relative error:", np.linalg.norm(approx - exact) / np.linalg.norm(exact))
