import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from landseg.tiling import TileScheme, extract_training_patches, grid_offsets, tile_predict


def coordinate_fn(batch):
    """Per-patch local (row, col) as channels, plus a per-call patch id."""
    b, _, p, _ = batch.shape
    rows, cols = np.mgrid[:p, :p]
    out = np.empty((b, 3, p, p))
    out[:, 0], out[:, 1] = rows, cols
    out[:, 2] = batch[:, 0, p // 2, p // 2][:, None, None]
    return out


def test_scheme_constraint():
    assert TileScheme().margin == 64 and TileScheme().stride == 128
    with pytest.raises(ValueError, match="twice"):
        TileScheme(patch=200, core=128)
    with pytest.raises(ValueError, match="even"):
        TileScheme(patch=6, core=3)


def test_training_patches():
    img = np.arange(2 * 256 * 256, dtype=float).reshape(2, 256, 256)
    lab = np.arange(256 * 256).reshape(256, 256)
    assert len(extract_training_patches(img, lab)) == 4
    patches = extract_training_patches(np.zeros((1, 300, 300)), np.zeros((300, 300)))
    assert len(patches) == 9 and patches[-1][2] == (172, 172)
    for ip, lp, (r, c) in extract_training_patches(img, lab, 100, 70):
        assert np.array_equal(lp, lab[r:r + 100, c:c + 100]) and np.array_equal(ip, img[:, r:r + 100, c:c + 100])


def test_grid_offsets():
    assert grid_offsets(300, 128, 128) == [0, 128, 172]
    with pytest.raises(ValueError):
        grid_offsets(100, 128, 128)


def test_constant_predictions():
    out = tile_predict(np.zeros((3, 150, 190)), lambda b: np.full((len(b), 2, 256, 256), 0.25))
    assert out.shape == (1, 2, 150, 190) and np.all(out == 0.25)


def test_single_patch_center_is_original_footprint(rng):
    img = rng.normal(size=(1, 128, 128))
    out = tile_predict(img, lambda b: b.copy())
    np.testing.assert_array_equal(out[0], img)


def test_bad_predict_fn():
    with pytest.raises(ValueError, match="predict_fn"):
        tile_predict(np.zeros((1, 128, 128)), lambda b: np.zeros((len(b), 2, 128, 128)))


def check_ownership(h, w, scheme):
    image = np.zeros((1, h, w))
    out, cov = tile_predict(image, coordinate_fn, scheme, batch_size=3, return_coverage=True)
    assert out.shape == (1, 3, h, w)
    assert np.all(cov == 1)
    rows, cols = np.mgrid[:h, :w]
    m, core = scheme.margin, scheme.core
    # a pixel owned by the patch at origin (r0, c0) sits at local (m + r - r0, m + c - c0)
    np.testing.assert_array_equal(out[0, 0], m + rows % core)
    np.testing.assert_array_equal(out[0, 1], m + cols % core)


@given(st.integers(100, 400), st.integers(100, 400))
def test_single_ownership_and_center_provenance(h, w):
    check_ownership(h, w, TileScheme())


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 8))
def test_extent_preserved_small(h, w, half):
    scheme = TileScheme(patch=4 * half, core=2 * half)
    out = tile_predict(np.ones((2, h, w)), lambda b: b[:, :1] * 2, scheme)
    assert out.shape == (1, 1, h, w) and np.all(out == 2)


def test_input_passthrough_is_identity(rng):
    img = rng.normal(size=(2, 77, 91))
    out = tile_predict(img, lambda b: b.copy(), TileScheme(32, 16))
    np.testing.assert_array_equal(out[0], img)
