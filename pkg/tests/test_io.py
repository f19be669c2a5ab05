import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from landseg import io
from landseg import tensor as T
from landseg.nn import build_network, toy_spec


def test_png_round_trip_exact(tmp_path, rng):
    for c in (1, 3):
        x = rng.integers(0, 256, (1, c, 9, 11)) / 255.0
        io.save_raster(x, tmp_path / f"x{c}.png")
        y = io.load_raster(tmp_path / f"x{c}.png")
        assert y.shape == (1, c, 9, 11)
        np.testing.assert_array_equal(y, x)


def test_endpoints(tmp_path):
    Image.fromarray(np.array([[0, 255]], dtype=np.uint8)).save(tmp_path / "e.png")
    assert io.load_raster(tmp_path / "e.png").ravel().tolist() == [0.0, 1.0]


def test_rt01_raster(tmp_path, rng):
    x = rng.uniform(size=(1, 2, 3, 4))
    io.save_raster(x, tmp_path / "x.rt01")
    np.testing.assert_array_equal(io.load_raster(tmp_path / "x.rt01"), x)


def test_bad_rasters(tmp_path):
    with pytest.raises(io.DataError, match="unsupported"):
        io.load_raster(tmp_path / "x.tif")
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(io.DataError, match="decode"):
        io.load_raster(tmp_path / "bad.png")
    Image.fromarray(np.zeros((2, 2), dtype=np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(io.DataError):
        io.load_raster(tmp_path / "deep.png")
    (tmp_path / "bad.rt01").write_bytes(b"XXXX" + bytes(36))
    with pytest.raises(io.DataError, match="magic"):
        io.load_raster(tmp_path / "bad.rt01")


def test_building_colour():
    assert tuple(io.labels_to_colors(np.array([[1]]))[0, 0]) == (0, 0, 255)


def test_palette_is_injective():
    assert len({tuple(c) for c in io.PALETTE}) == len(io.PALETTE) == 6


def test_off_by_one_colour_rejected():
    rgb = io.labels_to_colors(np.ones((3, 4), dtype=int))
    rgb[2, 1] = (0, 0, 254)
    with pytest.raises(io.DataError, match=r"row 2, col 1"):
        io.colors_to_labels(rgb)


def test_label_png_round_trip(tmp_path, rng):
    lab = rng.integers(0, 6, (7, 8))
    io.save_labels(lab, tmp_path / "l.png")
    np.testing.assert_array_equal(io.load_labels(tmp_path / "l.png"), lab)


@given(st.integers(0, 2**32 - 1))
def test_colour_round_trip(seed):
    lab = np.random.default_rng(seed).integers(0, 6, (5, 6))
    np.testing.assert_array_equal(io.colors_to_labels(io.labels_to_colors(lab)), lab)


def test_one_hot():
    oh = io.one_hot(np.array([[2]]), 6)
    assert oh.shape == (1, 6, 1, 1) and oh[0, :, 0, 0].tolist() == [0, 0, 1, 0, 0, 0]
    with pytest.raises(ValueError):
        io.one_hot(np.array([[6]]), 6)


@given(st.integers(0, 2**32 - 1))
def test_one_hot_properties(seed):
    lab = np.random.default_rng(seed).integers(0, 6, (4, 5))
    oh = io.one_hot(lab, 6)
    assert np.all(oh.sum(axis=1) == 1)
    np.testing.assert_array_equal(oh[0].argmax(axis=0), lab)


def test_stack_inputs(rng):
    irrg, ndsm = rng.uniform(size=(1, 3, 64, 64)), rng.uniform(size=(1, 1, 64, 64))
    x = io.stack_inputs(irrg, ndsm)
    assert x.shape == (1, 4, 64, 64) and x[0, 3].tobytes() == ndsm[0, 0].tobytes()
    with pytest.raises(ValueError, match="differ"):
        io.stack_inputs(irrg, ndsm[:, :, :32])


def test_no_ndsm_feeds_three_channel_network(rng):
    x = io.stack_inputs(rng.uniform(size=(1, 3, 16, 16)))
    net = build_network(toy_spec(in_channels=3), seed=0)
    assert net.forward(x).shape == (1, 6, 16, 16)


def write_tile(d, name, rng, size=16, ndsm=True):
    irrg = rng.integers(0, 256, (1, 3, size, size)) / 255.0
    io.save_raster(irrg, d / f"{name}_irrg.png")
    if ndsm:
        io.save_raster(rng.integers(0, 256, (1, 1, size, size)) / 255.0, d / f"{name}_ndsm.png")
    io.save_labels(rng.integers(0, 6, (size, size)), d / f"{name}_lab.png")
    return io.TileRecord(f"{name}_irrg.png", f"{name}_ndsm.png" if ndsm else "-", f"{name}_lab.png", "train")


def test_manifest_round_trip_and_relative_paths(tmp_path, rng):
    recs = [write_tile(tmp_path, "a", rng), write_tile(tmp_path, "b", rng, ndsm=False)]
    io.write_manifest(recs, tmp_path / "m.tsv")
    with open(tmp_path / "m.tsv", "a") as fh:
        fh.write("# comment\n\n")
    back = io.read_manifest(tmp_path / "m.tsv")
    assert [r.split for r in back] == ["train", "train"]
    assert back[0].image == str(tmp_path / "a_irrg.png") and back[1].ndsm == "-"
    x, lab = io.load_tile(back[0])
    assert x.shape == (1, 4, 16, 16) and lab.shape == (16, 16)
    assert io.load_tile(back[1], use_ndsm=False)[0].shape == (1, 3, 16, 16)
    with pytest.raises(io.DataError, match="no nDSM"):
        io.load_tile(back[1])


def test_manifest_errors(tmp_path):
    (tmp_path / "m.tsv").write_text("a\tb\tc\n")
    with pytest.raises(io.DataError, match="4 tab-separated"):
        io.read_manifest(tmp_path / "m.tsv")
    (tmp_path / "m.tsv").write_text("a\tb\tc\tval\n")
    with pytest.raises(io.DataError, match="split"):
        io.read_manifest(tmp_path / "m.tsv")


def test_rt01_checkpoint_file_is_tensor(tmp_path):
    T.save(np.zeros((1, 1, 1, 3)), tmp_path / "z.rt01")
    assert io.load_raster(tmp_path / "z.rt01").shape == (1, 1, 1, 3)
