import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from landseg.densecrf import (
    CrfParams,
    energy,
    gaussian_filter_bruteforce,
    kernel_eval,
    meanfield_infer,
    pixel_features,
    potts,
    unary_from_probs,
)
from landseg.synthetic import CAR, TREE, three_class_crf_instance, two_class_denoise_task


def test_unary_values():
    u = unary_from_probs(np.array([1.0, 0.5, 1 / 6, 0.0]))
    assert u[0] == 0
    assert u[1] == pytest.approx(math.log(2))
    assert u[2] == pytest.approx(math.log(6))
    assert u[3] == pytest.approx(-math.log(1e-12))


def test_unary_rejects_non_finite():
    with pytest.raises(ValueError):
        unary_from_probs(np.array([np.nan]))


def test_kernel_at_zero_distance():
    p = CrfParams(w1=2.0, w2=0.5)
    f = np.array([3.0, 4.0, 10.0, 20.0, 30.0])
    assert kernel_eval(f, f, p) == pytest.approx(2.5)


def test_kernel_decays():
    p = CrfParams()
    assert kernel_eval([0, 0, 1, 1, 1], [1e4, 0, 1, 1, 1], p) == pytest.approx(0, abs=1e-300)


def test_kernel_at_sigma_alpha_sqrt2():
    p = CrfParams(w1=1.5, w2=0.0)
    d = p.sigma_alpha * math.sqrt(2)
    assert kernel_eval([0, 0, 5, 5, 5], [d, 0, 5, 5, 5], p) == pytest.approx(1.5 * math.exp(-1), rel=1e-12)


def test_potts():
    assert potts(CAR, CAR) == 0 and potts(CAR, TREE) == 1
    assert all(potts(a, b) == potts(b, a) for a in range(6) for b in range(6))


def test_params_validation():
    with pytest.raises(ValueError):
        CrfParams(w1=-1)
    with pytest.raises(ValueError):
        CrfParams(sigma_beta=0)
    with pytest.raises(ValueError):
        CrfParams(iterations=0)


def test_bruteforce_identical_features():
    v = np.arange(5.0)[:, None]
    out = gaussian_filter_bruteforce(v, np.zeros((5, 3)))
    np.testing.assert_allclose(out[:, 0], v.sum() - v[:, 0])


def test_bruteforce_vanishing_bandwidth():
    f = np.arange(4.0)[:, None]
    out = gaussian_filter_bruteforce(np.ones((4, 1)), f, bandwidths=1e-3)
    np.testing.assert_allclose(out, 0, atol=1e-300)


def test_bruteforce_collinear_hand_values():
    sigma = 2.0
    f = np.array([[0.0], [sigma], [2 * sigma]])
    out = gaussian_filter_bruteforce(np.array([[1.0], [10.0], [100.0]]), f, bandwidths=sigma)
    e1, e2 = math.exp(-0.5), math.exp(-2.0)
    np.testing.assert_allclose(out[:, 0], [10 * e1 + 100 * e2, e1 + 100 * e1, e2 + 10 * e1], rtol=1e-12)


def test_bruteforce_guard():
    with pytest.raises(ValueError, match="limit"):
        gaussian_filter_bruteforce(np.zeros((11, 1)), np.zeros((11, 2)), max_pixels=10)


@given(st.integers(0, 2**32 - 1))
def test_bruteforce_kernel_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(7, 3))
    # filtering basis vectors gives the kernel matrix column by column
    k = gaussian_filter_bruteforce(np.eye(7), f)
    np.testing.assert_allclose(k, k.T, rtol=1e-12, atol=0)
    assert np.all(np.diag(k) == 0)


def pixel_pair_features(image):
    pos, colour = pixel_features(image)
    return np.concatenate([pos, colour], axis=1)


def test_energy_unary_only(rng):
    probs = rng.dirichlet(np.ones(3), (4, 4)).transpose(2, 0, 1)[None]
    u = unary_from_probs(probs)
    labels = rng.integers(0, 3, (4, 4))
    image = rng.uniform(size=(3, 4, 4))
    expected = np.take_along_axis(u[0], labels[None], 0).sum()
    assert energy(labels, u, image, CrfParams(w1=0, w2=0)) == pytest.approx(expected, rel=1e-12)


def test_energy_uniform_labels_have_no_pairwise_term(rng):
    u = unary_from_probs(rng.dirichlet(np.ones(2), (3, 3)).transpose(2, 0, 1)[None])
    labels = np.ones((3, 3), dtype=int)
    image = rng.uniform(size=(3, 3, 3))
    assert energy(labels, u, image) == pytest.approx(u[0, 1].sum(), rel=1e-12)


def test_energy_two_pixel_hand_value():
    params = CrfParams()
    image = np.array([[[0.2, 0.6]], [[0.1, 0.1]], [[0.9, 0.3]]])  # (3, 1, 2)
    probs = np.array([[[[0.7, 0.4]], [[0.3, 0.6]]]])
    u = unary_from_probs(probs)
    labels = np.array([[0, 1]])
    f = pixel_pair_features(image)
    expected = -math.log(0.7) - math.log(0.6) + 2 * kernel_eval(f[0], f[1], params)
    assert energy(labels, u, image, params) == pytest.approx(expected, rel=1e-12)


def test_zero_weights_keep_unary_argmax(rng):
    probs = rng.dirichlet(np.ones(4), (9, 7)).transpose(2, 0, 1)[None]
    image = rng.uniform(size=(3, 9, 7))
    for method in ("lattice", "exact"):
        _, labels = meanfield_infer(unary_from_probs(probs), image, CrfParams(w1=0, w2=0, iterations=3), method)
        np.testing.assert_array_equal(labels, probs[0].argmax(axis=0))


def test_marginals_are_probabilities():
    image, probs, _ = three_class_crf_instance(seed=1)
    for iters in (1, 2, 5):
        q, _ = meanfield_infer(unary_from_probs(probs), image, CrfParams(iterations=iters))
        assert np.all(q >= 0)
        np.testing.assert_allclose(q.sum(axis=1), 1, atol=1e-9)


def test_inference_is_deterministic():
    image, probs, _ = three_class_crf_instance(seed=2)
    a = meanfield_infer(unary_from_probs(probs), image)
    b = meanfield_infer(unary_from_probs(probs), image)
    assert a[0].tobytes() == b[0].tobytes() and np.array_equal(a[1], b[1])


@given(st.integers(0, 2**32 - 1), st.integers(-4, 4))
def test_positive_scaling_keeps_first_iteration_argmax(seed, k):
    # for fixed starting marginals the first update's exponent scales by c;
    # powers of two keep that scaling exact in floating point
    rng = np.random.default_rng(seed)
    c = 2.0 ** k
    probs = rng.dirichlet(np.ones(3), (6, 6)).transpose(2, 0, 1)[None]
    image = rng.uniform(size=(3, 6, 6))
    u = unary_from_probs(probs)
    q0 = probs
    _, a = meanfield_infer(u, image, CrfParams(w1=2.0, w2=1.0, iterations=1), "exact", init=q0)
    _, b = meanfield_infer(c * u, image, CrfParams(w1=2.0 * c, w2=1.0 * c, iterations=1), "exact", init=q0)
    np.testing.assert_array_equal(a, b)


def test_denoising_improves_accuracy():
    mask, probs = two_class_denoise_task()
    params = CrfParams(w1=0, w2=3, sigma_gamma=3, iterations=10)
    before = np.mean(probs[0].argmax(axis=0) == mask)
    for method in ("lattice", "exact"):
        _, labels = meanfield_infer(unary_from_probs(probs), np.zeros((3, 32, 32)), params, method)
        assert np.mean(labels == mask) > before


def test_lattice_and_exact_labels_agree():
    for seed in range(3):
        image, probs, _ = three_class_crf_instance(seed=seed)
        u = unary_from_probs(probs)
        _, a = meanfield_infer(u, image)
        _, b = meanfield_infer(u, image, method="exact")
        assert np.mean(a == b) >= 0.98


def test_include_ndsm_needs_four_bands(rng):
    u = np.zeros((1, 2, 4, 4))
    with pytest.raises(ValueError, match="4 bands"):
        meanfield_infer(u, rng.uniform(size=(3, 4, 4)), include_ndsm=True)
    meanfield_infer(u, rng.uniform(size=(4, 4, 4)), include_ndsm=True, method="exact")


def test_shape_errors(rng):
    with pytest.raises(ValueError, match="does not match"):
        meanfield_infer(np.zeros((1, 2, 4, 4)), rng.uniform(size=(3, 4, 5)))
    with pytest.raises(ValueError, match="method"):
        meanfield_infer(np.zeros((1, 2, 4, 4)), rng.uniform(size=(3, 4, 4)), method="fast")
    with pytest.raises(ValueError, match="non-finite"):
        meanfield_infer(np.full((1, 2, 4, 4), np.inf), rng.uniform(size=(3, 4, 4)))
