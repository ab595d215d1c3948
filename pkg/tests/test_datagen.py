import numpy as np
import pytest

from udl.datagen import (
    SyntheticSpec,
    assemble_patches,
    gen_bernoulli_gaussian,
    gen_gaussian_dict,
    gen_observations,
    gen_rank1_conv_data,
    gen_synthetic,
    grid_positions,
    image_patches,
    load_pgm_patches,
    make_rng,
    perturb_dict,
    random_dict_from_data,
    synthetic_image,
)
from udl.errors import ConfigError, ShapeError
from udl.io import write_pgm


def test_generators_are_pure_functions_of_the_seed():
    a = gen_synthetic(SyntheticSpec(5, 7, 20, seed=3))
    b = gen_synthetic(SyntheticSpec(5, 7, 20, seed=3))
    for x, y in zip(a, b):
        xa = x.data if hasattr(x, "data") else x
        ya = y.data if hasattr(y, "data") else y
        np.testing.assert_array_equal(xa, ya)
    c = gen_synthetic(SyntheticSpec(5, 7, 20, seed=4))
    assert not np.array_equal(a[2], c[2])


def test_streams_are_disjoint():
    assert make_rng(1, 2).random() != make_rng(1, 3).random()
    assert make_rng(1, 2).random() == make_rng(1, 2).random()
    with pytest.raises(ConfigError):
        make_rng(-1)


def test_dictionary_columns_unit_norm():
    D = gen_gaussian_dict(30, 50, 0)
    np.testing.assert_allclose(np.linalg.norm(D.data, axis=0), 1.0, rtol=1e-12)


def test_bernoulli_gaussian_statistics():
    Z = gen_bernoulli_gaussian(50, 20_000, 0.3, 2.0, seed=1)
    frac = np.mean(Z != 0)
    assert abs(frac - 0.3) < 0.01
    assert abs(Z[Z != 0].std() - 2.0) < 0.03


def test_observation_noise_variance():
    D = gen_gaussian_dict(20, 10, 0)
    Z = np.zeros((10, 5000))
    Y = gen_observations(D, Z, 0.1, seed=2)
    assert abs(Y.var() - 0.1) < 0.005
    np.testing.assert_array_equal(gen_observations(D, Z, 0.0, seed=2), 0.0)


def test_perturbation_variance_and_renormalization():
    D = gen_gaussian_dict(30, 50, 0)
    P = perturb_dict(D, 0.5, 0)
    np.testing.assert_allclose(np.linalg.norm(P.data, axis=0), 1.0, rtol=1e-12)
    # before renormalization the noise has variance 0.5 var(D)
    cos = np.abs(np.sum(D.data * P.data, axis=0))
    expected = 1.0 / np.sqrt(1.0 + 0.5 * D.data.var() * 30)
    assert abs(cos.mean() - expected) < 0.05
    np.testing.assert_allclose(perturb_dict(D, 0.0, 0).data, D.data)
    with pytest.raises(ConfigError):
        perturb_dict(D, -1.0, 0)


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(0, 2, 2)
    with pytest.raises(ConfigError):
        SyntheticSpec(2, 2, 2, sparsity=0.0)
    with pytest.raises(ConfigError):
        SyntheticSpec(2, 2, 2, noise_var=-1)


def test_random_init_from_data():
    Y = np.random.default_rng(0).standard_normal((4, 10))
    D = random_dict_from_data(Y, 3, seed=0)
    np.testing.assert_allclose(np.linalg.norm(D.data, axis=0), 1.0)
    for col in D.data.T:
        assert np.any(np.all(np.isclose(Y / np.linalg.norm(Y, axis=0), col[:, None]), axis=0))


def test_rank1_data_is_forward_model_plus_noise():
    d, Z, X = gen_rank1_conv_data(4, 6, 2, 100, 0.05, 0.0, seed=1)
    np.testing.assert_allclose(X, d.apply(Z))
    np.testing.assert_allclose(np.linalg.norm(d.u, axis=0), 1.0)
    np.testing.assert_allclose(np.linalg.norm(d.v, axis=0), 1.0)
    assert Z.shape == (2, 95)
    with pytest.raises(ShapeError):
        gen_rank1_conv_data(4, 6, 2, 5, 0.05, 0.0, seed=1)


class TestPatches:
    def test_grid_reassembly_is_exact(self):
        img = synthetic_image(32, seed=0)
        pos = grid_positions(img.shape, 8, stride=4)
        p = image_patches(img, 8, None, 0.0, 0)
        patches = p.clean[:, :0]
        from udl.datagen import extract_patches
        patches = extract_patches(img, 8, pos)
        np.testing.assert_allclose(assemble_patches(patches, 8, pos, img.shape), img)

    def test_noisy_patches_seeded(self):
        img = synthetic_image(16, seed=1)
        a = image_patches(img, 4, 30, 0.01, seed=5)
        b = image_patches(img, 4, 30, 0.01, seed=5)
        np.testing.assert_array_equal(a.noisy, b.noisy)
        assert a.noisy.shape == (16, 30)
        assert not np.array_equal(a.noisy, a.clean)

    def test_patch_larger_than_image(self):
        with pytest.raises(ShapeError):
            image_patches(np.zeros((4, 4)), 5, 1, 0.0, 0)

    def test_pgm_round_trip(self, tmp_path):
        img = (synthetic_image(20, seed=2) * 255).round()
        path = tmp_path / "img.pgm"
        write_pgm(path, img)
        p = load_pgm_patches(path, 5, 10, 0.0, seed=0)
        np.testing.assert_allclose(p.image_clean, img / 255)

    def test_synthetic_image_range(self):
        img = synthetic_image(64, seed=3)
        assert img.shape == (64, 64) and img.min() >= 0 and img.max() <= 1
