"""Seeded synthetic data and image-patch ingestion.

Every generator is a pure function of its integer seed. Random streams are
counter-based Philox generators keyed by ``SeedSequence([seed, *stream])``,
so independent parts of an experiment (dictionary, codes, noise, sample
``j``) draw from disjoint, reproducible sub-streams.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .io import read_pgm
from .linops import DenseDictionary, RankOneConvDictionary, project_unit_norm

# sub-stream identifiers
STREAM_DICT, STREAM_CODES, STREAM_NOISE, STREAM_PERTURB, STREAM_INIT = 1, 2, 3, 4, 5


def make_rng(seed, *stream):
    """Philox generator for ``seed`` and an optional sub-stream path."""
    if seed < 0:
        raise ConfigError("seeds must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *stream])))


@dataclass
class SyntheticSpec:
    """Dimensions and distribution parameters of a synthetic dictionary problem."""

    m: int
    n: int
    T: int
    sparsity: float = 0.3
    code_var: float = 1.0
    noise_var: float = 0.1
    perturbation: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.m, self.n, self.T) <= 0:
            raise ConfigError("dimensions must be positive")
        if not 0 < self.sparsity <= 1:
            raise ConfigError("sparsity must lie in (0, 1]")
        if self.code_var < 0 or self.noise_var < 0 or self.perturbation < 0:
            raise ConfigError("variances and perturbation scale must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")


def gen_gaussian_dict(m, n, seed):
    """Gaussian ``m x n`` dictionary with unit-norm columns."""
    if m <= 0 or n <= 0:
        raise ConfigError("dimensions must be positive")
    D = make_rng(seed, STREAM_DICT).standard_normal((m, n))
    return project_unit_norm(DenseDictionary(D))


def gen_bernoulli_gaussian(n, T, sparsity, sigma, seed):
    """``n x T`` codes: each entry is nonzero with probability ``sparsity``,
    with value drawn from ``Normal(0, sigma^2)``."""
    if not 0 < sparsity <= 1:
        raise ConfigError("sparsity must lie in (0, 1]")
    rng = make_rng(seed, STREAM_CODES)
    mask = rng.random((n, T)) < sparsity
    return np.where(mask, sigma * rng.standard_normal((n, T)), 0.0)


def gen_observations(dictionary, codes, noise_var, seed):
    """``D Z + B`` with ``B`` i.i.d. ``Normal(0, noise_var)``."""
    clean = dictionary.apply(codes)
    if noise_var == 0:
        return clean
    if noise_var < 0:
        raise ConfigError("noise variance must be >= 0")
    noise = make_rng(seed, STREAM_NOISE).standard_normal(clean.shape)
    return clean + np.sqrt(noise_var) * noise


def perturb_dict(dictionary, scale, seed):
    """Add Gaussian noise of variance ``scale * var(D)`` and renormalize columns."""
    if scale < 0:
        raise ConfigError("perturbation scale must be >= 0")
    D = dictionary.data
    if scale == 0:
        return project_unit_norm(dictionary)
    std = np.sqrt(scale * D.var())
    noisy = D + std * make_rng(seed, STREAM_PERTURB).standard_normal(D.shape)
    return project_unit_norm(DenseDictionary(noisy), rng=make_rng(seed, STREAM_PERTURB, 1))


def gen_synthetic(spec):
    """Ground truth ``D``, codes ``Z``, observations ``Y`` and a perturbed ``D``."""
    D = gen_gaussian_dict(spec.m, spec.n, spec.seed)
    Z = gen_bernoulli_gaussian(spec.n, spec.T, spec.sparsity, np.sqrt(spec.code_var), spec.seed)
    Y = gen_observations(D, Z, spec.noise_var, spec.seed)
    D0 = perturb_dict(D, spec.perturbation, spec.seed)
    return D, Z, Y, D0


def random_dict_from_data(Y, n, seed):
    """Initial dictionary made of ``n`` random (normalized) columns of ``Y``."""
    rng = make_rng(seed, STREAM_INIT)
    idx = rng.choice(Y.shape[1], size=n, replace=n > Y.shape[1])
    return project_unit_norm(DenseDictionary(Y[:, idx]), rng=rng)


def random_gaussian_init(m, n, seed):
    """Random unit-norm Gaussian dictionary on the initialization stream."""
    D = make_rng(seed, STREAM_INIT).standard_normal((m, n))
    return project_unit_norm(DenseDictionary(D))


# -- rank-1 multichannel convolutional data ---------------------------------

def smooth_unit_patterns(t, n, rng):
    """``n`` temporal patterns of length ``t``: white noise smoothed by a
    4-tap moving average, scaled to unit norm. Shape ``(t, n)``."""
    raw = rng.standard_normal((t + 3, n))
    kernel = np.full(4, 0.25)
    v = np.stack([np.convolve(raw[:, k], kernel, mode="valid") for k in range(n)], axis=1)
    return v / np.linalg.norm(v, axis=0)


def gen_rank1_conv_data(S, t, n, T, spike_rate, noise_var, seed, amplitude=1.0):
    """Synthetic multichannel signal from rank-1 convolutional atoms.

    Returns
    -------
    dictionary : RankOneConvDictionary
        Unit spatial maps ``u`` (S, n) and smooth unit temporal patterns ``v`` (t, n).
    activations : ndarray (n, T - t + 1)
        Bernoulli(``spike_rate``) spikes with ``Normal(0, amplitude^2)`` heights.
    signal : ndarray (S, T)
        Forward model plus ``Normal(0, noise_var)`` noise.
    """
    if T < t:
        raise ShapeError("signal length must be >= kernel length", (t,), (T,))
    if not 0 <= spike_rate <= 1:
        raise ConfigError("spike rate must lie in [0, 1]")
    rng = make_rng(seed, STREAM_DICT)
    u = rng.standard_normal((S, n))
    u /= np.linalg.norm(u, axis=0)
    v = smooth_unit_patterns(t, n, rng)
    dictionary = RankOneConvDictionary(u, v)
    rng_z = make_rng(seed, STREAM_CODES)
    shape = (n, T - t + 1)
    spikes = rng_z.random(shape) < spike_rate
    activations = np.where(spikes, amplitude * rng_z.standard_normal(shape), 0.0)
    signal = dictionary.apply(activations)
    if noise_var > 0:
        signal = signal + np.sqrt(noise_var) * make_rng(seed, STREAM_NOISE).standard_normal(signal.shape)
    return dictionary, activations, signal


# -- image patches ------------------------------------------------------------

@dataclass
class PatchSet:
    """Flattened patches (one per column) of a noisy image and its clean source."""

    noisy: np.ndarray
    clean: np.ndarray
    positions: np.ndarray
    image_clean: np.ndarray
    image_noisy: np.ndarray
    patch_size: int


def extract_patches(image, size, positions):
    """Columns are the ``size x size`` patches at ``positions`` (row, col),
    flattened in row-major order."""
    out = np.empty((size * size, len(positions)))
    for j, (r, c) in enumerate(positions):
        out[:, j] = image[r:r + size, c:c + size].ravel()
    return out


def grid_positions(shape, size, stride=None):
    """Top-left corners of a regular patch grid (non-overlapping by default)."""
    stride = size if stride is None else stride
    rows = range(0, shape[0] - size + 1, stride)
    cols = range(0, shape[1] - size + 1, stride)
    return np.array([(r, c) for r in rows for c in cols], dtype=int).reshape(-1, 2)


def assemble_patches(patches, size, positions, shape):
    """Average overlapping patches back into an image of ``shape``.

    Pixels no patch covers are ``nan``.
    """
    acc = np.zeros(shape)
    cnt = np.zeros(shape)
    for j, (r, c) in enumerate(positions):
        acc[r:r + size, c:c + size] += patches[:, j].reshape(size, size)
        cnt[r:r + size, c:c + size] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cnt > 0, acc / cnt, np.nan)


def image_patches(image, patch_size, n_patches, noise_var, seed):
    """Noisy patches of a ``[0, 1]`` image at seeded random positions.

    ``n_patches=None`` takes every overlapping patch in raster order.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if patch_size > min(h, w):
        raise ShapeError("patch larger than image", (patch_size, patch_size), image.shape)
    noisy = image
    if noise_var > 0:
        noisy = image + np.sqrt(noise_var) * make_rng(seed, STREAM_NOISE).standard_normal(image.shape)
    if n_patches is None:
        pos = grid_positions(image.shape, patch_size, stride=1)
    else:
        rng = make_rng(seed, STREAM_CODES)
        pos = np.stack([rng.integers(0, h - patch_size + 1, n_patches),
                        rng.integers(0, w - patch_size + 1, n_patches)], axis=1)
    return PatchSet(extract_patches(noisy, patch_size, pos),
                    extract_patches(image, patch_size, pos),
                    pos, image, noisy, patch_size)


def load_pgm_patches(path, patch_size, n_patches, noise_var, seed):
    """Read an 8-bit binary PGM, scale it to ``[0, 1]`` and extract noisy patches."""
    img, maxval = read_pgm(path)
    return image_patches(img.astype(np.float64) / maxval, patch_size, n_patches,
                         noise_var, seed)


def synthetic_image(size=128, seed=0):
    """Deterministic piecewise-smooth test image in ``[0, 1]`` (discs and ramps)."""
    rng = make_rng(seed, STREAM_DICT)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = 0.3 + 0.3 * xx
    for _ in range(8):
        cy, cx = rng.random(2)
        rad = 0.05 + 0.2 * rng.random()
        val = rng.random()
        img = np.where((yy - cy) ** 2 + (xx - cx) ** 2 < rad ** 2, val, img)
    stripes = (np.sin(2 * np.pi * 6 * (xx + yy)) > 0) & (xx > 0.6) & (yy < 0.4)
    img = np.where(stripes, 0.9, img)
    return np.clip(img, 0.0, 1.0)
