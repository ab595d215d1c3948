"""Evaluation metrics: recovery scores, gradient angles, PSNR/SNR, loss scans."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ShapeError
from .linops import ConvDictionary, DenseDictionary, RankOneConvDictionary


class NoAngle:
    """Returned by :func:`cosine_angle` when a gradient is zero."""

    def __repr__(self):
        return "NoAngle"

    def __bool__(self):
        return False


class Indeterminate:
    """Returned by :func:`relative_angle_difference` when ``<g1, g*>`` is 1."""

    def __repr__(self):
        return "Indeterminate"

    def __bool__(self):
        return False


NO_ANGLE = NoAngle()
INDETERMINATE = Indeterminate()


def _unit_rows(a):
    # a contiguous copy makes every row reduce in the same order
    a = np.ascontiguousarray(a, dtype=np.float64)
    nrm = np.sqrt(np.einsum("ij,ij->i", a, a, optimize=False))[:, None]
    return np.divide(a, nrm, out=np.zeros_like(a), where=nrm > 0)


def assignment_score(C):
    """``max_sigma (1/n) sum_i |C[sigma(i), i]|`` by the Hungarian method."""
    C = np.abs(np.asarray(C, dtype=np.float64))
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeError("square cost matrix", None, C.shape)
    if C.size == 0:
        return 1.0
    rows, cols = linear_sum_assignment(-C)
    # fsum is exactly rounded, so the score does not depend on atom order
    return math.fsum(C[rows, cols]) / C.shape[0]


def correlation_matrix(atoms_a, atoms_b):
    """``C[i, j] = <a_i, b_j>`` for unit-normalized atoms given one per row.

    Each entry is reduced in the same order whatever its position, so
    permuting atoms permutes ``C`` bit for bit.
    """
    return np.einsum("ik,jk->ij", _unit_rows(atoms_a), _unit_rows(atoms_b), optimize=False)


def shift_correlation(a, b):
    """Max absolute normalized circular cross-correlation between rows of ``a`` and ``b``.

    ``a`` is ``(n, t)`` and ``b`` is ``(p, t)``; returns ``(n, p)``.
    """
    a, b = _unit_rows(a), _unit_rows(b)
    fa = np.fft.rfft(a, axis=1)
    fb = np.fft.rfft(b, axis=1)
    t = a.shape[1]
    cc = np.fft.irfft(fa[:, None, :] * np.conj(fb[None, :, :]), n=t, axis=2)
    return np.abs(cc).max(axis=2)


def shift_correlation_2d(a, b):
    """2-D analogue of :func:`shift_correlation` for ``(n, t, t)`` kernels."""
    a = a / np.maximum(np.linalg.norm(a.reshape(len(a), -1), axis=1), 1e-300)[:, None, None]
    b = b / np.maximum(np.linalg.norm(b.reshape(len(b), -1), axis=1), 1e-300)[:, None, None]
    fa = np.fft.fft2(a)
    fb = np.fft.fft2(b)
    cc = np.real(np.fft.ifft2(fa[:, None] * np.conj(fb[None])))
    return np.abs(cc).reshape(len(a), len(b), -1).max(axis=2)


@dataclass
class Rank1Score:
    """Recovery of rank-1 atoms, scored separately on spatial and temporal factors."""

    u: float
    v: float
    assignment: np.ndarray
    u_per_atom: np.ndarray = None
    v_per_atom: np.ndarray = None

    @property
    def mean(self):
        return 0.5 * (self.u + self.v)


def rank1_recovery(est, ref):
    """Match atoms on ``|corr(u)| + shift-max |corr(v)|``, report both factor scores."""
    if est.n_atoms != ref.n_atoms:
        raise ShapeError("atom counts", (ref.n_atoms,), (est.n_atoms,))
    cu = np.abs(correlation_matrix(est.u.T, ref.u.T))
    cv = shift_correlation(est.v.T, ref.v.T)
    rows, cols = linear_sum_assignment(-(cu + cv))
    n = est.n_atoms
    order = np.argsort(rows)
    return Rank1Score(math.fsum(cu[rows, cols]) / n, math.fsum(cv[rows, cols]) / n,
                      cols[order], cu[rows, cols][order], cv[rows, cols][order])


def recovery_score(dict_a, dict_b):
    """Sign- and permutation-invariant recovery score in ``[0, 1]``.

    Dense atoms are compared by absolute correlation. Convolutional kernels
    use the maximal correlation over circular shifts. Rank-1 atoms return
    the mean of the spatial and temporal scores (see :func:`rank1_recovery`).
    Plain arrays are read as dense ``(m, n)`` dictionaries.
    """
    if isinstance(dict_a, np.ndarray):
        dict_a = DenseDictionary(dict_a)
    if isinstance(dict_b, np.ndarray):
        dict_b = DenseDictionary(dict_b)
    if dict_a.n_atoms != dict_b.n_atoms:
        raise ShapeError("atom counts", (dict_b.n_atoms,), (dict_a.n_atoms,))
    if isinstance(dict_a, RankOneConvDictionary):
        return rank1_recovery(dict_a, dict_b).mean
    if isinstance(dict_a, ConvDictionary):
        if dict_a.spatial_ndim == 1:
            C = shift_correlation(dict_a.kernels, dict_b.kernels)
        else:
            C = shift_correlation_2d(dict_a.kernels, dict_b.kernels)
        return assignment_score(C)
    return assignment_score(correlation_matrix(dict_a.atoms(), dict_b.atoms()))


def _flat(g):
    if isinstance(g, (tuple, list)):
        return np.concatenate([np.ravel(p) for p in g])
    if hasattr(g, "params"):
        return np.concatenate([np.ravel(p) for p in g.params])
    return np.ravel(np.asarray(g, dtype=np.float64))


def cosine_angle(g, g_ref):
    """``Tr(g^T g*) / (||g|| ||g*||)``, or ``NO_ANGLE`` if either is zero."""
    a, b = _flat(g), _flat(g_ref)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return NO_ANGLE
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def relative_angle_difference(g1, g2, g_ref):
    """``(<g2, g*> - <g1, g*>) / (1 - <g1, g*>)``; positive when ``g2`` is the better direction."""
    c1, c2 = cosine_angle(g1, g_ref), cosine_angle(g2, g_ref)
    if c1 is NO_ANGLE or c2 is NO_ANGLE:
        return NO_ANGLE
    den = 1.0 - c1
    if den < 1e-12:
        return INDETERMINATE
    return (c2 - c1) / den


def psnr(reference, estimate, peak=1.0):
    """``10 log10(peak^2 / MSE)`` in dB; ``inf`` for a perfect estimate."""
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if reference.shape != estimate.shape:
        raise ShapeError("estimate", reference.shape, estimate.shape)
    if not peak > 0:
        raise ValueError("peak must be > 0")
    mse = float(np.mean((reference - estimate) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak ** 2 / mse)


def snr(signal_var, noise_var):
    """``10 log10(signal_var / noise_var)`` in dB."""
    if not (signal_var > 0 and noise_var > 0):
        raise ValueError("variances must be > 0")
    return 10.0 * np.log10(signal_var / noise_var)


@dataclass
class LineScan:
    t: np.ndarray
    loss: np.ndarray
    projected: bool = False


def loss_line_scan(dict_a, dict_b, data, cfg, n_points=21, L=None):
    """Unrolled loss ``F_N`` along the raw segment ``(1 - t) A + t B``.

    The interpolated dictionaries are not projected onto the unit sphere.
    ``L`` fixes the step constant; by default it is recomputed at every point.
    """
    from .linops import lincomb
    from .sparse_coding import lasso_cost, solve

    if type(dict_a) is not type(dict_b):
        raise TypeError("both dictionaries must have the same form")
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    ts = np.linspace(0.0, 1.0, n_points)
    losses = np.empty(n_points)
    for i, t in enumerate(ts):
        if t == 0:
            d = dict_a
        elif t == 1:
            d = dict_b
        else:
            d = lincomb(dict_a, dict_b, 1.0 - t, t)
        z, _ = solve(d, data, cfg, L=L)
        losses[i] = lasso_cost(d, z, data, cfg.lmbd)
    return LineScan(ts, losses, projected=False)
