"""Dictionary operators: dense, convolutional and rank-1 multichannel convolutional.

Every dictionary exposes the same small surface, used by the solvers and the
outer-loop optimizers:

* ``apply(code)`` computes the synthesis ``D z``,
* ``adjoint(signal)`` computes ``D^T r``,
* ``param_gradient(a, w)`` returns the gradient of ``<a, D w>`` with respect to
  the dictionary parameters, as a tuple of arrays shaped like ``params``,
* ``params`` / ``with_params`` give access to the raw parameter arrays.

Shapes
------
DenseDictionary
    ``data`` is ``(m, n)``; codes are ``(n,)`` or ``(n, T)``, signals ``(m,)``
    or ``(m, T)`` (one sample per column).
ConvDictionary
    ``kernels`` is ``(n, t)`` (1-D) or ``(n, t, t)`` (2-D); codes are
    ``(..., n, T - t + 1)`` and signals ``(..., T)`` (same with two spatial
    axes in 2-D). Leading axes are batch axes.
RankOneConvDictionary
    ``u`` is ``(S, n)`` and ``v`` is ``(t, n)``; codes are ``(..., n, T - t + 1)``
    and signals ``(..., S, T)``.

Convolutions use the *valid* convention: the synthesis is the full
convolution of the activations with the kernels, the adjoint is the valid
cross-correlation.
"""

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import ShapeError

# kernels longer than this use FFT convolutions
FFT_THRESHOLD = 32


def _frozen(x):
    x = np.array(x, dtype=np.float64, copy=True)
    x.setflags(write=False)
    return x


def _check_finite(name, x):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")


# -- 1-D and 2-D convolution kernels -------------------------------------

def _conv_full(z, d):
    """Full 1-D convolution along the last axis, broadcasting leading axes."""
    L, t = z.shape[-1], d.shape[-1]
    lead = np.broadcast_shapes(z.shape[:-1], d.shape[:-1])
    if t > FFT_THRESHOLD:
        zb = np.broadcast_to(z, lead + (L,))
        db = d.reshape((1,) * (len(lead) - d.ndim + 1) + d.shape)
        return fftconvolve(zb, db, mode="full", axes=-1)
    out = np.zeros(lead + (L + t - 1,))
    for tau in range(t):
        out[..., tau:tau + L] += d[..., tau, None] * z
    return out


def _corr_valid(r, d):
    """Valid 1-D cross-correlation ``out[j] = sum_tau d[tau] r[j + tau]``."""
    T, t = r.shape[-1], d.shape[-1]
    L = T - t + 1
    lead = np.broadcast_shapes(r.shape[:-1], d.shape[:-1])
    if t > FFT_THRESHOLD:
        rb = np.broadcast_to(r, lead + (T,))
        db = d[..., ::-1].reshape((1,) * (len(lead) - d.ndim + 1) + d.shape)
        return fftconvolve(rb, db, mode="valid", axes=-1)
    out = np.zeros(lead + (L,))
    for tau in range(t):
        out += d[..., tau, None] * r[..., tau:tau + L]
    return out


def _conv_full2(z, d):
    h, w = z.shape[-2:]
    t1, t2 = d.shape[-2:]
    lead = np.broadcast_shapes(z.shape[:-2], d.shape[:-2])
    if max(t1, t2) > FFT_THRESHOLD:
        zb = np.broadcast_to(z, lead + (h, w))
        db = d.reshape((1,) * (len(lead) - d.ndim + 2) + d.shape)
        return fftconvolve(zb, db, mode="full", axes=(-2, -1))
    out = np.zeros(lead + (h + t1 - 1, w + t2 - 1))
    for a in range(t1):
        for b in range(t2):
            out[..., a:a + h, b:b + w] += d[..., a, b, None, None] * z
    return out


def _corr_valid2(r, d):
    H, W = r.shape[-2:]
    t1, t2 = d.shape[-2:]
    h, w = H - t1 + 1, W - t2 + 1
    lead = np.broadcast_shapes(r.shape[:-2], d.shape[:-2])
    if max(t1, t2) > FFT_THRESHOLD:
        rb = np.broadcast_to(r, lead + (H, W))
        db = d[..., ::-1, ::-1].reshape((1,) * (len(lead) - d.ndim + 2) + d.shape)
        return fftconvolve(rb, db, mode="valid", axes=(-2, -1))
    out = np.zeros(lead + (h, w))
    for a in range(t1):
        for b in range(t2):
            out += d[..., a, b, None, None] * r[..., a:a + h, b:b + w]
    return out


# -- dictionary types -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class DenseDictionary:
    """Dense dictionary ``D`` of shape ``(m, n)`` (one atom per column)."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 2:
            raise ShapeError("dense dictionary", (None, None), data.shape)
        _check_finite("dictionary", data)
        object.__setattr__(self, "data", data)

    @property
    def n_atoms(self):
        return self.data.shape[1]

    @property
    def n_features(self):
        return self.data.shape[0]

    @property
    def params(self):
        return (self.data,)

    def with_params(self, params):
        return DenseDictionary(params[0])

    def atoms(self):
        """Return atoms stacked on the first axis, shape ``(n, m)``."""
        return self.data.T

    def code_shape(self, signal_shape):
        if signal_shape[0] != self.n_features:
            raise ShapeError("signal", (self.n_features,) + tuple(signal_shape[1:]),
                             signal_shape)
        return (self.n_atoms,) + tuple(signal_shape[1:])

    def apply(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[0] != self.n_atoms:
            raise ShapeError(f"code for dictionary {self.data.shape}",
                             (self.n_atoms,) + z.shape[1:], z.shape)
        return self.data @ z

    def adjoint(self, r):
        r = np.asarray(r, dtype=np.float64)
        if r.shape[0] != self.n_features:
            raise ShapeError(f"signal for dictionary {self.data.shape}",
                             (self.n_features,) + r.shape[1:], r.shape)
        return self.data.T @ r

    def param_gradient(self, a, w):
        if a.ndim == 1:
            return (np.outer(a, w),)
        return (a @ w.T,)


@dataclass(frozen=True, eq=False)
class ConvDictionary:
    """Convolutional dictionary with ``n`` kernels of shape ``(t,)`` or ``(t, t)``."""

    kernels: np.ndarray

    def __post_init__(self):
        k = _frozen(self.kernels)
        if k.ndim not in (2, 3):
            raise ShapeError("convolutional kernels", (None, None), k.shape)
        _check_finite("kernels", k)
        object.__setattr__(self, "kernels", k)

    @property
    def n_atoms(self):
        return self.kernels.shape[0]

    @property
    def spatial_ndim(self):
        return self.kernels.ndim - 1

    @property
    def kernel_shape(self):
        return self.kernels.shape[1:]

    @property
    def params(self):
        return (self.kernels,)

    def with_params(self, params):
        return ConvDictionary(params[0])

    def atoms(self):
        return self.kernels.reshape(self.n_atoms, -1)

    def code_shape(self, signal_shape):
        p = self.spatial_ndim
        sp = tuple(signal_shape[-p:])
        if any(s < t for s, t in zip(sp, self.kernel_shape)):
            raise ShapeError("signal shorter than kernel", self.kernel_shape, sp)
        valid = tuple(s - t + 1 for s, t in zip(sp, self.kernel_shape))
        return tuple(signal_shape[:-p]) + (self.n_atoms,) + valid

    def _check_code(self, z):
        p = self.spatial_ndim
        if z.ndim < p + 1 or z.shape[-p - 1] != self.n_atoms:
            raise ShapeError(f"code for kernels {self.kernels.shape}",
                             (self.n_atoms, *(None,) * p), z.shape)

    def apply(self, z):
        z = np.asarray(z, dtype=np.float64)
        self._check_code(z)
        if self.spatial_ndim == 1:
            return _conv_full(z, self.kernels).sum(axis=-2)
        return _conv_full2(z, self.kernels).sum(axis=-3)

    def adjoint(self, r):
        r = np.asarray(r, dtype=np.float64)
        p = self.spatial_ndim
        if r.ndim < p:
            raise ShapeError("signal", (None,) * p, r.shape)
        self.code_shape(r.shape)
        if p == 1:
            return _corr_valid(r[..., None, :], self.kernels)
        return _corr_valid2(r[..., None, :, :], self.kernels)

    def param_gradient(self, a, w):
        p = self.spatial_ndim
        a = a[..., None, :] if p == 1 else a[..., None, :, :]
        g = np.zeros_like(self.kernels)
        if p == 1:
            L = w.shape[-1]
            for tau in range(self.kernel_shape[0]):
                prod = a[..., tau:tau + L] * w
                g[:, tau] = prod.reshape(-1, self.n_atoms, L).sum(axis=(0, 2))
        else:
            h, wd = w.shape[-2:]
            t1, t2 = self.kernel_shape
            for i in range(t1):
                for j in range(t2):
                    prod = a[..., i:i + h, j:j + wd] * w
                    g[:, i, j] = prod.reshape(-1, self.n_atoms, h * wd).sum(axis=(0, 2))
        return (g,)


@dataclass(frozen=True, eq=False)
class RankOneConvDictionary:
    """Multichannel convolutional dictionary with rank-1 atoms ``u_k v_k^T``."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u, v = _frozen(self.u), _frozen(self.v)
        if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
            raise ShapeError("rank-1 factors u (S, n) and v (t, n)", u.shape, v.shape)
        _check_finite("u", u)
        _check_finite("v", v)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def n_atoms(self):
        return self.u.shape[1]

    @property
    def n_channels(self):
        return self.u.shape[0]

    @property
    def kernel_size(self):
        return self.v.shape[0]

    @property
    def params(self):
        return (self.u, self.v)

    def with_params(self, params):
        return RankOneConvDictionary(params[0], params[1])

    def atoms(self):
        """Materialized atoms ``u_k v_k^T`` flattened, shape ``(n, S * t)``."""
        return np.einsum("sk,tk->kst", self.u, self.v).reshape(self.n_atoms, -1)

    def code_shape(self, signal_shape):
        if len(signal_shape) < 2 or signal_shape[-2] != self.n_channels:
            raise ShapeError(f"signal for {self.n_channels} channels",
                             (self.n_channels, None), signal_shape)
        if signal_shape[-1] < self.kernel_size:
            raise ShapeError("signal shorter than kernel", (self.kernel_size,),
                             signal_shape[-1:])
        return (tuple(signal_shape[:-2])
                + (self.n_atoms, signal_shape[-1] - self.kernel_size + 1))

    def apply(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim < 2 or z.shape[-2] != self.n_atoms:
            raise ShapeError(f"code for rank-1 dictionary with {self.n_atoms} atoms",
                             (self.n_atoms, None), z.shape)
        w = _conv_full(z, self.v.T)
        return np.einsum("sk,...kt->...st", self.u, w)

    def adjoint(self, r):
        r = np.asarray(r, dtype=np.float64)
        self.code_shape(r.shape)
        a = np.einsum("sk,...st->...kt", self.u, r)
        return _corr_valid(a, self.v.T)

    def param_gradient(self, a, w):
        L = w.shape[-1]
        # batch axes are flattened so that einsum sums over them
        a = a.reshape((-1,) + a.shape[-2:])
        w = w.reshape((-1,) + w.shape[-2:])
        conv = _conv_full(w, self.v.T)
        gu = np.einsum("bst,bkt->sk", a, conv)
        b = np.einsum("sk,bst->bkt", self.u, a)
        gv = np.empty_like(self.v)
        for tau in range(self.kernel_size):
            gv[tau] = np.einsum("bkj,bkj->k", b[..., tau:tau + L], w)
        return (gu, gv)


# -- module-level services ------------------------------------------------

def apply(dictionary, code):
    """Synthesis ``D z`` for any dictionary form."""
    return dictionary.apply(code)


def adjoint(dictionary, residual):
    """Adjoint ``D^T r`` for any dictionary form."""
    return dictionary.adjoint(residual)


def param_gradient(dictionary, a, w):
    """Gradient of ``<a, D w>`` with respect to the dictionary parameters."""
    return dictionary.param_gradient(np.asarray(a, float), np.asarray(w, float))


def lincomb(a, b, ca=1.0, cb=1.0):
    """Parameter-wise ``ca * a + cb * b`` for two dictionaries of the same form."""
    return a.with_params([ca * pa + cb * pb for pa, pb in zip(a.params, b.params)])


def step(dictionary, grads, size):
    """Dictionary with parameters ``params - size * grads`` (not projected)."""
    return dictionary.with_params([p - size * g for p, g in zip(dictionary.params, grads)])


def params_inner(ga, gb):
    """Inner product of two parameter tuples."""
    return float(sum(np.vdot(a, b) for a, b in zip(ga, gb)))


def as_matrix(dictionary, code_shape):
    """Materialize the operator as a dense matrix acting on flattened codes.

    Meant for small instances (tests, oracles): costs one ``apply`` per code
    entry.
    """
    size = int(np.prod(code_shape))
    cols = []
    for i in range(size):
        e = np.zeros(size)
        e[i] = 1.0
        cols.append(np.ravel(dictionary.apply(e.reshape(code_shape))))
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class LipschitzEstimate:
    """Power-iteration estimate of the largest eigenvalue of ``D^T D``."""

    value: float
    iterations_used: int
    relative_change_at_stop: float

    @property
    def is_zero(self):
        return self.value == 0.0


def lipschitz(dictionary, tol=1e-6, max_iters=100, code_shape=None, seed=0):
    """Estimate ``L = ||D||_2^2`` by power iteration on ``D^T D``.

    Parameters
    ----------
    dictionary : dictionary object
    tol : float
        Relative change of the eigenvalue estimate below which iterations stop.
        The returned value is inflated by ``1 + tol``.
    max_iters : int
    code_shape : tuple, optional
        Shape of a single code. Required for convolutional forms, where the
        operator norm depends on the signal length.
    seed : int
        Seed of the (deterministic) starting vector.

    Returns
    -------
    LipschitzEstimate
        ``value == 0`` flags the zero dictionary, for which ``1 / L`` is not a
        valid step.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if code_shape is None:
        if not isinstance(dictionary, DenseDictionary):
            raise ValueError("code_shape is required for convolutional dictionaries")
        code_shape = (dictionary.n_atoms,)
    if all(not np.any(p) for p in dictionary.params):
        return LipschitzEstimate(0.0, 0, 0.0)
    rng = np.random.Generator(np.random.Philox(seed))
    x = rng.standard_normal(code_shape)
    x /= np.linalg.norm(x)
    lam, change, it = 0.0, np.inf, 0
    for it in range(1, max_iters + 1):
        dx = dictionary.apply(x)
        new = float(np.vdot(dx, dx))
        x = dictionary.adjoint(dx)
        nrm = np.linalg.norm(x)
        if new == 0.0 or nrm == 0.0:
            # start vector in the null space; restart along a fresh direction
            x = rng.standard_normal(code_shape)
            x /= np.linalg.norm(x)
            continue
        x /= nrm
        change = abs(new - lam) / new
        lam = new
        if change < tol:
            break
    return LipschitzEstimate(lam * (1 + tol), it, change)


def _unit_columns(mat, rng):
    """Normalize the rows of ``mat`` (atoms on the first axis) in place."""
    norms = np.linalg.norm(mat, axis=1)
    replaced = np.flatnonzero(norms == 0)
    for k in replaced:
        fresh = rng.standard_normal(mat.shape[1])
        mat[k] = fresh / np.linalg.norm(fresh)
        norms[k] = 1.0
    mat /= norms[:, None]
    return replaced


def project_unit_norm(dictionary, rng=None, return_replaced=False):
    """Project every atom onto the unit sphere.

    Dense and convolutional atoms are divided by their norm. Rank-1 atoms get
    a unit spatial map ``u_k``; the temporal pattern ``v_k`` absorbs the scale
    of ``u_k`` and is then clipped to the unit ball. Zero atoms are replaced
    by random unit atoms drawn from ``rng``; their indices are returned when
    ``return_replaced`` is set.
    """
    if rng is None:
        rng = np.random.Generator(np.random.Philox(0))
    if isinstance(dictionary, DenseDictionary):
        atoms = np.array(dictionary.data.T)
        replaced = _unit_columns(atoms, rng)
        out = DenseDictionary(atoms.T)
    elif isinstance(dictionary, ConvDictionary):
        k = np.array(dictionary.kernels)
        flat = k.reshape(k.shape[0], -1)
        replaced = _unit_columns(flat, rng)
        out = ConvDictionary(flat.reshape(k.shape))
    elif isinstance(dictionary, RankOneConvDictionary):
        u, v = np.array(dictionary.u), np.array(dictionary.v)
        nu = np.linalg.norm(u, axis=0)
        replaced = np.flatnonzero(nu == 0)
        for k in replaced:
            fresh = rng.standard_normal(u.shape[0])
            u[:, k] = fresh / np.linalg.norm(fresh)
            nu[k] = 1.0
        u /= nu
        v *= nu
        nv = np.linalg.norm(v, axis=0)
        v /= np.maximum(nv, 1.0)
        out = RankOneConvDictionary(u, v)
    else:
        raise TypeError(f"unsupported dictionary type {type(dictionary).__name__}")
    if return_replaced:
        return out, replaced
    return out
