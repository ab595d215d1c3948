"""Lasso sparse coding: soft-thresholding, ISTA, FISTA and support tracking.

All solvers start from ``z_0 = 0`` and work on any dictionary form of
:mod:`udl.linops`. A layer with step ``alpha`` is the proximal gradient step

    z_{n+1} = ST_{lambda * alpha}(z_n - alpha * D^T (D z_n - y)),

so learned per-layer steps enter both the gradient step and the threshold.
FISTA returns the proximal iterate ``x_N`` (the sparse one), not the
extrapolated point.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeError
from .linops import DenseDictionary, lipschitz as _lipschitz

DIVERGENCE_GUARD = 1e8
ALGORITHMS = ("ista", "fista")


def soft_threshold(v, mu):
    """Componentwise ``sign(v) * max(|v| - mu, 0)``."""
    if np.any(np.asarray(mu) < 0):
        raise ValueError("threshold must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    # v - clip(v) equals sign(v) * max(|v| - mu, 0) bit for bit, with one pass less
    return v - np.clip(v, -mu, mu)


@dataclass
class UnrollConfig:
    """Unrolled solver configuration.

    Parameters
    ----------
    n_iters : int
        Number of layers ``N``.
    lmbd : float
        Regularization ``lambda > 0``.
    algorithm : {'ista', 'fista'}
    steps : array of shape (n_iters,), optional
        Learned per-layer steps. ``None`` uses the fixed step ``1 / L``.
    truncation : int, optional
        Back-propagation depth ``K``; ``None`` means full depth (``K = N``).
    """

    n_iters: int
    lmbd: float
    algorithm: str = "fista"
    steps: np.ndarray = None
    truncation: int = None

    def __post_init__(self):
        if self.n_iters < 0:
            raise ValueError("n_iters must be >= 0")
        if not self.lmbd > 0:
            raise ValueError("lmbd must be > 0")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.steps is not None:
            self.steps = np.asarray(self.steps, dtype=np.float64)
            if self.steps.shape != (self.n_iters,):
                raise ShapeError("learned steps", (self.n_iters,), self.steps.shape)
            if not np.all(self.steps > 0):
                raise ValueError("learned steps must be strictly positive")
        if self.truncation is not None and not 0 <= self.truncation <= self.n_iters:
            raise ValueError("truncation depth must satisfy 0 <= K <= N")

    @property
    def depth(self):
        """Effective back-propagation depth ``K``."""
        return self.n_iters if self.truncation is None else self.truncation

    def layer_steps(self, L):
        if self.steps is not None:
            return self.steps
        return np.full(self.n_iters, 1.0 / L)

    def replace(self, **changes):
        kw = dict(n_iters=self.n_iters, lmbd=self.lmbd, algorithm=self.algorithm,
                  steps=self.steps, truncation=self.truncation)
        kw.update(changes)
        return UnrollConfig(**kw)


@dataclass
class IterateTrace:
    """Per-iteration record of a solver run.

    ``costs[n]`` is ``F(z_n)`` for ``n = 0..N``; ``momentum[n]`` is ``t_n``
    (FISTA only); ``iterates`` holds ``z_n`` (and ``extrapolated`` the FISTA
    points the gradient steps were taken at) when recording is enabled.
    """

    costs: list = field(default_factory=list)
    momentum: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    extrapolated: list = field(default_factory=list)

    def supports(self, tol=0.0):
        return [support(z, tol) for z in self.iterates]


def lasso_cost(dictionary, z, y, lmbd, per_sample=False):
    """``F(z, D) = 1/2 ||D z - y||^2 + lambda ||z||_1``.

    With ``per_sample`` the value is returned per sample (last axis for dense
    codes, leading batch axis for convolutional ones).
    """
    r = dictionary.apply(z) - y
    if not per_sample:
        return 0.5 * float(np.vdot(r, r)) + lmbd * float(np.abs(z).sum())
    if isinstance(dictionary, DenseDictionary):
        return 0.5 * (r * r).sum(axis=0) + lmbd * np.abs(z).sum(axis=0)
    ax_r = tuple(range(1, r.ndim))
    ax_z = tuple(range(1, z.ndim))
    return 0.5 * (r * r).sum(axis=ax_r) + lmbd * np.abs(z).sum(axis=ax_z)


def lambda_max(dictionary, y, per_sample=False):
    """``||D^T y||_inf``: the smallest ``lambda`` giving ``z* = 0``."""
    c = np.abs(dictionary.adjoint(y))
    if not per_sample:
        return float(c.max())
    if isinstance(dictionary, DenseDictionary):
        return c.max(axis=0) if c.ndim > 1 else c.max()
    return c.reshape(c.shape[0], -1).max(axis=1)


def support(z, tol=0.0):
    """Indices with ``|z_i| > tol``; one index array per column for a matrix."""
    if tol < 0:
        raise ValueError("tol must be >= 0")
    z = np.asarray(z)
    if z.ndim == 1:
        return np.flatnonzero(np.abs(z) > tol)
    return [np.flatnonzero(np.abs(col) > tol) for col in z.T]


def _guard(z, n):
    peak = max(z.max(), -z.min()) if z.size else 0.0
    if not np.isfinite(peak) or peak > DIVERGENCE_GUARD:
        raise DivergenceError(n, float(peak))


def single_code_shape(dictionary, signal_shape):
    """Code shape of one sample (batch axes dropped)."""
    code = dictionary.code_shape(tuple(signal_shape))
    if isinstance(dictionary, DenseDictionary):
        return code[:1]
    p = getattr(dictionary, "spatial_ndim", 1)
    return code[-(p + 1):]


def resolve_lipschitz(dictionary, y, L=None):
    """Return ``L`` if given, else a power-iteration estimate of ``||D||^2``."""
    if L is not None:
        return float(L)
    est = _lipschitz(dictionary, code_shape=single_code_shape(dictionary, np.shape(y)))
    if est.is_zero:
        raise ValueError("zero dictionary: step 1/L is undefined")
    return est.value


def smooth_gradient(dictionary, y):
    """Return ``z -> D^T (D z - y)`` as a fresh array.

    Dense dictionaries use the precomputed Gram matrix ``D^T D`` and ``D^T y``.
    """
    if isinstance(dictionary, DenseDictionary):
        D = dictionary.data
        gram = D.T @ D
        Dty = D.T @ y

        def grad(z):
            g = gram @ z
            g -= Dty
            return g
        return grad
    return lambda z: dictionary.adjoint(dictionary.apply(z) - y)


def prox_layer(z, grad_f, step, mu):
    """``ST_mu(z - step * grad_f(z))`` computed with in-place buffers."""
    v = grad_f(z)
    v *= -step
    v += z
    v -= np.clip(v, -mu, mu)
    return v


def momentum_point(x, x_prev, beta):
    """``x + beta (x - x_prev)``."""
    if beta == 0:
        return x
    z = x - x_prev
    z *= beta
    z += x
    return z


def _run(dictionary, y, cfg, L, trace, record_iterates, fista):
    y = np.asarray(y, dtype=np.float64)
    grad_f = smooth_gradient(dictionary, y)
    if cfg.steps is None:
        alphas = np.full(cfg.n_iters, 1.0 / resolve_lipschitz(dictionary, y, L))
    else:
        alphas = cfg.steps
    z = np.zeros(dictionary.code_shape(y.shape))
    x_prev = z
    t = 1.0
    tr = IterateTrace() if trace else None
    if tr is not None:
        tr.costs.append(lasso_cost(dictionary, z, y, cfg.lmbd))
        if fista:
            tr.momentum.append(t)
        if record_iterates:
            tr.iterates.append(z)
    for n in range(cfg.n_iters):
        a = alphas[n]
        x = prox_layer(z, grad_f, a, cfg.lmbd * a)
        if fista:
            t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
            if record_iterates and tr is not None:
                tr.extrapolated.append(z)
            z = momentum_point(x, x_prev, (t - 1.0) / t_next)
            x_prev, t = x, t_next
        else:
            z = x
        _guard(x, n + 1)
        if tr is not None:
            tr.costs.append(lasso_cost(dictionary, x, y, cfg.lmbd))
            if fista:
                tr.momentum.append(t)
            if record_iterates:
                tr.iterates.append(x)
    out = x_prev if fista else z
    return out, tr


def ista(dictionary, y, cfg, L=None, trace=True, record_iterates=False):
    """Run ``cfg.n_iters`` ISTA iterations from zero.

    Parameters
    ----------
    dictionary : dictionary object
    y : ndarray
        Observations, shaped as the dictionary form expects.
    cfg : UnrollConfig
    L : float, optional
        Lipschitz constant of ``D^T D``; estimated by power iteration when
        omitted (unused with learned steps).
    trace : bool
        Record the cost at every iteration.
    record_iterates : bool
        Also keep every iterate in the trace.

    Returns
    -------
    z : ndarray
    trace : IterateTrace or None
    """
    return _run(dictionary, y, cfg, L, trace, record_iterates, fista=False)


def fista(dictionary, y, cfg, L=None, trace=True, record_iterates=False):
    """Run ``cfg.n_iters`` FISTA iterations from ``z_0 = x_0 = 0``, ``t_0 = 1``.

    Same interface as :func:`ista`. Returns the proximal iterate ``x_N``.
    """
    return _run(dictionary, y, cfg, L, trace, record_iterates, fista=True)


def solve(dictionary, y, cfg, L=None, trace=False, record_iterates=False):
    """Dispatch to :func:`ista` or :func:`fista` according to ``cfg``."""
    fn = fista if cfg.algorithm == "fista" else ista
    return fn(dictionary, y, cfg, L=L, trace=trace, record_iterates=record_iterates)


def _polish_column(D, y, z, lmbd):
    S = np.flatnonzero(z)
    if S.size == 0:
        return z
    DS = D[:, S]
    s = np.sign(z[S])
    try:
        zs = np.linalg.solve(DS.T @ DS, DS.T @ y - lmbd * s)
    except np.linalg.LinAlgError:
        return z
    if np.any(np.sign(zs) != s):
        return z
    cand = np.zeros_like(z)
    cand[S] = zs
    corr = D.T @ (y - D @ cand)
    off = np.setdiff1d(np.arange(z.size), S)
    if off.size and np.max(np.abs(corr[off])) > lmbd * (1 + 1e-9):
        return z
    return cand


def reference_solution(dictionary, y, lmbd, n_iters=10_000, L=None, polish=True):
    """Long FISTA run approximating ``z*``.

    For dense dictionaries the result is polished by solving the optimality
    conditions on the identified support and sign pattern; the polished point
    is kept only when it satisfies the Lasso optimality conditions.
    """
    cfg = UnrollConfig(n_iters=n_iters, lmbd=lmbd, algorithm="fista")
    z, _ = fista(dictionary, y, cfg, L=L, trace=False)
    if polish and isinstance(dictionary, DenseDictionary):
        D = dictionary.data
        y = np.asarray(y, dtype=np.float64)
        if z.ndim == 1:
            z = _polish_column(D, y, z, lmbd)
        else:
            z = np.stack([_polish_column(D, y[:, j], z[:, j], lmbd)
                          for j in range(z.shape[1])], axis=1)
    return z




def exact_codes(dictionary, y, lmbd, z0=None, max_iters=1000, block=50, L=None):
    """Lasso solutions certified by the optimality conditions (dense only).

    With a warm start ``z0`` (e.g. the codes of a nearby dictionary) every
    column is first polished on the support and signs of ``z0``. The other
    columns run plain FISTA from zero; every ``block`` iterations the columns
    whose iterate polishes to a certified solution leave the active set. A
    column never certified keeps its FISTA iterate after ``max_iters``
    iterations, so the result is never less accurate than FISTA itself.

    Returns
    -------
    z : ndarray
    certified : ndarray of bool
        Per column, True where ``z`` satisfies the optimality conditions.
    """
    if not isinstance(dictionary, DenseDictionary):
        raise TypeError("exact_codes supports dense dictionaries only")
    D = dictionary.data
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    Y = y[:, None] if single else y
    n, T = D.shape[1], Y.shape[1]
    Z = np.zeros((n, T))
    ok = np.zeros(T, bool)
    corr0 = np.max(np.abs(D.T @ Y), axis=0)
    ok[corr0 <= lmbd] = True  # z = 0 is optimal

    gram_full = D.T @ D
    DtY_full = D.T @ Y
    failed = {}

    def certify(cols, cand):
        """Polish ``cand`` (one column per entry of ``cols``); return the mask of failures."""
        signs = np.sign(cand)
        P = np.zeros_like(cand)
        tried = np.zeros(len(cols), bool)
        for i, j in enumerate(cols):
            s = signs[:, i]
            key = s.tobytes()
            if not np.any(s) or failed.get(j) == key:
                continue
            S = np.flatnonzero(s)
            try:
                P[S, i] = np.linalg.solve(gram_full[np.ix_(S, S)],
                                          DtY_full[S, j] - lmbd * s[S])
            except np.linalg.LinAlgError:
                failed[j] = key
                continue
            tried[i] = True
        corr = DtY_full[:, cols] - gram_full @ P
        good = tried & np.all(np.sign(P) == signs, axis=0) \
            & (np.max(np.abs(corr), axis=0) <= lmbd * (1 + 1e-9))
        for i in np.flatnonzero(tried & ~good):
            failed[cols[i]] = signs[:, i].tobytes()
        Z[:, cols[good]] = P[:, good]
        ok[cols[good]] = True
        return ~good

    if z0 is not None:
        rem = np.flatnonzero(~ok)
        certify(rem, np.array(z0, float).reshape(n, T)[:, rem])
    rem = np.flatnonzero(~ok)
    if rem.size:
        a = 1.0 / resolve_lipschitz(dictionary, Y, L)
        gram, DtY = gram_full, DtY_full[:, rem]
        x_prev = np.zeros((n, rem.size))
        z, t = x_prev, 1.0
        for it in range(1, max_iters + 1):
            v = gram @ z
            v -= DtY
            v *= -a
            v += z
            v -= np.clip(v, -lmbd * a, lmbd * a)
            _guard(v, it)
            t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
            z = momentum_point(v, x_prev, (t - 1.0) / t_next)
            x_prev, t = v, t_next
            if it % block == 0 or it == max_iters:
                Z[:, rem] = x_prev
                if it == max_iters:
                    break
                keep = certify(rem, x_prev)
                if not keep.all():
                    rem, x_prev, z, DtY = rem[keep], x_prev[:, keep], z[:, keep], DtY[:, keep]
                    if not rem.size:
                        break
    z = Z[:, 0] if single else Z
    return z, (ok[0] if single else ok)
