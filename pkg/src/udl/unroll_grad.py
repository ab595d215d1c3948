"""Weak Jacobians of unrolled ISTA/FISTA and the gradient estimators built on them.

For a dense dictionary ``D`` (``m x n``) and a single observation ``y`` the
Jacobian of the code with respect to the row ``D_l`` is the ``n x n`` matrix
``J_l = dz / dD_l``. It obeys the masked affine recursion

    J_l <- 1_{|z_next| > 0} * (J_l - alpha (D_l z^T + (D_l^T z - y_l) I + D^T D J_l))

which is co-propagated with the iterates (forward mode). For FISTA the
momentum combination is linear, so the Jacobians of the extrapolated points
use the same coefficients as the iterates.

Three gradient estimates of ``G(D) = F(z*(D), D)`` are provided:

* :func:`grad_reference` -- ``g* = (D z* - y) z*^T`` at a long-run solution,
* :func:`grad_am` -- ``g1_N = (D z_N - y) z_N^T``,
* :func:`grad_unrolled` -- ``g2_N = g1_N + J_N^+ (D^T (D z_N - y) + lambda sign(z_N))``.

:func:`grad_ddl` computes ``g2_N`` for batches and any dictionary form by
running the adjoint of the same recursion backwards; it never materializes
the Jacobians and is what the training loops use.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, SingularSupportError
from .linops import DenseDictionary
from .sparse_coding import (
    reference_solution,
    resolve_lipschitz,
    momentum_point,
    prox_layer,
    smooth_gradient,
    soft_threshold,
    _guard,
)

COND_MAX = 1e10


def _dense(dictionary):
    if isinstance(dictionary, DenseDictionary):
        return dictionary.data
    if isinstance(dictionary, np.ndarray):
        return dictionary
    raise TypeError("Jacobian propagation is implemented for dense dictionaries")


@dataclass
class JacobianStack:
    """Per-row weak Jacobians ``values[l] = dz / dD_l``, shape ``(m, n, n)``.

    ``values[l, i, k]`` is ``dz_i / dD_{lk}``. ``origin`` is the iteration at
    which propagation started from zero (``N - K``).
    """

    values: np.ndarray
    algorithm: str = "ista"
    origin: int = 0

    @property
    def stable(self):
        return bool(np.all(np.isfinite(self.values)))

    def row_errors(self, other, ord="fro"):
        """Norm of ``J_l - other_l`` for every row ``l``."""
        diff = self.values - (other.values if isinstance(other, JacobianStack) else other)
        if ord == "fro":
            return np.sqrt((diff * diff).sum(axis=(1, 2)))
        return np.linalg.norm(diff, ord=ord, axis=(1, 2))

    def error(self, other, ord="fro"):
        """Mean over rows of ``||J_l - other_l||``."""
        return float(np.mean(self.row_errors(other, ord)))

    def vjp(self, v):
        """Adjoint product ``J^+ v``: row ``l`` is ``J_l^T v``."""
        return np.einsum("lik,i->lk", self.values, v)


@dataclass
class GradientEstimate:
    """Gradient of the outer loss, as a tuple shaped like the dictionary params."""

    params: tuple
    kind: str
    n_iters: int = 0
    truncation: int = 0
    step_grad: np.ndarray = None
    codes: np.ndarray = None
    code_gram: np.ndarray = None

    @property
    def matrix(self):
        return self.params[0]

    @property
    def finite(self):
        return all(np.all(np.isfinite(p)) for p in self.params)

    def sq_norm(self):
        return float(sum(np.vdot(p, p) for p in self.params))


@dataclass
class ResidualReport:
    """Operator norm of ``R(J, S)`` with the support sets it was evaluated on."""

    norm: float
    support_union: np.ndarray
    support_current: np.ndarray = None
    support_star: np.ndarray = None
    extra_support: np.ndarray = None
    b_value: float = None


# -- forward-mode Jacobians -----------------------------------------------

def _affine_term(D, z, y):
    """``D_l z^T + (D_l^T z - y_l) I`` for every row, shape ``(m, n, n)``."""
    r = D @ z - y
    out = D[:, :, None] * z[None, None, :]
    idx = np.arange(D.shape[1])
    out[:, idx, idx] += r[:, None]
    return out


def jacobian_step(J, z_next, z_prev, dictionary, y, step, gram=None):
    """One masked affine Jacobian update.

    Parameters
    ----------
    J : JacobianStack or ndarray (m, n, n)
        Jacobian of ``z_prev``.
    z_next : ndarray (n,)
        Iterate produced by the layer; its support gives the mask.
    z_prev : ndarray (n,)
        Point at which the gradient step was taken.
    dictionary : DenseDictionary or ndarray
    y : ndarray (m,)
    step : float
        Step used by the layer (``1 / L`` or a learned step).
    gram : ndarray (n, n), optional
        Precomputed ``D^T D``.

    Returns
    -------
    ndarray (m, n, n)
    """
    D = _dense(dictionary)
    Jv = J.values if isinstance(J, JacobianStack) else J
    m, n = D.shape
    if Jv.shape != (m, n, n):
        raise ShapeError("Jacobian stack", (m, n, n), Jv.shape)
    if np.shape(z_next) != (n,) or np.shape(z_prev) != (n,):
        raise ShapeError("iterates", (n,), np.shape(z_next))
    if np.shape(y) != (m,):
        raise ShapeError("observation", (m,), np.shape(y))
    if gram is None:
        gram = D.T @ D
    new = Jv - step * (_affine_term(D, z_prev, y) + np.matmul(gram, Jv))
    new *= (np.abs(z_next) > 0)[None, :, None]
    return new


def _momentum(n_iters):
    """``beta_n = (t_n - 1) / t_{n+1}`` for ``n = 0..N-1``."""
    t, out = 1.0, np.empty(n_iters)
    for i in range(n_iters):
        t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        out[i] = (t - 1.0) / t_next
        t = t_next
    return out


def propagate_jacobian(dictionary, y, cfg, L=None, callback=None):
    """Run the solver and co-propagate the Jacobian over the last ``K`` layers.

    The solver runs ``N - K`` iterations without Jacobians; the Jacobian then
    starts from zero and follows the iterates for the remaining ``K`` layers.

    Parameters
    ----------
    dictionary : DenseDictionary
    y : ndarray (m,)
    cfg : UnrollConfig
    L : float, optional
    callback : callable, optional
        Called as ``callback(n, z_n, J_n)`` after each layer ``n >= N - K + 1``
        with the output iterate and its Jacobian (an ``(m, n, n)`` array).

    Returns
    -------
    z : ndarray (n,)
    J : JacobianStack
    """
    D = _dense(dictionary)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ShapeError("single observation", (D.shape[0],), y.shape)
    dictionary = DenseDictionary(D) if not isinstance(dictionary, DenseDictionary) else dictionary
    N, K = cfg.n_iters, cfg.depth
    if cfg.steps is None:
        alphas = np.full(N, 1.0 / resolve_lipschitz(dictionary, y, L))
    else:
        alphas = cfg.steps
    fista = cfg.algorithm == "fista"
    betas = _momentum(N) if fista else np.zeros(N)
    m, n = D.shape
    gram = D.T @ D
    Dty = D.T @ y
    z = np.zeros(n)
    x_prev = z
    Jx = np.zeros((m, n, n))
    Jz = Jx
    start = N - K
    for it in range(N):
        a = alphas[it]
        x = soft_threshold(z - a * (gram @ z - Dty), cfg.lmbd * a)
        _guard(x, it + 1)
        if it >= start:
            Jx_new = jacobian_step(Jz, x, z, D, y, a, gram=gram)
            Jz = (1 + betas[it]) * Jx_new - betas[it] * Jx
            Jx = Jx_new
            if callback is not None:
                callback(it + 1, x, Jx)
        z = x + betas[it] * (x - x_prev)
        x_prev = x
    return x_prev, JacobianStack(Jx, cfg.algorithm, start)


def jacobian_fixed_point(dictionary, z_star, y, cond_max=COND_MAX):
    """Weak Jacobian of ``z*`` with respect to each row of ``D``.

    On the support ``S`` of ``z*``:
    ``J*_{l,S} = -(D_S^T D_S)^{-1} (D_l z*^T + (D_l^T z* - y_l) I)_S``;
    rows outside ``S`` are zero.
    """
    D = _dense(dictionary)
    m, n = D.shape
    z_star = np.asarray(z_star, dtype=np.float64)
    S = np.flatnonzero(z_star)
    out = np.zeros((m, n, n))
    if S.size == 0:
        return JacobianStack(out, "fixed-point", 0)
    DS = D[:, S]
    gss = DS.T @ DS
    cond = np.linalg.cond(gss)
    if not np.isfinite(cond) or cond > cond_max:
        raise SingularSupportError(cond)
    rhs = _affine_term(D, z_star, y)[:, S, :]            # (m, |S|, n)
    sol = np.linalg.solve(gss, rhs.transpose(1, 0, 2).reshape(S.size, -1))
    out[:, S, :] = -sol.reshape(S.size, m, n).transpose(1, 0, 2)
    return JacobianStack(out, "fixed-point", 0)


def residual_matrix(J, support_union, dictionary, z_star, y):
    """Assemble ``R(J, S)`` as an ``(m * n) x n`` matrix acting on ``z - z*``."""
    D = _dense(dictionary)
    m, n = D.shape
    Jv = J.values if isinstance(J, JacobianStack) else J
    mask = np.zeros(n, dtype=bool)
    mask[np.asarray(support_union, dtype=int)] = True
    gram = (D.T @ D) * np.outer(mask, mask)
    first = np.einsum("lik,ij->lkj", Jv, gram)
    # cross derivative of (D z - y) z^T: entry (l, k), column i is D_li z_k + r_l delta_ki
    r = D @ z_star - y
    cross = D[:, None, :] * z_star[None, :, None]
    idx = np.arange(n)
    cross[:, idx, idx] += r[:, None]
    cross = cross * mask[None, None, :]
    return (first + cross).reshape(m * n, n)


def _b_value(D, extra, S_star):
    n = D.shape[1]
    if extra.size == 0:
        return 0.0
    P_e = np.eye(n)[extra]
    P_s = np.eye(n)[S_star]
    M = P_e - D[:, extra].T @ np.linalg.pinv(D[:, S_star]).T @ P_s
    return float(np.linalg.norm(M, 2))


def residual_R(J, support_union, dictionary, z_star, y, z_current=None):
    """Operator norm of ``R(J, S)``; vanishes at ``(J*, S*)``.

    When ``z_current`` is given the report also carries ``S_N``, ``S*``, the
    extra support ``S_N \\ S*`` and the associated ``B_N`` value.
    """
    D = _dense(dictionary)
    R = residual_matrix(J, support_union, D, z_star, y)
    norm = float(np.linalg.norm(R, 2)) if R.size else 0.0
    report = ResidualReport(norm=norm, support_union=np.asarray(support_union, int))
    if z_current is not None:
        S_n = np.flatnonzero(z_current)
        S_s = np.flatnonzero(z_star)
        extra = np.setdiff1d(S_n, S_s)
        report.support_current = S_n
        report.support_star = S_s
        report.extra_support = extra
        report.b_value = _b_value(D, extra, S_s) if S_s.size else None
    return report


# -- gradient estimators --------------------------------------------------

def _outer_grad(dictionary, z, y):
    return dictionary.param_gradient(dictionary.apply(z) - y, z)


def grad_reference(dictionary, y, lmbd, ref_iters=10_000, L=None, z_star=None):
    """Danskin gradient ``g* = grad_D F(z*(D), D)`` from a long FISTA run."""
    if z_star is None:
        z_star = reference_solution(dictionary, y, lmbd, n_iters=ref_iters, L=L)
    return GradientEstimate(_outer_grad(dictionary, z_star, np.asarray(y, float)),
                            "reference", ref_iters, 0)


def grad_am(dictionary, y, cfg, L=None):
    """Alternating-minimization gradient ``g1_N = grad_D F(z_N(D), D)``."""
    from .sparse_coding import solve

    y = np.asarray(y, dtype=np.float64)
    z, _ = solve(dictionary, y, cfg, L=L)
    return GradientEstimate(_outer_grad(dictionary, z, y), "analytic", cfg.n_iters, 0)


def _grad_unrolled_single(dictionary, y, cfg, L, z_star, with_residual):
    D = dictionary.data
    z, J = propagate_jacobian(dictionary, y, cfg, L=L)
    r = D @ z - y
    v = D.T @ r + cfg.lmbd * np.sign(z)
    g = np.outer(r, z) + J.vjp(v)
    report = None
    if with_residual:
        if z_star is None:
            z_star = reference_solution(dictionary, y, cfg.lmbd)
        union = np.union1d(np.flatnonzero(z), np.flatnonzero(z_star))
        report = residual_R(J, union, D, z_star, y, z_current=z)
    return g, J, report


def grad_unrolled(dictionary, y, cfg, L=None, z_star=None, with_residual=True):
    """Unrolled (DDL) gradient through forward-propagated Jacobians.

    ``g2_N = (D z_N - y) z_N^T + J_N^+ (D^T (D z_N - y) + lambda sign(z_N))``
    with ``sign(0) = 0``. For a batch of observations (columns of ``y``) the
    per-sample estimates are summed in column order.

    Returns
    -------
    estimate : GradientEstimate
    report : ResidualReport or list of ResidualReport or None
        Residual ``R(J_N, S_N u S*)`` evaluated at the reference solution
        (one report per sample for a batch).
    """
    if not isinstance(dictionary, DenseDictionary):
        raise TypeError("forward-mode Jacobians require a dense dictionary; use grad_ddl")
    y = np.asarray(y, dtype=np.float64)
    L = resolve_lipschitz(dictionary, y, L) if cfg.steps is None else L
    if y.ndim == 1:
        g, J, report = _grad_unrolled_single(dictionary, y, cfg, L, z_star, with_residual)
        est = GradientEstimate((g,), "unrolled", cfg.n_iters, cfg.depth)
        return est, report
    total = np.zeros(dictionary.data.shape)
    reports = []
    for j in range(y.shape[1]):
        zs = None if z_star is None else z_star[:, j]
        g, _, rep = _grad_unrolled_single(dictionary, y[:, j], cfg, L, zs, with_residual)
        total += g
        reports.append(rep)
    est = GradientEstimate((total,), "unrolled", cfg.n_iters, cfg.depth)
    return est, (reports if with_residual else None)


def _gram_apply(dictionary, x):
    return dictionary.adjoint(dictionary.apply(x))


def grad_ddl(dictionary, y, cfg, L=None, step_grad=False, return_codes=False):
    """Unrolled gradient for batches and any dictionary form (adjoint recursion).

    Differentiates ``F(z_N(D), D)`` through the last ``K`` layers, treating the
    iterate at layer ``N - K`` and the Lipschitz constant as constants. This is
    the reverse-mode counterpart of :func:`propagate_jacobian` and yields the
    same ``g2_N`` up to rounding.

    Parameters
    ----------
    step_grad : bool
        Also return the derivative of the loss with respect to each layer step.
    return_codes : bool
        Keep ``z_N`` on the estimate (``codes``).

    Returns
    -------
    GradientEstimate
        ``step_grad`` holds the per-layer step derivatives when requested.
    """
    y = np.asarray(y, dtype=np.float64)
    N, K = cfg.n_iters, cfg.depth
    if cfg.steps is None:
        alphas = np.full(N, 1.0 / resolve_lipschitz(dictionary, y, L))
    else:
        alphas = cfg.steps
    fista = cfg.algorithm == "fista"
    betas = _momentum(N) if fista else np.zeros(N)
    lmbd = cfg.lmbd
    start = N - K
    dense = isinstance(dictionary, DenseDictionary)
    z = np.zeros(dictionary.code_shape(y.shape))
    x_prev = z
    tape = []  # (z_n, sign(x_{n+1})) for the last K layers
    grad_f = smooth_gradient(dictionary, y)
    for it in range(N):
        a = alphas[it]
        x = prox_layer(z, grad_f, a, lmbd * a)
        _guard(x, it + 1)
        if it >= start:
            tape.append((z, np.sign(x).astype(np.int8)))
        z = momentum_point(x, x_prev, betas[it])
        x_prev = x
    x_out = x_prev
    r_out = dictionary.apply(x_out) - y
    grads = [np.array(g) for g in dictionary.param_gradient(r_out, x_out)]
    d_alpha = np.zeros(N)
    xbar = dictionary.adjoint(r_out) + lmbd * np.sign(x_out)
    zbar = np.zeros_like(xbar)
    if dense:
        D = dictionary.data
        gram = D.T @ D
        Dty = D.T @ y
        M = np.zeros((D.shape[1], D.shape[1]))
        U = np.zeros_like(xbar)
    for it in range(N - 1, start - 1, -1):
        z_n, sgn = tape[it - start]
        a, b = alphas[it], betas[it]
        ubar = zbar * (1 + b)
        ubar += xbar
        ubar *= sgn != 0
        if dense:
            Gub = gram @ ubar
            d_alpha[it] = -(float(np.vdot(Gub, z_n)) - float(np.vdot(ubar, Dty))
                            + lmbd * float(np.vdot(ubar, sgn)))
            # sum of (D z_n - y) ubar^T + D ubar z_n^T, folded at the end
            M += a * (z_n @ ubar.T if z_n.ndim > 1 else np.outer(z_n, ubar))
            U += a * ubar
        else:
            r_n = dictionary.apply(z_n) - y
            Dub = dictionary.apply(ubar)
            d_alpha[it] = -(float(np.vdot(Dub, r_n)) + lmbd * float(np.vdot(ubar, sgn)))
            for acc, g1, g2 in zip(grads, dictionary.param_gradient(r_n, ubar),
                                   dictionary.param_gradient(Dub, z_n)):
                acc -= a * (g1 + g2)
            Gub = dictionary.adjoint(Dub)
        # z_{n+1} = (1 + b) x_{n+1} - b x_n feeds the adjoint of x_n
        xbar = zbar * -b
        Gub *= -a
        Gub += ubar
        zbar = Gub
    if dense and K > 0:
        yU = y @ U.T if y.ndim > 1 else np.outer(y, U)
        grads[0] -= D @ (M + M.T) - yU
    est = GradientEstimate(tuple(grads), "unrolled", N, K)
    if step_grad:
        est.step_grad = d_alpha
    if return_codes:
        est.codes = x_out
    return est


def _apply_gram_tangents(dictionary, tangents):
    """``D^T D`` applied to each tangent (leading axis)."""
    if isinstance(dictionary, DenseDictionary):
        moved = np.moveaxis(tangents, 0, 1)
        flat = moved.reshape(moved.shape[0], -1)
        out = dictionary.adjoint(dictionary.apply(flat)).reshape(moved.shape)
        return np.moveaxis(out, 1, 0)
    return np.stack([_gram_apply(dictionary, t) for t in tangents])


def step_size_gradient(dictionary, y, cfg, L=None):
    """Derivative of ``F(z_N(D, alpha), D)`` with respect to each layer step.

    Forward mode: one tangent ``dz_n / d alpha_p`` per layer ``p`` is carried
    along the iterates with the same masked recursion as the Jacobians.
    Layers before ``N - K`` get a zero derivative, as in truncated
    back-propagation. Works for any dictionary form and for batches.

    Returns
    -------
    ndarray (n_iters,)
    """
    y = np.asarray(y, dtype=np.float64)
    N, K = cfg.n_iters, cfg.depth
    if cfg.steps is None:
        alphas = np.full(N, 1.0 / resolve_lipschitz(dictionary, y, L))
    else:
        alphas = cfg.steps
    fista = cfg.algorithm == "fista"
    betas = _momentum(N) if fista else np.zeros(N)
    lmbd = cfg.lmbd
    start = N - K
    shape = dictionary.code_shape(y.shape)
    z = np.zeros(shape)
    x_prev = z
    tx = np.zeros((N,) + shape)   # d x_n / d alpha_p
    tz = np.zeros((N,) + shape)   # d z_n / d alpha_p
    grad_f = smooth_gradient(dictionary, y)
    for it in range(N):
        a = alphas[it]
        grad = grad_f(z)
        x = soft_threshold(z - a * grad, lmbd * a)
        _guard(x, it + 1)
        if it >= start:
            du = tz - a * _apply_gram_tangents(dictionary, tz)
            du[it] -= grad + lmbd * np.sign(x)
            tx_new = (np.abs(x) > 0)[None] * du
            tz = (1 + betas[it]) * tx_new - betas[it] * tx
            tx = tx_new
        z = x + betas[it] * (x - x_prev)
        x_prev = x
    v = dictionary.adjoint(dictionary.apply(x_prev) - y) + lmbd * np.sign(x_prev)
    return np.array([float(np.vdot(v, t)) for t in tx])


# -- diagnostics ------------------------------------------------------------

@dataclass
class StabilityReport:
    """Per-curve instability flags and the unstable fraction."""

    unstable: np.ndarray
    fraction: float


def classify_stability(curves, start=None, factor=10.0):
    """Flag Jacobian error curves that blow up.

    A curve is unstable when, at some point at or after ``start[i]`` (the
    support identification index; 0 when omitted), it exceeds ``factor`` times
    its initial value ``curve[0]``. Non-finite values count as unstable.

    Parameters
    ----------
    curves : sequence of 1-D arrays
        ``||J^N - J*||`` sampled along ``N``.
    start : sequence of int, optional
    factor : float

    Returns
    -------
    StabilityReport
    """
    flags = []
    for i, c in enumerate(curves):
        c = np.asarray(c, dtype=np.float64)
        s = 0 if start is None or start[i] is None else int(start[i])
        tail = c[s:]
        bad = (not np.all(np.isfinite(tail))) or bool(np.any(tail > factor * c[0]))
        flags.append(bad)
    flags = np.array(flags, dtype=bool)
    return StabilityReport(flags, float(flags.mean()) if flags.size else 0.0)


def support_constants(dictionary, z_star, L):
    """``mu`` (smallest eigenvalue of the support Gram matrix) and the rate ``1 - mu / L``."""
    D = _dense(dictionary)
    S = np.flatnonzero(z_star)
    if S.size == 0:
        return 0.0, 1.0
    mu = float(np.linalg.eigvalsh(D[:, S].T @ D[:, S])[0])
    return mu, 1.0 - mu / L


def delta_gap(dictionary, z, z_star, y, lmbd, L):
    """``F(z) - F(z*) + L / 2 ||z - z*||``, clipped at zero for the cost gap."""
    from .sparse_coding import lasso_cost

    gap = lasso_cost(dictionary, z, y, lmbd) - lasso_cost(dictionary, z_star, y, lmbd)
    return max(gap, 0.0) + 0.5 * L * float(np.linalg.norm(z - z_star))


def truncation_bound(initial_error, depth, rate, row_norm, delta, L):
    """On-support convergence bound of the truncated Jacobian.

    ``rate^K * initial_error + K * rate^(K - 1) * ||D_l|| * 4 * delta / L^2``
    where ``initial_error`` is ``||J_l^{N-K} - J*_l||`` (``||J*_l||`` when the
    propagation restarts from zero) and ``delta`` is evaluated at ``N - K``.
    """
    K = depth
    tail = K * rate ** (K - 1) if K > 0 else 0.0
    return rate ** K * initial_error + tail * row_norm * 4.0 * delta / L ** 2


def gradient_error_bound(dictionary, J, z, z_star, y):
    """Right-hand side ``||R(J, S)|| ||e|| + ||D||_2 ||e||^2`` with ``e = z - z*``.

    Valid once ``z`` has the support and signs of ``z*``: then
    ``g2 - g* = R(J, S) e + (D e) e^T`` exactly, so the second-order
    constant is the spectral norm of ``D``.
    """
    D = _dense(dictionary)
    e = np.asarray(z, float) - np.asarray(z_star, float)
    S = np.flatnonzero(z_star)
    rep = residual_R(J, S, D, z_star, y)
    ne = float(np.linalg.norm(e))
    return rep.norm * ne + float(np.linalg.norm(D, 2)) * ne ** 2
