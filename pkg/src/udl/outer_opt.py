"""Outer-loop training: projected gradient descent with backtracking line search.

Two gradient modes are available. ``"am"`` uses the analytic gradient at the
approximate codes (alternating minimization); ``"ddl"`` differentiates through
the unrolled solver. Batch quantities are computed on fixed-size column
chunks and reduced in chunk order, so results do not depend on the number of
worker threads.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datagen import make_rng
from .errors import ConfigError, DivergenceError, UnstableGradientError
from .linops import (
    DenseDictionary,
    RankOneConvDictionary,
    lipschitz,
    params_inner,
    project_unit_norm,
    step as param_step,
)
from .metrics import rank1_recovery, recovery_score
from .sparse_coding import exact_codes, lambda_max, lasso_cost, single_code_shape, solve
from .unroll_grad import GradientEstimate, grad_am, grad_ddl

CHUNK = 512
MODES = ("am", "ddl")
STREAM_MINIBATCH = 11
STREAM_WINDOWS = 12


@dataclass
class LineSearchConfig:
    """Backtracking line-search settings.

    ``initial_step=None`` starts each full-batch search at
    ``initial_scale / L_outer`` where ``L_outer`` is the largest eigenvalue of
    the code Gram matrix ``Z Z^T``. ``max_step_decay`` and
    ``step_reset_growth`` only matter for stochastic training.
    """

    initial_step: float = None
    initial_scale: float = 10.0
    backtrack_factor: float = 0.5
    sufficient_decrease: float = 1e-4
    max_backtracks: int = 30
    max_step_decay: float = 0.95
    step_reset_growth: float = 2.0

    def __post_init__(self):
        if self.initial_step is not None and not self.initial_step > 0:
            raise ConfigError("initial_step must be > 0")
        if not self.initial_scale > 0:
            raise ConfigError("initial_scale must be > 0")
        if not 0 < self.backtrack_factor < 1:
            raise ConfigError("backtrack_factor must lie in (0, 1)")
        if not 0 < self.sufficient_decrease < 1:
            raise ConfigError("sufficient_decrease must lie in (0, 1)")
        if self.max_backtracks < 0:
            raise ConfigError("max_backtracks must be >= 0")
        if not 0 < self.max_step_decay <= 1:
            raise ConfigError("max_step_decay must lie in (0, 1]")
        if self.step_reset_growth < 1:
            raise ConfigError("step_reset_growth must be >= 1")


@dataclass
class StopRule:
    """Convergence test and budgets of a training phase."""

    tol: float = 1e-6
    patience: int = 5
    max_steps: int = 1000
    target_score: float = None

    def __post_init__(self):
        if self.tol < 0 or self.patience < 1 or self.max_steps < 0:
            raise ConfigError("invalid stop rule")


@dataclass
class TrainState:
    """Mutable training state owned by a single trainer."""

    dictionary: object
    mode: str
    steps: np.ndarray = None
    phase: str = "fixed"
    n_steps: int = 0
    epoch: int = 0
    losses: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    trials: list = field(default_factory=list)
    stop_reason: str = None


@dataclass
class StepResult:
    accepted: bool
    dictionary: object
    steps: np.ndarray
    loss: float
    step_size: float
    trials: int


# -- batch evaluation -------------------------------------------------------

class Workers:
    """Ordered map over a thread pool (or inline when ``threads <= 1``)."""

    def __init__(self, threads=1):
        self.threads = max(1, int(threads))
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def map(self, fn, items):
        if self._pool is None:
            return [fn(it) for it in items]
        return list(self._pool.map(fn, items))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_INLINE = Workers(1)


def _column_chunks(T, size=CHUNK):
    return [slice(s, min(s + size, T)) for s in range(0, T, size)]


def _split(dictionary, data):
    """Split a batch into fixed chunks along its sample axis."""
    if isinstance(dictionary, DenseDictionary):
        if data.ndim == 1:
            return [data]
        return [data[:, s] for s in _column_chunks(data.shape[1])]
    return [data[s] for s in _column_chunks(data.shape[0])]


def _step_lipschitz(dictionary, data, cfg, L):
    if cfg.steps is not None:
        return None
    if L is not None:
        return L
    return lipschitz(dictionary, code_shape=single_code_shape(dictionary, np.shape(data))).value


def batch_loss(dictionary, data, cfg, L=None, workers=None):
    """Unrolled loss ``F_N(D) = F(z_N(D), D)`` summed over the batch."""
    workers = workers or _INLINE
    L = _step_lipschitz(dictionary, data, cfg, L)

    def one(chunk):
        z, _ = solve(dictionary, chunk, cfg, L=L)
        return lasso_cost(dictionary, z, chunk, cfg.lmbd)

    return float(sum(workers.map(one, _split(dictionary, data))))


def outer_gradient(dictionary, data, cfg, mode="ddl", L=None, workers=None,
                   step_grad=False, code_gram=False):
    """Batch gradient of ``F_N`` with respect to the dictionary.

    ``mode="am"`` sums the analytic gradients at ``z_N``; ``mode="ddl"``
    back-propagates through the unrolled solver. With ``code_gram`` the
    estimate also carries ``Z_N Z_N^T`` as ``code_gram``; for convolutional
    forms this is the lag-0 cross-correlation of the activation maps.

    Raises
    ------
    UnstableGradientError
        If the summed gradient has non-finite entries.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    workers = workers or _INLINE
    L = _step_lipschitz(dictionary, data, cfg, L)
    dense = isinstance(dictionary, DenseDictionary)

    def one(chunk):
        if mode == "am":
            z, _ = solve(dictionary, chunk, cfg, L=L)
            r = dictionary.apply(z) - chunk
            est = GradientEstimate(dictionary.param_gradient(r, z), "analytic",
                                   cfg.n_iters, 0)
        else:
            est = grad_ddl(dictionary, chunk, cfg, L=L, step_grad=step_grad,
                           return_codes=code_gram)
            z = est.codes
        gram = None
        if code_gram:
            if dense:
                z2 = z.reshape(z.shape[0], -1)
            else:
                # lag-0 cross-correlation of the activations, atoms on the first axis
                z2 = np.moveaxis(z.reshape((-1,) + single_code_shape(dictionary, chunk.shape[1:])),
                                 1, 0).reshape(dictionary.n_atoms, -1)
            gram = z2 @ z2.T
        return est, gram

    parts = workers.map(one, _split(dictionary, data))
    total = [np.array(p) for p in parts[0][0].params]
    d_alpha = None if parts[0][0].step_grad is None else np.array(parts[0][0].step_grad)
    gram = parts[0][1]
    for est, g in parts[1:]:
        for acc, p in zip(total, est.params):
            acc += p
        if d_alpha is not None:
            d_alpha += est.step_grad
        if g is not None:
            gram = gram + g
    kind = "analytic" if mode == "am" else "unrolled"
    out = GradientEstimate(tuple(total), kind, cfg.n_iters,
                           0 if mode == "am" else cfg.depth, d_alpha)
    out.code_gram = gram
    if not out.finite or (d_alpha is not None and not np.all(np.isfinite(d_alpha))):
        raise UnstableGradientError("non-finite batch gradient")
    return out


# -- line search ------------------------------------------------------------

def _sq_norm(gradient, with_steps):
    total = gradient.sq_norm()
    if with_steps and gradient.step_grad is not None:
        total += float(np.dot(gradient.step_grad, gradient.step_grad))
    return total


def backtracking_step(dictionary, gradient, loss_fn, current_loss, ls, initial_step,
                      steps=None, rng=None):
    """Armijo backtracking on ``D' = proj(D - s g)``.

    Trial ``k`` uses ``s = initial_step * backtrack_factor**k`` and is accepted
    when ``loss_fn(D', steps') <= current_loss - c * s * ||g||^2``. When
    ``steps`` (learned layer steps) are given they move along
    ``-gradient.step_grad`` with the same ``s`` and must stay positive.
    Returns an unaccepted :class:`StepResult` (no progress) if the gradient is
    zero or every trial fails.
    """
    joint = steps is not None
    gn = _sq_norm(gradient, joint)
    if gn == 0 or not np.isfinite(gn):
        return StepResult(False, dictionary, steps, current_loss, 0.0, 0)
    s = float(initial_step)
    for k in range(ls.max_backtracks + 1):
        cand = project_unit_norm(param_step(dictionary, gradient.params, s), rng=rng)
        cand_steps = None
        if joint:
            cand_steps = steps - s * gradient.step_grad
            if not np.all(cand_steps > 0):
                s *= ls.backtrack_factor
                continue
        try:
            val = loss_fn(cand, cand_steps)
        except DivergenceError:
            val = np.inf
        if np.isfinite(val) and val <= current_loss - ls.sufficient_decrease * s * gn:
            return StepResult(True, cand, cand_steps, float(val), s, k + 1)
        s *= ls.backtrack_factor
    return StepResult(False, dictionary, steps, current_loss, 0.0, ls.max_backtracks + 1)


def _outer_lipschitz(gradient):
    gram = getattr(gradient, "code_gram", None)
    if gram is None:
        return None
    return float(np.linalg.eigvalsh(gram)[-1])


def _initial_step(ls, gradient, dictionary):
    if ls.initial_step is not None:
        return ls.initial_step
    L_out = _outer_lipschitz(gradient)
    if L_out is not None and L_out > 0:
        return ls.initial_scale / L_out
    # no code Gram available: move the parameters by initial_scale times their norm
    pn = np.sqrt(params_inner(dictionary.params, dictionary.params))
    gn = np.sqrt(max(gradient.sq_norm(), 1e-300))
    return ls.initial_scale * pn / gn


def _score(dictionary, ground_truth):
    if ground_truth is None:
        return None
    if isinstance(dictionary, RankOneConvDictionary):
        return rank1_recovery(dictionary, ground_truth).mean
    return recovery_score(dictionary, ground_truth)


def _converged(losses, tol, patience):
    if len(losses) <= patience:
        return False
    recent = np.asarray(losses[-patience - 1:])
    rel = np.abs(np.diff(recent)) / np.maximum(np.abs(recent[:-1]), 1e-300)
    return bool(np.all(rel < tol))


# -- full batch ---------------------------------------------------------------

def _run_phase(state, data, cfg, ls, rule, ground_truth, workers, learn_steps, log):
    mode = "ddl" if learn_steps else state.mode

    def loss_fn(d, steps):
        c = cfg if steps is None else cfg.replace(steps=steps)
        return batch_loss(d, data, c, workers=workers)

    cur_cfg = cfg if state.steps is None else cfg.replace(steps=state.steps)
    loss = batch_loss(state.dictionary, data, cur_cfg, workers=workers)
    phase_losses = [loss]
    if not state.losses:
        state.losses.append(loss)
        state.scores.append(_score(state.dictionary, ground_truth))
        state.seconds.append(0.0)
        state.trials.append(0)
        log(state, 0.0)
    for _ in range(rule.max_steps):
        t0 = time.perf_counter()
        try:
            grad = outer_gradient(state.dictionary, data, cur_cfg, mode=mode,
                                  workers=workers, step_grad=learn_steps, code_gram=True)
        except UnstableGradientError:
            state.stop_reason = "unstable-gradient"
            return
        res = backtracking_step(state.dictionary, grad, loss_fn, loss, ls,
                                _initial_step(ls, grad, state.dictionary),
                                steps=state.steps if learn_steps else None)
        elapsed = time.perf_counter() - t0
        if not res.accepted:
            state.stop_reason = "no-progress"
            return
        state.dictionary, loss = res.dictionary, res.loss
        if learn_steps:
            state.steps = res.steps
            cur_cfg = cfg.replace(steps=state.steps)
        state.n_steps += 1
        state.losses.append(loss)
        state.scores.append(_score(state.dictionary, ground_truth))
        state.seconds.append(elapsed)
        state.trials.append(res.trials)
        phase_losses.append(loss)
        log(state, res.step_size)
        if rule.target_score is not None and state.scores[-1] is not None \
                and state.scores[-1] >= rule.target_score:
            state.stop_reason = "target-score"
            return
        if _converged(phase_losses, rule.tol, rule.patience):
            state.stop_reason = "converged"
            return
    state.stop_reason = "max-steps"


def train_full_batch(data, init, cfg, mode="ddl", ls=None, rule=None, learn_steps=False,
                     rule_steps=None, ground_truth=None, workers=None, on_step=None):
    """Full-batch projected gradient descent with line search.

    Phase 1 uses fixed steps ``1 / L`` with ``L`` recomputed for every
    candidate dictionary. With ``learn_steps`` (DDL only) a second phase
    starts from ``1 / L`` of the phase-1 result and jointly updates the
    dictionary and the per-layer steps.

    ``on_step(state, row)`` is called after the initial evaluation and after
    every accepted step with a dict of logged values.

    Returns
    -------
    TrainState
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if learn_steps and mode != "ddl":
        raise ConfigError("step learning requires mode='ddl'")
    if cfg.steps is not None:
        raise ConfigError("phase 1 uses fixed steps; pass cfg without learned steps")
    ls = ls or LineSearchConfig()
    rule = rule or StopRule()
    state = TrainState(project_unit_norm(init), mode)

    def log(st, step_size):
        if on_step is not None:
            on_step(st, {"step": st.n_steps, "phase": st.phase, "loss": st.losses[-1],
                         "score": st.scores[-1], "trials": st.trials[-1],
                         "step_size": step_size, "seconds": st.seconds[-1]})

    _run_phase(state, data, cfg, ls, rule, ground_truth, workers, False, log)
    if learn_steps and state.stop_reason != "unstable-gradient":
        L = lipschitz(state.dictionary).value
        state.steps = np.full(cfg.n_iters, 1.0 / L)
        state.phase = "joint"
        _run_phase(state, data, cfg, ls, rule_steps or rule, ground_truth, workers, True, log)
    return state


def train_am_exact(data, init, lmbd, ls=None, rule=None, ground_truth=None, max_inner=1000,
                   on_step=None):
    """Alternating-minimization baseline with certified Lasso codes (dense only).

    Codes come from :func:`udl.sparse_coding.exact_codes` with at most
    ``max_inner`` FISTA iterations, warm-started from the codes of the current
    dictionary. The codes of the accepted candidate are reused for the next
    gradient, so each step costs one solve per line-search trial.
    """
    ls = ls or LineSearchConfig()
    rule = rule or StopRule()
    state = TrainState(project_unit_norm(init), "am")
    data = np.asarray(data, dtype=np.float64)
    Z, _ = exact_codes(state.dictionary, data, lmbd, max_iters=max_inner)
    loss = lasso_cost(state.dictionary, Z, data, lmbd)
    cache = {}

    def loss_fn(d, _steps):
        zc, _ = exact_codes(d, data, lmbd, z0=Z, max_iters=max_inner)
        cache[id(d)] = zc
        return lasso_cost(d, zc, data, lmbd)

    def record(elapsed, trials, step_size):
        state.losses.append(loss)
        state.scores.append(_score(state.dictionary, ground_truth))
        state.seconds.append(elapsed)
        state.trials.append(trials)
        if on_step is not None:
            on_step(state, {"step": state.n_steps, "phase": state.phase, "loss": loss,
                            "score": state.scores[-1], "trials": trials,
                            "step_size": step_size, "seconds": elapsed})

    record(0.0, 0, 0.0)
    for _ in range(rule.max_steps):
        t0 = time.perf_counter()
        r = state.dictionary.apply(Z) - data
        grad = GradientEstimate(state.dictionary.param_gradient(r, Z), "analytic", max_inner, 0)
        grad.code_gram = Z @ Z.T
        cache.clear()
        res = backtracking_step(state.dictionary, grad, loss_fn, loss, ls,
                                _initial_step(ls, grad, state.dictionary))
        elapsed = time.perf_counter() - t0
        if not res.accepted:
            state.stop_reason = "no-progress"
            return state
        state.dictionary, loss, Z = res.dictionary, res.loss, cache[id(res.dictionary)]
        state.n_steps += 1
        record(elapsed, res.trials, res.step_size)
        if rule.target_score is not None and state.scores[-1] is not None \
                and state.scores[-1] >= rule.target_score:
            state.stop_reason = "target-score"
            return state
        if _converged(state.losses, rule.tol, rule.patience):
            state.stop_reason = "converged"
            return state
    state.stop_reason = "max-steps"
    return state


# -- stochastic ----------------------------------------------------------------

def _take(dictionary, data, idx):
    if isinstance(dictionary, DenseDictionary):
        return data[:, idx]
    return data[idx]


def _n_samples(dictionary, data):
    return data.shape[1] if isinstance(dictionary, DenseDictionary) else data.shape[0]


@dataclass
class StochasticRun:
    """Per-iteration log of a stochastic run."""

    state: TrainState
    max_steps: list = field(default_factory=list)
    time_to_target: float = None


def _stochastic_loop(state, sample_batch, n_iters_epoch, epochs, cfg_fn, ls, ground_truth,
                     workers, rule, on_step, rng_proj):
    run = StochasticRun(state)
    initial = max_step = None
    step = None
    clock = 0.0
    for epoch in range(epochs):
        state.epoch = epoch
        if initial is not None:
            max_step = initial * ls.max_step_decay ** epoch
        run.max_steps.append(max_step)
        for it in range(n_iters_epoch):
            t0 = time.perf_counter()
            batch = sample_batch(epoch, it)
            cfg = cfg_fn(batch)
            try:
                grad = outer_gradient(state.dictionary, batch, cfg, mode=state.mode,
                                      workers=workers, code_gram=True)
            except UnstableGradientError:
                state.stop_reason = "unstable-gradient"
                return run
            loss = batch_loss(state.dictionary, batch, cfg, workers=workers)
            if max_step is None:
                initial = max_step = _initial_step(ls, grad, state.dictionary)
                run.max_steps[-1] = max_step
                start = max_step
            else:
                start = min(step * ls.step_reset_growth, max_step)

            def loss_fn(d, _steps, batch=batch, cfg=cfg):
                return batch_loss(d, batch, cfg, workers=workers)

            res = backtracking_step(state.dictionary, grad, loss_fn, loss, ls, start,
                                    rng=rng_proj)
            if res.accepted:
                state.dictionary = res.dictionary
                step = res.step_size
                state.n_steps += 1
            else:
                step = start
            clock += time.perf_counter() - t0
            state.losses.append(res.loss)
            state.trials.append(res.trials)
            state.seconds.append(clock)
            state.scores.append(_score(state.dictionary, ground_truth))
            if on_step is not None:
                on_step(state, {"epoch": epoch, "iteration": it, "loss": res.loss,
                                "score": state.scores[-1], "trials": res.trials,
                                "step_size": res.step_size, "max_step": max_step,
                                "accepted": res.accepted, "seconds": clock})
            sc = state.scores[-1]
            if rule is not None and rule.target_score is not None and sc is not None \
                    and sc >= rule.target_score:
                run.time_to_target = clock
                state.stop_reason = "target-score"
                return run
    state.stop_reason = "epochs"
    return run


def train_stochastic(data, init, cfg, batch_size, epochs, iters_per_epoch, mode="ddl",
                     ls=None, seed=0, ground_truth=None, rule=None, workers=None,
                     on_step=None):
    """Minibatch projected gradient descent with a stochastic line search.

    Each epoch draws a fresh seeded permutation of the samples and visits up
    to ``iters_per_epoch`` disjoint minibatches. Every iteration backtracks
    from ``min(growth * previous step, max_step)`` on the minibatch loss; the
    cap ``max_step`` starts at the first line-search guess and is multiplied
    by ``max_step_decay`` after every epoch.

    Returns
    -------
    StochasticRun
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    ls = ls or LineSearchConfig()
    T = _n_samples(init, data)
    if not 0 < batch_size <= T:
        raise ConfigError("minibatch size must lie in [1, T]")
    rng = make_rng(seed, STREAM_MINIBATCH)
    n_iters_epoch = max(1, min(iters_per_epoch, T // batch_size))
    perms = {}

    def sample_batch(epoch, it):
        if epoch not in perms:
            perms.clear()
            perms[epoch] = rng.permutation(T)
        idx = np.sort(perms[epoch][it * batch_size:(it + 1) * batch_size])
        return _take(init, data, idx)

    state = TrainState(project_unit_norm(init), mode)
    return _stochastic_loop(state, sample_batch, n_iters_epoch, epochs, lambda b: cfg, ls,
                            ground_truth, workers, rule, on_step,
                            make_rng(seed, STREAM_MINIBATCH, 1))


# -- rank-1 convolutional -------------------------------------------------------

def rank1_chunk_init(signal, n_atoms, kernel_size, seed):
    """Rank-1 atoms from the leading singular pair of random signal chunks."""
    S, T = signal.shape
    rng = make_rng(seed, STREAM_WINDOWS, 1)
    u = np.empty((S, n_atoms))
    v = np.empty((kernel_size, n_atoms))
    for k in range(n_atoms):
        for _ in range(100):  # silent chunks carry no direction; draw again
            s0 = rng.integers(0, T - kernel_size + 1)
            U, sv, Vt = np.linalg.svd(signal[:, s0:s0 + kernel_size], full_matrices=False)
            if sv[0] > 0:
                break
        else:
            U, Vt = rng.standard_normal((S, 1)), rng.standard_normal((1, kernel_size))
        u[:, k] = U[:, 0]
        v[:, k] = Vt[0] / np.abs(Vt[0]).max()
    return project_unit_norm(RankOneConvDictionary(u, v), rng=rng)


def sample_windows(signal, window, count, rng):
    """``count`` windows of length ``window`` at uniform (possibly overlapping) offsets."""
    starts = np.sort(rng.integers(0, signal.shape[1] - window + 1, size=count))
    return np.stack([signal[:, s:s + window] for s in starts])


def train_rank1_csc(signal, init, cfg, window, windows_per_batch, epochs, iters_per_epoch,
                    lmbd_fraction=None, ls=None, seed=0, ground_truth=None, rule=None,
                    workers=None, on_step=None):
    """Stochastic DDL for rank-1 multichannel convolutional atoms.

    Every iteration samples ``windows_per_batch`` windows of the ``(S, T)``
    signal. With ``lmbd_fraction`` the regularization is that fraction of
    ``lambda_max`` of the initial dictionary on the full signal; otherwise
    ``cfg.lmbd`` is used as is.

    Returns
    -------
    StochasticRun
    """
    if window < init.kernel_size:
        raise ConfigError("window must be at least the kernel length")
    ls = ls or LineSearchConfig()
    if lmbd_fraction is not None:
        cfg = cfg.replace(lmbd=lmbd_fraction * lambda_max(project_unit_norm(init), signal))
    rng = make_rng(seed, STREAM_WINDOWS)

    def sample_batch(epoch, it):
        return sample_windows(signal, window, windows_per_batch, rng)

    state = TrainState(project_unit_norm(init), "ddl")
    return _stochastic_loop(state, sample_batch, iters_per_epoch, epochs, lambda b: cfg, ls,
                            ground_truth, workers, rule, on_step,
                            make_rng(seed, STREAM_WINDOWS, 2))
