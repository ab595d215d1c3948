"""Experiment protocols behind the CLI commands.

Every runner takes a parameter dict (defaults merged by :func:`resolve`), a
seed and a sink. Tables go through ``sink.table(name, columns)``; wall-clock
measurements go through ``sink.timing`` so tables stay reproducible bit for
bit. ``MemorySink`` keeps everything in memory for library use.
"""

import time

import numpy as np

from .datagen import (
    SyntheticSpec,
    gen_rank1_conv_data,
    gen_synthetic,
    grid_positions,
    extract_patches,
    assemble_patches,
    image_patches,
    load_pgm_patches,
    make_rng,
    random_dict_from_data,
    synthetic_image,
)
from .errors import ConfigError
from .linops import ConvDictionary, DenseDictionary, project_unit_norm
from .metrics import (
    INDETERMINATE,
    NO_ANGLE,
    cosine_angle,
    loss_line_scan,
    psnr,
    rank1_recovery,
    relative_angle_difference,
)
from .outer_opt import (
    LineSearchConfig,
    StopRule,
    batch_loss,
    rank1_chunk_init,
    train_am_exact,
    train_full_batch,
    train_rank1_csc,
    train_stochastic,
)
from .sparse_coding import UnrollConfig, lambda_max, reference_solution, solve
from .unroll_grad import (
    classify_stability,
    grad_am,
    grad_ddl,
    grad_reference,
    gradient_error_bound,
    jacobian_fixed_point,
    propagate_jacobian,
)

DEFAULTS = {
    "jacobian": {
        "m": 30, "n": 50, "n_samples": 50, "sparsity": 0.3, "noise_var": 0.1,
        "perturbation": 0.5, "lmbd": 0.1, "algorithm": "ista", "n_max": 1000,
        "depths": [20, 50], "grid_points": 40, "ref_iters": 10_000, "factor": 10.0,
    },
    "gradients": {
        "protocol": "synthetic", "m": 30, "n": 50, "n_samples": 1000, "sparsity": 0.3,
        "noise_var": 0.1, "perturbation": 0.5, "image": None, "patch_size": 10,
        "n_atoms": 128, "lmbd": 0.1, "algorithm": "fista",
        "grid": [1, 2, 5, 10, 20, 30, 40, 50, 100, 200], "depths": [20, 50],
        "ref_iters": 10_000, "n_bound": 50, "bound_depth": 50, "spike_factor": 10.0,
    },
    "train": {
        "m": 30, "n": 50, "T": 1000, "sparsity": 0.3, "noise_var": 0.1,
        "perturbation": 0.5, "lmbd": 0.1, "algorithm": "fista", "grid": [10, 20, 40],
        "modes": ["ddl", "am"], "baseline": True, "baseline_iters": 1000,
        "max_steps": 1000, "tol": 1e-6, "patience": 5, "learn_steps": False,
        "max_steps_joint": 100,
    },
    "sgd": {
        "m": 50, "n": 100, "T": 10_000, "sparsity": 0.3, "noise_var": 0.1,
        "perturbation": 0.5, "lmbd": 0.1, "algorithm": "fista", "n_iters": 30,
        "batch_sizes": [500, 2000, "full"], "epochs": 50, "iters_per_epoch": 10,
        "max_steps": 500, "target_score": 0.9, "max_step_decay": 0.95,
    },
    "csc": {
        "S": 8, "t": 16, "n": 3, "T": 4000, "spike_rate": 0.01, "noise_var": 0.01,
        "n_iters": 30, "lmbd_fraction": 0.1, "window": 200, "windows_per_batch": 8,
        "epochs": 30, "iters_per_epoch": 5, "max_step_decay": 0.95,
    },
    "denoise": {
        "image": None, "image_size": 128, "patch_size": 10, "n_atoms": 128,
        "n_patches": 1000, "noise_var": 0.1, "lmbd": 0.1, "grid": [2, 5, 10, 20, 50],
        "oracle_iters": 1000, "max_steps": 100, "stride": 3,
    },
    "linescan": {
        "image": None, "image_size": 64, "noise_var": 0.1, "n_kernels": 50,
        "kernel_size": 8, "n_iters": 20, "lmbd": 0.1, "max_steps": 50, "n_pairs": 1,
        "n_points": 21,
    },
}

COMMANDS = tuple(DEFAULTS)


def resolve(command, params=None):
    """Defaults for ``command`` overridden by ``params``; unknown keys are rejected."""
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    out = dict(DEFAULTS[command])
    for k, v in (params or {}).items():
        if k not in out:
            raise ConfigError(f"{command}: unknown parameter {k!r}")
        out[k] = v
    return out


def notes(command, p):
    """Interpretation choices that go into every output header."""
    out = {}
    if "perturbation" in p:
        out["perturbation"] = "noise variance = perturbation * entrywise variance of D"
    if command == "linescan":
        out["line_scan"] = "raw interpolation (1 - t) A + t B, atoms not renormalized"
    return out


class _Table:
    def __init__(self, columns):
        self.columns = list(columns)
        self.rows = []

    def write(self, row):
        if isinstance(row, dict):
            extra = set(row) - set(self.columns)
            if extra:
                raise KeyError(f"unknown columns {sorted(extra)}")
            row = [row.get(c) for c in self.columns]
        self.rows.append(list(row))

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def dicts(self):
        return [dict(zip(self.columns, r)) for r in self.rows]


class MemorySink:
    """Collects tables, timings and checkpoints in memory."""

    def __init__(self):
        self.tables = {}
        self.timings = {}
        self.checkpoints = {}

    def table(self, name, columns):
        self.tables[name] = _Table(columns)
        return self.tables[name]

    def timing(self, key, seconds):
        self.timings[key] = seconds

    def checkpoint(self, name, array):
        self.checkpoints[name] = np.array(array)


def _synthetic(p, T, seed):
    return gen_synthetic(SyntheticSpec(p["m"], p["n"], T, sparsity=p["sparsity"],
                                       noise_var=p["noise_var"],
                                       perturbation=p["perturbation"], seed=seed))


def _lipschitz_dense(D):
    return float(np.linalg.eigvalsh(D.data.T @ D.data)[-1])


def _stats(values):
    v = np.asarray([x for x in values if isinstance(x, float) and np.isfinite(x)])
    if v.size == 0:
        return None, None, None
    return float(v.mean()), float(np.quantile(v, 0.1)), float(np.quantile(v, 0.9))


def _angle(x):
    return x if isinstance(x, float) else float("nan")


# -- Jacobian convergence ---------------------------------------------------

def log_grid(n_max, points):
    """Integers from 1 to ``n_max`` spaced geometrically, always ending at ``n_max``."""
    g = np.unique(np.round(np.geomspace(1, n_max, points)).astype(int))
    return [int(x) for x in g]


def run_jacobian(p, seed, sink):
    """Distance of ``J^N`` to ``J*`` along ``N`` for full and truncated depths."""
    _, _, Y, D0 = _synthetic(p, p["n_samples"], seed)
    L = _lipschitz_dense(D0)
    grid = log_grid(p["n_max"], p["grid_points"])
    depths = [None] + [int(k) for k in p["depths"]]
    curves = sink.table("curves", ["sample", "depth", "N", "error", "support_identified"])
    per_depth = {d: [] for d in depths}
    starts = {d: [] for d in depths}
    t0 = time.perf_counter()
    for j in range(Y.shape[1]):
        y = Y[:, j]
        zs = reference_solution(D0, y, p["lmbd"], n_iters=p["ref_iters"], L=L)
        Js = jacobian_fixed_point(D0, zs, y)
        signs = np.sign(zs)
        full_err = np.empty(p["n_max"])
        ident = np.empty(p["n_max"], dtype=bool)

        def cb(n, x, J):
            full_err[n - 1] = float(np.mean(np.sqrt(((J - Js.values) ** 2).sum(axis=(1, 2)))))
            ident[n - 1] = np.array_equal(np.sign(x), signs)

        propagate_jacobian(D0, y, UnrollConfig(p["n_max"], p["lmbd"], p["algorithm"]),
                           L=L, callback=cb)
        # index of the first N after which the support and signs never change again
        n0 = int(np.flatnonzero(~ident)[-1] + 1) if (~ident).any() else 0
        for d in depths:
            errs = []
            for N in grid:
                if d is None or N <= d:
                    e = full_err[N - 1]
                else:
                    cfg = UnrollConfig(N, p["lmbd"], p["algorithm"], truncation=d)
                    _, J = propagate_jacobian(D0, y, cfg, L=L)
                    e = J.error(Js)
                errs.append(e)
                curves.write([j, "full" if d is None else d, N, e, bool(ident[N - 1])])
            per_depth[d].append(np.array(errs))
            starts[d].append(int(np.searchsorted(grid, n0 + 1)))
    sink.timing("jacobian", time.perf_counter() - t0)
    labels = ["full" if d is None else str(d) for d in depths]
    summary = sink.table("summary", ["n_samples"] + [f"{c}_{lab}" for lab in labels
                                                     for c in ("unstable", "fraction")])
    result, row = {}, [Y.shape[1]]
    for d in depths:
        rep = classify_stability(per_depth[d], start=starts[d], factor=p["factor"])
        row += [int(rep.unstable.sum()), rep.fraction]
        result[d] = rep
    summary.write(row)
    return result


# -- gradient estimates -----------------------------------------------------

def _gradient_data(p, seed):
    if p["protocol"] == "synthetic":
        _, _, Y, D0 = _synthetic(p, p["n_samples"], seed)
        return Y, D0
    if p["protocol"] != "image":
        raise ConfigError("gradients.protocol must be 'synthetic' or 'image'")
    if p["image"]:
        ps = load_pgm_patches(p["image"], p["patch_size"], p["n_samples"], 0.1, seed)
    else:
        ps = image_patches(synthetic_image(128, seed=0), p["patch_size"], p["n_samples"],
                           0.1, seed)
    Y = ps.noisy - ps.noisy.mean(axis=0)
    Y = Y / np.linalg.norm(Y, axis=0).clip(1e-12).mean()
    return Y, random_dict_from_data(Y, p["n_atoms"], seed)


def run_gradients(p, seed, sink):
    """Angle and norm errors of the analytic and unrolled gradients per sample."""
    Y, D0 = _gradient_data(p, seed)
    L = _lipschitz_dense(D0)
    lmbd, alg = p["lmbd"], p["algorithm"]
    grid = [int(N) for N in p["grid"]]
    depths = [None] + [int(k) for k in p["depths"]]
    t0 = time.perf_counter()
    Zs = reference_solution(D0, Y, lmbd, n_iters=p["ref_iters"], L=L)
    T = Y.shape[1]
    gstar = [grad_reference(D0, Y[:, j], lmbd, z_star=Zs[:, j]).matrix for j in range(T)]
    table = sink.table("gradients", [
        "N", "depth", "cos_am_mean", "cos_am_q10", "cos_am_q90", "cos_ddl_mean",
        "cos_ddl_q10", "cos_ddl_q90", "err_am_mean", "err_am_q10", "err_am_q90",
        "err_ddl_mean", "err_ddl_q10", "err_ddl_q90", "rad_mean", "rad_q10", "rad_q90",
        "rad_indeterminate", "spike_fraction"])
    best = {d: np.full(T, np.inf) for d in depths}
    out = {}
    for N in grid:
        g1 = [grad_am(D0, Y[:, j], UnrollConfig(N, lmbd, alg), L=L).matrix for j in range(T)]
        for d in depths:
            K = None if d is None or d >= N else d
            cfg = UnrollConfig(N, lmbd, alg, truncation=K)
            g2 = [grad_ddl(D0, Y[:, j], cfg, L=L).matrix for j in range(T)]
            c1 = [_angle(cosine_angle(g1[j], gstar[j])) for j in range(T)]
            c2 = [_angle(cosine_angle(g2[j], gstar[j])) for j in range(T)]
            e1 = [float(np.linalg.norm(g1[j] - gstar[j])) for j in range(T)]
            e2 = np.array([float(np.linalg.norm(g2[j] - gstar[j])) for j in range(T)])
            rad = [relative_angle_difference(g1[j], g2[j], gstar[j]) for j in range(T)]
            spikes = (~np.isfinite(e2)) | (e2 > p["spike_factor"] * best[d])
            best[d] = np.minimum(best[d], np.where(np.isfinite(e2), e2, np.inf))
            row = [N, "full" if d is None else d, *_stats(c1), *_stats(c2), *_stats(e1),
                   *_stats(list(e2)), *_stats([_angle(r) if r is not NO_ANGLE else float("nan")
                                              for r in rad]),
                   sum(r is INDETERMINATE for r in rad), float(spikes.mean())]
            table.write(row)
            out[(N, d)] = dict(zip(table.columns, row))
    sink.timing("gradients", time.perf_counter() - t0)
    bound = sink.table("bound", ["sample", "N", "depth", "signs_identified", "error", "bound"])
    nb = min(int(p["n_bound"]), T)
    for j in range(nb):
        y, zs = Y[:, j], Zs[:, j]
        for N in grid:
            K = int(p["bound_depth"])
            cfg = UnrollConfig(N, lmbd, alg, truncation=K if K < N else None)
            z, J = propagate_jacobian(D0, y, cfg, L=L)
            r = D0.data @ z - y
            g2 = np.outer(r, z) + J.vjp(D0.data.T @ r + lmbd * np.sign(z))
            ok = bool(np.array_equal(np.sign(z), np.sign(zs)))
            b = gradient_error_bound(D0, J, z, zs, y) if ok else None
            bound.write([j, N, min(K, N), ok, float(np.linalg.norm(g2 - gstar[j])), b])
    sink.timing("bound", time.perf_counter() - t0)
    return out


# -- full-batch training ------------------------------------------------------

_TRAIN_COLS = ["run", "mode", "N", "phase", "step", "loss", "score", "trials", "step_size"]


def run_train(p, seed, sink, workers=None):
    """Full-batch AM and DDL for each depth, plus the certified-code AM baseline."""
    D, _, Y, D0 = _synthetic(p, p["T"], seed)
    records = sink.table("record", _TRAIN_COLS)
    summary = sink.table("summary", ["run", "mode", "N", "steps", "loss", "score",
                                     "stop_reason"])
    rule = StopRule(tol=p["tol"], patience=p["patience"], max_steps=p["max_steps"])
    out = {}

    def logger(run, mode, N):
        return lambda st, r: records.write([run, mode, N, r["phase"], r["step"], r["loss"],
                                            r["score"], r["trials"], r["step_size"]])

    if p["baseline"]:
        t0 = time.perf_counter()
        st = train_am_exact(Y, D0, p["lmbd"], rule=rule, ground_truth=D,
                            max_inner=p["baseline_iters"],
                            on_step=logger("baseline", "am", p["baseline_iters"]))
        sink.timing("baseline", time.perf_counter() - t0)
        summary.write(["baseline", "am", p["baseline_iters"], st.n_steps, st.losses[-1],
                       st.scores[-1], st.stop_reason])
        sink.checkpoint("dict_baseline", st.dictionary.data)
        out["baseline"] = st
    for N in p["grid"]:
        for mode in p["modes"]:
            run = f"{mode}_N{N}"
            t0 = time.perf_counter()
            learn = bool(p["learn_steps"]) and mode == "ddl"
            st = train_full_batch(Y, D0, UnrollConfig(int(N), p["lmbd"], p["algorithm"]),
                                  mode=mode, rule=rule, learn_steps=learn,
                                  rule_steps=StopRule(tol=p["tol"], patience=p["patience"],
                                                      max_steps=p["max_steps_joint"]),
                                  ground_truth=D, workers=workers,
                                  on_step=logger(run, mode, N))
            sink.timing(run, time.perf_counter() - t0)
            summary.write([run, mode, N, st.n_steps, st.losses[-1], st.scores[-1],
                           st.stop_reason])
            sink.checkpoint(f"dict_{run}", st.dictionary.data)
            out[(mode, int(N))] = st
    return out


# -- stochastic training ------------------------------------------------------

def run_sgd(p, seed, sink, workers=None):
    """Minibatch DDL at several batch sizes; time to the target score goes to timings."""
    D, _, Y, D0 = _synthetic(p, p["T"], seed)
    T = Y.shape[1]
    cfg = UnrollConfig(p["n_iters"], p["lmbd"], p["algorithm"])
    target = p["target_score"]
    records = sink.table("record", ["run", "batch_size", "epoch", "iteration", "loss",
                                    "score", "trials", "accepted", "samples_seen"])
    summary = sink.table("summary", ["run", "batch_size", "updates", "final_score",
                                     "reached_target", "samples_to_target", "stop_reason"])
    out = {}
    for b in p["batch_sizes"]:
        full = b == "full" or b == T
        size = T if full else int(b)
        run = "full" if full else f"batch{size}"
        seen = [0]
        reached = [None]

        def note(score, seen=seen, reached=reached):
            if reached[0] is None and score is not None and score >= target:
                reached[0] = seen[0]

        if full:
            def on_step(st, r, seen=seen):
                seen[0] += T * max(r["trials"], 1) if r["step"] else T
                records.write([run, size, 0, r["step"], r["loss"], r["score"], r["trials"],
                               True, seen[0]])
                note(r["score"])

            st = train_full_batch(Y, D0, cfg, mode="ddl",
                                  rule=StopRule(max_steps=p["max_steps"], target_score=target),
                                  ground_truth=D, workers=workers, on_step=on_step)
            seconds = st.seconds
            times = np.cumsum(seconds)
            idx = next((i for i, s in enumerate(st.scores) if s >= target), None)
            tt = float(times[idx]) if idx is not None else None
            updates, final, reason = st.n_steps, st.scores[-1], st.stop_reason
        else:
            def on_step(st, r, seen=seen, size=size):
                seen[0] += size * max(r["trials"], 1)
                records.write([run, size, r["epoch"], r["iteration"], r["loss"], r["score"],
                               r["trials"], r["accepted"], seen[0]])
                note(r["score"])

            ls = LineSearchConfig(max_step_decay=p["max_step_decay"])
            res = train_stochastic(Y, D0, cfg, size, p["epochs"], p["iters_per_epoch"],
                                   ls=ls, seed=seed, ground_truth=D,
                                   rule=StopRule(target_score=target), workers=workers,
                                   on_step=on_step)
            st = res.state
            tt = res.time_to_target
            updates, final, reason = st.n_steps, st.scores[-1], st.stop_reason
        sink.timing(f"{run}_seconds_to_target", tt)
        sink.timing(f"{run}_seconds_total", float(np.sum(st.seconds)) if full
                    else (st.seconds[-1] if st.seconds else 0.0))
        summary.write([run, size, updates, final, reached[0] is not None, reached[0], reason])
        sink.checkpoint(f"dict_{run}", st.dictionary.data)
        out[run] = {"score": final, "reached": reached[0] is not None,
                    "seconds_to_target": tt}
    return out


# -- rank-1 CSC ---------------------------------------------------------------

def run_csc(p, seed, sink, workers=None):
    """Windowed stochastic DDL on synthetic rank-1 multichannel signals."""
    truth, _, X = gen_rank1_conv_data(p["S"], p["t"], p["n"], p["T"], p["spike_rate"],
                                      p["noise_var"], seed)
    init = rank1_chunk_init(X, p["n"], p["t"], seed=seed)
    records = sink.table("record", ["epoch", "iteration", "loss", "score", "trials",
                                    "accepted"])
    t0 = time.perf_counter()
    res = train_rank1_csc(X, init, UnrollConfig(p["n_iters"], 0.1), window=p["window"],
                          windows_per_batch=p["windows_per_batch"], epochs=p["epochs"],
                          iters_per_epoch=p["iters_per_epoch"],
                          lmbd_fraction=p["lmbd_fraction"],
                          ls=LineSearchConfig(max_step_decay=p["max_step_decay"]),
                          seed=seed, ground_truth=truth, workers=workers,
                          on_step=lambda st, r: records.write(
                              [r["epoch"], r["iteration"], r["loss"], r["score"],
                               r["trials"], r["accepted"]]))
    sink.timing("csc", time.perf_counter() - t0)
    score = rank1_recovery(res.state.dictionary, truth)
    summary = sink.table("summary", ["atom", "assigned", "corr_u", "corr_v"])
    for k in range(p["n"]):
        summary.write([k, int(score.assignment[k]), float(score.u_per_atom[k]),
                       float(score.v_per_atom[k])])
    summary.write(["mean", None, score.u, score.v])
    sink.checkpoint("u", res.state.dictionary.u)
    sink.checkpoint("v", res.state.dictionary.v)
    return score


# -- image denoising ------------------------------------------------------------

def _load_image(p, seed):
    if p["image"]:
        from .io import read_pgm
        img, maxval = read_pgm(p["image"])
        return img.astype(np.float64) / maxval
    return synthetic_image(p["image_size"], seed=0)


def _denoise(D, noisy, clean, size, stride, cfg, L):
    pos = grid_positions(clean.shape, size, stride)
    P = extract_patches(noisy, size, pos)
    mean = P.mean(axis=0)
    z, _ = solve(D, P - mean, cfg, L=L)
    rec = assemble_patches(D.apply(z) + mean, size, pos, clean.shape)
    ok = np.isfinite(rec)
    return psnr(clean[ok], rec[ok])


def run_denoise(p, seed, sink, workers=None):
    """PSNR of patch-based denoising for each unrolled depth and the AM oracle."""
    img = _load_image(p, seed)
    ps = image_patches(img, p["patch_size"], p["n_patches"], p["noise_var"], seed)
    Y = ps.noisy - ps.noisy.mean(axis=0)
    D0 = random_dict_from_data(Y, p["n_atoms"], seed)
    size, stride, lmbd = p["patch_size"], p["stride"], p["lmbd"]
    table = sink.table("psnr", ["method", "N", "psnr", "train_loss", "steps"])
    table.write(["noisy", 0, psnr(img, ps.image_noisy), None, 0])
    rule = StopRule(max_steps=p["max_steps"])
    out = {}
    for N in p["grid"]:
        t0 = time.perf_counter()
        cfg = UnrollConfig(int(N), lmbd, "fista")
        st = train_full_batch(Y, D0, cfg, mode="ddl", rule=rule, workers=workers)
        L = _lipschitz_dense(st.dictionary)
        val = _denoise(st.dictionary, ps.image_noisy, img, size, stride, cfg, L)
        sink.timing(f"ddl_N{N}", time.perf_counter() - t0)
        table.write(["ddl", N, val, st.losses[-1], st.n_steps])
        out[int(N)] = val
    t0 = time.perf_counter()
    st = train_am_exact(Y, D0, lmbd, rule=rule, max_inner=p["oracle_iters"])
    cfg = UnrollConfig(int(p["oracle_iters"]), lmbd, "fista")
    val = _denoise(st.dictionary, ps.image_noisy, img, size, stride, cfg,
                   _lipschitz_dense(st.dictionary))
    sink.timing("oracle", time.perf_counter() - t0)
    table.write(["oracle", p["oracle_iters"], val, st.losses[-1], st.n_steps])
    sink.checkpoint("dict_oracle", st.dictionary.data)
    out["oracle"] = val
    return out


# -- loss landscape -------------------------------------------------------------

def run_linescan(p, seed, sink, workers=None):
    """Train pairs of convolutional dictionaries and scan the loss between them."""
    img = _load_image(p, seed)
    noisy = img + np.sqrt(p["noise_var"]) * make_rng(seed, 40).standard_normal(img.shape)
    data = ((noisy - noisy.mean()) / noisy.std())[None]
    cfg = UnrollConfig(p["n_iters"], p["lmbd"], "fista")
    k, nk = p["kernel_size"], p["n_kernels"]
    scan = sink.table("scan", ["pair", "t", "loss"])
    ends = sink.table("endpoints", ["pair", "which", "train_loss", "scan_loss"])
    out = []
    for pair in range(p["n_pairs"]):
        dicts, losses = [], []
        for which in range(2):
            rng = make_rng(seed, 41, pair, which)
            r = rng.integers(0, img.shape[0] - k + 1, nk)
            c = rng.integers(0, img.shape[1] - k + 1, nk)
            init = project_unit_norm(ConvDictionary(
                np.stack([data[0, a:a + k, b:b + k] for a, b in zip(r, c)])), rng=rng)
            st = train_full_batch(data, init, cfg, mode="ddl",
                                  rule=StopRule(max_steps=p["max_steps"]), workers=workers)
            dicts.append(st.dictionary)
            losses.append(st.losses[-1])
            sink.checkpoint(f"kernels_{pair}_{which}", st.dictionary.kernels)
        res = loss_line_scan(dicts[0], dicts[1], data, cfg, n_points=p["n_points"])
        for t, v in zip(res.t, res.loss):
            scan.write([pair, float(t), float(v)])
        ends.write([pair, 0, losses[0], float(res.loss[0])])
        ends.write([pair, 1, losses[1], float(res.loss[-1])])
        out.append((res, losses))
    return out


RUNNERS = {
    "jacobian": run_jacobian,
    "gradients": run_gradients,
    "train": run_train,
    "sgd": run_sgd,
    "csc": run_csc,
    "denoise": run_denoise,
    "linescan": run_linescan,
}


def run(command, params, seed, sink, workers=None):
    p = resolve(command, params)
    fn = RUNNERS[command]
    if command in ("jacobian", "gradients"):
        return fn(p, seed, sink)
    return fn(p, seed, sink, workers=workers)
