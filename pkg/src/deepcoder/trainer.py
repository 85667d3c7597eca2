"""Joint two-coder training: leave-subset-out splitting, balanced
batches, warm-up schedules, SGD with momentum, prior propagation, and
the alternating per-epoch optimization of both coders.

Sign convention: every objective is maximized; the optimizer is fed the
gradient of the negated objective, so the update rule stays the
textbook v <- m*v + g; p <- p - lr*v.

Loss recording: history rows hold per-point means of each raw term plus
the combined bound

    L_DC = alpha*L_kl_X + L_r_X + (1-alpha)*L_p_X
         + beta*L_kl_Z0 + L_r_Z0 + L_o_Z0

using the row's own alpha/beta, so the recorded columns always recombine
into the recorded L_DC.  The epoch counter of a TrainState counts main
(joint) epochs; warm-start epochs appear in the history only.

Determinism: all randomness flows from the one generator stored in the
TrainState; its bit state serializes into checkpoints, so a resumed run
continues the straight-through run exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics, vcae, vogpae
from .autodiff import Tape
from .dataio import Dataset, TrainConfig
from .errors import InvalidArgumentError, TrainingError
from .vcae import GaussianPrior, VcaeArchitecture

HISTORY_COLUMNS = ["epoch", "L_kl_X", "L_r_X", "L_p_X", "L_kl_Z0",
                   "L_r_Z0", "L_o_Z0", "L_DC", "alpha", "beta",
                   "wall_seconds"]


@dataclass
class SplitSpec:
    n_l: int
    seed: int = 0


@dataclass
class OptimizerState:
    """SGD-with-momentum constants plus per-tensor velocity buffers."""

    learning_rate: float
    momentum: float
    velocities: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainState:
    config: TrainConfig
    arch: VcaeArchitecture
    vcae_params: dict[str, np.ndarray]
    vog: vogpae.VogpaeState | None
    prior: GaussianPrior
    idx_r: np.ndarray
    idx_l: np.ndarray
    epoch: int
    history: list[dict]
    velocities: dict[str, np.ndarray]
    rng: np.random.Generator


def warmup_weight(epoch: int, n_t: int) -> float:
    """Linear ramp min(epoch / n_t, 1); n_t = 0 pins the weight at 1."""
    if n_t <= 0:
        return 1.0
    return min(epoch / n_t, 1.0)


def split_leave_subset_out(dataset: Dataset,
                           spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint (indices_R, indices_L) with X_L subject-balanced.

    Subset slots are handed out round-robin over a shuffled subject
    order, so per-subject counts in X_L differ by at most one whenever
    the subjects have enough samples to allow it.
    """
    n = dataset.n
    if spec.n_l > n:
        raise InvalidArgumentError(f"n_l {spec.n_l} exceeds dataset size {n}")
    rng = np.random.default_rng(spec.seed)
    subject_ids = np.unique(dataset.subjects)
    pools = {}
    for s in subject_ids:
        members = np.flatnonzero(dataset.subjects == s)
        pools[s] = list(rng.permutation(members))
    order = list(rng.permutation(subject_ids))
    chosen: list[int] = []
    while len(chosen) < spec.n_l:
        progressed = False
        for s in order:
            if len(chosen) >= spec.n_l:
                break
            if pools[s]:
                chosen.append(int(pools[s].pop()))
                progressed = True
        if not progressed:
            raise TrainingError("subject pools exhausted before n_l reached")
    idx_l = np.sort(np.asarray(chosen, dtype=np.int64))
    mask = np.ones(n, dtype=bool)
    mask[idx_l] = False
    idx_r = np.flatnonzero(mask).astype(np.int64)
    return idx_r, idx_l


def balanced_batches(labels: np.ndarray, subjects: np.ndarray,
                     batch_size: int, seed: int) -> list[np.ndarray]:
    """Index batches balanced over (subject, max level) strata.

    Emits ceil(n / batch_size) batches of exactly batch_size samples.
    Each batch takes a near-equal share from every stratum (counts
    differ by at most one; which strata carry the remainder rotates
    between batches).  Strata draw without replacement until exhausted,
    then uniformly with replacement.
    """
    labels = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    subjects = np.asarray(subjects, dtype=np.int64)
    n = subjects.shape[0]
    if n == 0:
        raise InvalidArgumentError("cannot batch an empty dataset")
    if labels.shape[0] != n:
        raise InvalidArgumentError("labels and subjects disagree on n")
    if batch_size < 1:
        raise InvalidArgumentError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(seed)
    strat_key = subjects * (labels.max() + 1) + labels.max(axis=1)
    keys = np.unique(strat_key)
    queues = {}
    members = {}
    for key in keys:
        idx = np.flatnonzero(strat_key == key)
        members[key] = idx
        queues[key] = list(rng.permutation(idx))
    order = list(rng.permutation(keys))
    s = len(order)
    base, rem = divmod(batch_size, s)
    n_batches = -(-n // batch_size)
    batches = []
    for b in range(n_batches):
        batch: list[int] = []
        for pos, key in enumerate(order):
            want = base + (1 if (pos - b) % s < rem else 0)
            for _ in range(want):
                if queues[key]:
                    batch.append(int(queues[key].pop()))
                else:
                    pool = members[key]
                    batch.append(int(pool[rng.integers(0, pool.shape[0])]))
        batches.append(np.asarray(batch, dtype=np.int64))
    return batches


def sgd_momentum_step(params: dict[str, np.ndarray],
                      grads: dict[str, np.ndarray | None],
                      opt: OptimizerState) -> dict[str, np.ndarray]:
    """v <- m*v + g; p <- p - lr*v.  Missing gradients count as zero.

    Velocity buffers live in ``opt`` and are updated in place; the
    returned dict holds fresh parameter arrays.
    """
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        else:
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise TrainingError(
                    f"gradient shape {g.shape} != parameter shape "
                    f"{p.shape} for {name}")
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in term {name}")
        v = opt.velocities.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = opt.momentum * v + g
        opt.velocities[name] = v
        out[name] = p - opt.learning_rate * v
    return out


def propagate_prior(vog: vogpae.VogpaeState,
                    z0_r: np.ndarray) -> GaussianPrior:
    """Chain encode_new -> decode_new over X_R's codes; the predictive
    mean/variance (noise included) becomes the per-point Z_0 prior."""
    z1 = vogpae.encode_new(vog, z0_r)
    mean, var = vogpae.decode_new(vog, z1)
    return GaussianPrior(mean, np.repeat(var[:, None], mean.shape[1], axis=1))


def _clip(g: np.ndarray, clip_norm: float) -> np.ndarray:
    norm = float(np.sqrt(np.sum(g * g)))
    if norm > clip_norm:
        return g * (clip_norm / norm)
    return g


def _collect_grads(param_vars: dict, clip_norm: float) -> dict:
    """Negated (descent-ready) clipped gradients from a backward pass."""
    grads = {}
    for name, var in param_vars.items():
        g = var.grad
        grads[name] = None if g is None else _clip(-g, clip_norm)
    return grads


def _check_parts_finite(parts: dict, epoch_row: int, step: str) -> None:
    for name, var in parts.items():
        if not np.all(np.isfinite(var.value)):
            raise TrainingError(
                f"epoch {epoch_row}, step {step}: term {name} is non-finite")


def _vcae_epoch(state: TrainState, dataset: Dataset, alpha: float,
                epoch_row: int) -> dict[str, float]:
    """One pass of balanced batches over X_R; returns epoch-mean parts."""
    cfg = state.config
    x_r = dataset.images[state.idx_r].astype(np.float64)
    y_r = dataset.labels[state.idx_r]
    subj_r = dataset.subjects[state.idx_r]
    seed = int(state.rng.integers(0, 2 ** 63))
    batches = balanced_batches(y_r, subj_r, cfg.batch_size, seed)
    opt = OptimizerState(cfg.learning_rate, cfg.momentum, state.velocities)
    sums = {"l_kl": 0.0, "l_r": 0.0, "l_p": 0.0}
    for batch in batches:
        eps = state.rng.standard_normal((batch.shape[0], cfg.latent_z0))
        tape = Tape()
        pvars = {name: tape.leaf(arr)
                 for name, arr in state.vcae_params.items()}
        obj, parts = vcae.vcae_objective(
            pvars, state.arch, x_r[batch], y_r[batch],
            state.prior.rows(batch), alpha, cfg.sigma_x, eps,
            dataset.levels, tape)
        _check_parts_finite(parts, epoch_row, "vcae")
        tape.backward(obj)
        grads = {f"vcae.{n}": g for n, g in
                 _collect_grads(pvars, cfg.clip_norm).items()}
        named = {f"vcae.{n}": p for n, p in state.vcae_params.items()}
        updated = sgd_momentum_step(named, grads, opt)
        state.vcae_params = {n.removeprefix("vcae."): p
                             for n, p in updated.items()}
        for key in sums:
            sums[key] += float(parts[key].value)
    return {key: val / len(batches) for key, val in sums.items()}


def _vogpae_epoch(state: TrainState, dataset: Dataset, beta: float,
                  epoch_row: int) -> dict[str, float]:
    """Full-batch gradient steps on the subset objective; returns the
    parts of the last step (the end-of-epoch bound)."""
    cfg = state.config
    y_l = dataset.labels[state.idx_l]
    opt = OptimizerState(cfg.gp_learning_rate, cfg.momentum,
                         state.velocities)
    last = None
    for _ in range(max(cfg.gp_steps_per_epoch, 1)):
        eps = state.rng.standard_normal(
            (cfg.mc_samples, state.vog.n, cfg.latent_z1))
        tape = Tape()
        svars = vogpae.lift_state(tape, state.vog)
        obj, parts = vogpae.vogpae_objective(
            svars, state.vog.z0, y_l, beta, eps, dataset.levels)
        _check_parts_finite(parts, epoch_row, "vogpae")
        last = {key: float(var.value) for key, var in parts.items()}
        if cfg.gp_steps_per_epoch == 0:
            break
        tape.backward(obj)
        grads = {f"vog.{n}": g for n, g in
                 _collect_grads(svars, cfg.clip_norm).items()}
        named = {f"vog.{n}": p for n, p in state.vog.params.items()}
        updated = sgd_momentum_step(named, grads, opt)
        state.vog.params = {n.removeprefix("vog."): p
                            for n, p in updated.items()}
    return last


def _encoder_fit_epoch(state: TrainState) -> None:
    """A few ascent steps on the recognition GP's marginal likelihood.

    The encoder-direction kernel does not appear in the training bound
    (its gradient there is structurally zero), so it is fitted as a
    recognition model: maximize the marginal likelihood of the current
    variational means M given the cached Z_0 inputs.
    """
    from . import gp as gpmod
    cfg = state.config
    opt = OptimizerState(cfg.gp_learning_rate, cfg.momentum,
                         state.velocities)
    for _ in range(cfg.encoder_fit_steps):
        kernel = state.vog.enc_kernel()
        _, g = gpmod.gp_marginal_loglik(
            state.vog.z0, state.vog.params["M"], kernel,
            state.vog.sigma_r2, grad=True)
        g = g / state.vog.n
        d0 = state.vog.d0
        grads = {
            "vog.enc.log_sf2": _clip(-np.asarray(g[0]), cfg.clip_norm),
            "vog.enc.log_ls": _clip(-g[1:1 + d0], cfg.clip_norm),
            "vog.enc.log_noise": _clip(-np.asarray(g[1 + d0]),
                                       cfg.clip_norm),
        }
        named = {name: state.vog.params[name.removeprefix("vog.")]
                 for name in grads}
        updated = sgd_momentum_step(named, grads, opt)
        for name, val in updated.items():
            state.vog.params[name.removeprefix("vog.")] = val


def _record(state: TrainState, parts_x: dict, parts_z: dict, alpha: float,
            beta: float, wall: float) -> None:
    row = {
        "epoch": len(state.history),
        "L_kl_X": parts_x["l_kl"],
        "L_r_X": parts_x["l_r"],
        "L_p_X": parts_x["l_p"],
        "L_kl_Z0": parts_z["l_kl"],
        "L_r_Z0": parts_z["l_r"],
        "L_o_Z0": parts_z["l_o"],
        "alpha": alpha,
        "beta": beta,
        "wall_seconds": wall,
    }
    row["L_DC"] = (alpha * row["L_kl_X"] + row["L_r_X"]
                   + (1.0 - alpha) * row["L_p_X"]
                   + beta * row["L_kl_Z0"] + row["L_r_Z0"] + row["L_o_Z0"])
    if not np.isfinite(row["L_DC"]):
        raise TrainingError(
            f"epoch {row['epoch']}: combined bound is non-finite")
    state.history.append(row)


def _fresh_state(dataset: Dataset, config: TrainConfig) -> TrainState:
    arch = VcaeArchitecture(
        in_channels=dataset.images.shape[1],
        in_height=dataset.images.shape[2],
        in_width=dataset.images.shape[3],
        stages=[vcae.ConvStage(f, k, p) for f, k, p in config.conv_stages],
        fc_layers=config.fc_layers, fc_width=config.fc_width,
        latent=config.latent_z0)
    arch.validate()
    rng = np.random.default_rng(config.seed)
    split_seed = int(rng.integers(0, 2 ** 63))
    idx_r, idx_l = split_leave_subset_out(
        dataset, SplitSpec(n_l=config.n_l, seed=split_seed))
    if idx_r.shape[0] == 0:
        raise TrainingError("X_R is empty; nothing for the VC-AE to train on")
    params = vcae.init_vcae_params(arch, dataset.levels, rng)
    prior = GaussianPrior.flat(idx_r.shape[0], config.latent_z0)
    # vog is initialized after the warm start, once Z_0 codes exist;
    # a placeholder keeps the dataclass total
    return TrainState(
        config=config, arch=arch, vcae_params=params, vog=None,
        prior=prior, idx_r=idx_r, idx_l=idx_l, epoch=0, history=[],
        velocities={}, rng=rng)


def train_joint(dataset: Dataset, config: TrainConfig | None = None,
                resume_state: TrainState | None = None) -> TrainState:
    """Run (or continue) the full two-coder optimization.

    Fresh runs: warm start the VC-AE against the flat prior for
    warm_start_epochs, initialize the subset coder from the projected
    codes, then alternate one VC-AE epoch and one subset-coder epoch,
    re-propagating the prior after each, until the relative change of
    L_DC over ``patience`` epochs drops below ``tol`` (checked once all
    warm-ups are complete) or ``max_epochs`` is reached.

    With ``resume_state`` the loop continues exactly where it stopped;
    pass ``config`` to override the stored one (same architecture).
    """
    dataset.validate()
    if resume_state is not None:
        state = resume_state
        if config is not None:
            state.config = config
    else:
        if config is None:
            raise InvalidArgumentError("need a config for a fresh run")
        state = _fresh_state(dataset, config)
        zero_z = {"l_kl": 0.0, "l_r": 0.0, "l_o": 0.0}
        for _ in range(config.warm_start_epochs):
            t0 = time.perf_counter()
            parts = _vcae_epoch(state, dataset, alpha=1.0,
                                epoch_row=len(state.history))
            _record(state, parts, zero_z, alpha=1.0, beta=0.0,
                    wall=time.perf_counter() - t0)
        z0_l = vcae.encode_mean(state.vcae_params, state.arch,
                                dataset.images[state.idx_l].astype(np.float64))
        state.vog = vogpae.init_vogpae_state(
            z0_l, dataset.levels, config.latent_z1, state.rng)

    cfg = state.config
    main_ldc = [row["L_DC"] for row in state.history[cfg.warm_start_epochs:]]
    while state.epoch < cfg.max_epochs:
        t0 = time.perf_counter()
        e = state.epoch
        alpha = warmup_weight(e, cfg.alpha_epochs)
        beta = warmup_weight(e, cfg.beta_epochs)

        parts_x = _vcae_epoch(state, dataset, alpha,
                              epoch_row=len(state.history))
        z0_l = vcae.encode_mean(
            state.vcae_params, state.arch,
            dataset.images[state.idx_l].astype(np.float64))
        state.vog.z0 = np.ascontiguousarray(z0_l)
        parts_z = _vogpae_epoch(state, dataset, beta,
                                epoch_row=len(state.history))
        _encoder_fit_epoch(state)
        z0_r = vcae.encode_mean(
            state.vcae_params, state.arch,
            dataset.images[state.idx_r].astype(np.float64))
        state.prior = propagate_prior(state.vog, z0_r)

        _record(state, parts_x, parts_z, alpha, beta,
                time.perf_counter() - t0)
        main_ldc.append(state.history[-1]["L_DC"])
        state.epoch += 1

        warmed = e >= max(cfg.alpha_epochs, cfg.beta_epochs)
        if warmed and len(main_ldc) > cfg.patience:
            ref = main_ldc[-1 - cfg.patience]
            rel = abs(main_ldc[-1] - ref) / max(abs(ref), 1e-8)
            if rel < cfg.tol:
                break
    return state


def infer(state: TrainState, x_star: np.ndarray) -> tuple[np.ndarray,
                                                          np.ndarray]:
    """Levels and reconstruction for one input image.

    The chain is: encoder mean -> subset-coder encode -> label argmax,
    and subset-coder decode -> VC-AE decoder for the reconstruction.
    """
    x_star = np.asarray(x_star, dtype=np.float64)
    if x_star.ndim == 3:
        x_star = x_star[None]
    z0 = vcae.encode_mean(state.vcae_params, state.arch, x_star)
    z1 = vogpae.encode_new(state.vog, z0)
    levels = vogpae.predict_labels(state.vog, z1[0])
    z0_rec, _ = vogpae.decode_new(state.vog, z1)
    x_rec = vcae.decode_mean(state.vcae_params, state.arch, z0_rec)
    return levels, x_rec[0]


def predict_levels(state: TrainState, images: np.ndarray) -> np.ndarray:
    """Vectorized label prediction for a stack of images, [n, Q]."""
    z0 = vcae.encode_mean(state.vcae_params, state.arch,
                          np.asarray(images, dtype=np.float64))
    z1 = vogpae.encode_new(state.vog, z0)
    out = np.empty((z1.shape[0], len(state.vog.levels)), dtype=np.int64)
    for i in range(z1.shape[0]):
        out[i] = vogpae.predict_labels(state.vog, z1[i])
    return out


def evaluate_split(state: TrainState, dataset: Dataset,
                   indices: np.ndarray) -> metrics.MetricReport:
    """Label metrics plus NLPD of the code reconstruction on a split."""
    x = dataset.images[indices].astype(np.float64)
    y = dataset.labels[indices]
    z0 = vcae.encode_mean(state.vcae_params, state.arch, x)
    z1 = vogpae.encode_new(state.vog, z0)
    pred = np.empty_like(y)
    for i in range(z1.shape[0]):
        pred[i] = vogpae.predict_labels(state.vog, z1[i])
    rec_mean, rec_var = vogpae.decode_new(state.vog, z1)
    return metrics.build_report(pred, y, z0, rec_mean, rec_var)
