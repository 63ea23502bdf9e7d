"""CRPS training: loss assembly, two-step autoregressive loss, Adam, staged schedule."""

from __future__ import annotations

import logging
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import net
from .autodiff import Tensor
from .domain import DomainSpec, Trajectory, build_window
from .errors import ConfigError, DataError, NumericError
from .rng import Stream, derive_seed
from .scoring import crps_fair, mean_spread

log = logging.getLogger(__name__)

Predictor = Callable[[object, np.ndarray, object], Tensor]


@dataclass(frozen=True)
class Stage:
    epochs: int
    lr: float
    ar_steps: int


# Table 2 of the training procedure, and the desk-scale version (epochs / 10)
FULL_STAGES = (Stage(600, 1e-3, 1), Stage(400, 1e-4, 1), Stage(200, 1e-5, 2))
DESK_STAGES = (Stage(60, 1e-3, 1), Stage(40, 1e-4, 1), Stage(20, 1e-5, 2))


@dataclass(frozen=True)
class TrainConfig:
    stages: tuple[Stage, ...] = DESK_STAGES
    n_members: int = 4
    batch_size: int = 4
    batches_per_epoch: int | None = 8  # None = full pass over all windows
    seed: int = 0
    estimator: str = "fair"
    warmup_epochs: int = 0  # biased-estimator warmup with a larger ensemble
    warmup_members: int = 8
    collapse_floor: float = 0.01
    collapse_patience: int = 5
    val_windows: int = 8
    val_members: int = 8
    clip_norm: float = 1.0
    resample_noise: bool = True  # fresh z at the second AR step
    frozen: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("at least one training stage is required")
        for st in self.stages:
            if st.ar_steps not in (1, 2):
                raise ConfigError(f"AR steps must be 1 or 2, got {st.ar_steps}")
            if st.epochs < 0 or st.lr <= 0:
                raise ConfigError(f"invalid stage {st}")
        if self.estimator not in ("fair", "biased"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.estimator == "fair" and self.n_members < 2:
            raise ConfigError("the fair estimator needs n_members >= 2")
        if self.batch_size < 1 or self.val_members < 2:
            raise ConfigError("batch_size >= 1 and val_members >= 2 are required")

    @property
    def total_epochs(self) -> int:
        return sum(st.epochs for st in self.stages)

    def stage_of(self, epoch: int) -> tuple[int, Stage]:
        acc = 0
        for i, st in enumerate(self.stages):
            acc += st.epochs
            if epoch < acc:
                return i, st
        raise ValueError(f"epoch {epoch} beyond schedule")

    def with_full_schedule(self) -> "TrainConfig":
        return replace(self, stages=FULL_STAGES)


# loss assembly -----------------------------------------------------------------


def ensemble_crps_loss(members: Tensor, target: np.ndarray, estimator: str = "fair",
                       domain: DomainSpec | None = None) -> Tensor:
    """CRPS loss for member predictions ``[B, N, d_x, H_I, W_I]``.

    Per cell and variable the ensemble CRPS estimate, averaged over the
    interior grid, summed over variables and averaged over the batch.  A
    full-frame ``target`` is cropped to the interior first, so boundary cells
    never enter the loss.
    """
    b, n = members.shape[:2]
    if estimator == "fair" and n < 2:
        raise ConfigError(f"fair CRPS loss needs at least 2 members, got {n}")
    if estimator not in ("fair", "biased"):
        raise ConfigError(f"unknown estimator {estimator!r}")
    if target.shape[-2:] != members.shape[-2:]:
        if domain is None:
            raise DataError("full-frame target needs the domain to crop it")
        target = domain.crop_interior(target)
    if target.shape != (b,) + members.shape[2:]:
        raise DataError(f"target shape {target.shape} does not match members {members.shape}")
    tgt = Tensor(target, dtype=members.data.dtype)
    each = [ad.index(members, i, axis=1) for i in range(n)]
    skill = ad.abs_subtract(each[0], tgt)
    for m in each[1:]:
        skill = ad.add(skill, ad.abs_subtract(m, tgt))
    score = ad.scale(skill, 1.0 / n)
    if n > 1:
        spread = None
        for i in range(n):
            for j in range(i + 1, n):
                d = ad.abs_subtract(each[i], each[j])
                spread = d if spread is None else ad.add(spread, d)
        # the double sum over ordered pairs is twice the sum over i < j
        coef = 2.0 / (2.0 * n * (n - 1)) if estimator == "fair" else 2.0 / (2.0 * n * n)
        score = ad.sub(score, ad.scale(spread, coef))
    per_var = ad.mean_over_axes(score, axes=(-2, -1))
    per_sample = ad.sum_over_axes(per_var, axes=-1)
    return ad.mean_over_axes(per_sample)


def noise_batch(seed: int, count: int, step: int, d_z: int) -> np.ndarray:
    return np.stack([net.sample_noise(seed, m, step, d_z).z for m in range(count)])


def network_predictor(params: dict[str, Tensor], domain: DomainSpec, fcfg: net.ForecasterConfig) -> Predictor:
    def predict(inputs, z, current):
        return net.forward_batch(params, inputs, z, current, domain, fcfg)

    return predict


def _as_const(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr, dtype=dtype)


def ar_loss(
    predictor: Predictor,
    samples: Sequence[tuple[Trajectory, int]],
    domain: DomainSpec,
    n_members: int,
    steps: int,
    noise_seed: int,
    d_z: int,
    estimator: str = "fair",
    resample_noise: bool = True,
    dtype=np.float32,
    return_steps: bool = False,
):
    """Mean CRPS loss over ``steps`` autoregressive steps.

    Step ``s`` feeds each member's own earlier predictions back in (interior
    from the member, boundary from the truth); gradients flow through the
    rollout.  ``steps=1`` is the plain single-step loss.
    """
    if steps < 1:
        raise ConfigError("steps must be positive")
    for traj, t in samples:
        if not 1 <= t <= traj.length - 1 - steps:
            raise DataError(f"trajectory of length {traj.length} too short for t={t}, {steps} steps")
    if estimator == "fair" and n_members < 2:
        raise ConfigError("fair CRPS loss needs at least 2 members")
    b, n = len(samples), n_members
    d_x = domain.d_x
    hi, wi = domain.interior_height, domain.interior_width
    top = domain.boundary
    history: list[Tensor | None] = [None, None]  # predicted (prev, cur) or None = truth
    losses = []
    z_first = None
    for s in range(steps):
        rows_const, cur_const, targets = [], [], []
        for traj, t in samples:
            tt = t + s
            w = build_window(domain, traj, tt)
            rows_const.append(w.channels())
            cur_const.append(w.current_interior)
            targets.append(w.target)
        base = np.repeat(np.stack(rows_const), n, axis=0)
        if history[0] is None and history[1] is None:
            inputs = base
        else:
            parts = []
            for k, hist in enumerate(history):
                chans = base[:, k * d_x : (k + 1) * d_x]
                if hist is None:
                    parts.append(_as_const(chans, dtype))
                else:
                    parts.append(ad.embed(hist, top, top, domain.height, domain.width))
            parts.append(_as_const(base[:, 2 * d_x :], dtype))
            inputs = ad.concat_channels(parts)
        current = history[1] if history[1] is not None else np.repeat(np.stack(cur_const), n, axis=0)
        if s == 0 or resample_noise:
            z = noise_batch(noise_seed, b * n, s, d_z)
            z_first = z if s == 0 else z_first
        else:
            z = z_first
        pred = predictor(inputs, z.astype(dtype), current)
        members = ad.reshape(pred, (b, n, d_x, hi, wi))
        losses.append(ensemble_crps_loss(members, np.stack(targets), estimator))
        history = [history[1], pred]
    total = losses[0]
    for extra in losses[1:]:
        total = ad.add(total, extra)
    total = ad.scale(total, 1.0 / steps)
    return (total, losses) if return_steps else total


def loss_step(predictor, samples, domain, n_members, noise_seed, d_z, estimator="fair", dtype=np.float32):
    return ar_loss(predictor, samples, domain, n_members, 1, noise_seed, d_z, estimator, dtype=dtype)


# optimiser ---------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {k}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            m = self.m[k] = (b1 * self.m[k] + (1 - b1) * g).astype(np.float32)
            v = self.v[k] = (b2 * self.v[k] + (1 - b2) * g * g).astype(np.float32)
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[k] = (params[k] - update).astype(np.float32)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm and total > max_norm:
        factor = np.float32(max_norm / total)
        for k in grads:
            grads[k] = grads[k] * factor
    return total


# training loop -------------------------------------------------------------------


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    adam: Adam
    epoch: int = 0
    best_val: float = float("inf")
    best_params: dict[str, np.ndarray] | None = None
    low_spread_run: int = 0
    warmup_until: int = 0
    log: list[dict] = field(default_factory=list)
    timing: list[dict] = field(default_factory=list)
    stage_params: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def events(self) -> list[str]:
        return [row["event"] for row in self.log if row["event"]]


LOG_COLUMNS = (
    "epoch", "stage", "lr", "ar_steps", "estimator", "members",
    "train_loss", "val_crps", "val_spread", "grad_norm", "event",
)


def training_pool(trajs: Sequence[Trajectory], ar_steps: int) -> list[tuple[int, int]]:
    return [(i, t) for i, tr in enumerate(trajs) for t in range(1, tr.length - ar_steps)]


def validation_windows(trajs: Sequence[Trajectory], count: int) -> list[tuple[int, int]]:
    """A fixed spread of (trajectory, t) pairs used for every validation."""
    pairs = []
    for k in range(count):
        i = k % len(trajs)
        span = trajs[i].length - 2
        pairs.append((i, 1 + (5 * k + 3) % span))
    return pairs


def validate(params, domain, fcfg, trajs, tcfg: TrainConfig) -> tuple[float, float]:
    """Mean fair CRPS (loss aggregation) and mean ensemble spread on fixed windows."""
    p = net.as_tensors(params)
    seed = derive_seed(tcfg.seed, "validation")
    scores, spreads = [], []
    for k, (i, t) in enumerate(validation_windows(trajs, tcfg.val_windows)):
        w = build_window(domain, trajs[i], t)
        zs = noise_batch(derive_seed(seed, "window", member=k), tcfg.val_members, 0, fcfg.d_z)
        members = net.forward_ensemble(w, list(zs), p, domain, fcfg)
        scores.append(float(np.sum(np.mean(crps_fair(members, w.target), axis=(-2, -1)))))
        spreads.append(mean_spread(members))
    return float(np.mean(scores)), float(np.mean(spreads))


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def log_rows_to_csv(rows: Sequence[dict]) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in LOG_COLUMNS))
    return "\n".join(lines) + "\n"


def train(
    train_trajs: Sequence[Trajectory],
    val_trajs: Sequence[Trajectory],
    domain: DomainSpec,
    fcfg: net.ForecasterConfig,
    tcfg: TrainConfig,
    state: TrainState | None = None,
    init_params: dict[str, np.ndarray] | None = None,
    stop_after: int | None = None,
    on_epoch_end: Callable[[TrainState, TrainConfig], None] | None = None,
) -> TrainState:
    """Run (or continue) the staged schedule.

    Everything random is derived from ``tcfg.seed`` and the epoch index, so a
    run resumed from a saved :class:`TrainState` continues bit-identically.
    ``stop_after`` ends the run after that many total epochs.
    """
    if not train_trajs or not val_trajs:
        raise DataError("training and validation trajectories are required")
    fcfg.check_domain(domain)
    if state is None:
        params = init_params if init_params is not None else net.init_params(fcfg, domain, tcfg.seed)
        params = {k: v.copy() for k, v in params.items()}
        state = TrainState(params=params, adam=Adam(params), warmup_until=tcfg.warmup_epochs)
    end = tcfg.total_epochs if stop_after is None else min(stop_after, tcfg.total_epochs)
    frozen = set(tcfg.frozen)
    while state.epoch < end:
        epoch = state.epoch
        stage_idx, stage = tcfg.stage_of(epoch)
        warm = epoch < state.warmup_until
        estimator = "biased" if warm else tcfg.estimator
        members = tcfg.warmup_members if warm else tcfg.n_members
        pool = training_pool(train_trajs, stage.ar_steps)
        nb = tcfg.batches_per_epoch or -(-len(pool) // tcfg.batch_size)
        order = Stream.for_purpose(tcfg.seed, "epoch-order", step=epoch).permutation(len(pool))
        t0 = time.perf_counter()
        good = {k: v.copy() for k, v in state.params.items()}
        losses, norms = [], []
        try:
            for bi in range(nb):
                picks = [pool[order[(bi * tcfg.batch_size + j) % len(pool)]] for j in range(tcfg.batch_size)]
                samples = [(train_trajs[i], t) for i, t in picks]
                pt = {k: Tensor(v, requires_grad=k not in frozen) for k, v in state.params.items()}
                loss = ar_loss(
                    network_predictor(pt, domain, fcfg), samples, domain, members, stage.ar_steps,
                    derive_seed(tcfg.seed, "train-noise", member=epoch, step=bi), fcfg.d_z,
                    estimator, tcfg.resample_noise,
                )
                ad.backward(loss)
                grads = {
                    k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                    for k, t in pt.items() if k not in frozen
                }
                norms.append(clip_global_norm(grads, tcfg.clip_norm))
                state.adam.step(state.params, grads, stage.lr)
                losses.append(float(loss.data))
        except NumericError:
            state.params = good
            log.error("numeric failure in epoch %d; keeping last good parameters", epoch)
            raise
        val_crps, val_spread = validate(state.params, domain, fcfg, val_trajs, tcfg)
        event = ""
        if val_spread < tcfg.collapse_floor:
            state.low_spread_run += 1
        else:
            state.low_spread_run = 0
        if state.low_spread_run >= tcfg.collapse_patience:
            event = "collapse-warning"
            log.warning("ensemble spread %.3g below floor for %d epochs", val_spread, state.low_spread_run)
            state.low_spread_run = 0
            if tcfg.warmup_epochs:
                state.warmup_until = epoch + 1 + tcfg.warmup_epochs
                event += ";biased-warmup"
        if val_crps < state.best_val:
            state.best_val = val_crps
            state.best_params = {k: v.copy() for k, v in state.params.items()}
        state.log.append({
            "epoch": epoch, "stage": stage_idx + 1, "lr": stage.lr, "ar_steps": stage.ar_steps,
            "estimator": estimator, "members": members, "train_loss": float(np.mean(losses)),
            "val_crps": val_crps, "val_spread": val_spread, "grad_norm": float(np.mean(norms)),
            "event": event,
        })
        state.timing.append({"epoch": epoch, "wall_time": time.perf_counter() - t0})
        log.info("epoch %d stage %d loss %.4f val_crps %.4f spread %.4f", epoch, stage_idx + 1,
                 losses and np.mean(losses), val_crps, val_spread)
        state.epoch += 1
        if state.epoch == sum(st.epochs for st in tcfg.stages[: stage_idx + 1]):
            state.stage_params[stage_idx + 1] = {k: v.copy() for k, v in state.params.items()}
        if on_epoch_end is not None:
            on_epoch_end(state, tcfg)
    return state
