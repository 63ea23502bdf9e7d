"""Synthetic ground truth: stochastic advection-diffusion on a periodic parent grid.

Each variable is advected by a steady divergence-free shear flow, diffused,
relaxed towards zero, weakly exchanged with the other variables and kicked by
spatially correlated Gaussian noise every substep.  Variable 0 also receives a
diurnal source proportional to the orography.  The limited-area frame is a
fixed crop of the parent, so its boundary is exactly what the parent
simulation produced there.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .domain import DomainSpec, NormStats, Trajectory
from .errors import ConfigError, DataError
from .rng import Stream, derive_seed

NOISE_LANES = 4096


@dataclass(frozen=True)
class ToyDynamicsConfig:
    parent_size: int = 48
    lam_size: int = 24
    boundary: int = 4
    lam_offset: int = 12
    n_vars: int = 2
    velocity_amplitude: float = 0.25  # cells per substep
    diffusion: float = 0.03  # cells^2 per substep
    damping: float = 0.003  # per substep
    coupling: float = 0.02  # per substep
    forcing_amplitude: float = 0.1
    correlation_length: float = 3.0  # cells
    diurnal_amplitude: float = 0.04
    steps: int = 24  # output steps T, states X^0..X^T
    substeps: int = 6
    spinup_steps: int = 60
    steps_per_day: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.parent_size < 2 * self.lam_size:
            raise ConfigError("parent grid must be at least twice the LAM size")
        if self.lam_offset < 0 or self.lam_offset + self.lam_size > self.parent_size:
            raise ConfigError("LAM crop falls outside the parent grid")
        if self.n_vars < 1 or self.steps < 2 or self.substeps < 1:
            raise ConfigError("n_vars >= 1, steps >= 2 and substeps >= 1 are required")
        umax = self.max_velocity()
        if umax > 0.5:
            raise ConfigError(f"CFL violated: |u| dt/dx = {umax:.3f} > 0.5")
        if not 0 <= self.diffusion <= 0.25:
            raise ConfigError(f"diffusion number {self.diffusion} outside [0, 0.25]")
        # the explicit upwind + diffusion update stays a convex combination
        if 1.7 * self.velocity_amplitude + 4 * self.diffusion + self.damping + 2 * self.coupling > 1:
            raise ConfigError("explicit update is not monotone for these coefficients")

    def max_velocity(self) -> float:
        return abs(self.velocity_amplitude)

    def domain(self) -> DomainSpec:
        return DomainSpec(
            height=self.lam_size, width=self.lam_size, boundary=self.boundary,
            d_x=self.n_vars, d_f=2, d_s=1, dt_hours=24.0 / self.steps_per_day,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _velocity(cfg: ToyDynamicsConfig) -> tuple[np.ndarray, np.ndarray]:
    p = cfg.parent_size
    coord = np.arange(p) * (2 * np.pi / p)
    a = cfg.velocity_amplitude
    ux = a * (0.6 + 0.4 * np.sin(coord))  # depends on row only
    uy = a * (0.3 + 0.4 * np.cos(coord))  # depends on column only
    return ux[:, None] * np.ones((1, p)), np.ones((p, 1)) * uy[None, :]


def _noise_filter(cfg: ToyDynamicsConfig) -> np.ndarray:
    p = cfg.parent_size
    k = np.fft.fftfreq(p) * 2 * np.pi
    kr = np.fft.rfftfreq(p) * 2 * np.pi
    k2 = k[:, None] ** 2 + kr[None, :] ** 2
    g = np.exp(-0.5 * k2 * cfg.correlation_length**2)
    # full-spectrum weights so the filtered field has unit variance per cell
    full = np.exp(-0.5 * (k[:, None] ** 2 + k[None, :] ** 2) * cfg.correlation_length**2)
    return g / np.sqrt(np.mean(full**2))


def correlated_noise(cfg: ToyDynamicsConfig, stream: Stream, n: int) -> np.ndarray:
    """``n`` fields ``[n, n_vars, P, P]`` of unit-variance spatially correlated noise."""
    p = cfg.parent_size
    white = stream.normal(n * cfg.n_vars * p * p).reshape(n, cfg.n_vars, p, p)
    spec = np.fft.rfft2(white, axes=(-2, -1)) * _noise_filter(cfg)
    return np.fft.irfft2(spec, s=(p, p), axes=(-2, -1))


def make_orography(cfg: ToyDynamicsConfig, seed: int) -> np.ndarray:
    """Smooth zero-mean unit-variance parent-grid static field."""
    smooth = ToyDynamicsConfig(**{**cfg.to_dict(), "n_vars": 1, "correlation_length": 4.0})
    field_ = correlated_noise(smooth, Stream.for_purpose(seed, "orography", lanes=NOISE_LANES), 1)[0, 0]
    return (field_ - field_.mean()) / field_.std()


def _substep(q, cfg, ux, uy, source, noise):
    # conservative first-order upwind fluxes; ux is constant along x, uy along y
    fx = np.maximum(ux, 0) * q + np.minimum(ux, 0) * np.roll(q, -1, axis=-1)
    fy = np.maximum(uy, 0) * q + np.minimum(uy, 0) * np.roll(q, -1, axis=-2)
    adv = (fx - np.roll(fx, 1, axis=-1)) + (fy - np.roll(fy, 1, axis=-2))
    lap = (
        np.roll(q, 1, axis=-1) + np.roll(q, -1, axis=-1)
        + np.roll(q, 1, axis=-2) + np.roll(q, -1, axis=-2) - 4 * q
    )
    new = q - adv + cfg.diffusion * lap - cfg.damping * q
    if q.shape[0] > 1 and cfg.coupling:
        mean = q.mean(axis=0, keepdims=True)
        new = new + cfg.coupling * q.shape[0] * (mean - q) / (q.shape[0] - 1)
    if source is not None:
        new[0] += source
    if noise is not None:
        new = new + cfg.forcing_amplitude * noise
    return new


def phase_angle(cfg: ToyDynamicsConfig, phase0: int, t) -> np.ndarray:
    return 2 * np.pi * (phase0 + np.asarray(t)) / cfg.steps_per_day


def simulate_parent(
    cfg: ToyDynamicsConfig,
    seed: int,
    orography: np.ndarray | None = None,
    initial_state: np.ndarray | None = None,
    phase0: int | None = None,
) -> tuple[np.ndarray, int]:
    """Parent-grid states ``[T+1, n_vars, P, P]`` and the diurnal phase offset."""
    cfg.validate()
    p = cfg.parent_size
    if orography is None:
        orography = make_orography(cfg, seed)
    if phase0 is None:
        phase0 = int(Stream.for_purpose(seed, "phase").integers(1, cfg.steps_per_day)[0])
    ux, uy = _velocity(cfg)
    stream = Stream.for_purpose(seed, "forcing", lanes=NOISE_LANES)
    spin = 0 if initial_state is not None else cfg.spinup_steps
    q = np.zeros((cfg.n_vars, p, p)) if initial_state is None else np.array(initial_state, dtype=np.float64)
    if q.shape != (cfg.n_vars, p, p):
        raise DataError(f"initial state shape {q.shape}, expected {(cfg.n_vars, p, p)}")
    out = np.empty((cfg.steps + 1, cfg.n_vars, p, p))
    noisy = cfg.forcing_amplitude != 0
    for step in range(-spin, cfg.steps + 1):
        if step >= 0:
            out[step] = q
            if step == cfg.steps:
                break
        src = None
        if cfg.diurnal_amplitude:
            src = cfg.diurnal_amplitude * np.sin(phase_angle(cfg, phase0, step)) * orography
        noise = correlated_noise(cfg, stream, cfg.substeps) if noisy else None
        for s in range(cfg.substeps):
            q = _substep(q, cfg, ux, uy, src, None if noise is None else noise[s])
    return out, phase0


def forcing_fields(cfg: ToyDynamicsConfig, phase0: int, n_times: int) -> np.ndarray:
    """Diurnal sin/cos forcing ``[n_times, 2, H, W]`` (spatially uniform)."""
    ang = phase_angle(cfg, phase0, np.arange(n_times))
    f = np.stack([np.sin(ang), np.cos(ang)], axis=1)
    return np.broadcast_to(f[:, :, None, None], (n_times, 2, cfg.lam_size, cfg.lam_size)).astype(np.float32)


def crop(cfg: ToyDynamicsConfig, parent: np.ndarray) -> np.ndarray:
    o, n = cfg.lam_offset, cfg.lam_size
    return parent[..., o : o + n, o : o + n]


def simulate_trajectory(
    cfg: ToyDynamicsConfig,
    seed: int,
    orography: np.ndarray | None = None,
    initial_state: np.ndarray | None = None,
    phase0: int | None = None,
) -> Trajectory:
    if orography is None:
        orography = make_orography(cfg, seed)
    parent, phase0 = simulate_parent(cfg, seed, orography, initial_state, phase0)
    return Trajectory(
        states=crop(cfg, parent).astype(np.float32),
        forcings=forcing_fields(cfg, phase0, cfg.steps + 1),
        statics=crop(cfg, orography)[None].astype(np.float32),
        phase0=phase0,
    )


SPLITS = ("train", "val", "test")


@dataclass
class EpisodeDataset:
    config: ToyDynamicsConfig
    seed: int
    splits: dict[str, list[Trajectory]]
    seeds: dict[str, list[int]]
    stats: NormStats
    extra: dict = field(default_factory=dict)

    @property
    def domain(self) -> DomainSpec:
        return self.config.domain()

    def normalized(self, split: str) -> list[Trajectory]:
        return [
            Trajectory(self.stats.normalize(tr.states), tr.forcings, tr.statics, tr.phase0)
            for tr in self.splits[split]
        ]


def trajectory_seed(seed: int, split: str, index: int) -> int:
    return derive_seed(seed, f"trajectory-{split}", member=index)


def make_dataset(
    cfg: ToyDynamicsConfig, n_train: int = 200, n_val: int = 20, n_test: int = 20, seed: int = 0
) -> EpisodeDataset:
    orography = make_orography(cfg, derive_seed(seed, "geography"))
    counts = {"train": n_train, "val": n_val, "test": n_test}
    splits: dict[str, list[Trajectory]] = {}
    seeds: dict[str, list[int]] = {}
    for split in SPLITS:
        seeds[split] = [trajectory_seed(seed, split, i) for i in range(counts[split])]
        splits[split] = [simulate_trajectory(cfg, s, orography) for s in seeds[split]]
    if not splits["train"]:
        raise ConfigError("the train split needs at least one trajectory")
    stats = NormStats.from_states(np.stack([tr.states for tr in splits["train"]]))
    return EpisodeDataset(cfg, seed, splits, seeds, stats)


def climatology_ensemble(dataset: EpisodeDataset, phase: int, n: int, stream: Stream) -> np.ndarray:
    """``n`` random training-set interior states whose diurnal phase matches ``phase``.

    Returned in the dataset's raw units, shape ``[n, d_x, H_I, W_I]``.
    """
    cfg = dataset.config
    pool = [
        (i, t)
        for i, tr in enumerate(dataset.splits["train"])
        for t in range(tr.length)
        if (tr.phase0 + t) % cfg.steps_per_day == phase % cfg.steps_per_day
    ]
    if not pool:
        raise DataError(f"no training state at phase {phase}")
    picks = stream.integers(n, len(pool))
    dom = dataset.domain
    return np.stack([dom.crop_interior(dataset.splits["train"][pool[k][0]].states[pool[k][1]]) for k in picks])
