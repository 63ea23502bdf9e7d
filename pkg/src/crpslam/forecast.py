"""Autoregressive ensemble rollout with true-boundary forcing, and verification."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import net
from .domain import DomainSpec, NormStats, Trajectory, reassemble_full_state, window_from_states
from .errors import DataError
from .rng import Stream, derive_seed
from .scoring import SkillWarning, crps_fair
from .spectra import EnergySpectrum, ensemble_mean_spectrum

log = logging.getLogger(__name__)

NOISE_MODES = ("per-step", "per-member")


@dataclass
class EnsembleForecast:
    members: np.ndarray  # [cases, N, T_lead, d_x, H_I, W_I], denormalised
    noise: np.ndarray  # [cases, N, T_lead, d_z]
    noise_mode: str = "per-step"
    split: str = "test"
    init_times: list[int] = field(default_factory=list)
    trajectories: list[int] = field(default_factory=list)
    dt_hours: float = 3.0
    provenance: dict[str, str] = field(default_factory=dict)

    @property
    def n_members(self) -> int:
        return self.members.shape[1]

    @property
    def lead_steps(self) -> int:
        return self.members.shape[2]

    def lead_hours(self) -> np.ndarray:
        return self.dt_hours * np.arange(1, self.lead_steps + 1)


@dataclass
class Rollout:
    members: np.ndarray  # [N, T_lead, d_x, H_I, W_I] (normalised units)
    noise: np.ndarray  # [N, T_lead, d_z]
    full_states: np.ndarray  # [N, T_lead, d_x, H, W] reassembled states
    evaluations: int


def rollout_noise(seed: int, n: int, lead_steps: int, d_z: int, noise_mode: str) -> np.ndarray:
    if noise_mode not in NOISE_MODES:
        raise DataError(f"unknown noise mode {noise_mode!r}")
    z = np.empty((n, lead_steps, d_z), dtype=np.float32)
    for m in range(n):
        for s in range(lead_steps):
            step = s if noise_mode == "per-step" else 0
            z[m, s] = net.sample_noise(seed, m, step, d_z).z
    return z


def rollout(
    params,
    trajectory: Trajectory,
    t0: int,
    lead_steps: int,
    n_members: int,
    domain: DomainSpec,
    fcfg: net.ForecasterConfig,
    seed: int = 0,
    noise_mode: str = "per-step",
    noise: np.ndarray | None = None,
) -> Rollout:
    """Roll every member forward from the true states at ``t0 - 1`` and ``t0``.

    Each step is one batched network call over all members (one evaluation
    per member), after which the predicted interior is combined with the true
    boundary of that time.  ``noise`` replays recorded latent vectors.
    """
    if n_members < 1:
        raise DataError("need at least one member")
    if t0 < 1 or t0 + lead_steps >= trajectory.length:
        raise DataError(
            f"trajectory of length {trajectory.length} cannot supply {lead_steps} leads from t={t0}"
        )
    if noise is None:
        noise = rollout_noise(seed, n_members, lead_steps, fcfg.d_z, noise_mode)
    if noise.shape != (n_members, lead_steps, fcfg.d_z):
        raise DataError(f"noise shape {noise.shape} does not match ({n_members}, {lead_steps}, {fcfg.d_z})")
    p = net._tensorize(params)
    x = trajectory.states
    prev = np.repeat(x[t0 - 1][None], n_members, axis=0)
    cur = np.repeat(x[t0][None], n_members, axis=0)
    members = np.empty((n_members, lead_steps, domain.d_x, domain.interior_height, domain.interior_width), np.float32)
    full = np.empty((n_members, lead_steps, domain.d_x, domain.height, domain.width), np.float32)
    evaluations = 0
    for s in range(lead_steps):
        t = t0 + s
        forcing = trajectory.forcings[t - 1 : t + 2]
        windows = [
            window_from_states(domain, prev[m], cur[m], x[t + 1], forcing, trajectory.statics, with_target=False)
            for m in range(n_members)
        ]
        inputs = np.stack([w.channels() for w in windows])
        current = np.stack([w.current_interior for w in windows])
        pred = net.forward_batch(p, inputs, noise[:, s], current, domain, fcfg).data
        evaluations += n_members
        members[:, s] = pred
        nxt = reassemble_full_state(domain, pred, np.repeat(x[t + 1][None], n_members, axis=0))
        full[:, s] = nxt
        prev, cur = cur, nxt
    return Rollout(members, noise, full, evaluations)


def forecast_split(
    params,
    trajectories: list[Trajectory],
    stats: NormStats,
    domain: DomainSpec,
    fcfg: net.ForecasterConfig,
    n_members: int,
    lead_steps: int,
    seed: int,
    noise_mode: str = "per-step",
    t0: int = 1,
    split: str = "test",
    provenance: dict[str, str] | None = None,
) -> EnsembleForecast:
    """Forecast every (normalised) trajectory from ``t0``; members are denormalised."""
    members, noises = [], []
    for i, tr in enumerate(trajectories):
        r = rollout(params, tr, t0, lead_steps, n_members, domain, fcfg,
                    derive_seed(seed, "forecast", member=i), noise_mode)
        members.append(stats.denormalize(r.members))
        noises.append(r.noise)
    return EnsembleForecast(
        members=np.stack(members), noise=np.stack(noises), noise_mode=noise_mode, split=split,
        init_times=[t0] * len(trajectories), trajectories=list(range(len(trajectories))),
        dt_hours=domain.dt_hours, provenance=dict(provenance or {}),
    )


def replay(params, forecast: EnsembleForecast, trajectories, stats, domain, fcfg) -> np.ndarray:
    """Re-run an archived forecast from its recorded noise; returns denormalised members."""
    out = []
    for case, (i, t0) in enumerate(zip(forecast.trajectories, forecast.init_times)):
        r = rollout(params, trajectories[i], t0, forecast.lead_steps, forecast.n_members, domain, fcfg,
                    noise=forecast.noise[case])
        out.append(stats.denormalize(r.members))
    return np.stack(out)


def truth_for(forecast: EnsembleForecast, trajectories: list[Trajectory], domain: DomainSpec) -> np.ndarray:
    """Ground-truth interiors aligned with the forecast, ``[cases, T_lead, d_x, H_I, W_I]``."""
    out = []
    for i, t0 in zip(forecast.trajectories, forecast.init_times):
        tr = trajectories[i]
        if t0 + forecast.lead_steps >= tr.length:
            raise DataError("truth trajectory shorter than the forecast")
        out.append(domain.crop_interior(tr.states[t0 + 1 : t0 + 1 + forecast.lead_steps]))
    return np.stack(out).astype(np.float32)


# verification ----------------------------------------------------------------------


@dataclass
class MetricTable:
    rmse: np.ndarray  # [d_x, T_lead]
    crps: np.ndarray | None
    ssr: np.ndarray | None
    spectra: dict[tuple[int, int, str], EnergySpectrum]  # (lead, variable, "forecast"|"truth")

    def rows(self, name: str) -> list[tuple[int, int, float]]:
        table = getattr(self, name)
        if table is None:
            return []
        return [(d, lead + 1, float(table[d, lead])) for d in range(table.shape[0]) for lead in range(table.shape[1])]


def spectrum_leads(lead_steps: int) -> list[int]:
    """First, middle and last lead (1-based), deduplicated."""
    return sorted({1, (lead_steps + 1) // 2, lead_steps})


def evaluate(members: np.ndarray, truth: np.ndarray, corrected_ssr: bool = True,
             spectra_at: list[int] | None = None) -> MetricTable:
    """Per (variable, lead) RMSE of the ensemble mean, mean fair CRPS, SSR and spectra.

    ``members`` is ``[cases, N, T, d_x, H, W]`` and ``truth`` ``[cases, T, d_x, H, W]``.
    Scores pool all cases and grid points.
    """
    if members.ndim != 6 or truth.shape != members.shape[:1] + members.shape[2:]:
        raise DataError(f"forecast {members.shape} and truth {truth.shape} are not aligned")
    cases, n, lead_steps, d_x = members.shape[:4]
    m = members.astype(np.float64)
    tr = truth.astype(np.float64)
    err = m.mean(axis=1) - tr  # [cases, T, d_x, H, W]
    rmse = np.sqrt(np.mean(err**2, axis=(0, 3, 4))).T
    crps = ssr = None
    if n < 2:
        warnings.warn("fewer than 2 members: CRPS and SSR omitted", UserWarning, stacklevel=2)
    else:
        crps = np.empty((d_x, lead_steps))
        ssr = np.empty((d_x, lead_steps))
        var = m.var(axis=1, ddof=1)
        factor = (n + 1) / n if corrected_ssr else 1.0
        for d in range(d_x):
            for lead in range(lead_steps):
                ens = np.moveaxis(m[:, :, lead, d], 1, 0)  # [N, cases, H, W]
                crps[d, lead] = float(np.mean(crps_fair(ens, tr[:, lead, d])))
                skill2 = float(np.mean(err[:, lead, d] ** 2))
                spread2 = float(np.mean(var[:, lead, d]))
                if skill2 == 0.0:
                    warnings.warn("zero ensemble-mean error; SSR reported as +inf", SkillWarning, stacklevel=2)
                    ssr[d, lead] = np.inf
                else:
                    ssr[d, lead] = np.sqrt(factor * spread2 / skill2)
    spectra = {}
    for lead in spectra_at if spectra_at is not None else spectrum_leads(lead_steps):
        for d in range(d_x):
            fields_f = [members[c, k, lead - 1, d] for c in range(cases) for k in range(n)]
            fields_t = [truth[c, lead - 1, d] for c in range(cases)]
            spectra[(lead, d, "forecast")] = ensemble_mean_spectrum(fields_f)
            spectra[(lead, d, "truth")] = ensemble_mean_spectrum(fields_t)
    return MetricTable(rmse, crps, ssr, spectra)


def persistence_members(trajectories: list[Trajectory], domain: DomainSpec, t0: int, lead_steps: int) -> np.ndarray:
    """Single-member persistence forecasts ``[cases, 1, T, d_x, H_I, W_I]``."""
    out = []
    for tr in trajectories:
        frozen = domain.crop_interior(tr.states[t0])
        out.append(np.repeat(frozen[None, None], lead_steps, axis=1))
    return np.stack(out).astype(np.float32)


def climatology_members(dataset, trajectories: list[Trajectory], n: int, t0: int, lead_steps: int,
                        seed: int) -> np.ndarray:
    """Climatology ensembles (raw units) at each lead's diurnal phase."""
    from .toy_atmos import climatology_ensemble

    out = []
    for i, tr in enumerate(trajectories):
        leads = []
        for s in range(lead_steps):
            stream = Stream.for_purpose(seed, "climatology", member=i, step=s)
            leads.append(climatology_ensemble(dataset, tr.phase0 + t0 + 1 + s, n, stream))
        out.append(np.stack(leads, axis=1))
    return np.stack(out).astype(np.float32)


def mean_absolute_error(members: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per (variable, lead) MAE of the ensemble mean, ``[d_x, T]``."""
    err = np.abs(members.astype(np.float64).mean(axis=1) - truth)
    return np.mean(err, axis=(0, 3, 4)).T
