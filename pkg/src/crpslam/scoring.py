"""Ensemble scores: fair and biased CRPS, Gaussian CRPS, RMSE and spread-skill ratio.

Ensemble arrays put members on axis 0; any trailing axes are grid/variable
axes and are scored elementwise.  All accumulation happens in float64.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, EstimatorError

SQRT_PI = math.sqrt(math.pi)


class SkillWarning(UserWarning):
    """The ensemble-mean error is zero, so the spread-skill ratio is undefined."""


@dataclass(frozen=True)
class GaussianForecast:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def _members(members) -> np.ndarray:
    m = np.asarray(members, dtype=np.float64)
    if m.ndim == 0:
        m = m[None]
    if not np.all(np.isfinite(m)):
        raise DataError("ensemble members must be finite")
    return m


def _pair_sum(m: np.ndarray) -> np.ndarray:
    """sum_n sum_n* |x_n - x_n*| over axis 0, by the full N^2 double loop."""
    total = np.zeros(m.shape[1:])
    for n in range(m.shape[0]):
        total += np.abs(m - m[n]).sum(axis=0)
    return total


def _skill_term(m: np.ndarray, obs) -> np.ndarray:
    return np.abs(m - np.asarray(obs, dtype=np.float64)).mean(axis=0)


def crps_fair(members, observation):
    """Fair (unbiased in ensemble size) CRPS estimator.

    Needs at least two members; the spread term carries a 1/(N-1) factor and
    there is deliberately no fallback to the biased form.
    """
    m = _members(members)
    n = m.shape[0]
    if n < 2:
        raise EstimatorError(f"fair CRPS is undefined for N={n} (needs N >= 2)")
    out = _skill_term(m, observation) - _pair_sum(m) / (2.0 * n * (n - 1))
    return float(out) if out.ndim == 0 else out


def crps_biased(members, observation):
    m = _members(members)
    n = m.shape[0]
    out = _skill_term(m, observation) - _pair_sum(m) / (2.0 * n * n)
    return float(out) if out.ndim == 0 else out


def _phi(z):
    return np.exp(-0.5 * np.square(z)) / math.sqrt(2.0 * math.pi)


_erf = np.vectorize(math.erf, otypes=[float])


def _Phi(z):
    return 0.5 * (1.0 + _erf(np.asarray(z, dtype=np.float64) / math.sqrt(2.0)))


def crps_gaussian(forecast: GaussianForecast | tuple[float, float], observation):
    """Closed-form CRPS of a normal forecast."""
    if not isinstance(forecast, GaussianForecast):
        forecast = GaussianForecast(*forecast)
    mu, sigma = forecast.mu, forecast.sigma
    z = (np.asarray(observation, dtype=np.float64) - mu) / sigma
    out = sigma * (z * (2.0 * _Phi(z) - 1.0) + 2.0 * _phi(z) - 1.0 / SQRT_PI)
    return float(out) if np.ndim(out) == 0 else out


def crps_fair_gradient(members, observation) -> np.ndarray:
    """Subgradient of :func:`crps_fair` wrt each member (ties contribute 0)."""
    m = _members(members)
    n = m.shape[0]
    if n < 2:
        raise EstimatorError(f"fair CRPS is undefined for N={n} (needs N >= 2)")
    obs = np.asarray(observation, dtype=np.float64)
    grad = np.sign(m - obs) / n
    for k in range(n):
        grad[k] -= np.sign(m[k] - m).sum(axis=0) / (n * (n - 1))
    return grad


def rmse(errors) -> float:
    """Root of the spatial mean of squared errors."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise DataError("rmse of an empty field")
    return float(np.sqrt(np.mean(np.square(e))))


def ensemble_mean_rmse(members, truth) -> float:
    m = _members(members)
    return rmse(m.mean(axis=0) - np.asarray(truth, dtype=np.float64))


def ssr(members, truth, corrected: bool = True) -> float:
    """Spread-skill ratio.

    ``sqrt(c * mean(unbiased ensemble variance) / mean((ensemble mean - truth)^2))``
    with ``c = (N+1)/N`` when ``corrected`` (the finite-ensemble factor that
    makes a calibrated ensemble score 1) and ``c = 1`` otherwise.  A zero skill
    denominator gives ``inf`` and a :class:`SkillWarning`.
    """
    m = _members(members)
    n = m.shape[0]
    if n < 2:
        raise EstimatorError(f"SSR needs N >= 2 members, got {n}")
    truth = np.asarray(truth, dtype=np.float64)
    spread2 = float(np.mean(m.var(axis=0, ddof=1)))
    skill2 = float(np.mean(np.square(m.mean(axis=0) - truth)))
    factor = (n + 1) / n if corrected else 1.0
    if skill2 == 0.0:
        warnings.warn("zero ensemble-mean error; SSR reported as +inf", SkillWarning, stacklevel=2)
        return math.inf
    return math.sqrt(factor * spread2 / skill2)


def mean_spread(members) -> float:
    """Root of the grid-mean unbiased ensemble variance."""
    m = _members(members)
    if m.shape[0] < 2:
        return 0.0
    return float(np.sqrt(np.mean(m.var(axis=0, ddof=1))))
