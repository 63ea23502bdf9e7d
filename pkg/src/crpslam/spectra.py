"""Radially averaged energy spectra of 2-D fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class EnergySpectrum:
    wavenumber: np.ndarray  # bin centres, cycles per domain width
    energy: np.ndarray  # mean energy per bin
    count: np.ndarray  # modes per bin

    def total(self) -> float:
        return float(np.sum(self.energy * self.count))


def _radial_index(h: int, w: int) -> np.ndarray:
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    radius = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)
    # round half up so that e.g. radius 2.5 lands in bin 3 on every platform
    return np.floor(radius + 0.5).astype(np.int64)


def radial_spectrum(field) -> EnergySpectrum:
    """Mean-removed DFT energy ``|F|^2 / (H W)`` averaged in integer radius bins.

    Bins run from 1 to ``kmax = min(H, W) // 2``.  Bin 0 (the mean) is
    dropped; corner modes with radius beyond ``kmax`` are folded into the last
    bin so that ``sum(count * energy)`` equals the field variance.  Energies
    are normalised per grid point, i.e. ``|F|^2 / (H W)`` divided once more by
    ``H W``.
    """
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 2:
        raise DataError(f"radial_spectrum needs a 2-D field, got shape {f.shape}")
    h, w = f.shape
    if h < 8 or w < 8:
        raise DataError(f"field must be at least 8x8, got {h}x{w}")
    if not np.all(np.isfinite(f)):
        raise DataError("field contains non-finite values")
    coeffs = np.fft.fft2(f - f.mean())
    power = np.abs(coeffs) ** 2 / (h * w) / (h * w)
    kmax = min(h, w) // 2
    idx = np.minimum(_radial_index(h, w).ravel(), kmax)
    keep = idx >= 1
    sums = np.bincount(idx[keep], weights=power.ravel()[keep], minlength=kmax + 1)[1:]
    counts = np.bincount(idx[keep], minlength=kmax + 1)[1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        energy = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return EnergySpectrum(np.arange(1, kmax + 1, dtype=np.float64), energy, counts.astype(np.int64))


def ensemble_mean_spectrum(members) -> EnergySpectrum:
    members = list(members)
    if not members:
        raise DataError("ensemble_mean_spectrum needs at least one member")
    specs = [radial_spectrum(m) for m in members]
    energy = np.mean([s.energy for s in specs], axis=0)
    return EnergySpectrum(specs[0].wavenumber.copy(), energy, specs[0].count.copy())


def high_wavenumber_energy(spec: EnergySpectrum) -> float:
    """Binned energy (count-weighted) in the upper half of resolved wavenumbers."""
    kmax = spec.wavenumber[-1]
    upper = spec.wavenumber > kmax / 2
    return float(np.sum(spec.energy[upper] * spec.count[upper]))
