"""Limited-area grid geometry and model-input windows.

The grid is a rectangle of ``height x width`` cells.  A frame ``boundary``
cells wide on all four sides is prescribed (boundary region); the rest is the
interior that the model predicts.  Inputs are kept on the full frame: interior
tensors have boundary cells zeroed, boundary tensors have interior cells
zeroed, and a one-channel interior indicator is appended to the statics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError


@dataclass(frozen=True)
class DomainSpec:
    height: int = 24
    width: int = 24
    boundary: int = 4
    d_x: int = 2
    d_f: int = 2
    d_s: int = 1
    dt_hours: float = 3.0

    def __post_init__(self):
        if self.boundary < 1:
            raise ConfigError("boundary width must be at least 1")
        if self.interior_height < 8 or self.interior_width < 8:
            raise ConfigError(
                f"interior {self.interior_height}x{self.interior_width} is smaller than 8x8"
            )

    @property
    def interior_height(self) -> int:
        return self.height - 2 * self.boundary

    @property
    def interior_width(self) -> int:
        return self.width - 2 * self.boundary

    @property
    def interior_slice(self) -> tuple[slice, slice]:
        b = self.boundary
        return slice(b, self.height - b), slice(b, self.width - b)

    def interior_mask(self) -> np.ndarray:
        mask = np.zeros((self.height, self.width), dtype=np.float32)
        mask[self.interior_slice] = 1.0
        return mask

    def boundary_mask(self) -> np.ndarray:
        return 1.0 - self.interior_mask()

    @property
    def n_input_channels(self) -> int:
        return 5 * self.d_x + 3 * self.d_f + self.d_s + 1

    def crop_interior(self, field: np.ndarray) -> np.ndarray:
        return field[(..., *self.interior_slice)]


@dataclass
class Trajectory:
    """Ground-truth states ``X[t]`` (``[T+1, d_x, H, W]``), forcings and statics."""

    states: np.ndarray
    forcings: np.ndarray
    statics: np.ndarray
    phase0: int = 0

    @property
    def length(self) -> int:
        return self.states.shape[0]


@dataclass
class ModelInputWindow:
    interior_states: np.ndarray  # X_I^{t-1:t}, [2, d_x, H, W], boundary zeroed
    interior_forcing: np.ndarray  # F_I^{t-1:t+1}, [3, d_f, H, W]
    interior_static: np.ndarray  # S_I, [d_s + 1, H, W] incl. interior indicator
    boundary_states: np.ndarray  # X_B^{t-1:t+1}, [3, d_x, H, W], interior zeroed
    boundary_forcing: np.ndarray  # F_B^{t-1:t+1}
    boundary_static: np.ndarray  # S_B, [d_s, H, W]
    target: np.ndarray | None  # X_I^{t+1}, [d_x, H_I, W_I]
    current_interior: np.ndarray  # X_I^t cropped, [d_x, H_I, W_I]

    def channels(self) -> np.ndarray:
        """Stack every input channel into one ``[C_in, H, W]`` float32 array."""
        d_s = self.boundary_static.shape[0]
        forcing = self.interior_forcing + self.boundary_forcing
        statics = self.interior_static[:d_s] + self.boundary_static
        mask = self.interior_static[d_s:]
        parts = [
            self.interior_states.reshape(-1, *self.interior_states.shape[-2:]),
            self.boundary_states.reshape(-1, *self.boundary_states.shape[-2:]),
            forcing.reshape(-1, *forcing.shape[-2:]),
            statics,
            mask,
        ]
        return np.concatenate(parts, axis=0).astype(np.float32)


def window_from_states(
    domain: DomainSpec,
    prev_state: np.ndarray,
    cur_state: np.ndarray,
    next_state: np.ndarray,
    forcings: np.ndarray,
    statics: np.ndarray,
    with_target: bool = True,
) -> ModelInputWindow:
    """Partition three consecutive full states into a model window.

    ``next_state`` supplies the boundary one step ahead (and the interior
    target when ``with_target``).  ``forcings`` is ``[3, d_f, H, W]``.
    """
    for arr in (prev_state, cur_state, next_state):
        if arr.shape != (domain.d_x, domain.height, domain.width):
            raise DimensionError(f"state shape {arr.shape} does not match {domain}")
    mi = domain.interior_mask()
    mb = 1.0 - mi
    states2 = np.stack([prev_state, cur_state])
    states3 = np.stack([prev_state, cur_state, next_state])
    return ModelInputWindow(
        interior_states=(states2 * mi).astype(np.float32),
        interior_forcing=(forcings * mi).astype(np.float32),
        interior_static=np.concatenate([statics * mi, mi[None]]).astype(np.float32),
        boundary_states=(states3 * mb).astype(np.float32),
        boundary_forcing=(forcings * mb).astype(np.float32),
        boundary_static=(statics * mb).astype(np.float32),
        target=domain.crop_interior(next_state).astype(np.float32) if with_target else None,
        current_interior=domain.crop_interior(cur_state).astype(np.float32),
    )


def build_window(domain: DomainSpec, trajectory: Trajectory, t: int) -> ModelInputWindow:
    """Window at time ``t`` (inputs at t-1, t; boundary and target at t+1)."""
    if not 1 <= t <= trajectory.length - 2:
        raise DataError(f"t={t} outside [1, {trajectory.length - 2}]")
    x = trajectory.states
    return window_from_states(
        domain, x[t - 1], x[t], x[t + 1], trajectory.forcings[t - 1 : t + 2], trajectory.statics
    )


def reassemble_full_state(domain: DomainSpec, predicted_interior: np.ndarray, true_state: np.ndarray) -> np.ndarray:
    """Full state with the interior from ``predicted_interior`` and the frame from ``true_state``."""
    if true_state.shape[-3:] != (domain.d_x, domain.height, domain.width):
        raise DimensionError(f"true state shape {true_state.shape} does not match domain")
    expect = true_state.shape[:-2] + (domain.interior_height, domain.interior_width)
    if predicted_interior.shape != expect:
        raise DimensionError(f"predicted interior shape {predicted_interior.shape}, expected {expect}")
    full = np.array(true_state, copy=True)
    full[(..., *domain.interior_slice)] = predicted_interior
    return full


@dataclass
class NormStats:
    mean: np.ndarray  # [d_x]
    std: np.ndarray  # [d_x]

    @classmethod
    def from_states(cls, states: np.ndarray) -> "NormStats":
        """Per-variable statistics over ``[..., d_x, H, W]`` arrays (float64 accumulation)."""
        s = np.asarray(states, dtype=np.float64)
        s = np.moveaxis(s, -3, 0).reshape(s.shape[-3], -1)
        mean = s.mean(axis=1)
        std = s.std(axis=1)
        if np.any(std == 0):
            bad = [int(i) for i in np.flatnonzero(std == 0)]
            raise DataError(f"variables {bad} are constant; cannot normalise")
        return cls(mean.astype(np.float32), std.astype(np.float32))

    def normalize(self, states: np.ndarray) -> np.ndarray:
        return ((states - self.mean[:, None, None]) / self.std[:, None, None]).astype(np.float32)

    def denormalize(self, states: np.ndarray) -> np.ndarray:
        return (states * self.std[:, None, None] + self.mean[:, None, None]).astype(np.float32)
