"""Container for one nighttime homogenization period of one subfield."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch
from .pde import SKY_OFFSET_K


@dataclass
class HomogenizationSequence:
    """Time-aligned boundary inputs and sensor readings, resampled to dt.

    ``sensors`` is (n_loops, n_sensors, n_steps) in subfield loop order.
    Nighttime by construction: there is no irradiance channel.
    """

    id: str
    subfield_id: str
    era_id: int
    t_start: float            # epoch seconds
    dt: float
    v_dot_h: np.ndarray       # (n_steps,), m^3/s
    t_header: np.ndarray      # (n_steps,), K
    t_ambient: np.ndarray     # (n_steps,), K
    sensors: np.ndarray       # (n_loops, n_sensors, n_steps), K
    loop_ids: tuple = ()
    sky_offset: float = SKY_OFFSET_K

    def __post_init__(self):
        self.v_dot_h = np.asarray(self.v_dot_h, dtype=float)
        self.t_header = np.asarray(self.t_header, dtype=float)
        self.t_ambient = np.asarray(self.t_ambient, dtype=float)
        self.sensors = np.asarray(self.sensors, dtype=float)
        n = self.v_dot_h.shape[0]
        if self.t_header.shape[0] != n or self.t_ambient.shape[0] != n \
                or self.sensors.shape[-1] != n:
            raise LengthMismatch(
                f"sequence {self.id}: channels disagree on step count")

    @property
    def n_steps(self):
        return self.v_dot_h.shape[0]

    @property
    def n_loops(self):
        return self.sensors.shape[0]

    @property
    def n_sensors(self):
        return self.sensors.shape[1]

    @property
    def t_sky(self):
        """Sky temperature by the fixed-offset closure below ambient."""
        return self.t_ambient - self.sky_offset

    @property
    def times(self):
        return self.t_start + self.dt * np.arange(self.n_steps)

    def loop_mean_temperature(self):
        """T_mu: per-loop arithmetic mean of the sensor readings, (N, S)."""
        return self.sensors.mean(axis=1)
