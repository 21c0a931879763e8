"""Heat-transfer-fluid property correlations.

Density and volumetric heat capacity are polynomials in (T - T_ref).
The shipped default mimics a synthetic-oil HTF; coefficients are config
data, not physical ground truth. Out-of-range temperatures are clamped to
the valid range and counted, never raised: nighttime data contains brief
sensor excursions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteInput

#: Synthetic-oil density, kg/m^3, polynomial in T_celsius = T - 273.15.
DEFAULT_DENSITY_COEFFS = (1083.25, -0.90797, 7.8116e-4, -2.367e-6)

#: Constant volumetric heat capacity, J/(m^3 K) (degree-0 polynomial).
DEFAULT_HEAT_CAPACITY_COEFFS = (1.90e6,)

DEFAULT_T_MIN = 285.15   # K
DEFAULT_T_MAX = 698.15   # K
DEFAULT_T_REF = 273.15   # K


@dataclass
class FluidPropertyTable:
    """Polynomial property correlations over a validity range [t_min, t_max].

    ``clamp_events`` counts evaluations that fell outside the range; it is a
    diagnostic flag, not an error channel.
    """

    t_min: float = DEFAULT_T_MIN
    t_max: float = DEFAULT_T_MAX
    t_ref: float = DEFAULT_T_REF
    density_coeffs: tuple = DEFAULT_DENSITY_COEFFS
    heat_capacity_coeffs: tuple = DEFAULT_HEAT_CAPACITY_COEFFS
    clamp_events: int = field(default=0, compare=False)

    def __post_init__(self):
        if not (self.t_min < self.t_max):
            raise ConfigError("fluid table needs t_min < t_max")
        for t_probe in np.linspace(self.t_min, self.t_max, 64):
            if self._poly(self.density_coeffs, t_probe) <= 0:
                raise ConfigError(f"density non-positive at {t_probe} K")
            if self._poly(self.heat_capacity_coeffs, t_probe) <= 0:
                raise ConfigError(f"heat capacity non-positive at {t_probe} K")

    @classmethod
    def from_config(cls, cfg: dict) -> "FluidPropertyTable":
        """Build from the ``fluid`` section of the config tree (missing keys
        fall back to the shipped defaults)."""
        return cls(
            t_min=float(cfg.get("t_min", DEFAULT_T_MIN)),
            t_max=float(cfg.get("t_max", DEFAULT_T_MAX)),
            t_ref=float(cfg.get("t_ref", DEFAULT_T_REF)),
            density_coeffs=tuple(cfg.get("density_coeffs",
                                         DEFAULT_DENSITY_COEFFS)),
            heat_capacity_coeffs=tuple(cfg.get("heat_capacity_coeffs",
                                               DEFAULT_HEAT_CAPACITY_COEFFS)),
        )

    def _poly(self, coeffs, t):
        x = np.asarray(t, dtype=float) - self.t_ref
        out = np.zeros_like(x)
        for c in reversed(coeffs):
            out = out * x + c
        return out

    def _poly_deriv(self, coeffs, t):
        x = np.asarray(t, dtype=float) - self.t_ref
        out = np.zeros_like(x)
        for k in range(len(coeffs) - 1, 0, -1):
            out = out * x + k * coeffs[k]
        return out

    def _clamp(self, t):
        t = np.asarray(t, dtype=float)
        if not np.all(np.isfinite(t)):
            raise NonFiniteInput("temperature must be finite")
        clipped = np.clip(t, self.t_min, self.t_max)
        n_out = int(np.count_nonzero(clipped != t))
        if n_out:
            self.clamp_events += n_out
        return clipped

    def density(self, t):
        """Fluid density, kg/m^3; clamps to the valid range outside it."""
        return self._poly(self.density_coeffs, self._clamp(t))

    def density_derivative(self, t):
        """d(rho)/dT, kg/(m^3 K), of the clamped polynomial."""
        return self._poly_deriv(self.density_coeffs, self._clamp(t))

    def heat_capacity(self, t):
        """Volumetric heat capacity of the fluid, J/(m^3 K)."""
        return self._poly(self.heat_capacity_coeffs, self._clamp(t))

    def heat_capacity_constant(self) -> float:
        """c_vf used inside the energy balance.

        The PDE treats c_vf as temperature-independent (degree-0 mode); with
        a polynomial table this is its value at the range midpoint.
        """
        if len(self.heat_capacity_coeffs) == 1:
            return float(self.heat_capacity_coeffs[0])
        return float(self.heat_capacity(0.5 * (self.t_min + self.t_max)))

    def density_ratio(self, t_header, t_local):
        """rho(T_header) / rho(T_local); 1 when both temperatures agree."""
        return self.density(t_header) / self.density(t_local)
