"""Explicit time stepping of the coupled fluid / pipe / glass energy
balances along a collector loop.

Scheme: forward Euler in time, first-order upwind for the (one-directional)
advection term, central differences with mirrored (zero-flux) end cells for
pipe axial conduction. Fluid and glass carry no axial coupling.

All step functions accept a trailing segment axis and broadcast over any
leading batch axes, so a whole subfield can be advanced as one (n_loops,
n_segments) array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CflViolation, DiffusionStabilityViolation, SimulationError
from .topology import GeometrySpec, STEFAN_BOLTZMANN

#: Slack for Courant numbers that round to just above 1 (e.g. u = dx/dt).
CFL_ROUNDING_SLACK = 1e-9

#: Default sky closure: T_sky = T_ambient - 20 K.
SKY_OFFSET_K = 20.0


@dataclass
class ThermalState:
    """Per-segment temperatures of one loop (or a batch of loops)."""

    t_f: np.ndarray
    t_p: np.ndarray
    t_g: np.ndarray
    t: float = 0.0

    def copy(self):
        return ThermalState(self.t_f.copy(), self.t_p.copy(),
                            self.t_g.copy(), self.t)


@dataclass
class BoundaryDrive:
    """Boundary conditions for one timestep.

    ``h_pg`` is the (learnable) pipe-glass coefficient per segment,
    broadcast from its per-span values by the caller.
    """

    t_inlet: float
    t_ambient: float
    t_sky: float
    u: float
    h_pg: np.ndarray


def courant_number(u, dt, dx, timestep=None):
    """u*dt/dx with a hard stability check. Never silently clipped beyond
    floating-point slack at exactly 1."""
    c = np.asarray(u, dtype=float) * (dt / dx)
    cmax = float(np.max(c))
    if cmax > 1.0 + CFL_ROUNDING_SLACK:
        where = "" if timestep is None else f" at timestep {timestep}"
        raise CflViolation(
            f"CFL violated{where}: u*dt/dx = {cmax:.6g} > 1", timestep=timestep)
    if np.any(c < 0.0):
        raise CflViolation("negative velocity: flow direction is fixed "
                           "inlet -> outlet", timestep=timestep)
    return np.minimum(c, 1.0)


def check_diffusion_stability(geom: GeometrySpec, dt, dx):
    """Explicit bound for pipe axial conduction: dt <= dx^2 c_vp / (2 k_p)."""
    bound = dx * dx * geom.c_vp / (2.0 * geom.k_p)
    if dt > bound:
        raise DiffusionStabilityViolation(
            f"dt = {dt} s exceeds conduction stability bound {bound:.6g} s")


def laplacian(t, dx):
    """Discrete second derivative with mirrored end cells (zero flux).

    Self-adjoint with these boundary conditions.
    """
    out = np.empty_like(t)
    out[..., 1:-1] = t[..., 2:] - 2.0 * t[..., 1:-1] + t[..., :-2]
    out[..., 0] = t[..., 1] - t[..., 0]
    out[..., -1] = t[..., -2] - t[..., -1]
    return out / (dx * dx)


def _per_cell(x, ndim):
    """Broadcast a per-loop scalar against the trailing segment axis."""
    x = np.asarray(x, dtype=float)
    return x[..., None] if x.ndim == ndim - 1 else x


def step_fluid(t_f, t_p, t_inlet, u, geom: GeometrySpec, c_vf, dt, dx,
               timestep=None):
    """Advance the fluid temperature one step: upwind advection plus
    fluid-pipe convection. Cell 0 takes ``t_inlet`` as its upstream value."""
    c = _per_cell(courant_number(u, dt, dx, timestep), np.ndim(t_f))
    upstream = np.empty_like(t_f)
    upstream[..., 1:] = t_f[..., :-1]
    upstream[..., 0] = t_inlet
    kappa = dt * geom.h_fp * geom.p_p / (c_vf * geom.a_f)
    return t_f - c * (t_f - upstream) + kappa * (t_p - t_f)


def step_pipe(t_f, t_p, t_g, h_pg, geom: GeometrySpec, dt, dx):
    """Advance the absorber-pipe temperature one step: fluid convection,
    pipe-glass convection and radiation, axial conduction."""
    q = (-geom.h_fp * geom.p_p * (t_p - t_f)
         + h_pg * geom.p_p * (t_g - t_p)
         + geom.eps_p * STEFAN_BOLTZMANN * geom.p_p * (t_g ** 4 - t_p ** 4)
         + geom.k_p * geom.a_p * laplacian(t_p, dx))
    return t_p + (dt / (geom.c_vp * geom.a_p)) * q


def step_glass(t_p, t_g, t_ambient, t_sky, h_pg, geom: GeometrySpec, dt):
    """Advance the glass-envelope temperature one step: pipe-glass
    convection, ambient convection, sky radiation. No axial coupling."""
    t_e = _per_cell(t_ambient, np.ndim(t_g))
    t_s = _per_cell(t_sky, np.ndim(t_g))
    q = (-h_pg * geom.p_p * (t_g - t_p)
         + geom.h_ge * geom.p_g * (t_e - t_g)
         + geom.eps_g * STEFAN_BOLTZMANN * geom.p_g * (t_s ** 4 - t_g ** 4))
    return t_g + (dt / (geom.c_vg * geom.a_g)) * q


def step_all(state: ThermalState, drive: BoundaryDrive, geom: GeometrySpec,
             c_vf, dt, dx, timestep=None) -> ThermalState:
    """One forward-Euler step of all three bodies (simultaneous update from
    the current state)."""
    t_f = step_fluid(state.t_f, state.t_p, drive.t_inlet, drive.u, geom,
                     c_vf, dt, dx, timestep)
    t_p = step_pipe(state.t_f, state.t_p, state.t_g, drive.h_pg, geom, dt, dx)
    t_g = step_glass(state.t_p, state.t_g, drive.t_ambient, drive.t_sky,
                     drive.h_pg, geom, dt)
    return ThermalState(t_f, t_p, t_g, state.t + dt)


@dataclass
class LoopTrajectory:
    """Full state history of one simulated loop plus sensor samples."""

    times: np.ndarray        # (n_states,)
    t_f: np.ndarray          # (n_states, n_segments)
    t_p: np.ndarray
    t_g: np.ndarray
    sensor_samples: np.ndarray  # (n_sensors, n_states)


def simulate_loop(initial: ThermalState, drives, geom: GeometrySpec, c_vf,
                  dt, dx, sensor_cells) -> LoopTrajectory:
    """Run the explicit scheme over a drive series for one loop.

    ``drives`` is a sequence of BoundaryDrive, one per step; the returned
    trajectory has len(drives) + 1 states (initial included). CFL is checked
    against every step's velocity before stepping starts.
    """
    for k, d in enumerate(drives):
        courant_number(d.u, dt, dx, timestep=k)
    check_diffusion_stability(geom, dt, dx)

    n_states = len(drives) + 1
    m = initial.t_f.shape[-1]
    t_f = np.empty((n_states, m))
    t_p = np.empty((n_states, m))
    t_g = np.empty((n_states, m))
    times = initial.t + dt * np.arange(n_states)
    state = initial.copy()
    t_f[0], t_p[0], t_g[0] = state.t_f, state.t_p, state.t_g
    for k, d in enumerate(drives):
        try:
            state = step_all(state, d, geom, c_vf, dt, dx, timestep=k)
        except CflViolation:
            raise
        except FloatingPointError as exc:  # pragma: no cover
            raise SimulationError(str(exc), timestep=k) from exc
        if not np.all(np.isfinite(state.t_f)):
            raise SimulationError("non-finite fluid temperature", timestep=k)
        t_f[k + 1], t_p[k + 1], t_g[k + 1] = state.t_f, state.t_p, state.t_g
    cells = np.asarray(sensor_cells, dtype=int)
    return LoopTrajectory(times=times, t_f=t_f, t_p=t_p, t_g=t_g,
                          sensor_samples=t_f[:, cells].T)


def initial_state_from_sensors(sensor_values, sensor_cells, n_segments,
                               t_ambient) -> ThermalState:
    """Heuristic initial condition from the first sensor readings.

    Fluid: linear interpolation between sensor cells (constant beyond the
    first/last sensor). Pipe starts at the fluid temperature, glass halfway
    between fluid and ambient.
    """
    cells = np.asarray(sensor_cells, dtype=float)
    vals = np.asarray(sensor_values, dtype=float)
    t_f = np.interp(np.arange(n_segments, dtype=float), cells, vals)
    t_p = t_f.copy()
    t_g = 0.5 * (t_f + t_ambient)
    return ThermalState(t_f=t_f, t_p=t_p, t_g=t_g, t=0.0)
