"""Reverse-mode gradients of the simulate -> loss pipeline.

The forward model is the exact forward-Euler scheme from :mod:`troughcal.pde`;
gradients are the exact adjoint of that discrete computation
(discretize-then-differentiate), so central finite differences converge to
them. The reverse sweep stores state checkpoints every ``checkpoint_interval``
steps and recomputes the states inside each window instead of taping the
whole trajectory.

All arithmetic is 64-bit; the loss reported by the gradient pass is the same
computation as the plain loss evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels, pde
from .errors import (ConfigError, InvalidProbeCount, NonFiniteGradient)
from .hydraulics import clamp_flow, softmax, softmax_vjp
from .params import ParamSet, sigmoid, softplus
from .topology import FieldTopology, STEFAN_BOLTZMANN


@dataclass
class ForwardOptions:
    checkpoint_interval: int = 64


@dataclass
class GradientReport:
    """Loss and its gradient, aligned with ParamSet.flatten()."""

    loss: float
    gradient: np.ndarray
    block_norms: dict


@dataclass
class _Prepared:
    """Static per-sequence quantities shared by forward and reverse passes."""

    n_loops: int
    n_sensors: int
    n_steps: int
    n_segments: int
    dt: float
    dx: float
    geom: object
    c_vf: float
    sensor_cells: np.ndarray
    span_onehot: np.ndarray     # (n_segments, n_spans)
    omega: np.ndarray
    t_mu: np.ndarray            # (N, S)
    beta: np.ndarray            # (N, S)
    flow_scale: np.ndarray      # (N, S): density ratio * V_dot / A_f
    u: np.ndarray               # (N, S)
    hpg_seg: np.ndarray         # (N, n_segments)
    hpg_raw: np.ndarray         # (N, n_spans)
    initial: pde.ThermalState


def _subfield_layout(topology: FieldTopology, subfield_id: str):
    """Loops of a subfield must share grid and sensor layout so the whole
    subfield can be stepped as one batch."""
    sf = topology.subfield(subfield_id)
    first = sf.loops[0]
    for lp in sf.loops[1:]:
        if lp.n_segments != first.n_segments \
                or lp.sensor_cells != first.sensor_cells:
            raise ConfigError(
                f"subfield {subfield_id}: loops must share segment count "
                f"and sensor layout ({lp.id} differs from {first.id})")
    return sf, first


def prepare(params: ParamSet, seq, topology: FieldTopology, props) -> _Prepared:
    """Resolve everything that depends only on data and parameters (not on
    the evolving PDE state): allocation, velocities, h_pg map, initial
    condition."""
    sf, loop0 = _subfield_layout(topology, seq.subfield_id)
    if seq.n_loops != sf.n_loops:
        raise ConfigError(
            f"sequence {seq.id} carries {seq.n_loops} loops, subfield "
            f"{sf.id} has {sf.n_loops}")
    geom = loop0.geometry
    m = loop0.n_segments
    cells = np.asarray(loop0.sensor_cells, dtype=int)
    n_spans = loop0.n_spans
    spans = np.array([loop0.span_of_cell(j) for j in range(m)])
    onehot = np.zeros((m, n_spans))
    onehot[np.arange(m), spans] = 1.0

    omega = np.asarray(params.omega[(seq.subfield_id, seq.era_id)])
    alpha = params.alpha(seq.subfield_id)
    t_mu = seq.loop_mean_temperature()                      # (N, S)
    z = (params.a * t_mu + params.b) * omega[:, None]
    beta = softmax(z, axis=0)
    v = clamp_flow(seq.v_dot_h)
    ratio = props.density(seq.t_header)[None, :] / props.density(t_mu)
    flow_scale = ratio * v[None, :] / geom.a_f
    u = beta * flow_scale * alpha

    hpg_raw = np.asarray(params.hpg_raw[seq.id])
    hpg_seg = softplus(hpg_raw) @ onehot.T                  # (N, M)

    t_f0 = np.stack([
        np.interp(np.arange(m, dtype=float), cells.astype(float),
                  seq.sensors[i, :, 0])
        for i in range(seq.n_loops)])
    initial = pde.ThermalState(
        t_f=t_f0, t_p=t_f0.copy(),
        t_g=0.5 * (t_f0 + seq.t_ambient[0]), t=0.0)

    c_vf = props.heat_capacity_constant()
    pde.check_diffusion_stability(geom, topology.timestep_s,
                                  topology.segment_length_m)
    if seq.n_steps > 1:
        # raises CflViolation naming the first offending timestep
        for k in np.nonzero(np.max(u[:, :-1], axis=0) * topology.timestep_s
                            / topology.segment_length_m
                            > 1.0 + pde.CFL_ROUNDING_SLACK)[0][:1]:
            pde.courant_number(u[:, k], topology.timestep_s,
                               topology.segment_length_m, timestep=int(k))
    return _Prepared(
        n_loops=seq.n_loops, n_sensors=seq.n_sensors, n_steps=seq.n_steps,
        n_segments=m, dt=topology.timestep_s, dx=topology.segment_length_m,
        geom=geom, c_vf=c_vf, sensor_cells=cells, span_onehot=onehot,
        omega=omega, t_mu=t_mu, beta=beta, flow_scale=flow_scale, u=u,
        hpg_seg=hpg_seg, hpg_raw=hpg_raw, initial=initial)


def coefficient_pack(geom, c_vf, dt):
    """Scalar coefficients consumed by the window kernels."""
    return (dt * geom.h_fp * geom.p_p / (c_vf * geom.a_f),
            dt / (geom.c_vp * geom.a_p),
            dt / (geom.c_vg * geom.a_g),
            geom.h_fp * geom.p_p,
            geom.eps_p * STEFAN_BOLTZMANN * geom.p_p,
            geom.eps_g * STEFAN_BOLTZMANN * geom.p_g,
            geom.k_p * geom.a_p,
            geom.h_ge * geom.p_g,
            geom.p_p)


_forward_window = _kernels.forward_window
_adjoint_window = _kernels.adjoint_window


def forward(params: ParamSet, seq, topology, props,
            options: ForwardOptions | None = None):
    """Simulate one sequence; returns (loss, predictions, checkpoints, prep).

    ``predictions`` is (n_loops, n_sensors, n_steps); the loss is the mean
    squared sensor error in K^2. ``checkpoints`` maps step index to the
    (t_f, t_p, t_g) arrays at that step, spaced ``checkpoint_interval`` apart.
    """
    options = options or ForwardOptions()
    prep = prepare(params, seq, topology, props)
    kint = max(1, int(options.checkpoint_interval))
    n, m, s = prep.n_loops, prep.n_segments, prep.n_steps
    coeffs = coefficient_pack(prep.geom, prep.c_vf, prep.dt)
    t_in = np.ascontiguousarray(seq.t_header, dtype=float)
    t_e = np.ascontiguousarray(seq.t_ambient, dtype=float)
    t_s = np.ascontiguousarray(seq.t_sky, dtype=float)

    pred = np.empty((n, prep.n_sensors, s))
    init = prep.initial
    pred[:, :, 0] = init.t_f[:, prep.sensor_cells]
    checkpoints = {0: (init.t_f.copy(), init.t_p.copy(), init.t_g.copy())}
    win_f = np.empty((kint + 1, n, m))
    win_p = np.empty((kint + 1, n, m))
    win_g = np.empty((kint + 1, n, m))
    win_f[0], win_p[0], win_g[0] = checkpoints[0]
    k0 = 0
    while k0 < s - 1:
        k1 = min(k0 + kint, s - 1)
        _forward_window(win_f, win_p, win_g, prep.u, t_in, t_e, t_s,
                        prep.hpg_seg, prep.dt, prep.dx, coeffs, k0, k1)
        w1 = k1 - k0
        pred[:, :, k0 + 1:k1 + 1] = \
            win_f[1:w1 + 1][:, :, prep.sensor_cells].transpose(1, 2, 0)
        if k1 < s - 1:
            checkpoints[k1] = (win_f[w1].copy(), win_p[w1].copy(),
                               win_g[w1].copy())
            win_f[0], win_p[0], win_g[0] = checkpoints[k1]
        k0 = k1
    resid = pred - seq.sensors
    loss = float(np.mean(resid ** 2))
    return loss, pred, checkpoints, prep


def sequence_loss(params, seq, topology, props) -> float:
    """Mean squared sensor error for one sequence, K^2."""
    loss, _, _, _ = forward(params, seq, topology, props)
    return loss


def predict(params, seq, topology, props):
    """(predictions, beta, u) for one sequence; predictions match the
    measured sensor layout (n_loops, n_sensors, n_steps)."""
    _, pred, _, prep = forward(params, seq, topology, props)
    return pred, prep.beta, prep.u


def loss(params, sequences, topology, props) -> float:
    """Mean of per-sequence losses (MSE of a concatenated batch of equal
    sequences equals the single-sequence value)."""
    seqs = sequences if isinstance(sequences, (list, tuple)) else [sequences]
    return float(np.mean([sequence_loss(params, s, topology, props)
                          for s in seqs]))


def sequence_loss_grad(params: ParamSet, seq, topology, props,
                       options: ForwardOptions | None = None):
    """Loss and gradients (dict keyed by block name) for one sequence."""
    options = options or ForwardOptions()
    loss_val, pred, checkpoints, prep = forward(params, seq, topology, props,
                                                options)
    n, ns, s, m = prep.n_loops, prep.n_sensors, prep.n_steps, prep.n_segments
    seed_scale = 2.0 / (n * ns * s)
    resid = np.ascontiguousarray(pred - seq.sensors)
    coeffs = coefficient_pack(prep.geom, prep.c_vf, prep.dt)
    t_in = np.ascontiguousarray(seq.t_header, dtype=float)
    t_e = np.ascontiguousarray(seq.t_ambient, dtype=float)
    t_s = np.ascontiguousarray(seq.t_sky, dtype=float)

    lam_f = np.zeros((n, m))
    lam_p = np.zeros((n, m))
    lam_g = np.zeros((n, m))
    lam_f[:, prep.sensor_cells] += seed_scale * resid[:, :, s - 1]

    g_u = np.zeros((n, max(s - 1, 1)))
    g_hpg_seg = np.zeros((n, m))

    cp_indices = sorted(checkpoints)
    kint = max(1, int(options.checkpoint_interval))
    win_f = np.empty((kint + 1, n, m))
    win_p = np.empty((kint + 1, n, m))
    win_g = np.empty((kint + 1, n, m))
    for w in range(len(cp_indices) - 1, -1, -1):
        k0 = cp_indices[w]
        k1 = (s - 1) if w == len(cp_indices) - 1 else cp_indices[w + 1]
        if k1 == k0:
            continue
        # recompute states k0 .. k1 inside the window, then walk it backwards
        win_f[0], win_p[0], win_g[0] = checkpoints[k0]
        _forward_window(win_f, win_p, win_g, prep.u, t_in, t_e, t_s,
                        prep.hpg_seg, prep.dt, prep.dx, coeffs, k0, k1)
        _adjoint_window(win_f, win_p, win_g, prep.u, t_in, prep.hpg_seg,
                        prep.dt, prep.dx, coeffs, k0, k1, lam_f, lam_p,
                        lam_g, resid, prep.sensor_cells, seed_scale,
                        g_u, g_hpg_seg)
    g_u = g_u[:, :max(s - 1, 0)]

    # chain through the allocation model (data-only inputs, so this is exact)
    alpha = params.alpha(seq.subfield_id)
    if s > 1:
        beta = prep.beta[:, :s - 1]
        scale = prep.flow_scale[:, :s - 1]
        t_mu = prep.t_mu[:, :s - 1]
        g_alpha = float(np.sum(g_u * beta * scale))
        g_beta = g_u * scale * alpha
        g_z = softmax_vjp(beta, g_beta, axis=0)
        g_a = float(np.sum(g_z * t_mu * prep.omega[:, None]))
        g_b = float(np.sum(g_z * prep.omega[:, None]))
        g_omega = np.sum(g_z * (params.a * t_mu + params.b), axis=1)
    else:
        g_alpha, g_a, g_b = 0.0, 0.0, 0.0
        g_omega = np.zeros(n)

    g_hpg_span = g_hpg_seg @ prep.span_onehot
    g_hpg_raw = g_hpg_span * sigmoid(prep.hpg_raw)

    grads = {
        "a": np.array([g_a]),
        "b": np.array([g_b]),
        f"log_alpha/{seq.subfield_id}": np.array([alpha * g_alpha]),
        f"omega/{seq.subfield_id}/{seq.era_id}": g_omega,
        f"hpg/{seq.id}": g_hpg_raw.ravel(),
    }
    return loss_val, grads


def _grads_to_vector(params: ParamSet, grads: dict) -> np.ndarray:
    vec = np.zeros(params.n_params)
    slices = params.block_slices()
    for name, g in grads.items():
        vec[slices[name]] += np.asarray(g).ravel()
    return vec


def grad(params: ParamSet, sequence, topology, props,
         options: ForwardOptions | None = None) -> GradientReport:
    """Exact reverse-mode gradient for one sequence.

    Blocks untouched by the sequence (other periods, other eras) get exact
    zeros. Raises NonFiniteGradient naming the first bad block.
    """
    loss_val, grads = sequence_loss_grad(params, sequence, topology, props,
                                         options)
    vec = _grads_to_vector(params, grads)
    slices = params.block_slices()
    block_norms = {}
    for name, sl in slices.items():
        chunk = vec[sl]
        if not np.all(np.isfinite(chunk)):
            raise NonFiniteGradient(f"non-finite gradient in block {name!r}")
        block_norms[name] = float(np.linalg.norm(chunk))
    return GradientReport(loss=loss_val, gradient=vec, block_norms=block_norms)


@dataclass
class ProbeResult:
    block: str
    analytic: float
    numeric: float
    rel_error: float
    passed: bool


@dataclass
class GradientCheckReport:
    max_rel_error: float
    probes: list = field(default_factory=list)

    @property
    def passed(self):
        return all(p.passed for p in self.probes)


def check_gradients(params: ParamSet, sequence, topology, props,
                    n_probes: int, seed: int = 0, fd_step: float = 1e-6,
                    tol: float = 1e-5,
                    options: ForwardOptions | None = None) -> GradientCheckReport:
    """Compare directional derivatives against central finite differences.

    Probes cycle through the parameter blocks: each probe perturbs one block
    along a random unit direction, with a step sized to that block, so that
    every block is exercised and no block's scale dominates the differences.
    """
    if n_probes < 1:
        raise InvalidProbeCount(f"n_probes must be >= 1, got {n_probes}")
    report = grad(params, sequence, topology, props, options)
    x0 = params.flatten()
    slices = params.block_slices()
    blocks = list(slices)
    rng = np.random.default_rng(seed)
    probes = []
    max_err = 0.0
    for i in range(n_probes):
        name = blocks[i % len(blocks)]
        sl = slices[name]
        d = np.zeros(x0.size)
        d[sl] = rng.standard_normal(sl.stop - sl.start)
        d /= np.linalg.norm(d)
        h = fd_step * max(1.0, float(np.linalg.norm(x0[sl])))
        lp = sequence_loss(params.replace_from_vector(x0 + h * d),
                           sequence, topology, props)
        lm = sequence_loss(params.replace_from_vector(x0 - h * d),
                           sequence, topology, props)
        numeric = (lp - lm) / (2.0 * h)
        analytic = float(report.gradient @ d)
        denom = max(abs(analytic), abs(numeric), 1e-12)
        rel = abs(analytic - numeric) / denom
        max_err = max(max_err, rel)
        probes.append(ProbeResult(block=name, analytic=analytic,
                                  numeric=numeric, rel_error=rel,
                                  passed=rel < tol))
    return GradientCheckReport(max_rel_error=max_err, probes=probes)
