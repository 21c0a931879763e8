"""Plant-style CSV ingestion, homogenization-period extraction, synthetic
data generation and result export.

CSV schema (frozen; one file per subfield per day, filename
``<subfield>_<YYYY-MM-DD>.csv``):

    timestamp, v_dot_h, t_header, t_ambient, loop<ID>_s<1..n>

Timestamps are ISO-8601 UTC, comma-separated, decimal point, header row
mandatory. Temperatures default to kelvin; a channel map can declare degC
columns, which are converted on ingest. Floats are written with repr(), so
a generate -> ingest round trip is bit-exact at matching sample rate.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import _kernels, pde
from .adjoint import coefficient_pack
from .errors import (ConfigError, ExportError, NonMonotoneTime, SchemaError,
                     UnknownUnit)
from .hydraulics import clamp_flow, softmax
from .params import ParamSet, softplus_inv
from .sequence import HomogenizationSequence

UNITS = ("K", "degC", "m3_per_s", "fraction")

_SENSOR_COLUMN = re.compile(r"^loop(?P<loop>.+)_s(?P<sensor>\d+)$")

_ROLE_UNITS = {"v_dot_h": "m3_per_s", "t_header": "K", "t_ambient": "K",
               "sensor": "K"}


@dataclass
class RawChannel:
    """One ingested time series with a unit tag from the closed vocabulary."""

    id: str
    timestamps: np.ndarray   # epoch seconds, strictly increasing
    values: np.ndarray
    unit: str

    def __post_init__(self):
        if self.unit not in UNITS:
            raise UnknownUnit(f"channel {self.id}: unit {self.unit!r}")
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        bad = np.nonzero(np.diff(self.timestamps) <= 0)[0]
        if bad.size:
            raise NonMonotoneTime(
                f"channel {self.id}: timestamp not increasing at row "
                f"{int(bad[0]) + 1}")


def parse_timestamp(text: str) -> float:
    t = text.strip()
    if t.endswith("Z"):
        t = t[:-1] + "+00:00"
    stamp = datetime.fromisoformat(t)
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


def format_timestamp(epoch: float) -> str:
    stamp = datetime.fromtimestamp(epoch, tz=timezone.utc)
    return stamp.strftime("%Y-%m-%dT%H:%M:%S") + (
        f".{stamp.microsecond:06d}" if stamp.microsecond else "") + "Z"


def subfield_of_file(path) -> str:
    return Path(path).stem.split("_", 1)[0]


def ingest(files, channel_map: dict | None = None) -> dict:
    """Read schema CSVs into validated channels.

    Returns {subfield id -> {channel id -> RawChannel}}; sensor channels are
    keyed ``loop<ID>/s<j>``. ``channel_map`` may override units per column,
    e.g. {"t_ambient": {"unit": "degC"}}. degC values are converted to K.
    """
    channel_map = channel_map or {}
    collected = {}
    for path in sorted(Path(p) for p in files):
        sf = subfield_of_file(path)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise SchemaError(f"{path}: empty file") from None
            for col in ("timestamp", "v_dot_h", "t_header", "t_ambient"):
                if col not in header:
                    raise SchemaError(f"{path}: missing column {col!r}")
            rows = list(reader)
        if not rows:
            raise SchemaError(f"{path}: no data rows")
        cols = {name: i for i, name in enumerate(header)}
        times = np.array([parse_timestamp(r[cols["timestamp"]]) for r in rows])
        store = collected.setdefault(sf, {})
        for name in header:
            if name == "timestamp":
                continue
            m = _SENSOR_COLUMN.match(name)
            if m:
                chan_id = f"loop{m.group('loop')}/s{m.group('sensor')}"
                default_unit = "K"
            elif name in ("v_dot_h", "t_header", "t_ambient"):
                chan_id = name
                default_unit = _ROLE_UNITS[name]
            else:
                raise SchemaError(f"{path}: unrecognized column {name!r}")
            unit = channel_map.get(name, {}).get("unit", default_unit)
            if unit not in UNITS:
                raise UnknownUnit(f"{path}: column {name}: unit {unit!r}")
            values = np.array([float(r[cols[name]]) for r in rows])
            if unit == "degC":
                values = values + 273.15
                unit = "K"
            store.setdefault(chan_id, []).append((times, values, unit))

    out = {}
    for sf, chans in collected.items():
        out[sf] = {}
        for chan_id, parts in chans.items():
            parts.sort(key=lambda p: p[0][0])
            times = np.concatenate([p[0] for p in parts])
            values = np.concatenate([p[1] for p in parts])
            out[sf][chan_id] = RawChannel(id=chan_id, timestamps=times,
                                          values=values, unit=parts[0][2])
    return out


# -- night detection ---------------------------------------------------------

def solar_elevation_deg(epoch: float, lat_deg: float, lon_deg: float) -> float:
    """Approximate solar elevation (spencer-series declination + equation of
    time); a degree or two of accuracy is plenty for night gating."""
    stamp = datetime.fromtimestamp(epoch, tz=timezone.utc)
    doy = stamp.timetuple().tm_yday
    frac_hour = stamp.hour + stamp.minute / 60.0 + stamp.second / 3600.0
    gamma = 2.0 * math.pi / 365.0 * (doy - 1 + (frac_hour - 12) / 24.0)
    decl = (0.006918 - 0.399912 * math.cos(gamma) + 0.070257 * math.sin(gamma)
            - 0.006758 * math.cos(2 * gamma) + 0.000907 * math.sin(2 * gamma)
            - 0.002697 * math.cos(3 * gamma) + 0.00148 * math.sin(3 * gamma))
    eqtime = 229.18 * (0.000075 + 0.001868 * math.cos(gamma)
                       - 0.032077 * math.sin(gamma)
                       - 0.014615 * math.cos(2 * gamma)
                       - 0.040849 * math.sin(2 * gamma))
    tst = frac_hour * 60.0 + eqtime + 4.0 * lon_deg
    hour_angle = math.radians(tst / 4.0 - 180.0)
    lat = math.radians(lat_deg)
    cos_zen = (math.sin(lat) * math.sin(decl)
               + math.cos(lat) * math.cos(decl) * math.cos(hour_angle))
    return math.degrees(math.asin(max(-1.0, min(1.0, cos_zen))))


@dataclass
class ExtractionCriteria:
    """What qualifies as a usable homogenization period."""

    v_min: float = 1e-4            # m^3/s
    min_duration_s: float = 900.0
    max_gap_s: float = 60.0
    clock_window_utc: tuple | None = (20.0, 7.0)  # hours; None -> use site
    site: tuple | None = None      # (lat_deg, lon_deg)
    max_elevation_deg: float = 0.0
    era_labels: dict = field(default_factory=dict)
    # era_labels: {subfield -> [(t_start, t_end, era_id), ...]}; default era 0


def _is_night(t: np.ndarray, criteria: ExtractionCriteria) -> np.ndarray:
    if criteria.clock_window_utc is not None:
        start, end = criteria.clock_window_utc
        hours = (t % 86400.0) / 3600.0
        if start <= end:
            return (hours >= start) & (hours < end)
        return (hours >= start) | (hours < end)
    if criteria.site is None:
        raise ConfigError("criteria need a clock window or a site location")
    lat, lon = criteria.site
    return np.array([solar_elevation_deg(ti, lat, lon)
                     < criteria.max_elevation_deg for ti in t])


def _era_at(criteria: ExtractionCriteria, subfield: str, t0: float) -> int:
    for start, end, era in criteria.era_labels.get(subfield, ()):
        if start <= t0 < end:
            return int(era)
    return 0


def sequence_id(subfield: str, t_start: float) -> str:
    return f"{subfield}-{int(round(t_start))}"


def extract_periods(channels: dict, criteria: ExtractionCriteria,
                    topology) -> list:
    """Cut qualifying nighttime intervals out of raw channels and resample
    them to the topology timestep.

    ``channels`` is the ingest() output. Returned intervals are maximal,
    pairwise disjoint, satisfy all criteria at every interior sample, and
    are split at internal gaps larger than ``max_gap_s``.
    """
    sequences = []
    dt = topology.timestep_s
    for sf_id in sorted(channels):
        chans = channels[sf_id]
        sf = topology.subfield(sf_id)
        flow = chans["v_dot_h"]
        t = flow.timestamps
        ok = _is_night(t, criteria) & (flow.values >= criteria.v_min)
        # split qualifying samples into runs, breaking at large gaps
        idx = np.nonzero(ok)[0]
        if idx.size == 0:
            continue
        breaks = np.nonzero((np.diff(idx) > 1)
                            | (np.diff(t[idx]) > criteria.max_gap_s))[0]
        runs = np.split(idx, breaks + 1)
        for run in runs:
            t0, t1 = t[run[0]], t[run[-1]]
            if t1 - t0 < criteria.min_duration_s:
                continue
            n_steps = int(math.floor((t1 - t0) / dt)) + 1
            grid = t0 + dt * np.arange(n_steps)

            def sample(chan_id):
                ch = chans.get(chan_id)
                if ch is None:
                    raise SchemaError(
                        f"subfield {sf_id}: missing channel {chan_id}")
                return np.interp(grid, ch.timestamps, ch.values)

            sensors = np.stack([
                np.stack([sample(f"loop{lp.id}/s{j + 1}")
                          for j in range(lp.n_sensors)])
                for lp in sf.loops])
            sequences.append(HomogenizationSequence(
                id=sequence_id(sf_id, t0), subfield_id=sf_id,
                era_id=_era_at(criteria, sf_id, t0), t_start=t0, dt=dt,
                v_dot_h=sample("v_dot_h"), t_header=sample("t_header"),
                t_ambient=sample("t_ambient"), sensors=sensors,
                loop_ids=sf.loop_ids))
    return sequences


# -- synthetic scenarios -----------------------------------------------------

@dataclass
class NightDrive:
    """Drive profiles for one synthetic night."""

    start_epoch: float          # UTC, should fall in the extraction window
    duration_s: float
    era_id: int = 0
    flow_base: float = 0.012    # m^3/s
    flow_ramp: float = 0.2      # relative increase over the night
    flow_wobble: float = 0.05   # relative sinusoidal modulation
    inlet_base: float = 540.0   # K
    inlet_pulse: float = 15.0   # K
    inlet_pulse_time: float = 1800.0   # s after start
    inlet_pulse_width: float = 600.0   # s
    ambient_start: float = 285.0       # K
    ambient_drift: float = -3e-4       # K/s
    profile_drop: float = 20.0  # K decline of the initial profile, in->out


@dataclass
class SyntheticScenario:
    """Ground truth plus drives; fully determines the CSVs given the seed."""

    subfield_id: str
    nights: list
    omega: dict                  # era id -> (n_loops,) true valve vector
    hpg: np.ndarray              # (n_loops, n_spans), persistent truth
    a: float = 0.0
    b: float = 1.0
    alpha: float = 1.0
    noise_sigma: float = 0.0     # K, iid per sensor sample
    loop_start_spread: float = 3.0   # K, per-loop initial temperature offsets
    seed: int = 0
    sky_offset: float = pde.SKY_OFFSET_K

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def truth_params(self, night_ids) -> ParamSet:
        """Ground truth as a ParamSet whose per-period blocks all equal the
        persistent h_pg map."""
        ps = ParamSet(a=self.a, b=self.b,
                      log_alpha={self.subfield_id: float(np.log(self.alpha))},
                      omega={(self.subfield_id, era): np.asarray(om, float)
                             for era, om in self.omega.items()},
                      hpg_raw={nid: softplus_inv(np.asarray(self.hpg, float))
                               for nid in night_ids})
        return ps


def simulate_night(scenario: SyntheticScenario, night: NightDrive, topology,
                   props, rng) -> tuple:
    """Forward-simulate one night at ground truth.

    The allocation inputs (loop-mean temperatures) are taken from the noisy
    recorded readings, exactly as a calibrator will see them, so refitting at
    truth reproduces the recorded series up to the injected noise.
    Returns (sequence, mean_beta).
    """
    sf = topology.subfield(scenario.subfield_id)
    loop0 = sf.loops[0]
    geom = loop0.geometry
    dt, dx = topology.timestep_s, topology.segment_length_m
    m = loop0.n_segments
    cells = np.asarray(loop0.sensor_cells)
    n, ns = sf.n_loops, loop0.n_sensors
    s = int(round(night.duration_s / dt))
    tt = dt * np.arange(s)

    v = night.flow_base * (1.0 + night.flow_ramp * tt / night.duration_s
                           + night.flow_wobble * np.sin(2 * np.pi * tt / 1200.0))
    t_header = night.inlet_base + night.inlet_pulse * np.exp(
        -((tt - night.inlet_pulse_time) / night.inlet_pulse_width) ** 2)
    t_amb = night.ambient_start + night.ambient_drift * tt
    t_sky = t_amb - scenario.sky_offset

    noise = scenario.noise_sigma * rng.standard_normal((n, ns, s))
    loop_offsets = scenario.loop_start_spread * (rng.random(n) - 0.5)

    fractions = np.array([sn.fraction for sn in loop0.sensors])
    y = np.empty((n, ns, s))
    y[:, :, 0] = (night.inlet_base - night.profile_drop * fractions[None, :]
                  + loop_offsets[:, None] + noise[:, :, 0])

    t_f0 = np.stack([np.interp(np.arange(m, dtype=float),
                               cells.astype(float), y[i, :, 0])
                     for i in range(n)])

    omega = np.asarray(scenario.omega[night.era_id], dtype=float)
    spans = np.array([loop0.span_of_cell(j) for j in range(m)])
    hpg_seg = np.asarray(scenario.hpg, dtype=float)[:, spans]
    c_vf = props.heat_capacity_constant()
    v = clamp_flow(v)

    # advance through the same compiled step as the calibrator so a refit at
    # truth reproduces the recordings to rounding noise
    coeffs = coefficient_pack(geom, c_vf, dt)
    win_f = np.empty((2, n, m))
    win_p = np.empty((2, n, m))
    win_g = np.empty((2, n, m))
    win_f[0] = t_f0
    win_p[0] = t_f0
    win_g[0] = 0.5 * (t_f0 + t_amb[0])
    u = np.empty((n, 1))
    betas = np.empty((n, s - 1))
    for k in range(s - 1):
        t_mu = y[:, :, k].mean(axis=1)
        beta = softmax((scenario.a * t_mu + scenario.b) * omega, axis=0)
        ratio = props.density(t_header[k]) / props.density(t_mu)
        u[:, 0] = beta * (ratio * v[k] / geom.a_f) * scenario.alpha
        pde.courant_number(u[:, 0], dt, dx, timestep=k)
        betas[:, k] = beta
        _kernels.forward_window(win_f, win_p, win_g, u,
                                t_header[k:k + 1], t_amb[k:k + 1],
                                t_sky[k:k + 1], hpg_seg, dt, dx, coeffs, 0, 1)
        y[:, :, k + 1] = win_f[1][:, cells] + noise[:, :, k + 1]
        win_f[0] = win_f[1]
        win_p[0] = win_p[1]
        win_g[0] = win_g[1]

    seq = HomogenizationSequence(
        id=sequence_id(scenario.subfield_id, night.start_epoch),
        subfield_id=scenario.subfield_id, era_id=night.era_id,
        t_start=night.start_epoch, dt=dt, v_dot_h=v, t_header=t_header,
        t_ambient=t_amb, sensors=y, loop_ids=sf.loop_ids,
        sky_offset=scenario.sky_offset)
    return seq, betas.mean(axis=1)


def generate(scenario: SyntheticScenario, topology, props, out_dir):
    """Simulate every night of the scenario and write schema CSVs plus a
    ground-truth sidecar (``truth.json``). Returns (csv paths, sidecar dict).

    Deterministic: the same scenario and seed produce identical bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(scenario.seed)
    sf = topology.subfield(scenario.subfield_id)
    paths = []
    sidecar = {
        "subfield": scenario.subfield_id,
        "a": scenario.a, "b": scenario.b, "alpha": scenario.alpha,
        "noise_sigma": scenario.noise_sigma, "seed": scenario.seed,
        "omega": {str(era): list(map(float, om))
                  for era, om in sorted(scenario.omega.items())},
        "hpg": [list(map(float, row)) for row in np.asarray(scenario.hpg)],
        "loop_ids": list(sf.loop_ids),
        "nights": [],
    }
    for night in scenario.nights:
        seq, mean_beta = simulate_night(scenario, night, topology, props, rng)
        day = datetime.fromtimestamp(night.start_epoch,
                                     tz=timezone.utc).strftime("%Y-%m-%d")
        path = out_dir / f"{scenario.subfield_id}_{day}.csv"
        write_sequence_csv(path, seq)
        paths.append(path)
        sidecar["nights"].append({
            "id": seq.id, "era_id": night.era_id,
            "start_epoch": night.start_epoch,
            "duration_s": night.duration_s,
            "mean_beta": list(map(float, mean_beta)),
        })
    sidecar_path = out_dir / "truth.json"
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)
    return paths, sidecar


def write_sequence_csv(path, seq: HomogenizationSequence):
    """Write one sequence in the ingest schema with full float precision."""
    sf_loops = seq.loop_ids
    header = ["timestamp", "v_dot_h", "t_header", "t_ambient"]
    for loop_id in sf_loops:
        header += [f"loop{loop_id}_s{j + 1}" for j in range(seq.n_sensors)]
    times = seq.times
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(seq.n_steps):
            row = [format_timestamp(times[k]), repr(float(seq.v_dot_h[k])),
                   repr(float(seq.t_header[k])),
                   repr(float(seq.t_ambient[k]))]
            for i in range(len(sf_loops)):
                row += [repr(float(seq.sensors[i, j, k]))
                        for j in range(seq.n_sensors)]
            writer.writerow(row)


# -- report export -----------------------------------------------------------

def export_report(report, out_dir, formats=("csv",)):
    """Write FitReport tables as CSV and, optionally, SVG charts."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_table(out_dir / "loss_curve.csv", ["epoch", "loss"],
                     [[i, repr(v)] for i, v in enumerate(report.loss_curve)])
        beta_rows = []
        for (sf, era), beta in sorted(report.beta.items()):
            for loop_id, b in zip(report.beta_loop_ids[sf], beta):
                beta_rows.append([sf, era, loop_id, repr(float(b))])
        _write_table(out_dir / "beta.csv",
                     ["subfield", "era", "loop", "beta"], beta_rows)
        hpg_rows = []
        for period in sorted(report.hpg):
            for loop_id, vals in sorted(report.hpg[period].items()):
                for span, v in enumerate(vals):
                    hpg_rows.append([period, loop_id, span, repr(float(v))])
        _write_table(out_dir / "hpg.csv",
                     ["period", "loop", "span", "h_pg"], hpg_rows)
        rmse_rows = []
        for loop_id, vals in sorted(report.rmse_per_sensor.items()):
            for j, v in enumerate(vals):
                rmse_rows.append([loop_id, j + 1, repr(float(v))])
        _write_table(out_dir / "rmse.csv", ["loop", "sensor", "rmse_K"],
                     rmse_rows)
        rank_rows = [[i + 1, e.loop_id, e.span, repr(e.h_pg), int(e.flagged)]
                     for i, e in enumerate(report.ranking)]
        _write_table(out_dir / "heat_loss_ranking.csv",
                     ["rank", "loop", "span", "h_pg", "flagged"], rank_rows)
        if "svg" in formats:
            _export_charts(report, out_dir)
    except OSError as exc:
        raise ExportError(str(exc)) from exc


def export_predictions(params, sequences, topology, props, out_dir):
    """Plot-ready measured-vs-predicted series, one CSV per sequence."""
    from . import adjoint
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for seq in sequences:
        pred, _, _ = adjoint.predict(params, seq, topology, props)
        rows = []
        times = seq.times
        for i, loop_id in enumerate(seq.loop_ids):
            for j in range(seq.n_sensors):
                for k in range(seq.n_steps):
                    rows.append([format_timestamp(times[k]), loop_id, j + 1,
                                 repr(float(seq.sensors[i, j, k])),
                                 repr(float(pred[i, j, k]))])
        path = out_dir / f"predictions_{seq.id}.csv"
        _write_table(path, ["timestamp", "loop", "sensor", "measured_K",
                            "predicted_K"], rows)
        paths.append(path)
    return paths


def _write_table(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _export_charts(report, out_dir):
    import matplotlib
    matplotlib.use("svg", force=True)
    import matplotlib.pyplot as plt

    if report.loss_curve:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.semilogy(report.loss_curve)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss [K$^2$]")
        fig.tight_layout()
        fig.savefig(out_dir / "loss_curve.svg")
        plt.close(fig)
    if report.beta:
        fig, ax = plt.subplots(figsize=(7, 3.5))
        for (sf, era), beta in sorted(report.beta.items()):
            ax.plot(report.beta_loop_ids[sf], beta, marker="o",
                    label=f"{sf} era {era}")
        ax.set_ylabel("mass-flow ratio")
        ax.tick_params(axis="x", rotation=60)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out_dir / "beta.svg")
        plt.close(fig)
    if report.ranking:
        fig, ax = plt.subplots(figsize=(7, 3.5))
        labels = [f"{e.loop_id}/{e.span}" for e in report.ranking]
        colors = ["tab:red" if e.flagged else "tab:blue"
                  for e in report.ranking]
        ax.bar(range(len(labels)), [e.h_pg for e in report.ranking],
               color=colors)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=90, fontsize=6)
        ax.set_ylabel("h_pg [W/(m$^2$K)]")
        fig.tight_layout()
        fig.savefig(out_dir / "heat_loss.svg")
        plt.close(fig)
