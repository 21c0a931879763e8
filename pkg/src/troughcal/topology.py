"""Static structure of the solar field: subfields, loops, grid, sensors.

All geometry comes from a JSON-compatible config tree (see README for the
schema). Nothing in here is learnable; topology objects are immutable after
construction and safe to share across parallel workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import ConfigError, InvalidGeometry, SensorOutOfRange

STEFAN_BOLTZMANN = 5.670374419e-8  # W/(m^2 K^4)

#: Receiver cross sections / perimeters for a generic evacuated absorber
#: (70 mm steel pipe in a 125 mm glass envelope). Users override via config.
DEFAULT_GEOMETRY = {
    "a_f": 3.421e-3,   # m^2, fluid cross section
    "a_p": 4.273e-4,   # m^2, pipe wall cross section
    "a_g": 1.150e-3,   # m^2, glass wall cross section
    "p_p": 0.2199,     # m, pipe outer perimeter
    "p_g": 0.3927,     # m, glass outer perimeter
    "eps_p": 0.10,
    "eps_g": 0.89,
    "k_p": 20.0,       # W/(m K), pipe axial conductivity
    "c_vp": 4.00e6,    # J/(m^3 K), volumetric heat capacity of steel
    "c_vg": 1.67e6,    # J/(m^3 K), volumetric heat capacity of glass
    "h_fp": 800.0,     # W/(m^2 K), fluid-pipe convection
    "h_ge": 10.0,      # W/(m^2 K), glass-ambient convection
}

#: Four mid-collector sensors plus the outlet sensor.
DEFAULT_SENSOR_FRACTIONS = (0.125, 0.375, 0.625, 0.875, 1.0)


@dataclass(frozen=True)
class GeometrySpec:
    """Per-loop receiver geometry and fixed heat-transfer constants.

    Heat capacities are volumetric, J/(m^3 K), so that c_v * A carries
    J/(m K) in the energy balances.
    """

    a_f: float
    a_p: float
    a_g: float
    p_p: float
    p_g: float
    eps_p: float
    eps_g: float
    k_p: float
    c_vp: float
    c_vg: float
    h_fp: float
    h_ge: float

    def __post_init__(self):
        for name in ("a_f", "a_p", "a_g", "p_p", "p_g", "k_p",
                     "c_vp", "c_vg", "h_fp", "h_ge"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise InvalidGeometry(f"{name} must be finite and > 0, got {v!r}")
        for name in ("eps_p", "eps_g"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise InvalidGeometry(f"{name} must lie in (0, 1], got {v!r}")


@dataclass(frozen=True)
class SensorSpec:
    """One temperature sensor: fractional position along the loop + cell."""

    index: int          # 0-based sensor number within the loop
    fraction: float     # position along loop length, in (0, 1]
    cell: int           # resolved grid cell


@dataclass(frozen=True)
class LoopSpec:
    id: str
    length_m: float
    n_segments: int
    sensors: tuple[SensorSpec, ...]
    geometry: GeometrySpec

    @property
    def sensor_cells(self):
        return tuple(s.cell for s in self.sensors)

    @property
    def n_sensors(self):
        return len(self.sensors)

    @property
    def n_spans(self):
        """Sensor-to-sensor stretches; the resolution at which pipe-glass
        loss coefficients are learned."""
        return len(self.sensors) - 1

    def span_of_cell(self, j: int) -> int:
        """Span index for grid cell j. Cells upstream of the second sensor
        belong to span 0; each interior sensor starts a new span."""
        boundaries = self.sensor_cells[1:-1]
        span = 0
        for b in boundaries:
            if j >= b:
                span += 1
        return span


@dataclass(frozen=True)
class SubfieldSpec:
    id: str
    loops: tuple[LoopSpec, ...]

    @property
    def loop_ids(self):
        return tuple(lp.id for lp in self.loops)

    @property
    def n_loops(self):
        return len(self.loops)


@dataclass(frozen=True)
class FieldTopology:
    subfields: tuple[SubfieldSpec, ...]
    segment_length_m: float
    timestep_s: float
    fluid_config: dict = field(default_factory=dict, compare=False)

    @property
    def n_loops(self):
        return sum(sf.n_loops for sf in self.subfields)

    def subfield(self, subfield_id: str) -> SubfieldSpec:
        for sf in self.subfields:
            if sf.id == subfield_id:
                return sf
        raise ConfigError(f"unknown subfield {subfield_id!r}")

    def loop(self, loop_id: str) -> LoopSpec:
        for sf in self.subfields:
            for lp in sf.loops:
                if lp.id == loop_id:
                    return lp
        raise ConfigError(f"unknown loop {loop_id!r}")


def resolve_sensor_cell(fraction: float, n_segments: int) -> int:
    """Map a fractional position along the loop to a grid cell index.

    Fraction 1.0 maps to the outlet cell n_segments - 1.
    """
    if not (0.0 < fraction <= 1.0):
        raise SensorOutOfRange(
            f"sensor fraction {fraction} outside (0, 1]")
    return min(int(fraction * n_segments), n_segments - 1)


def build_topology(config: dict) -> FieldTopology:
    """Validate a config tree and resolve sensors to grid cells.

    Deterministic: identical config trees yield identical topologies.
    """
    if not isinstance(config, dict):
        raise ConfigError("topology config must be a mapping")
    try:
        dx = float(config["segment_length_m"])
        dt = float(config["timestep_s"])
        subfield_cfgs = config["subfields"]
    except KeyError as exc:
        raise ConfigError(f"missing topology key: {exc}") from exc
    if dx <= 0 or dt <= 0:
        raise InvalidGeometry("segment_length_m and timestep_s must be > 0")
    if not subfield_cfgs:
        raise ConfigError("at least one subfield required")

    seen_loop_ids = set()
    subfields = []
    for sf_cfg in subfield_cfgs:
        loops = []
        if not sf_cfg.get("loops"):
            raise ConfigError(f"subfield {sf_cfg.get('id')!r} has no loops")
        for lp_cfg in sf_cfg["loops"]:
            loop_id = str(lp_cfg["id"])
            if loop_id in seen_loop_ids:
                raise ConfigError(f"duplicate loop id {loop_id!r}")
            seen_loop_ids.add(loop_id)
            length = float(lp_cfg["length_m"])
            if length <= 0:
                raise InvalidGeometry(f"loop {loop_id}: length_m must be > 0")
            n_segments = int(round(length / dx))
            if n_segments < 2:
                raise InvalidGeometry(
                    f"loop {loop_id}: needs >= 2 segments, got {n_segments}")
            fractions = lp_cfg.get("sensor_fractions", DEFAULT_SENSOR_FRACTIONS)
            sensors = []
            prev_cell = -1
            for idx, frac in enumerate(fractions):
                cell = resolve_sensor_cell(float(frac), n_segments)
                if cell <= prev_cell:
                    raise SensorOutOfRange(
                        f"loop {loop_id}: sensor cells must be strictly "
                        f"increasing (sensor {idx} -> cell {cell})")
                prev_cell = cell
                sensors.append(SensorSpec(index=idx, fraction=float(frac),
                                          cell=cell))
            if len(sensors) < 2:
                raise ConfigError(f"loop {loop_id}: needs >= 2 sensors")
            if sensors[-1].cell != n_segments - 1:
                raise SensorOutOfRange(
                    f"loop {loop_id}: last sensor must sit in the outlet "
                    f"cell {n_segments - 1}, got {sensors[-1].cell}")
            geom_cfg = dict(DEFAULT_GEOMETRY)
            geom_cfg.update(lp_cfg.get("geometry", {}))
            loops.append(LoopSpec(
                id=loop_id, length_m=length, n_segments=n_segments,
                sensors=tuple(sensors), geometry=GeometrySpec(**geom_cfg)))
        subfields.append(SubfieldSpec(id=str(sf_cfg["id"]), loops=tuple(loops)))

    return FieldTopology(subfields=tuple(subfields),
                         segment_length_m=dx, timestep_s=dt,
                         fluid_config=dict(config.get("fluid", {})))


def cfl_max_velocity(topology: FieldTopology) -> float:
    """Maximum admissible fluid speed for the explicit upwind scheme."""
    return topology.segment_length_m / topology.timestep_s


def default_config(n_subfields: int = 4, loops_per_subfield: int = 38,
                   loop_length_m: float = 600.0,
                   segment_length_m: float = 10.0,
                   timestep_s: float = 5.0) -> dict:
    """Config tree for a generic field: n_subfields x loops_per_subfield
    identical loops with the default receiver geometry."""
    subfields = []
    for i in range(n_subfields):
        sf_id = chr(ord("A") + i) if n_subfields <= 26 else f"SF{i:02d}"
        loops = [{"id": f"{sf_id}{j + 1:02d}", "length_m": loop_length_m}
                 for j in range(loops_per_subfield)]
        subfields.append({"id": sf_id, "loops": loops})
    return {
        "segment_length_m": segment_length_m,
        "timestep_s": timestep_s,
        "subfields": subfields,
    }


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
