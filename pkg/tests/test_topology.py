import pytest

from troughcal import topology as topo
from troughcal.errors import (ConfigError, InvalidGeometry, SensorOutOfRange)


def test_default_field_has_152_loops():
    t = topo.build_topology(topo.default_config())
    assert len(t.subfields) == 4
    assert t.n_loops == 152


def test_segment_count_600m_at_10m():
    t = topo.build_topology(topo.default_config(n_subfields=1,
                                                loops_per_subfield=1))
    assert t.subfields[0].loops[0].n_segments == 60


def test_outlet_sensor_maps_to_last_cell():
    assert topo.resolve_sensor_cell(1.0, 60) == 59
    t = topo.build_topology(topo.default_config(n_subfields=1,
                                                loops_per_subfield=1))
    assert t.subfields[0].loops[0].sensor_cells[-1] == 59


@pytest.mark.parametrize("frac", [0.0, -0.1, 1.0001])
def test_sensor_fraction_out_of_range(frac):
    with pytest.raises(SensorOutOfRange):
        topo.resolve_sensor_cell(frac, 60)


def test_cfl_max_velocity():
    def vel(dx, dt):
        cfg = topo.default_config(n_subfields=1, loops_per_subfield=1,
                                  segment_length_m=dx, timestep_s=dt)
        return topo.cfl_max_velocity(topo.build_topology(cfg))
    assert vel(10.0, 5.0) == 2.0
    assert vel(5.0, 5.0) == 1.0
    assert vel(10.0, 1.0) == 10.0


def test_build_is_deterministic():
    cfg = topo.default_config()
    assert topo.build_topology(cfg) == topo.build_topology(cfg)


def test_duplicate_loop_id_rejected():
    cfg = topo.default_config(n_subfields=1, loops_per_subfield=2)
    cfg["subfields"][0]["loops"][1]["id"] = \
        cfg["subfields"][0]["loops"][0]["id"]
    with pytest.raises(ConfigError):
        topo.build_topology(cfg)


def test_nonpositive_geometry_rejected():
    cfg = topo.default_config(n_subfields=1, loops_per_subfield=1)
    cfg["subfields"][0]["loops"][0]["geometry"] = {"a_f": -1.0}
    with pytest.raises(InvalidGeometry):
        topo.build_topology(cfg)


def test_last_sensor_must_be_outlet():
    cfg = topo.default_config(n_subfields=1, loops_per_subfield=1)
    cfg["subfields"][0]["loops"][0]["sensor_fractions"] = (0.25, 0.5)
    with pytest.raises(SensorOutOfRange):
        topo.build_topology(cfg)


def test_span_of_cell_boundaries():
    t = topo.build_topology(topo.default_config(n_subfields=1,
                                                loops_per_subfield=1))
    lp = t.subfields[0].loops[0]
    # default sensors sit at cells 7, 22, 37, 52, 59
    assert lp.n_spans == 4
    assert lp.span_of_cell(0) == 0
    assert lp.span_of_cell(21) == 0
    assert lp.span_of_cell(22) == 1
    assert lp.span_of_cell(52) == 3
    assert lp.span_of_cell(59) == 3
    spans = [lp.span_of_cell(j) for j in range(lp.n_segments)]
    assert spans == sorted(spans)
