import numpy as np
import pytest

from troughcal import dataio, topology as topo
from troughcal.fluid import FluidPropertyTable

BASE_EPOCH = dataio.parse_timestamp("2025-01-10T22:00:00Z")


@pytest.fixture
def props():
    return FluidPropertyTable()


@pytest.fixture(scope="session")
def two_loop_topology():
    cfg = topo.default_config(n_subfields=1, loops_per_subfield=2)
    return topo.build_topology(cfg)


def make_scenario(topology, n_nights=1, noise_sigma=0.0, seed=7,
                  duration_s=1000.0, omega=None, hpg=None, alpha=0.9,
                  era_ids=None, **night_kwargs):
    """One-subfield synthetic scenario with slow flow (CFL-safe for 2 loops)."""
    sf = topology.subfields[0]
    n = sf.n_loops
    n_spans = sf.loops[0].n_spans
    rng = np.random.default_rng(seed)
    if omega is None:
        omega = {0: 1.0 + 0.2 * (rng.random(n) - 0.5)}
    if hpg is None:
        hpg = 1.0 + rng.random((n, n_spans))
    night_kwargs.setdefault("flow_base", 0.004)
    night_kwargs.setdefault("flow_wobble", 0.2)
    nights = [dataio.NightDrive(start_epoch=BASE_EPOCH + 86400 * i,
                                duration_s=duration_s,
                                era_id=0 if era_ids is None else era_ids[i],
                                **night_kwargs)
              for i in range(n_nights)]
    return dataio.SyntheticScenario(
        subfield_id=sf.id, nights=nights, omega=omega,
        hpg=np.asarray(hpg, dtype=float), alpha=alpha,
        noise_sigma=noise_sigma, seed=seed)


def make_sequences(topology, props, tmp_path, **kwargs):
    """generate -> ingest -> extract round trip; returns (sequences, truth)."""
    scenario = make_scenario(topology, **kwargs)
    paths, _ = dataio.generate(scenario, topology, props, tmp_path)
    sequences = dataio.extract_periods(dataio.ingest(paths),
                                       dataio.ExtractionCriteria(), topology)
    truth = scenario.truth_params([s.id for s in sequences])
    return sequences, truth
