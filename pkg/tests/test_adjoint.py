import numpy as np
import pytest

from troughcal import _kernels, adjoint
from troughcal.errors import InvalidProbeCount
from troughcal.params import ParamSet

from conftest import make_sequences


@pytest.fixture
def problem(two_loop_topology, props, tmp_path):
    """Noisy 2-loop sequence plus parameters off the loss minimum."""
    seqs, truth = make_sequences(two_loop_topology, props, tmp_path,
                                 noise_sigma=0.3, duration_s=1000.0, seed=5)
    seq = seqs[0]
    params = ParamSet.initialize(two_loop_topology, [seq])
    rng = np.random.default_rng(2)
    x = params.flatten() + 0.05 * rng.standard_normal(params.n_params)
    return seq, params.replace_from_vector(x), truth


def test_loss_of_grad_matches_plain_loss(problem, two_loop_topology, props):
    seq, params, _ = problem
    plain = adjoint.sequence_loss(params, seq, two_loop_topology, props)
    report = adjoint.grad(params, seq, two_loop_topology, props)
    assert report.loss == plain


def test_loss_is_mean_squared_residual(problem, two_loop_topology, props):
    """A uniform 1 K prediction-measurement offset scores exactly 1 K^2:
    the loss is the plain mean over (loop, sensor, step) squared errors."""
    seq, params, _ = problem
    pred, _, _ = adjoint.predict(params, seq, two_loop_topology, props)
    loss = adjoint.sequence_loss(params, seq, two_loop_topology, props)
    assert loss == np.mean((pred - seq.sensors) ** 2)
    offset = np.mean((pred - (pred - 1.0)) ** 2)
    assert offset == pytest.approx(1.0, rel=1e-12)


def test_perturbing_hpg_increases_noiseless_loss(two_loop_topology, props,
                                                 tmp_path):
    seqs, truth = make_sequences(two_loop_topology, props, tmp_path,
                                 noise_sigma=0.0, duration_s=1000.0, seed=5)
    base = adjoint.loss(truth, seqs, two_loop_topology, props)
    bumped = truth.replace_from_vector(truth.flatten())
    bumped.hpg_raw[seqs[0].id][0, 1] += 0.5
    assert adjoint.loss(bumped, seqs, two_loop_topology, props) > base
    assert base < 1e-10


def test_gradient_vanishes_at_noiseless_truth(two_loop_topology, props,
                                              tmp_path):
    seqs, truth = make_sequences(two_loop_topology, props, tmp_path,
                                 noise_sigma=0.0, duration_s=1000.0, seed=5)
    init = ParamSet.initialize(two_loop_topology, seqs)
    g0 = adjoint.grad(init, seqs[0], two_loop_topology, props).gradient
    truth.ensure_blocks(two_loop_topology, seqs)
    g = adjoint.grad(truth, seqs[0], two_loop_topology, props).gradient
    assert np.linalg.norm(g) < 1e-6 * np.linalg.norm(g0)


def test_check_gradients_full_model(problem, two_loop_topology, props):
    seq, params, _ = problem
    report = adjoint.check_gradients(params, seq, two_loop_topology, props,
                                     n_probes=20, seed=1)
    assert report.passed
    assert report.max_rel_error < 1e-5


def test_check_gradients_rejects_zero_probes(problem, two_loop_topology,
                                             props):
    seq, params, _ = problem
    with pytest.raises(InvalidProbeCount):
        adjoint.check_gradients(params, seq, two_loop_topology, props,
                                n_probes=0)


def test_absent_blocks_get_exact_zeros(two_loop_topology, props, tmp_path):
    seqs, _ = make_sequences(two_loop_topology, props, tmp_path,
                             n_nights=2, noise_sigma=0.2, duration_s=1000.0,
                             seed=5)
    params = ParamSet.initialize(two_loop_topology, seqs)
    report = adjoint.grad(params, seqs[0], two_loop_topology, props)
    slices = params.block_slices()
    other = report.gradient[slices[f"hpg/{seqs[1].id}"]]
    np.testing.assert_array_equal(other, 0.0)
    own = report.gradient[slices[f"hpg/{seqs[0].id}"]]
    assert np.linalg.norm(own) > 0


def test_doubling_the_sequence_preserves_loss_and_gradient(
        problem, two_loop_topology, props):
    seq, params, _ = problem
    single = adjoint.sequence_loss(params, seq, two_loop_topology, props)
    double = adjoint.loss(params, [seq, seq], two_loop_topology, props)
    assert double == pytest.approx(single, rel=1e-12)


def test_checkpoint_interval_does_not_change_gradient(
        problem, two_loop_topology, props):
    seq, params, _ = problem
    g64 = adjoint.grad(params, seq, two_loop_topology, props,
                       adjoint.ForwardOptions(checkpoint_interval=64))
    g7 = adjoint.grad(params, seq, two_loop_topology, props,
                      adjoint.ForwardOptions(checkpoint_interval=7))
    assert g64.loss == g7.loss
    np.testing.assert_allclose(g7.gradient, g64.gradient,
                               rtol=1e-12, atol=1e-15)


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="compiled path absent")
def test_compiled_kernels_match_reference(problem, two_loop_topology, props):
    seq, params, _ = problem
    prep = adjoint.prepare(params, seq, two_loop_topology, props)
    coeffs = adjoint.coefficient_pack(prep.geom, prep.c_vf, prep.dt)
    n, m = prep.n_loops, prep.n_segments
    k0, k1 = 0, 40
    args = (prep.u, np.ascontiguousarray(seq.t_header),
            np.ascontiguousarray(seq.t_ambient),
            np.ascontiguousarray(seq.t_sky), prep.hpg_seg,
            prep.dt, prep.dx, coeffs, k0, k1)

    def run(fw):
        wf = np.empty((k1 + 1, n, m))
        wp = np.empty_like(wf)
        wg = np.empty_like(wf)
        wf[0], wp[0], wg[0] = (prep.initial.t_f, prep.initial.t_p,
                               prep.initial.t_g)
        fw(wf, wp, wg, *args)
        return wf, wp, wg

    ref = run(_kernels.forward_window_np)
    fast = run(_kernels.forward_window)
    for r, f in zip(ref, fast):
        np.testing.assert_allclose(f, r, rtol=1e-13, atol=1e-11)

    rng = np.random.default_rng(0)
    resid = rng.standard_normal((n, prep.n_sensors, k1 + 1))
    grads = []
    for aw, (wf, wp, wg) in zip(
            (_kernels.adjoint_window_np, _kernels.adjoint_window),
            (ref, fast)):
        lam = [np.zeros((n, m)) for _ in range(3)]
        g_u = np.zeros((n, k1 + 1))
        g_h = np.zeros((n, m))
        lam[0][:, prep.sensor_cells] += resid[:, :, k1]
        aw(wf, wp, wg, prep.u, np.ascontiguousarray(seq.t_header),
           prep.hpg_seg, prep.dt, prep.dx, coeffs, k0, k1, lam[0], lam[1],
           lam[2], resid, prep.sensor_cells, 1.0, g_u, g_h)
        grads.append((lam, g_u, g_h))
    (lam_r, gu_r, gh_r), (lam_f, gu_f, gh_f) = grads
    for r, f in zip(lam_r, lam_f):
        np.testing.assert_allclose(f, r, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gu_f, gu_r, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gh_f, gh_r, rtol=1e-12, atol=1e-12)
