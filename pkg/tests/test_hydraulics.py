import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from troughcal.errors import LengthMismatch, NegativeFlow
from troughcal.hydraulics import (AllocationParams, allocation_logits,
                                  clamp_flow, loop_velocity,
                                  mass_flow_ratios, softmax, softmax_vjp,
                                  subfield_mass_flow)

finite_logits = arrays(np.float64, st.integers(2, 8),
                       elements=st.floats(-30, 30))


def test_symmetric_inputs_give_uniform_ratios():
    params = AllocationParams()
    beta = mass_flow_ratios(np.array([500.0] * 3), np.ones(3), params)
    np.testing.assert_allclose(beta, 1.0 / 3.0, rtol=1e-15)


def test_softmax_hand_value():
    beta = softmax(np.array([np.log(2.0), 0.0]))
    np.testing.assert_allclose(beta, [2.0 / 3.0, 1.0 / 3.0], rtol=1e-14)


@given(finite_logits)
@settings(max_examples=50, deadline=None)
def test_softmax_normalizes_and_preserves_argmax(logits):
    beta = softmax(logits)
    assert abs(beta.sum() - 1.0) < 1e-12
    assert np.all(beta > 0)
    assert beta[np.argmax(logits)] == beta.max()


@given(finite_logits, st.floats(-20, 20))
@settings(max_examples=50, deadline=None)
def test_softmax_shift_invariance(logits, shift):
    np.testing.assert_allclose(softmax(logits + shift), softmax(logits),
                               rtol=1e-9, atol=1e-12)


def test_softmax_vjp_matches_finite_differences():
    rng = np.random.default_rng(3)
    z = rng.standard_normal(6)
    g = rng.standard_normal(6)
    analytic = softmax_vjp(softmax(z), g)
    h = 1e-7
    fd = np.array([(g @ softmax(z + h * e) - g @ softmax(z - h * e))
                   / (2 * h) for e in np.eye(6)])
    np.testing.assert_allclose(analytic, fd, rtol=1e-6, atol=1e-10)


def test_logits_length_mismatch():
    with pytest.raises(LengthMismatch):
        allocation_logits(np.zeros(3), np.zeros(4), 0.0, 1.0)


def test_loop_velocity_zero_flow(props):
    assert loop_velocity(0.3, 0.0, 500.0, 500.0, 1.0, 0.005, props) == 0.0


def test_loop_velocity_hand_value(props):
    # equal temperatures cancel the density ratio: 0.25 * 0.01 / 0.005
    u = loop_velocity(0.25, 0.01, 450.0, 450.0, 1.0, 0.005, props)
    assert u == pytest.approx(0.5, rel=1e-14)


def test_loop_velocity_linear_in_alpha(props):
    u1 = loop_velocity(0.25, 0.01, 480.0, 430.0, 1.0, 0.005, props)
    u2 = loop_velocity(0.25, 0.01, 480.0, 430.0, 2.0, 0.005, props)
    assert u2 == pytest.approx(2.0 * u1, rel=1e-14)


def test_clamp_flow():
    assert clamp_flow(-5e-7) == 0.0
    with pytest.raises(NegativeFlow):
        clamp_flow(-1e-3)


def test_subfield_mass_flow(props):
    assert subfield_mass_flow(0.0, 500.0, props) == 0.0
    expected = props.density(473.15) * 0.01
    assert subfield_mass_flow(0.01, 473.15, props) == pytest.approx(
        expected, rel=1e-14)


def test_mass_conservation(props):
    """Per-loop mass flows recombine to the subfield flow exactly."""
    rng = np.random.default_rng(11)
    t_mu = 450.0 + 30.0 * rng.random(5)
    beta = mass_flow_ratios(t_mu, rng.random(5) + 0.5,
                            AllocationParams(a=1e-3, b=0.5))
    m_h = subfield_mass_flow(0.012, 520.0, props)
    m_loops = beta * m_h
    assert abs(m_loops.sum() - m_h) / m_h < 1e-12
