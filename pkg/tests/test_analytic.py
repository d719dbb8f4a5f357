import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kirchnet import analytic as an

# n-fold trapezoid convolution of the first-order kernel (dt = 1e-4), computed once
ERLANG2_T1 = 0.36787944117144233
ERLANG3_C05_A15_B2_T2 = 0.3172802786132941


def test_cell_coefficients():
    c = an.ContinuousCell(C=1, g_leak=1)
    assert an.cell_state_coeffs(c) == (1, 1)
    c = an.ContinuousCell(C=2, g_leak=1, g_p=1, b_p=4)
    assert an.cell_state_coeffs(c) == (1, 2)


@pytest.mark.parametrize("kw", [dict(C=1, g_leak=0, g_p=-1), dict(C=0, g_leak=1), dict(C=1, g_leak=0)])
def test_cell_rejects_non_dissipative(kw):
    with pytest.raises(ValueError):
        an.ContinuousCell(**kw)


def test_zoh_half_life():
    assert an.zoh_step(math.log(2), 0.0, 1.0, 0.0, 1.0) == pytest.approx(0.5, abs=1e-15)
    # fine RK4 reference
    ref = an.simulate_first_order(math.log(2), 0.0, 1.0, [0.0], 1.0, substeps=100_000)[-1]
    assert abs(an.zoh_step(math.log(2), 0.0, 1.0, 0.0, 1.0) - ref) < 1e-10


def test_zoh_equilibrium_and_small_dt():
    assert an.zoh_step(2.0, 4.0, 0.0, 1.0, 50.0) == pytest.approx(2.0, abs=1e-12)
    assert an.zoh_step(1.0, 1.0, 3.0, 123.0, 1e-14) == pytest.approx(3.0, abs=1e-11)


def test_zoh_rejects_bad_arguments():
    with pytest.raises(ValueError):
        an.zoh_step(1.0, 1.0, 0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        an.zoh_step(-1.0, 1.0, 0.0, 1.0, 0.1)


def test_convex_decomposition_values(rng):
    g, eq = an.convex_decomposition(1.0, 1.0, 2.0, math.log(2))
    assert g == pytest.approx(0.5, abs=1e-15) and eq == 2.0
    v = rng.uniform(-3, 3, 1000)
    nxt = an.zoh_step(1.0, 1.0, v, 2.0, math.log(2))
    np.testing.assert_allclose(g * v + (1 - g) * eq, nxt, rtol=1e-14, atol=1e-15)
    g, _ = an.convex_decomposition(5.0, 1.0, 1.0, 10.0)
    assert 0 < g < 1 and g == pytest.approx(1.9287e-22, rel=1e-4)
    g, _ = an.convex_decomposition(1.0, 1.0, 1.0, 1e-14)
    assert g == pytest.approx(1.0)


def test_exprel_series_matches_direct_at_switch():
    x = np.array([1e-4 * (1 - 1e-12), 1e-4 * (1 + 1e-12)])
    vals = an.exprel_neg(x)
    assert abs(vals[0] - vals[1]) < 1e-14
    assert an.exprel_neg(0.0) == 1.0


def test_simulate_cell_homogeneous_and_step():
    cell = an.ContinuousCell(C=1, g_leak=1)
    traj = an.simulate_cell_ode(cell, 0.0, 0.1, steps=50, v0=1.0)
    t = np.arange(51) * 0.1
    np.testing.assert_allclose(traj, np.exp(-t), atol=1e-10)
    cell = an.ContinuousCell(C=2, g_leak=1, b_p=3)
    traj = an.simulate_cell_ode(cell, 1.0, 0.5, steps=80)
    assert np.all(np.diff(traj) > 0)
    assert traj[-1] == pytest.approx(cell.beta / cell.alpha, rel=1e-7)
    assert np.all(traj < cell.beta / cell.alpha)


def test_simulate_cell_requires_steps_for_scalar():
    with pytest.raises(ValueError):
        an.simulate_cell_ode(an.ContinuousCell(C=1, g_leak=1), 1.0, 0.1)


def test_cascade_transfer_examples(rng):
    tf = an.cascade_transfer(an.CascadeSpec.uniform(2))
    assert tf.den.coeffs == (1, 2, 1) and tf.num.coeffs == (1,)
    tf = an.cascade_transfer(an.CascadeSpec([an.ContinuousCell(C=2, g_leak=3, b_p=5)]))
    assert tf.den.coeffs == (3, 2) and tf.num.coeffs == (5,)
    cells = [an.ContinuousCell(C=rng.uniform(0.5, 2), g_leak=rng.uniform(0.5, 2), b_p=rng.uniform(0.5, 2))
             for _ in range(4)]
    tf = an.cascade_transfer(an.CascadeSpec(cells))
    assert tf.den.degree == 4
    assert tf.den(0.0) == pytest.approx(np.prod([c.a for c in cells]), rel=1e-14)
    assert tf.is_stable()


def test_cascade_ode_coeffs_examples():
    gamma, kappa = an.cascade_ode_coeffs(an.CascadeSpec.uniform(2))
    assert gamma.coeffs == (1, 2, 1) and kappa == 1
    gamma, kappa = an.cascade_ode_coeffs(an.CascadeSpec([an.ContinuousCell(C=7, g_leak=3, b_p=2)]))
    assert gamma.coeffs == (3, 7) and kappa == 2


def test_cascade_ode_coeffs_integer_exact():
    cells = [an.ContinuousCell(C=2, g_leak=3, b_p=1), an.ContinuousCell(C=1, g_leak=4, b_p=5),
             an.ContinuousCell(C=3, g_leak=1, b_p=2)]
    gamma, kappa = an.cascade_ode_coeffs(an.CascadeSpec(cells))
    # (2s + 3)(s + 4)(3s + 1) expanded by hand
    assert gamma.coeffs == (12, 47, 35, 6)
    assert all(isinstance(c, int) for c in gamma.coeffs)
    assert kappa == 10


def test_readout_operator_special_cases():
    spec = an.CascadeSpec([an.ContinuousCell(C=2, g_leak=3, b_p=5), an.ContinuousCell(C=1, g_leak=1, b_p=7)])
    lhs, rhs = an.readout_cascade_operator(spec)
    assert rhs.coeffs == (35,)
    assert lhs == an.cascade_transfer(spec).den
    ident = an.CascadeSpec([an.ContinuousCell(C=2, g_leak=3, b_p=5, c_o=0, d_o=1),
                            an.ContinuousCell(C=1, g_leak=1, b_p=7, c_o=0, d_o=1)])
    lhs, rhs = an.readout_cascade_operator(ident)
    assert lhs == rhs


@given(st.lists(st.tuples(st.floats(0.1, 3), st.floats(0.1, 3), st.floats(0.1, 2), st.booleans()),
                min_size=1, max_size=5))
def test_readout_operator_degrees(params):
    cells = [an.ContinuousCell(C=c, g_leak=a, b_p=1.0, c_o=1.0, d_o=d if nz else 0.0) for c, a, d, nz in params]
    lhs, rhs = an.readout_cascade_operator(an.CascadeSpec(cells))
    assert lhs.degree == len(cells)
    all_nonzero = all(c.d_o != 0 for c in cells)
    assert (rhs.degree == len(cells)) == all_nonzero


def test_erlang_examples():
    assert an.erlang_kernel(1, 1, 1, 1, 0.0) == 1.0
    t = np.linspace(0, 5, 11)
    np.testing.assert_allclose(an.erlang_kernel(1, 1, 1, 1, t), np.exp(-t), rtol=1e-15)
    assert an.erlang_kernel(2, 1, 1, 1, 1.0) == pytest.approx(ERLANG2_T1, rel=1e-8)
    assert an.erlang_kernel(3, 1.5, 2.0, 0.5, 2.0) == pytest.approx(ERLANG3_C05_A15_B2_T2, rel=1e-8)
    assert an.erlang_kernel(3, 1, 1, 1, 0.0) == 0.0
    assert an.erlang_kernel(2, 1, 1, 1, -1.0) == 0.0
    with pytest.raises(ValueError):
        an.erlang_kernel(0, 1, 1, 1, 1.0)


def test_discrete_impulse_first_order():
    spec = an.CascadeSpec.uniform(1)
    assert an.discrete_cascade_impulse(spec, 0.1, 0).shape == (0,)
    for dt in (0.1, 0.05):
        resp = an.discrete_cascade_impulse(spec, dt, int(5 / dt))
        t = (np.arange(len(resp)) + 1) * dt
        assert np.max(np.abs(resp - np.exp(-t))) < dt


@given(st.floats(1e-3, 50), st.floats(1e-3, 20))
def test_retention_factor_in_unit_interval(alpha, dt):
    g, _ = an.convex_decomposition(alpha, 1.0, 0.0, dt)
    assert 0 < g < 1 or (g == 1.0 and alpha * dt < 1e-15)


@given(st.floats(0.1, 5), st.floats(-2, 2), st.floats(0.01, 1), st.floats(-3, 3), st.floats(-3, 3))
def test_zoh_matches_rk4(alpha, beta, dt, v, u):
    ref = an.simulate_first_order(alpha, beta, v, [u], dt, substeps=128)[-1]
    assert abs(an.zoh_step(alpha, beta, v, u, dt) - ref) < 1e-8


@given(st.floats(0.1, 5), st.floats(-2, 2), st.floats(0.01, 1), st.floats(-3, 3), st.floats(-3, 3))
def test_convex_recombination(alpha, beta, dt, v, u):
    g, eq = an.convex_decomposition(alpha, beta, u, dt)
    z = an.zoh_step(alpha, beta, v, u, dt)
    assert abs(g * v + (1 - g) * eq - z) <= 1e-14 * max(abs(z), 1.0)


int_cells = st.lists(st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(-5, 5).filter(bool)),
                     min_size=1, max_size=5)


@given(int_cells)
def test_order_lifting_exact_for_integers(cells):
    spec = an.CascadeSpec([an.ContinuousCell(C=c, g_leak=a, b_p=b) for c, a, b in cells])
    gamma, kappa = an.cascade_ode_coeffs(spec)
    assert list(gamma.coeffs) == an.elementary_expansion([(a, c) for c, a, _ in cells])
    assert kappa == math.prod(b for _, _, b in cells)


@given(st.lists(st.tuples(st.fractions(1, 5, max_denominator=7), st.fractions(1, 5, max_denominator=7)),
                min_size=1, max_size=4))
def test_polynomial_exact_with_fractions(pairs):
    p = an.Polynomial([1])
    for a, c in pairs:
        p = p * an.Polynomial([a, c])
    assert list(p.coeffs) == an.elementary_expansion(pairs)
    assert all(isinstance(x, (int, Fraction)) for x in p.coeffs)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_polynomial_mul_matches_convolution(a, b):
    prod = an.Polynomial(a) * an.Polynomial(b)
    ref = np.trim_zeros(np.convolve(a, b), "b")
    got = np.array(prod.coeffs, dtype=float)
    np.testing.assert_allclose(np.pad(got, (0, len(ref) - len(got))) if len(got) < len(ref) else got,
                               ref if len(ref) else np.zeros(len(got)), atol=1e-12)
