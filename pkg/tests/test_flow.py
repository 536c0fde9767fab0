import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtbp_diffusion.dynamics import (
    J4,
    SYMMETRY_MATRIX,
    SystemParams,
    apply_symmetry,
    energy,
    state,
)
from rtbp_diffusion.flow import (
    FlowConfig,
    NoCrossingError,
    Section,
    TangentialCrossingError,
    flow,
    flow_with_variational,
    poincare_map,
    poincare_map_variational,
    propagate,
    propagate_variational,
    section_crossings,
)

T_HALF_PAPER = 3.041751775 / 2.0

TEST_STATES = [
    state(-0.95, 0.0, 0.0, -0.8413472440660674),
    state(0.6207553557, 0.0, 0.0, 1.3820343295),
    state(-0.93, 0.0, 0.0, -0.9),
    state(-0.96, 0.02, 0.01, -0.8),
]


def test_flow_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(abs_tol=0.0)
    with pytest.raises(ValueError):
        FlowConfig(event_tol=1e-17)
    with pytest.raises(ValueError):
        FlowConfig(method="RK45")


def test_section_validation():
    with pytest.raises(ValueError):
        Section("z")
    with pytest.raises(ValueError):
        Section("y", direction=2)
    with pytest.raises(ValueError):
        Section("y", half_plane=("x", 0))
    sec = Section("y", half_plane=("x", 1))
    assert sec.accepts(state(0.5, 0, 0, 0))
    assert not sec.accepts(state(-0.5, 0, 0, 0))


def test_zero_time_is_identity(orb, params):
    assert np.array_equal(flow(orb.q, 0.0, params), orb.q)
    s, m = flow_with_variational(orb.q, 0.0, params)
    assert np.array_equal(m, np.eye(4))
    with pytest.raises(ValueError):
        propagate(orb.q, 0.0, params)


def test_periodicity_of_reference_orbit(orb, params):
    assert np.abs(flow(orb.q, orb.period, params) - orb.q).max() < 1e-9


@pytest.mark.parametrize("s", TEST_STATES)
@pytest.mark.parametrize("t", [100.0, -100.0])
def test_energy_drift_over_long_times(s, t, params):
    h0 = energy(s, params)
    traj = propagate(s, t, params)
    e = energy(traj(np.linspace(0.0, t, 2001)), params)
    assert np.abs(e - h0).max() <= 1e-10


@pytest.mark.parametrize("s", TEST_STATES)
@pytest.mark.parametrize("t", [0.7, 3.0, -2.2])
def test_reversibility(s, t, params):
    lhs = apply_symmetry(flow(s, t, params))
    rhs = flow(apply_symmetry(s), -t, params)
    assert np.abs(lhs - rhs).max() < 1e-9


@pytest.mark.parametrize("s", TEST_STATES)
def test_time_reversal_round_trip(s, params):
    assert np.abs(flow(flow(s, 2.5, params), -2.5, params) - s).max() < 1e-9


@pytest.mark.parametrize("s", TEST_STATES)
@pytest.mark.parametrize("t", [1.0, 3.041751775242, -4.0])
def test_symplecticity(s, t, params):
    _, m = flow_with_variational(s, t, params)
    scale = max(1.0, np.abs(m).max() ** 2)
    assert np.abs(m.T @ J4 @ m - J4).max() / scale < 1e-8
    assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-8 * scale)


def test_stm_matches_richardson_differences(params):
    s = TEST_STATES[2]
    t = 1.5
    _, m = flow_with_variational(s, t, params)
    for k in range(4):
        cols = []
        for eps in (1e-5, 5e-6):
            e = np.zeros(4)
            e[k] = eps
            cols.append((flow(s + e, t, params) - flow(s - e, t, params)) / (2 * eps))
        col = (4.0 * cols[1] - cols[0]) / 3.0
        assert np.abs(col - m[:, k]).max() < 1e-6 * max(1.0, np.abs(m[:, k]).max())


def test_dense_trajectories_agree_with_flow(orb, params):
    traj = propagate(orb.q, orb.period, params)
    var = propagate_variational(orb.q, orb.period, params)
    for t in (0.3, 1.1, 2.9):
        ref, m = flow_with_variational(orb.q, t, params)
        assert np.abs(traj(t) - ref).max() < 1e-10
        assert np.abs(var(t)[:4] - ref).max() < 1e-10
        assert np.abs(var(t)[4:].reshape(4, 4) - m).max() < 1e-8 * np.abs(m).max()


def test_half_turn_crossing(orb, params):
    s, t = poincare_map(orb.q, Section("y"), 1, params)
    assert t == pytest.approx(T_HALF_PAPER, abs=1e-9)
    assert abs(s[1]) <= 1e-12
    assert abs(s[2]) < 1e-11


def test_second_crossing_closes_orbit(orb, params):
    s, t = poincare_map(orb.q, Section("y"), 2, params)
    assert t == pytest.approx(orb.period, abs=1e-9)
    assert np.abs(s - orb.q).max() < 1e-9


def test_directional_and_half_plane_filters(orb, params):
    # The orbit starts on the left and moves up, so the first downward crossing
    # is the half turn on the right.
    down = poincare_map(orb.q, Section("y", direction=-1), 1, params)
    assert down[1] == pytest.approx(orb.period / 2, abs=1e-9)
    with pytest.raises(NoCrossingError):
        section_crossings(orb.q, Section("y", half_plane=("x", 1)), 1, params, horizon=10.0)


def test_variational_crossing_matches_flow(orb, params):
    c = poincare_map_variational(orb.q, Section("y"), 1, params)
    ref, m = flow_with_variational(orb.q, c.time, params)
    assert np.abs(c.state - ref).max() < 1e-11
    assert np.abs(c.stm - m).max() < 1e-8 * np.abs(m).max()


def test_tangential_crossing_is_reported(orb, params):
    # With a crossing-rate threshold above the actual rate |dy/dt| the
    # crossing counts as tangential and must be refused, not guessed.
    cfg = FlowConfig(event_tol=10.0)
    with pytest.raises(TangentialCrossingError):
        section_crossings(orb.q, Section("y"), 1, params, cfg)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(-3.0, 3.0))
def test_flow_group_property(t1, t2):
    p = SystemParams()
    s = TEST_STATES[0]
    lhs = flow(flow(s, t1, p), t2, p)
    rhs = flow(s, t1 + t2, p)
    assert np.abs(lhs - rhs).max() < 1e-9


def test_symmetry_matrix_consistency():
    s = TEST_STATES[3]
    assert np.array_equal(SYMMETRY_MATRIX @ s, apply_symmetry(s))
    assert math.isclose(np.linalg.det(SYMMETRY_MATRIX), 1.0)
