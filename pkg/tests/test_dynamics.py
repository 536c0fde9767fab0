import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from rtbp_diffusion.dynamics import (
    J4,
    SYMMETRY_MATRIX,
    TWO_PI,
    PerturbationParams,
    SingularityError,
    SystemParams,
    apply_symmetry,
    effective_potential,
    energy,
    energy_gradient,
    hill_region_indicator,
    perturbation_G,
    perturbation_G_dt,
    state,
    vector_field,
    vector_field_jacobian,
)

P = SystemParams()
Q = state(-0.95, 0.0, 0.0, -0.8413472440660674)

coord = st.floats(-1.5, 1.5, allow_nan=False)
mom = st.floats(-2.0, 2.0, allow_nan=False)
times = st.floats(-20.0, 20.0, allow_nan=False)


@st.composite
def states(draw):
    x, y = draw(coord), draw(coord)
    assume(math.hypot(x - P.mu, y) > 0.05 and math.hypot(x + 1 - P.mu, y) > 0.05)
    return state(x, y, draw(mom), draw(mom))


def test_params_validation():
    with pytest.raises(ValueError):
        SystemParams(mu=0.0)
    with pytest.raises(ValueError):
        SystemParams(mu=0.5)
    with pytest.raises(ValueError):
        SystemParams(singularity_floor=0.0)
    assert P.large_primary == (P.mu, 0.0)
    assert P.small_primary == (-1.0 + P.mu, 0.0)


def test_perturbation_params_reduce_phase():
    assert PerturbationParams(tau=TWO_PI + 0.5).tau == pytest.approx(0.5, abs=1e-15)
    assert 0.0 <= PerturbationParams(tau=-0.1).tau < TWO_PI
    with pytest.raises(ValueError):
        PerturbationParams(eps=-1e-3)


def test_energy_at_reference_orbit_start():
    h = energy(Q, P)
    assert h < 0.0
    assert abs(h) == pytest.approx(1.515, abs=5e-4)
    assert h == pytest.approx(-1.5153652006, abs=1e-9)


def test_energy_hand_value_massless_companion():
    # mu -> 0 limit evaluated at a tiny admissible mu: Omega = 1/2 + 1/r1.
    p = SystemParams(mu=1e-15)
    assert energy(state(1.0, 0.0, 0.0, 1.0), p) == pytest.approx(-1.5, abs=1e-12)


def test_vector_field_at_reference_orbit_start():
    f = vector_field(Q, P)
    assert f[0] == 0.0
    assert f[1] == pytest.approx(-0.8413472440660674 + 0.95, abs=1e-15)
    assert f[1] > 0.0


def test_singularity_floor():
    with pytest.raises(SingularityError):
        energy(state(P.mu, 0.0, 0.0, 0.0), P)
    with pytest.raises(SingularityError):
        perturbation_G(state(-1.0 + P.mu, 0.0, 0.0, 0.0), 0.0, P)


@settings(max_examples=100, deadline=None)
@given(states())
def test_jacobian_matches_finite_differences(s):
    jac = vector_field_jacobian(s, P)
    fd = np.empty((4, 4))
    for k in range(4):
        e = np.zeros(4)
        e[k] = 1e-6
        fd[:, k] = (vector_field(s + e, P) - vector_field(s - e, P)) / 2e-6
    scale = max(1.0, np.abs(jac).max())
    assert np.abs(jac - fd).max() / scale < 1e-6


@settings(max_examples=100, deadline=None)
@given(states())
def test_jacobian_is_hamiltonian(s):
    a = vector_field_jacobian(s, P)
    assert abs(np.trace(a)) < 1e-12
    assert np.abs(a.T @ J4 + J4 @ a).max() < 1e-10 * max(1.0, np.abs(a).max())


@settings(max_examples=100, deadline=None)
@given(states())
def test_field_is_symplectic_gradient(s):
    assert np.allclose(vector_field(s, P), J4 @ energy_gradient(s, P), rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(states())
def test_reversing_symmetry_of_field(s):
    lhs = SYMMETRY_MATRIX @ vector_field(s, P)
    rhs = -vector_field(apply_symmetry(s), P)
    assert np.abs(lhs - rhs).max() < 1e-12
    assert energy(apply_symmetry(s), P) == pytest.approx(energy(s, P), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(states())
def test_symmetry_is_involution(s):
    assert np.array_equal(apply_symmetry(apply_symmetry(s)), s)


@settings(max_examples=50, deadline=None)
@given(coord)
def test_symmetry_fixed_set(x):
    assume(abs(x - P.mu) > 0.05 and abs(x + 1 - P.mu) > 0.05)
    s = state(x, 0.0, 0.0, 0.3)
    assert np.array_equal(apply_symmetry(s), s)
    a = vector_field_jacobian(s, P)
    assert np.abs(SYMMETRY_MATRIX @ a + a @ SYMMETRY_MATRIX).max() < 1e-12


@settings(max_examples=100, deadline=None)
@given(states(), times)
def test_G_dt_matches_finite_differences(s, t):
    dt = 1e-5
    fd = (perturbation_G(s, t + dt, P) - perturbation_G(s, t - dt, P)) / (2 * dt)
    assert perturbation_G_dt(s, t, P) == pytest.approx(fd, abs=1e-8)


@settings(max_examples=100, deadline=None)
@given(states(), times)
def test_G_periodicity(s, t):
    assert perturbation_G(s, t + TWO_PI, P) == pytest.approx(perturbation_G(s, t, P), abs=1e-12)
    assert perturbation_G_dt(s, t + TWO_PI, P) == pytest.approx(
        perturbation_G_dt(s, t, P), abs=1e-12
    )


@settings(max_examples=50, deadline=None)
@given(states(), times)
def test_G_reversing_symmetry(s, t):
    # G(S s, -t) = G(s, t), hence dG/dt(S s, -t) = -dG/dt(s, t).
    ss = apply_symmetry(s)
    assert perturbation_G(ss, -t, P) == pytest.approx(perturbation_G(s, t, P), abs=1e-12)
    assert perturbation_G_dt(ss, -t, P) == pytest.approx(-perturbation_G_dt(s, t, P), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(states())
def test_G_at_zero_phase(s):
    x, y = s[0], s[1]
    r1 = math.hypot(x - P.mu, y)
    r2 = math.hypot(x + 1 - P.mu, y)
    mu = P.mu
    g = (1 - mu) / r1**3 * (mu * x - mu**2) + mu / r2**3 * ((mu - 1) * x - (mu - 1) ** 2)
    assert perturbation_G(s, 0.0, P) == pytest.approx(g, abs=1e-13)
    gd = (1 - mu) / r1**3 * (-2 * mu * y) + mu / r2**3 * (-2 * (mu - 1) * y)
    assert perturbation_G_dt(s, 0.0, P) == pytest.approx(gd, abs=1e-13)


def test_G_vanishes_without_companion_mass():
    p = SystemParams(mu=1e-300)
    s = state(0.4, 0.3, 0.1, -0.2)
    for t in (0.0, 1.0, 4.0):
        assert abs(perturbation_G(s, t, p)) < 1e-290
        assert abs(perturbation_G_dt(s, t, p)) < 1e-290


def test_vectorized_evaluation_matches_pointwise(rng):
    pts = np.column_stack([
        state(0.3, 0.2, 0.1, 0.4), state(-0.8, 0.5, -0.3, 0.2), state(1.2, -0.7, 0.0, 1.0),
    ])
    t = 0.7
    g = perturbation_G(pts, t, P)
    gd = perturbation_G_dt(pts, t, P)
    h = energy(pts, P)
    f = vector_field(pts, P)
    for k in range(pts.shape[1]):
        assert g[k] == perturbation_G(pts[:, k], t, P)
        assert gd[k] == perturbation_G_dt(pts[:, k], t, P)
        assert h[k] == energy(pts[:, k], P)
        assert np.array_equal(f[:, k], vector_field(pts[:, k], P))


def test_hill_region_at_reference_energy():
    h = energy(Q, P)
    assert hill_region_indicator(Q[0], Q[1], h, P)
    assert effective_potential(Q[0], Q[1], P) + h > 0.0
    assert hill_region_indicator(P.mu + 1e-3, 0.0, h, P)
    assert hill_region_indicator(-1.0 + P.mu + 1e-3, 0.0, h, P)


def test_hill_region_necks_open_at_oterma_level():
    h = energy(Q, P)
    xs = np.linspace(-1.5, 0.89, 2001)
    xs = xs[(np.abs(xs - P.mu) > 1e-3) & (np.abs(xs + 1 - P.mu) > 1e-3)]
    # The x-axis from the outer region through the small primary to the
    # large primary is accessible: the two necks around the small primary
    # are open, while the neck on the far side of the large primary is shut.
    assert hill_region_indicator(xs, np.zeros_like(xs), h, P).all()
    assert not hill_region_indicator(1.0, 0.0, h, P)
    assert hill_region_indicator(1.2, 0.0, h, P)
    # Off the axis the forbidden region separates the interior from the outside.
    assert not hill_region_indicator(-0.5, 0.85, h, P)
    assert not hill_region_indicator(-0.5, -0.85, h, P)
    assert hill_region_indicator(0.0, 2.0, h, P)
