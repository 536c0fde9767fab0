import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtbp_diffusion.dynamics import (
    SystemParams,
    apply_symmetry,
    energy,
    energy_gradient,
    vector_field,
)
from rtbp_diffusion.flow import Section, flow, poincare_map
from rtbp_diffusion.orbits import (
    PAPER_NODES,
    ConvergenceError,
    DerivativeError,
    Family,
    LyapunovOrbit,
    check_kam_hypotheses,
    dump_family_json,
    energy_derivative,
    energy_derivative_chain_rule,
    family_derivative,
    inner_libration_point,
    linear_seed,
    load_family_json,
    parameterize_k0,
    period_derivative,
    read_family_csv,
    scan_family,
    solve_lyapunov,
    write_family_csv,
)

KAPPA_PAPER = -0.8413472441
PERIOD_PAPER = 3.041751775


def test_reference_orbit_matches_published_values(orb):
    assert orb.kappa == pytest.approx(KAPPA_PAPER, abs=1e-8)
    assert orb.period == pytest.approx(PERIOD_PAPER, abs=1e-8)
    assert abs(orb.energy) == pytest.approx(1.515, abs=5e-4)
    assert abs(orb.residual) < 1e-12


def test_half_turn_residual_and_closure(orb, params):
    s, t = poincare_map(orb.q, Section("y"), 1, params)
    assert abs(s[2]) < 1e-12
    assert 2.0 * t == pytest.approx(orb.period, abs=1e-12)
    assert np.abs(flow(orb.q, orb.period, params) - orb.q).max() < 1e-9


def test_orbit_is_symmetric(orb, params):
    for k in range(8):
        t = k * orb.period / 8.0
        fwd = flow(orb.q, t, params)
        bwd = flow(orb.q, -t, params)
        assert np.abs(apply_symmetry(fwd) - bwd).max() < 1e-9


def test_libration_point_is_equilibrium(params):
    xl = inner_libration_point(params)
    assert -1.0 + params.mu < xl < params.mu
    assert np.abs(vector_field(np.array([xl, 0.0, 0.0, xl]), params)).max() < 1e-12
    x0, slope = linear_seed(params)
    assert x0 == xl
    assert math.isfinite(slope)


def test_solver_reports_failure(params):
    with pytest.raises(ConvergenceError):
        solve_lyapunov(-0.95, 5.0, params, max_iter=3)


def test_family_nodes_and_monotone_period(family):
    assert tuple(family.x_nodes) == PAPER_NODES
    periods = [o.period for o in family.orbits]
    assert all(np.diff(periods) < 0)
    for o in family.orbits:
        assert abs(o.residual) < 1e-12


def test_single_node_family_reproduces_direct_solve(orb, params):
    fam = scan_family((-0.955, -0.945), 1, params)
    assert len(fam.orbits) == 1
    only = fam.orbits[0]
    assert only.x_star == -0.95
    assert only.kappa == pytest.approx(orb.kappa, abs=1e-12)
    assert only.period == pytest.approx(orb.period, abs=1e-11)


def test_scan_family_rejects_bad_input(params):
    with pytest.raises(ValueError):
        scan_family((-0.945, -0.955), 3, params)
    with pytest.raises(ValueError):
        scan_family((-0.955, -0.945), 0, params)


def test_interpolation_between_nodes_matches_direct_solves(family, params):
    for x in (-0.95375, -0.94875):
        direct = family.orbit_at(x)
        assert family.kappa(x) == pytest.approx(direct.kappa, abs=1e-6)
        assert family.period(x) == pytest.approx(direct.period, abs=1e-6)


def test_family_round_trips(family, tmp_path):
    path = tmp_path / "fam.csv"
    write_family_csv(family, path, "config_hash=abc")
    back = read_family_csv(path, family.interval)
    for a, b in zip(family.orbits, back.orbits):
        assert (a.x_star, a.kappa, a.period, a.energy) == (b.x_star, b.kappa, b.period, b.energy)
    jpath = tmp_path / "fam.json"
    dump_family_json(family, jpath)
    again = load_family_json(jpath)
    assert again.orbits == family.orbits
    assert json.loads(jpath.read_text())["mu"] == family.params.mu


def test_family_rejects_unordered_nodes():
    o = LyapunovOrbit(-0.95, -0.84, 3.0, -1.5)
    with pytest.raises(ValueError):
        Family((-0.96, -0.94), [o, o])
    with pytest.raises(ValueError):
        Family((-0.94, -0.96), [o])


def test_k0_parameterization(orb, params):
    assert np.array_equal(parameterize_k0(orb, 0.0, params), orb.q)
    assert np.abs(parameterize_k0(orb, 2 * math.pi - 1e-15, params) - orb.q).max() < 1e-9


@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, 2 * math.pi), st.floats(0.0, 1.5))
def test_k0_conjugates_flow_to_rotation(theta, t):
    p = SystemParams()
    o = LyapunovOrbit(-0.95, -0.8413472440660674, 3.041751775242, -1.5153652006670575)
    lhs = flow(parameterize_k0(o, theta, p), t, p)
    rhs = parameterize_k0(o, theta + t * 2 * math.pi / o.period, p)
    assert np.abs(lhs - rhs).max() < 1e-9


def test_period_and_energy_derivatives(family):
    dT = period_derivative(family, -0.95)
    dH = energy_derivative(family, -0.95)
    assert dT.value < 0 and abs(dT.value) > 10 * dT.error
    assert dH.value < 0 and abs(dH.value) > 10 * dH.error
    assert dT.symmetric == pytest.approx(dT.value, rel=1e-4)
    assert dH.symmetric == pytest.approx(dH.value, rel=1e-4)


def test_energy_derivative_chain_rule(family, orb, params):
    dH = energy_derivative(family, -0.95).value
    chain = energy_derivative_chain_rule(family, -0.95)
    assert chain == pytest.approx(dH, abs=1e-4)
    grad = energy_gradient(orb.q, params)
    assert grad[1] == 0.0 and grad[2] == 0.0


def test_derivative_contract(family):
    degenerate = Family(family.interval, family.orbits[:2], family.params)
    est = family_derivative(degenerate, -0.954, "period")
    assert est.low_confidence
    zero = Family((-0.95, -0.95), [family.orbits[2]], family.params)
    with pytest.raises(DerivativeError):
        family_derivative(zero, -0.95, "period")
    with pytest.raises(DerivativeError):
        family_derivative(family, -0.9, "period")
    with pytest.raises(ValueError):
        family_derivative(family, -0.95, "momentum")


def test_kam_hypotheses_hold_over_interval(family):
    rep = check_kam_hypotheses(family)
    assert rep.passed
    doc = rep.to_json()
    assert doc["twist_ok"] and doc["energy_ok"]
    assert len(doc["dT_dx"]) == len(PAPER_NODES)


def test_energy_matches_direct_evaluation(family, params):
    for o in family.orbits:
        assert o.energy == energy(o.q, params)
