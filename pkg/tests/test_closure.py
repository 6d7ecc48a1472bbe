import math

import numpy as np
import pytest

from loopboltz.closure import (
    JUNCTION_ANGLE_TOL,
    JUNCTION_DIST_TOL,
    ClosureProblem,
    junction_ok,
    rebuild_bridge,
    solve_closure,
)
from loopboltz.geometry import GeometryError, IdealGeometry, bond_angle, place_atom

GEOM = IdealGeometry()


def build_bridge_chain(torsions, omegas=(180.0, 180.0), seed_dir=77.0):
    """Forward-build a 3-residue bridge with known torsions; returns the
    closure problem plus every constructed atom."""
    c0 = np.array([0.0, 0.0, 0.0])
    n1 = np.array([GEOM.bond_c_n, 0.0, 0.0])
    ca1 = place_atom(np.array([-0.4, 1.0, 0.3]), c0, n1, GEOM.bond_n_ca,
                     GEOM.angle_c_n_ca, seed_dir)
    phi1, psi1, phi2, psi2, phi3, psi3 = torsions
    c1 = place_atom(c0, n1, ca1, GEOM.bond_ca_c, GEOM.angle_n_ca_c, phi1)
    n2 = place_atom(n1, ca1, c1, GEOM.bond_c_n, GEOM.angle_ca_c_n, psi1)
    ca2 = place_atom(ca1, c1, n2, GEOM.bond_n_ca, GEOM.angle_c_n_ca, omegas[0])
    c2 = place_atom(c1, n2, ca2, GEOM.bond_ca_c, GEOM.angle_n_ca_c, phi2)
    n3 = place_atom(n2, ca2, c2, GEOM.bond_c_n, GEOM.angle_ca_c_n, psi2)
    ca3 = place_atom(ca2, c2, n3, GEOM.bond_n_ca, GEOM.angle_c_n_ca, omegas[1])
    c3 = place_atom(c2, n3, ca3, GEOM.bond_ca_c, GEOM.angle_n_ca_c, phi3)
    n4 = place_atom(n3, ca3, c3, GEOM.bond_c_n, GEOM.angle_ca_c_n, psi3)
    problem = ClosureProblem(left_anchor=np.stack([c0, n1, ca1]),
                             right_anchor=np.stack([ca3, c3, n4]), omegas=omegas)
    atoms = {"C1": c1, "N2": n2, "CA2": ca2, "C2": c2, "N3": n3}
    return problem, atoms


def wrapped_diff(a, b):
    d = np.mod(np.asarray(a) - np.asarray(b) + 180.0, 360.0) - 180.0
    return np.abs(d)


def test_self_closure_recovery():
    rng = np.random.default_rng(7)
    for _ in range(50):
        torsions = rng.uniform(-179.0, 179.0, size=6)
        problem, _ = build_bridge_chain(torsions)
        sols = solve_closure(problem)
        assert len(sols) >= 1
        assert any(np.max(wrapped_diff(s, torsions)) < 1e-3 for s in sols)


def test_solution_atoms_match_generated():
    torsions = np.array([-70.0, -40.0, 60.0, 30.0, -120.0, 150.0])
    problem, atoms = build_bridge_chain(torsions)
    sols, sol_atoms = solve_closure(problem, with_atoms=True)
    idx = int(np.argmin([np.max(wrapped_diff(s, torsions)) for s in sols]))
    expected = np.stack([atoms[k] for k in ("C1", "N2", "CA2", "C2", "N3")])
    np.testing.assert_allclose(sol_atoms[idx], expected, atol=1e-5)


def test_every_solution_passes_junction_gate():
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(100):
        torsions = rng.uniform(-179.0, 179.0, size=6)
        problem, _ = build_bridge_chain(torsions)
        for sol in solve_closure(problem):
            # independent rebuild, then bond/angle verification
            _, ca3, c3 = rebuild_bridge(problem, sol)
            ca3_t, c3_t, n_next = problem.right_anchor
            assert np.linalg.norm(ca3 - ca3_t) <= JUNCTION_DIST_TOL
            assert np.linalg.norm(c3 - c3_t) <= JUNCTION_DIST_TOL
            assert abs(np.linalg.norm(c3 - n_next) - GEOM.bond_c_n) <= JUNCTION_DIST_TOL
            assert abs(bond_angle(ca3, c3, n_next) - GEOM.angle_ca_c_n) <= JUNCTION_ANGLE_TOL
            checked += 1
    assert checked > 100


def test_solutions_sorted_and_deterministic():
    torsions = np.array([-80.0, 120.0, -60.0, -40.0, 70.0, 20.0])
    problem, _ = build_bridge_chain(torsions)
    s1 = solve_closure(problem)
    s2 = solve_closure(problem)
    np.testing.assert_array_equal(s1, s2)
    assert list(s1[:, 0]) == sorted(s1[:, 0])
    assert len(s1) <= 16


def test_infeasible_gap_returns_empty():
    problem, _ = build_bridge_chain(np.array([-70.0, -40.0, 60.0, 30.0, -120.0, 150.0]))
    far = ClosureProblem(left_anchor=problem.left_anchor,
                         right_anchor=problem.right_anchor + 50.0)
    assert len(solve_closure(far)) == 0


def test_nontrans_omegas_supported():
    rng = np.random.default_rng(13)
    omegas = (170.0, -175.0)
    for _ in range(10):
        torsions = rng.uniform(-179.0, 179.0, size=6)
        problem, _ = build_bridge_chain(torsions, omegas=omegas)
        sols = solve_closure(problem)
        assert any(np.max(wrapped_diff(s, torsions)) < 1e-3 for s in sols)


def test_anchor_validation():
    bad = np.zeros((3, 3))
    with pytest.raises(GeometryError):
        ClosureProblem(left_anchor=bad, right_anchor=np.eye(3) * 3)
    nan = np.full((3, 3), np.nan)
    with pytest.raises(GeometryError):
        ClosureProblem(left_anchor=np.eye(3), right_anchor=nan)


def test_junction_ok_rejects_garbage():
    problem, _ = build_bridge_chain(np.array([-70.0, -40.0, 60.0, 30.0, -120.0, 150.0]))
    assert not junction_ok(problem, np.zeros(6))
