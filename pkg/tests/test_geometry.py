import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopboltz.geometry import (
    BackboneDihedrals,
    GeometryError,
    IdealGeometry,
    backbone_rmsd,
    bond_angle,
    dihedral_angle,
    extend_backbone,
    max_ca_span,
    min_ca_span,
    place_atom,
    place_carbonyl_oxygen,
    reachability_check,
    wrap_angle,
)

GEOM = IdealGeometry()


def test_dihedral_planar_trans():
    assert dihedral_angle((0, 0, 0), (1, 0, 0), (1, 1, 0), (2, 1, 0)) == pytest.approx(180.0)


def test_dihedral_planar_cis():
    assert dihedral_angle((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)) == pytest.approx(0.0)


def test_dihedral_right_angle_sign():
    # verified by hand with the cross-product formula: n1=(0,0,1), n2=(1,0,0),
    # y = (n1 x b2hat).n2 = -1, x = 0 => atan2(-1, 0) = -90 degrees
    got = dihedral_angle((0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 1, 1))
    assert got == pytest.approx(-90.0, abs=1e-12)


def test_dihedral_collinear_raises():
    with pytest.raises(GeometryError):
        dihedral_angle((0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 1, 0))


def test_dihedral_range_half_open():
    # a torsion numerically at -180 must be reported as +180
    assert dihedral_angle((0, 0, 0), (1, 0, 0), (1, 1, 0), (2, 1, 0)) <= 180.0
    assert wrap_angle(-180.0) == 180.0
    assert wrap_angle(540.0) == 180.0
    assert wrap_angle(-190.0) == pytest.approx(170.0)


def test_backbone_dihedrals_validation():
    with pytest.raises(ValueError):
        BackboneDihedrals(phi=-180.0, psi=0.0, omega=180.0)
    BackboneDihedrals(phi=180.0, psi=-179.9, omega=0.0)


def test_place_atom_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b, c = rng.normal(size=(3, 3)) * 3.0
        if np.linalg.norm(np.cross(b - a, c - b)) < 1e-3:
            continue
        bond = rng.uniform(1.0, 2.0)
        ang = rng.uniform(20.0, 160.0)
        tor = rng.uniform(-179.9, 180.0)
        d = place_atom(a, b, c, bond, ang, tor)
        assert np.linalg.norm(d - c) == pytest.approx(bond, abs=1e-9)
        assert bond_angle(b, c, d) == pytest.approx(ang, abs=1e-9)
        assert dihedral_angle(a, b, c, d) == pytest.approx(tor, abs=1e-8)


@given(
    phi=st.floats(min_value=-179.9, max_value=180.0),
    psi=st.floats(min_value=-179.9, max_value=180.0),
    omega=st.floats(min_value=-179.9, max_value=180.0),
)
@settings(max_examples=80, deadline=None)
def test_extend_backbone_round_trip_right(phi, psi, omega):
    n0 = np.array([0.0, 0.0, 0.0])
    ca0 = np.array([1.458, 0.0, 0.0])
    c0 = place_atom(np.array([-0.5, 0.87, 0.0]), n0, ca0, GEOM.bond_ca_c,
                    GEOM.angle_n_ca_c, -60.0)
    d = BackboneDihedrals(phi=phi, psi=psi, omega=omega)
    n1, ca1, c1 = extend_backbone((n0, ca0, c0), d, "right")
    assert dihedral_angle(n0, ca0, c0, n1) == pytest.approx(psi, abs=1e-6)
    assert dihedral_angle(ca0, c0, n1, ca1) == pytest.approx(omega, abs=1e-6)
    assert dihedral_angle(c0, n1, ca1, c1) == pytest.approx(phi, abs=1e-6)


def test_extend_backbone_left_inverts_right():
    # build right, then rebuild the original residue from the far side going left
    n0 = np.array([0.0, 0.0, 0.0])
    ca0 = np.array([1.458, 0.0, 0.0])
    c0 = place_atom(np.array([-0.5, 0.87, 0.0]), n0, ca0, GEOM.bond_ca_c,
                    GEOM.angle_n_ca_c, -60.0)
    d = BackboneDihedrals(phi=-70.0, psi=-40.0, omega=175.0)
    n1, ca1, c1 = extend_backbone((n0, ca0, c0), d, "right")
    # going left from residue 1, the junction triple is (phi of residue 1,
    # omega of the junction, psi of residue 0)
    back = extend_backbone((n1, ca1, c1),
                           BackboneDihedrals(phi=d.phi, psi=d.psi, omega=d.omega), "left")
    np.testing.assert_allclose(back[0], n0, atol=1e-8)
    np.testing.assert_allclose(back[1], ca0, atol=1e-8)
    np.testing.assert_allclose(back[2], c0, atol=1e-8)


def test_extend_backbone_mirror_consistency():
    # reflecting the anchors and negating torsions reflects the built atoms
    n0 = np.array([0.1, 0.2, 0.3])
    ca0 = n0 + np.array([1.458, 0.0, 0.0])
    c0 = place_atom(n0 + np.array([-0.5, 0.87, 0.2]), n0, ca0, GEOM.bond_ca_c,
                    GEOM.angle_n_ca_c, -75.0)
    d = BackboneDihedrals(phi=-60.0, psi=-45.0, omega=180.0)
    built = extend_backbone((n0, ca0, c0), d, "right")

    def mirror(p):
        q = np.array(p, dtype=float)
        q[..., 2] = -q[..., 2]
        return q

    d_neg = BackboneDihedrals(phi=60.0, psi=45.0, omega=180.0)
    built_m = extend_backbone((mirror(n0), mirror(ca0), mirror(c0)), d_neg, "right")
    np.testing.assert_allclose(built_m, mirror(built), atol=1e-8)


def test_chain_bond_lengths_ideal():
    n = np.array([0.0, 0.0, 0.0])
    ca = np.array([1.458, 0.0, 0.0])
    c = place_atom(np.array([-0.5, 0.87, 0.0]), n, ca, GEOM.bond_ca_c,
                   GEOM.angle_n_ca_c, -60.0)
    res = (n, ca, c)
    d = BackboneDihedrals(phi=-60.0, psi=-45.0, omega=180.0)
    for _ in range(5):
        prev_c = res[2]
        res = extend_backbone(res, d, "right")
        assert np.linalg.norm(res[0] - prev_c) == pytest.approx(GEOM.bond_c_n, abs=1e-6)
        assert np.linalg.norm(res[1] - res[0]) == pytest.approx(GEOM.bond_n_ca, abs=1e-6)
        assert np.linalg.norm(res[2] - res[1]) == pytest.approx(GEOM.bond_ca_c, abs=1e-6)


def test_carbonyl_oxygen_in_plane_anti():
    n = np.array([0.0, 0.0, 0.0])
    ca = np.array([1.458, 0.0, 0.0])
    c = place_atom(np.array([-0.5, 0.87, 0.0]), n, ca, GEOM.bond_ca_c,
                   GEOM.angle_n_ca_c, -60.0)
    n1, ca1, c1 = extend_backbone((n, ca, c), BackboneDihedrals(-60, -45, 180), "right")
    o = place_carbonyl_oxygen(ca, c, n1)
    assert np.linalg.norm(o - c) == pytest.approx(GEOM.bond_c_o, abs=1e-9)
    assert bond_angle(ca, c, o) == pytest.approx(GEOM.angle_ca_c_o, abs=1e-9)
    assert abs(dihedral_angle(n1, ca, c, o)) == pytest.approx(180.0, abs=1e-6)


def test_rmsd_identity_translation_symmetry():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(20, 3))
    assert backbone_rmsd(a, a) == 0.0
    b = a + np.array([3.0, 4.0, 0.0])
    assert backbone_rmsd(a, b) == pytest.approx(5.0, abs=1e-12)
    c = rng.normal(size=(20, 3))
    assert backbone_rmsd(a, c) == pytest.approx(backbone_rmsd(c, a))
    with pytest.raises(ValueError):
        backbone_rmsd(a, c[:10])


def test_rmsd_triangle_inequality():
    rng = np.random.default_rng(2)
    for _ in range(50):
        x, y, z = rng.normal(size=(3, 15, 3))
        assert backbone_rmsd(x, z) <= backbone_rmsd(x, y) + backbone_rmsd(y, z) + 1e-12


def _sample_span_interval(n_res, trials, rng):
    """Oracle: dense sampling of n_res-link chains, returns (lo, hi) distances."""
    lo, hi = np.inf, 0.0
    for _ in range(trials):
        n = np.array([0.0, 0.0, 0.0])
        ca = np.array([1.458, 0.0, 0.0])
        c = place_atom(np.array([-0.5, 0.87, 0.0]), n, ca, GEOM.bond_ca_c,
                       GEOM.angle_n_ca_c, rng.uniform(-180, 180))
        start_ca = ca.copy()
        res = (n, ca, c)
        for _ in range(n_res):
            d = BackboneDihedrals(
                phi=rng.uniform(-179.0, 180.0),
                psi=rng.uniform(-179.0, 180.0),
                omega=wrap_angle(180.0 + rng.normal(0, 2.75)),
            )
            res = extend_backbone(res, d, "right")
        dist = float(np.linalg.norm(res[1] - start_ca))
        lo = min(lo, dist)
        hi = max(hi, dist)
    return lo, hi


def test_reachability_never_rejects_reachable():
    rng = np.random.default_rng(3)
    lo, hi = _sample_span_interval(3, 400, rng)
    # every sampled reachable distance must be accepted for 3 remaining links
    for d in np.linspace(lo, hi, 50):
        assert reachability_check((0, 0, 0), (d, 0, 0), 3)


def test_reachability_bounds():
    assert not reachability_check((0, 0, 0), (100.0, 0, 0), 3)
    near_max = 3 * max_ca_span() - 1e-6
    assert reachability_check((0, 0, 0), (near_max, 0, 0), 3)
    assert reachability_check((0, 0, 0), (0.0, 0, 0), 3)  # >=2 links can fold back
    # a single link cannot stretch beyond the trans span
    assert not reachability_check((0, 0, 0), (max_ca_span() + 0.5, 0, 0), 1)
    assert not reachability_check((0, 0, 0), (1.0, 0, 0), 1)
    assert min_ca_span() < max_ca_span()
    with pytest.raises(ValueError):
        reachability_check((0, 0, 0), (1, 0, 0), -1)


def test_ideal_geometry_file_round_trip(tmp_path):
    default = IdealGeometry.default()
    assert default == IdealGeometry()
    p = tmp_path / "geom.txt"
    p.write_text("bond.N-CA = 1.5\n# comment\nangle.N-CA-C = 110.0\n")
    g = IdealGeometry.from_file(p)
    assert g.bond_n_ca == 1.5
    assert g.angle_n_ca_c == 110.0
    assert g.bond_ca_c == 1.525
    with pytest.raises(ValueError):
        IdealGeometry.from_text("bogus.key = 1\n")
