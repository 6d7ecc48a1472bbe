"""Dihedral/Cartesian conversions for peptide backbones.

All angles are degrees, all lengths Angstroms.  Coordinates are plain numpy
arrays of shape (3,) (or (n, 3) for the batched helpers); nothing here keeps
state, so every function is safe to call from any thread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

__all__ = [
    "GeometryError",
    "IdealGeometry",
    "BackboneDihedrals",
    "wrap_angle",
    "dihedral_angle",
    "bond_angle",
    "place_atom",
    "place_atoms",
    "extend_backbone",
    "place_carbonyl_oxygen",
    "backbone_rmsd",
    "reachability_check",
    "max_ca_span",
]

_COLLINEAR_EPS = 1e-9


class GeometryError(ValueError):
    """Raised for degenerate geometric input (collinear or coincident points)."""


def wrap_angle(angle):
    """Wrap an angle in degrees into (-180, 180]."""
    a = math.fmod(angle + 180.0, 360.0)
    if a < 0.0:
        a += 360.0
    a -= 180.0
    if a <= -180.0:
        a = 180.0
    return a


def wrap_angles(angles: np.ndarray) -> np.ndarray:
    """Vectorized wrap into (-180, 180]."""
    a = np.mod(np.asarray(angles, dtype=float) + 180.0, 360.0) - 180.0
    a[a <= -180.0] += 360.0
    return a


@dataclass(frozen=True)
class BackboneDihedrals:
    """One residue's (phi, psi, omega) triple, each in (-180, 180]."""

    phi: float
    psi: float
    omega: float

    def __post_init__(self):
        for name in ("phi", "psi", "omega"):
            v = getattr(self, name)
            if not (-180.0 < v <= 180.0) or not math.isfinite(v):
                raise ValueError(f"{name}={v!r} outside (-180, 180]")


@dataclass(frozen=True)
class IdealGeometry:
    """Ideal peptide bond lengths/angles used by all internal-coordinate builds.

    Values come from a plain-text key=value data file so they can be
    overridden without touching code (see data/ideal_geometry.txt).
    """

    bond_n_ca: float = 1.458
    bond_ca_c: float = 1.525
    bond_c_n: float = 1.329
    bond_c_o: float = 1.231
    bond_ca_cb: float = 1.530
    angle_n_ca_c: float = 111.2
    angle_ca_c_n: float = 116.2
    angle_c_n_ca: float = 121.7
    angle_ca_c_o: float = 120.8
    angle_c_ca_cb: float = 110.1
    # improper torsion(N, C, CA, CB); sign fixes L-chirality
    torsion_n_c_ca_cb: float = -122.6

    _KEYS = {
        "bond.N-CA": "bond_n_ca",
        "bond.CA-C": "bond_ca_c",
        "bond.C-N": "bond_c_n",
        "bond.C-O": "bond_c_o",
        "bond.CA-CB": "bond_ca_cb",
        "angle.N-CA-C": "angle_n_ca_c",
        "angle.CA-C-N": "angle_ca_c_n",
        "angle.C-N-CA": "angle_c_n_ca",
        "angle.CA-C-O": "angle_ca_c_o",
        "angle.C-CA-CB": "angle_c_ca_cb",
        "torsion.N-C-CA-CB": "torsion_n_c_ca_cb",
    }

    @classmethod
    def from_text(cls, text: str) -> "IdealGeometry":
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in cls._KEYS:
                raise ValueError(f"unknown ideal-geometry key {key!r}")
            values[cls._KEYS[key]] = float(raw)
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "IdealGeometry":
        with open(path) as fh:
            return cls.from_text(fh.read())

    @classmethod
    def default(cls) -> "IdealGeometry":
        ref = resources.files("loopboltz").joinpath("data/ideal_geometry.txt")
        return cls.from_text(ref.read_text())


def _check_points(*points):
    for p in points:
        if not np.all(np.isfinite(p)):
            raise GeometryError("non-finite coordinate")


def dihedral_angle(p1, p2, p3, p4) -> float:
    """Signed torsion of the p2-p3 axis, degrees in (-180, 180].

    Raises GeometryError when three consecutive points are collinear (the
    torsion is undefined there); never returns NaN.
    """
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    p3 = np.asarray(p3, dtype=float)
    p4 = np.asarray(p4, dtype=float)
    _check_points(p1, p2, p3, p4)
    b1 = p2 - p1
    b2 = p3 - p2
    b3 = p4 - p3
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    b2n = np.linalg.norm(b2)
    if b2n < _COLLINEAR_EPS:
        raise GeometryError("p2 and p3 coincide")
    if np.linalg.norm(n1) < _COLLINEAR_EPS or np.linalg.norm(n2) < _COLLINEAR_EPS:
        raise GeometryError("collinear points: torsion undefined")
    m1 = np.cross(n1, b2 / b2n)
    x = float(np.dot(n1, n2))
    y = float(np.dot(m1, n2))
    ang = math.degrees(math.atan2(y, x))
    return wrap_angle(ang)


def bond_angle(p1, p2, p3) -> float:
    """Angle at p2 between p1 and p3, degrees in [0, 180]."""
    v1 = np.asarray(p1, dtype=float) - np.asarray(p2, dtype=float)
    v2 = np.asarray(p3, dtype=float) - np.asarray(p2, dtype=float)
    n1 = np.linalg.norm(v1)
    n2 = np.linalg.norm(v2)
    if n1 < _COLLINEAR_EPS or n2 < _COLLINEAR_EPS:
        raise GeometryError("coincident points: angle undefined")
    c = float(np.dot(v1, v2) / (n1 * n2))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def place_atom(a, b, c, bond: float, angle: float, torsion: float) -> np.ndarray:
    """Place atom d bonded to c with |d-c|=bond, angle(b,c,d)=angle and
    torsion(a,b,c,d)=torsion (NeRF construction, degrees)."""
    return place_atoms(a, b, c, bond, angle, np.asarray([torsion], dtype=float))[0]


def place_atoms(a, b, c, bond, angle, torsions) -> np.ndarray:
    """Batched place_atom: same reference frame, a vector of torsions.

    a, b, c may each be (3,) or (n, 3); torsions is (n,).  Returns (n, 3).
    bond/angle may be scalars or (n,) arrays.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    c = np.atleast_2d(np.asarray(c, dtype=float))
    torsions = np.atleast_1d(np.asarray(torsions, dtype=float))
    ang = np.radians(np.asarray(angle, dtype=float))
    # the frame below is left-handed w.r.t. the measured torsion sign
    tor = -np.radians(torsions)
    bond = np.asarray(bond, dtype=float)

    bc = c - b
    bcn = bc / np.linalg.norm(bc, axis=-1, keepdims=True)
    ab = b - a
    n = np.cross(ab, bcn)
    nn = np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(nn < _COLLINEAR_EPS):
        raise GeometryError("collinear reference atoms")
    n = n / nn
    m = np.cross(n, bcn)
    d_local = np.stack(
        [
            -bond * np.cos(ang) * np.ones_like(tor),
            bond * np.cos(tor) * np.sin(ang),
            bond * np.sin(tor) * np.sin(ang),
        ],
        axis=-1,
    )
    return (
        c
        + d_local[..., 0:1] * bcn
        + d_local[..., 1:2] * m
        + d_local[..., 2:3] * n
    )


def _as_backbone(residue):
    """Accept a ResidueGeometry-like object or an (N, CA, C) coordinate triple."""
    if hasattr(residue, "backbone_atoms"):
        bb = residue.backbone_atoms
        return np.asarray(bb["N"]), np.asarray(bb["CA"]), np.asarray(bb["C"])
    n, ca, c = residue
    return np.asarray(n, dtype=float), np.asarray(ca, dtype=float), np.asarray(c, dtype=float)


def extend_backbone(prev_residue, dihedrals: BackboneDihedrals, direction: str,
                    geom: IdealGeometry | None = None):
    """Place the next residue's N, CA, C from a fully placed neighbour.

    direction="right" appends the residue after prev_residue; the three
    torsions consumed are, in chain order, the junction triple
    (psi of prev_residue, omega of the junction peptide, phi of the new
    residue), passed as dihedrals.psi / .omega / .phi.

    direction="left" prepends a residue before prev_residue; the consumed
    triple is (phi of prev_residue, omega of the junction, psi of the new
    residue) = dihedrals.phi / .omega / .psi.

    Returns the new residue's (N, CA, C) coordinates as a (3, 3) array.
    Re-measuring the junction torsions on the placed atoms reproduces the
    inputs to well under 1e-6 degrees.
    """
    geom = geom or IdealGeometry()
    n0, ca0, c0 = _as_backbone(prev_residue)
    if direction == "right":
        n1 = place_atom(n0, ca0, c0, geom.bond_c_n, geom.angle_ca_c_n, dihedrals.psi)
        ca1 = place_atom(ca0, c0, n1, geom.bond_n_ca, geom.angle_c_n_ca, dihedrals.omega)
        c1 = place_atom(c0, n1, ca1, geom.bond_ca_c, geom.angle_n_ca_c, dihedrals.phi)
        return np.stack([n1, ca1, c1])
    if direction == "left":
        c1 = place_atom(c0, ca0, n0, geom.bond_c_n, geom.angle_c_n_ca, dihedrals.phi)
        ca1 = place_atom(ca0, n0, c1, geom.bond_ca_c, geom.angle_ca_c_n, dihedrals.omega)
        n1 = place_atom(n0, c1, ca1, geom.bond_n_ca, geom.angle_n_ca_c, dihedrals.psi)
        return np.stack([n1, ca1, c1])
    raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")


def place_carbonyl_oxygen(ca, c, n_next, geom: IdealGeometry | None = None) -> np.ndarray:
    """Place O bonded to C, in the peptide plane, anti to the following N."""
    geom = geom or IdealGeometry()
    return place_atom(n_next, ca, c, geom.bond_c_o, geom.angle_ca_c_o, 180.0)


def backbone_rmsd(a, b) -> float:
    """Raw coordinate RMSD between two ordered atom lists, no superposition.

    Both conformations are expected to live in the same fixed template frame,
    so superposition would erase genuine displacement.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"atom count mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty atom lists")
    d = a - b
    return float(np.sqrt(np.mean(np.sum(d * d, axis=-1))))


_SPAN_SLACK = 0.08  # generosity so the check never rejects a reachable gap


def max_ca_span(geom: IdealGeometry | None = None) -> float:
    """Maximum CA->CA distance across one trans peptide link."""
    geom = geom or IdealGeometry()
    n0 = np.array([0.0, 0.0, 0.0])
    ca0 = np.array([geom.bond_n_ca, 0.0, 0.0])
    c0 = place_atom(n0 + [0, 1, 0], n0, ca0, geom.bond_ca_c, geom.angle_n_ca_c, 0.0)
    n1 = place_atom(n0, ca0, c0, geom.bond_c_n, geom.angle_ca_c_n, 180.0)
    ca1 = place_atom(ca0, c0, n1, geom.bond_n_ca, geom.angle_c_n_ca, 180.0)
    return float(np.linalg.norm(ca1 - ca0))


def min_ca_span(geom: IdealGeometry | None = None) -> float:
    """Minimum CA->CA distance across one peptide link (cis omega)."""
    geom = geom or IdealGeometry()
    n0 = np.array([0.0, 0.0, 0.0])
    ca0 = np.array([geom.bond_n_ca, 0.0, 0.0])
    c0 = place_atom(n0 + [0, 1, 0], n0, ca0, geom.bond_ca_c, geom.angle_n_ca_c, 0.0)
    n1 = place_atom(n0, ca0, c0, geom.bond_c_n, geom.angle_ca_c_n, 180.0)
    ca1 = place_atom(ca0, c0, n1, geom.bond_n_ca, geom.angle_c_n_ca, 0.0)
    return float(np.linalg.norm(ca1 - ca0))


def reachability_check(current_end, target_ca, residues_remaining: int,
                       geom: IdealGeometry | None = None) -> bool:
    """Can a chain of `residues_remaining` CA->CA links still cover the gap?

    `residues_remaining` counts peptide links between the two CA atoms.
    Deliberately conservative: returns False only when no chain with ideal
    bond geometry can span the distance, so a False verdict is safe to turn
    into an infinite energy.
    """
    if residues_remaining < 0:
        raise ValueError("residues_remaining must be >= 0")
    d = float(np.linalg.norm(np.asarray(target_ca, dtype=float)
                             - np.asarray(current_end, dtype=float)))
    if residues_remaining == 0:
        return d <= _SPAN_SLACK
    hi = residues_remaining * (max_ca_span(geom) + _SPAN_SLACK)
    if residues_remaining == 1:
        lo = min_ca_span(geom) - _SPAN_SLACK
    else:
        lo = 0.0  # two or more links can fold back arbitrarily close
    return lo <= d <= hi
