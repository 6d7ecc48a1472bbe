"""Amino-acid definitions: codes, side-chain topology, side-chain building.

Side chains are heavy-atom only (hydrogens are out of scope) and are built
by internal coordinates from each residue's placed N/CA/C.  Ring closures in
PRO/HIS/TRP are approximate: ring atoms are placed from one branch with
fixed torsions, which keeps rings planar but does not enforce the closing
bond exactly.  Good enough for clash scoring and PDB output of sampled
ensembles; not a substitute for a force-field minimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometryError, IdealGeometry, place_atoms

AA3_TO_1 = {
    "ALA": "A", "ARG": "R", "ASN": "N", "ASP": "D", "CYS": "C",
    "GLN": "Q", "GLU": "E", "GLY": "G", "HIS": "H", "ILE": "I",
    "LEU": "L", "LYS": "K", "MET": "M", "PHE": "F", "PRO": "P",
    "SER": "S", "THR": "T", "TRP": "W", "TYR": "Y", "VAL": "V",
}
AA1_TO_3 = {v: k for k, v in AA3_TO_1.items()}
AMINO_ACIDS = tuple(sorted(AA1_TO_3))

# number of chi dihedrals per type
N_CHI = {
    "G": 0, "A": 0, "S": 1, "C": 1, "T": 1, "V": 1, "P": 2, "L": 2,
    "I": 2, "F": 2, "Y": 2, "W": 2, "D": 2, "N": 2, "H": 2,
    "M": 3, "E": 3, "Q": 3, "K": 4, "R": 4,
}

# post-CB side-chain construction rows: (name, (ref1, ref2, ref3), bond,
# angle, rule) with rule one of ("chi", k), ("chi_off", k, offset),
# ("fix", torsion).  CB itself is placed from ideal-geometry constants.
SIDECHAIN_TOPOLOGY: dict[str, list] = {
    "G": [],
    "A": [],
    "S": [("OG", ("N", "CA", "CB"), 1.417, 110.8, ("chi", 1))],
    "C": [("SG", ("N", "CA", "CB"), 1.808, 113.8, ("chi", 1))],
    "T": [
        ("OG1", ("N", "CA", "CB"), 1.433, 109.6, ("chi", 1)),
        ("CG2", ("N", "CA", "CB"), 1.521, 110.5, ("chi_off", 1, -120.0)),
    ],
    "V": [
        ("CG1", ("N", "CA", "CB"), 1.527, 110.5, ("chi", 1)),
        ("CG2", ("N", "CA", "CB"), 1.527, 110.5, ("chi_off", 1, 122.3)),
    ],
    "I": [
        ("CG1", ("N", "CA", "CB"), 1.530, 110.4, ("chi", 1)),
        ("CG2", ("N", "CA", "CB"), 1.521, 110.5, ("chi_off", 1, -122.3)),
        ("CD1", ("CA", "CB", "CG1"), 1.513, 113.8, ("chi", 2)),
    ],
    "L": [
        ("CG", ("N", "CA", "CB"), 1.530, 116.3, ("chi", 1)),
        ("CD1", ("CA", "CB", "CG"), 1.521, 110.7, ("chi", 2)),
        ("CD2", ("CA", "CB", "CG"), 1.521, 110.7, ("chi_off", 2, 122.6)),
    ],
    "P": [
        ("CG", ("N", "CA", "CB"), 1.492, 104.5, ("chi", 1)),
        ("CD", ("CA", "CB", "CG"), 1.503, 106.1, ("chi", 2)),
    ],
    "F": [
        ("CG", ("N", "CA", "CB"), 1.502, 113.8, ("chi", 1)),
        ("CD1", ("CA", "CB", "CG"), 1.384, 120.8, ("chi", 2)),
        ("CD2", ("CA", "CB", "CG"), 1.384, 120.8, ("chi_off", 2, 180.0)),
        ("CE1", ("CB", "CG", "CD1"), 1.382, 121.1, ("fix", 180.0)),
        ("CE2", ("CB", "CG", "CD2"), 1.382, 121.1, ("fix", 180.0)),
        ("CZ", ("CG", "CD1", "CE1"), 1.382, 119.9, ("fix", 0.0)),
    ],
    "Y": [
        ("CG", ("N", "CA", "CB"), 1.502, 113.8, ("chi", 1)),
        ("CD1", ("CA", "CB", "CG"), 1.384, 120.8, ("chi", 2)),
        ("CD2", ("CA", "CB", "CG"), 1.384, 120.8, ("chi_off", 2, 180.0)),
        ("CE1", ("CB", "CG", "CD1"), 1.382, 121.1, ("fix", 180.0)),
        ("CE2", ("CB", "CG", "CD2"), 1.382, 121.1, ("fix", 180.0)),
        ("CZ", ("CG", "CD1", "CE1"), 1.382, 119.9, ("fix", 0.0)),
        ("OH", ("CD1", "CE1", "CZ"), 1.376, 119.9, ("fix", 180.0)),
    ],
    "W": [
        ("CG", ("N", "CA", "CB"), 1.498, 113.6, ("chi", 1)),
        ("CD1", ("CA", "CB", "CG"), 1.365, 126.9, ("chi", 2)),
        ("CD2", ("CA", "CB", "CG"), 1.433, 126.6, ("chi_off", 2, 180.0)),
        ("NE1", ("CB", "CG", "CD1"), 1.374, 110.2, ("fix", 180.0)),
        ("CE2", ("CB", "CG", "CD2"), 1.409, 107.2, ("fix", 180.0)),
        ("CE3", ("CB", "CG", "CD2"), 1.398, 133.9, ("fix", 0.0)),
        ("CZ2", ("CG", "CD2", "CE2"), 1.394, 122.4, ("fix", 180.0)),
        ("CZ3", ("CG", "CD2", "CE3"), 1.382, 118.6, ("fix", 180.0)),
        ("CH2", ("CD2", "CE2", "CZ2"), 1.368, 117.5, ("fix", 0.0)),
    ],
    "D": [
        ("CG", ("N", "CA", "CB"), 1.516, 112.6, ("chi", 1)),
        ("OD1", ("CA", "CB", "CG"), 1.249, 118.4, ("chi", 2)),
        ("OD2", ("CA", "CB", "CG"), 1.249, 118.4, ("chi_off", 2, 180.0)),
    ],
    "N": [
        ("CG", ("N", "CA", "CB"), 1.516, 112.6, ("chi", 1)),
        ("OD1", ("CA", "CB", "CG"), 1.231, 120.8, ("chi", 2)),
        ("ND2", ("CA", "CB", "CG"), 1.328, 116.4, ("chi_off", 2, 180.0)),
    ],
    "E": [
        ("CG", ("N", "CA", "CB"), 1.530, 114.1, ("chi", 1)),
        ("CD", ("CA", "CB", "CG"), 1.516, 112.6, ("chi", 2)),
        ("OE1", ("CB", "CG", "CD"), 1.249, 118.4, ("chi", 3)),
        ("OE2", ("CB", "CG", "CD"), 1.249, 118.4, ("chi_off", 3, 180.0)),
    ],
    "Q": [
        ("CG", ("N", "CA", "CB"), 1.530, 114.1, ("chi", 1)),
        ("CD", ("CA", "CB", "CG"), 1.516, 112.6, ("chi", 2)),
        ("OE1", ("CB", "CG", "CD"), 1.231, 120.8, ("chi", 3)),
        ("NE2", ("CB", "CG", "CD"), 1.328, 116.4, ("chi_off", 3, 180.0)),
    ],
    "M": [
        ("CG", ("N", "CA", "CB"), 1.530, 114.1, ("chi", 1)),
        ("SD", ("CA", "CB", "CG"), 1.807, 112.7, ("chi", 2)),
        ("CE", ("CB", "CG", "SD"), 1.789, 100.9, ("chi", 3)),
    ],
    "K": [
        ("CG", ("N", "CA", "CB"), 1.530, 114.1, ("chi", 1)),
        ("CD", ("CA", "CB", "CG"), 1.530, 111.3, ("chi", 2)),
        ("CE", ("CB", "CG", "CD"), 1.530, 111.3, ("chi", 3)),
        ("NZ", ("CG", "CD", "CE"), 1.489, 111.9, ("chi", 4)),
    ],
    "R": [
        ("CG", ("N", "CA", "CB"), 1.530, 114.1, ("chi", 1)),
        ("CD", ("CA", "CB", "CG"), 1.530, 111.3, ("chi", 2)),
        ("NE", ("CB", "CG", "CD"), 1.461, 112.0, ("chi", 3)),
        ("CZ", ("CG", "CD", "NE"), 1.329, 124.2, ("chi", 4)),
        ("NH1", ("CD", "NE", "CZ"), 1.326, 120.0, ("fix", 0.0)),
        ("NH2", ("CD", "NE", "CZ"), 1.326, 120.0, ("fix", 180.0)),
    ],
    "H": [
        ("CG", ("N", "CA", "CB"), 1.497, 113.8, ("chi", 1)),
        ("ND1", ("CA", "CB", "CG"), 1.371, 122.7, ("chi", 2)),
        ("CD2", ("CA", "CB", "CG"), 1.356, 131.0, ("chi_off", 2, 180.0)),
        ("CE1", ("CB", "CG", "ND1"), 1.319, 109.3, ("fix", 180.0)),
        ("NE2", ("CG", "ND1", "CE1"), 1.374, 111.7, ("fix", 0.0)),
    ],
}


def sidechain_atom_names(res_type: str) -> list[str]:
    """Heavy side-chain atom names in build order (CB first except GLY)."""
    if res_type == "G":
        return []
    return ["CB"] + [row[0] for row in SIDECHAIN_TOPOLOGY[res_type]]


def element_of(atom_name: str) -> str:
    """Element class of a heavy-atom name (C, N, O or S)."""
    for ch in atom_name:
        if ch.isalpha():
            e = ch.upper()
            if e in "CNOS":
                return e
            break
    raise ValueError(f"unsupported atom name {atom_name!r}")


def build_sidechain(n, ca, c, res_type: str, chi,
                    geom: IdealGeometry | None = None) -> np.ndarray:
    """Side-chain heavy atoms for one residue; shape (n_atoms, 3)."""
    coords = build_sidechains_batch(
        np.asarray(n, dtype=float)[None],
        np.asarray(ca, dtype=float)[None],
        np.asarray(c, dtype=float)[None],
        res_type,
        np.asarray(chi, dtype=float)[None] if len(np.atleast_1d(chi)) else np.zeros((1, 0)),
        geom,
    )
    return coords[0]


def build_sidechains_batch(n, ca, c, res_type: str, chi,
                           geom: IdealGeometry | None = None) -> np.ndarray:
    """Vectorized side-chain build: n/ca/c are (M, 3), chi is (M, n_chi).

    Returns (M, n_atoms, 3) in sidechain_atom_names order.
    """
    geom = geom or IdealGeometry()
    if res_type not in SIDECHAIN_TOPOLOGY:
        raise ValueError(f"unknown residue type {res_type!r}")
    n = np.atleast_2d(np.asarray(n, dtype=float))
    ca = np.atleast_2d(np.asarray(ca, dtype=float))
    c = np.atleast_2d(np.asarray(c, dtype=float))
    chi = np.atleast_2d(np.asarray(chi, dtype=float))
    m = n.shape[0]
    expected = N_CHI[res_type]
    if chi.shape != (m, expected):
        raise ValueError(
            f"{res_type} needs chi shape ({m}, {expected}), got {chi.shape}")
    if res_type == "G":
        return np.zeros((m, 0, 3))

    placed = {"N": n, "CA": ca, "C": c}
    out = []
    cb = place_atoms(n, c, ca, geom.bond_ca_cb, geom.angle_c_ca_cb,
                     np.full(m, geom.torsion_n_c_ca_cb))
    placed["CB"] = cb
    out.append(cb)
    for name, refs, bond, angle, rule in SIDECHAIN_TOPOLOGY[res_type]:
        if rule[0] == "chi":
            torsion = chi[:, rule[1] - 1]
        elif rule[0] == "chi_off":
            torsion = chi[:, rule[1] - 1] + rule[2]
        else:
            torsion = np.full(m, rule[1])
        atom = place_atoms(placed[refs[0]], placed[refs[1]], placed[refs[2]],
                           bond, angle, torsion)
        placed[name] = atom
        out.append(atom)
    return np.stack(out, axis=1)


@dataclass
class ResidueGeometry:
    """One residue's placed heavy atoms.

    backbone_atoms maps N/CA/C/O (any subset) to coordinates; side_chain_atoms
    is an ordered (name, coord) list.  Construction checks intra-residue
    backbone bond lengths against the ideal table (+-0.1 A).
    """

    amino_acid_type: str
    backbone_atoms: dict
    side_chain_atoms: list = field(default_factory=list)
    seqnum: int | None = None

    _BOND_TOL = 0.1

    def __post_init__(self):
        if self.amino_acid_type not in AA1_TO_3:
            raise ValueError(f"unknown amino-acid type {self.amino_acid_type!r}")
        geom = IdealGeometry()
        bb = self.backbone_atoms
        for a, b, ref in (("N", "CA", geom.bond_n_ca), ("CA", "C", geom.bond_ca_c)):
            if a in bb and b in bb:
                d = float(np.linalg.norm(np.asarray(bb[a]) - np.asarray(bb[b])))
                if abs(d - ref) > self._BOND_TOL:
                    raise GeometryError(
                        f"{self.amino_acid_type} {a}-{b} bond {d:.3f} deviates "
                        f"from ideal {ref:.3f} by more than {self._BOND_TOL}")

    def validate_complete(self):
        """Enforce the full-topology invariant for built residues."""
        for name in ("N", "CA", "C", "O"):
            if name not in self.backbone_atoms:
                raise GeometryError(f"missing backbone atom {name}")
        expected = sidechain_atom_names(self.amino_acid_type)
        got = [name for name, _ in self.side_chain_atoms]
        if got != expected:
            raise GeometryError(
                f"side-chain atoms {got} do not match {self.amino_acid_type} "
                f"topology {expected}")
        return self

    def atom_items(self):
        """(name, coord) pairs, backbone first, in a stable order."""
        for name in ("N", "CA", "C", "O"):
            if name in self.backbone_atoms:
                yield name, self.backbone_atoms[name]
        yield from self.side_chain_atoms
