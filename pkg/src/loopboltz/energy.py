"""The energy function H and its incremental terms.

H splits into dihedral-probability terms (Ramachandran grid plus omega
density, weighted by beta1/beta3) and pairwise atomic interaction terms from
a binned table (beta2 for backbone, beta4 for side chains).  Clashing pairs
are infinite, which the sampler turns into zero-weight growth directions.

Pair bookkeeping: interactions are counted between atoms of different
residues only, minus the 1-2/1-3 pairs that are covalently constrained
across a peptide bond (C-N, C-CA, CA-N, O-N, and C to proline's ring CD).
Every increment charges its new atoms against everything placed earlier plus
the new atoms' own cross-residue pairs, so increments telescope exactly to
the total energy.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tables
from .geometry import wrap_angle

LOG_2PI = math.log(2.0 * math.pi)

ELEM_INDEX = {e: i for i, e in enumerate(tables.ELEMENTS)}

# atom codes for exclusion bookkeeping
CODE_N, CODE_CA, CODE_C, CODE_O, CODE_CB, CODE_SC, CODE_PRO_CD = range(7)
_NAME_CODE = {"N": CODE_N, "CA": CODE_CA, "C": CODE_C, "O": CODE_O, "CB": CODE_CB}

# (code of left residue atom, code of right residue atom) pairs within one
# peptide bond that are 1-2 or 1-3 and therefore never scored
_EXCLUDED = np.zeros((7, 7), dtype=bool)
for _l, _r in ((CODE_C, CODE_N), (CODE_C, CODE_CA), (CODE_CA, CODE_N),
               (CODE_O, CODE_N), (CODE_C, CODE_PRO_CD)):
    _EXCLUDED[_l, _r] = True


class EnergyDataError(ValueError):
    """Bad or inconsistent energy data tables."""


class OffGridError(ValueError):
    """A Ramachandran term was requested off the discrete grid."""


def atom_code(name: str, res_type: str) -> int:
    if name == "CD" and res_type == "P":
        return CODE_PRO_CD
    return _NAME_CODE.get(name, CODE_SC)


@dataclass
class AtomSet:
    """A bag of atoms with the metadata the pair terms need."""

    coords: np.ndarray  # (n, 3) float64
    res: np.ndarray     # (n,) int32 residue sequence numbers
    elem: np.ndarray    # (n,) int8 index into tables.ELEMENTS
    code: np.ndarray    # (n,) int8 exclusion code

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 3)
        n = len(self.coords)
        self.res = np.asarray(self.res, dtype=np.int32).reshape(n)
        self.elem = np.asarray(self.elem, dtype=np.int8).reshape(n)
        self.code = np.asarray(self.code, dtype=np.int8).reshape(n)

    def __len__(self):
        return len(self.coords)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_atoms(cls, items):
        """items: iterable of (res_seqnum, res_type, atom_name, coord)."""
        items = list(items)
        if not items:
            return cls.empty()
        coords = np.array([it[3] for it in items], dtype=float)
        res = np.array([it[0] for it in items], dtype=np.int32)
        elem = np.array(
            [ELEM_INDEX[_element_of(it[2])] for it in items], dtype=np.int8)
        code = np.array([atom_code(it[2], it[1]) for it in items], dtype=np.int8)
        return cls(coords, res, elem, code)

    @classmethod
    def concat(cls, sets):
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(
            np.concatenate([s.coords for s in sets]),
            np.concatenate([s.res for s in sets]),
            np.concatenate([s.elem for s in sets]),
            np.concatenate([s.code for s in sets]),
        )


def _element_of(atom_name: str) -> str:
    for ch in atom_name:
        if ch.isalpha():
            e = ch.upper()
            if e in "CNOS":
                return e
            break
    raise EnergyDataError(f"unsupported atom name {atom_name!r}")


def exclusion_mask(res_a, code_a, res_b, code_b) -> np.ndarray:
    """(len_a, len_b) boolean mask of pairs that must not be scored."""
    ra = np.asarray(res_a)[:, None]
    rb = np.asarray(res_b)[None, :]
    ca = np.asarray(code_a)[:, None]
    cb = np.asarray(code_b)[None, :]
    same = ra == rb
    left = (rb - ra == 1) & _EXCLUDED[ca, cb]
    right = (ra - rb == 1) & _EXCLUDED[cb, ca]
    return same | left | right


@dataclass
class RamachandranGrid:
    """Per-type discrete (phi, psi) probabilities on an n x n grid."""

    tables: dict
    spacing: float
    cutoff: float = 2e-5

    def __post_init__(self):
        n = int(round(360.0 / self.spacing))
        self.n = n
        for aa, t in self.tables.items():
            if t.shape != (n, n):
                raise EnergyDataError(f"rama table {aa}: shape {t.shape} != ({n},{n})")
            s = float(t.sum())
            if abs(s - 1.0) > 1e-6:
                raise EnergyDataError(f"rama table {aa} sums to {s}, expected 1")
            if np.any(t < 0):
                raise EnergyDataError(f"rama table {aa} has negative entries")
        # -log p with cells below cutoff masked to +inf
        self.neg_log = {}
        for aa, t in self.tables.items():
            masked = np.where(t < self.cutoff, 0.0, t)
            with np.errstate(divide="ignore"):
                self.neg_log[aa] = np.where(masked > 0.0, -np.log(masked), np.inf)

    def index_of(self, angle: float, strict: bool = True) -> int:
        i = int(round((angle + 180.0) / self.spacing))
        grid_angle = -180.0 + (i % self.n) * self.spacing
        if strict and abs(wrap_angle(angle - grid_angle)) > 1e-6:
            raise OffGridError(f"angle {angle} not on the {self.spacing} degree grid")
        return i % self.n

    def angle_of(self, index: int) -> float:
        return -180.0 + index * self.spacing

    def neg_log_prob(self, res_type: str, phi: float, psi: float,
                     strict: bool = True) -> float:
        i = self.index_of(phi, strict)
        j = self.index_of(psi, strict)
        return float(self.neg_log[res_type][i, j])


@dataclass
class OmegaModel:
    """Wrapped-normal peptide omega density; proline gets a cis component."""

    sd: float = 2.75
    pro_cis_weight: float = 0.1

    def _branch(self, omega, mean):
        d = wrap_angle(omega - mean)
        return math.exp(-0.5 * (d / self.sd) ** 2) / (self.sd * math.sqrt(2 * math.pi))

    def density(self, res_type: str, omega: float) -> float:
        if res_type == "P":
            return ((1.0 - self.pro_cis_weight) * self._branch(omega, 180.0)
                    + self.pro_cis_weight * self._branch(omega, 0.0))
        return self._branch(omega, 180.0)

    def logdensity(self, res_type: str, omega: float) -> float:
        return math.log(self.density(res_type, omega))

    def logdensity_vec(self, res_type: str, omegas: np.ndarray) -> np.ndarray:
        omegas = np.asarray(omegas, dtype=float)
        d180 = np.mod(omegas - 180.0 + 180.0, 360.0) - 180.0
        norm = self.sd * math.sqrt(2 * math.pi)
        p = np.exp(-0.5 * (d180 / self.sd) ** 2) / norm
        if res_type == "P":
            d0 = np.mod(omegas + 180.0, 360.0) - 180.0
            p = ((1.0 - self.pro_cis_weight) * p
                 + self.pro_cis_weight * np.exp(-0.5 * (d0 / self.sd) ** 2) / norm)
        return np.log(p)

    def mode(self, res_type: str) -> float:
        return 180.0

    def sample(self, res_type: str, rng: np.random.Generator, size: int) -> np.ndarray:
        means = np.full(size, 180.0)
        if res_type == "P":
            means = np.where(rng.random(size) < self.pro_cis_weight, 0.0, 180.0)
        draw = means + self.sd * rng.standard_normal(size)
        wrapped = np.mod(draw + 180.0, 360.0) - 180.0
        wrapped[wrapped <= -180.0] += 360.0
        return wrapped


@dataclass
class RotamerLibrary:
    """Per-type chi vectors; the prior over rotamers is uniform."""

    rotamers: dict
    probabilities: dict | None = None
    first_chi_sd: float = 10.0

    def __post_init__(self):
        from .residues import N_CHI

        self._lists = {}
        for aa in "AG":
            self._lists[aa] = np.zeros((1, 0))
        for aa, rots in self.rotamers.items():
            if aa in "AG":
                raise EnergyDataError(f"{aa} cannot carry rotamers")
            want = N_CHI[aa]
            arr = np.asarray(rots, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != want or arr.shape[0] < 1:
                raise EnergyDataError(
                    f"rotamer list for {aa}: expected (n, {want}), got {arr.shape}")
            if np.any(arr <= -180.0) or np.any(arr > 180.0):
                raise EnergyDataError(f"rotamer angles for {aa} outside (-180, 180]")
            self._lists[aa] = arr
        missing = [aa for aa in tables.AMINO_ACIDS_1
                   if aa not in self._lists]
        if missing:
            raise EnergyDataError(f"rotamer library missing types: {missing}")

    def chi(self, res_type: str) -> np.ndarray:
        return self._lists[res_type]


@dataclass
class PairwiseEnergyTable:
    """Binned element-pair energies; np.inf marks clash bins."""

    energies: np.ndarray  # (4, 4, n_bins)
    bin_width: float
    max_distance: float

    def __post_init__(self):
        if not np.allclose(
            np.where(np.isinf(self.energies), -1.0, self.energies),
            np.where(np.isinf(self.energies), -1.0, self.energies).transpose(1, 0, 2),
        ):
            raise EnergyDataError("pairwise table not symmetric in the type pair")
        finite = self.energies[np.isfinite(self.energies)]
        if finite.size and np.max(np.abs(finite)) > 1e6:
            raise EnergyDataError("pairwise table has implausible magnitudes")
        self.n_bins = self.energies.shape[2]
        # pad one zero bin so out-of-range lookups gather 0
        self._padded = np.concatenate(
            [self.energies, np.zeros(self.energies.shape[:2] + (1,))], axis=2)

    @classmethod
    def from_file(cls, path):
        energies, bw, md = tables.read_pairwise(path)
        return cls(energies, bw, md)

    def bin_of(self, dists: np.ndarray) -> np.ndarray:
        b = (np.asarray(dists) / self.bin_width).astype(np.int64)
        return np.minimum(b, self.n_bins)

    def pair_sum(self, coords_a, meta_a, coords_b, meta_b) -> float:
        """Scored sum over cross pairs of two atom groups (scalar path)."""
        e = self.pair_sum_batch(coords_a[None], meta_a, coords_b, meta_b)
        return float(e[0])

    def pair_sum_batch(self, coords_a, meta_a, coords_b, meta_b) -> np.ndarray:
        """coords_a: (K, m, 3) batched group against a fixed group (M, 3).

        meta_* are (res, elem, code) triples of 1-D arrays.  Returns (K,).
        """
        res_a, elem_a, code_a = meta_a
        res_b, elem_b, code_b = meta_b
        if len(res_b) == 0 or len(res_a) == 0:
            return np.zeros(coords_a.shape[0])
        excl = exclusion_mask(res_a, code_a, res_b, code_b)
        d = coords_a[:, :, None, :] - np.asarray(coords_b)[None, None, :, :]
        dist = np.sqrt(np.sum(d * d, axis=-1))
        bins = self.bin_of(dist)
        e = self._padded[elem_a[:, None], elem_b[None, :], bins]
        e = np.where(excl[None, :, :], 0.0, e)
        return e.sum(axis=(1, 2))

    def internal_sum_batch(self, coords, meta) -> np.ndarray:
        """Scored sum over within-group pairs; coords (K, m, 3)."""
        res, elem, code = meta
        m = len(res)
        if m < 2:
            return np.zeros(coords.shape[0])
        iu, ju = np.triu_indices(m, k=1)
        excl = exclusion_mask(res, code, res, code)[iu, ju]
        keep = ~excl
        if not keep.any():
            return np.zeros(coords.shape[0])
        iu, ju = iu[keep], ju[keep]
        d = coords[:, iu, :] - coords[:, ju, :]
        dist = np.sqrt(np.sum(d * d, axis=-1))
        bins = self.bin_of(dist)
        e = self._padded[elem[iu][None, :], elem[ju][None, :], bins]
        return e.sum(axis=1)


def _meta(aset: AtomSet):
    return aset.res, aset.elem, aset.code


@dataclass
class EnergyModel:
    """All energy components plus the beta coefficients (T fixed at 1)."""

    rama: RamachandranGrid
    omega: OmegaModel
    rotamers: RotamerLibrary
    pairwise: PairwiseEnergyTable
    beta1: float = 1.0
    beta2: float = 0.1
    beta3: float = 1.0
    beta4: float = 0.1
    score_closure_dihedrals: bool = True
    checksums: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("beta1", "beta2", "beta3", "beta4"):
            if getattr(self, name) < 0:
                raise EnergyDataError(f"{name} must be non-negative")

    @classmethod
    def load(cls, data_dir, cutoff: float = 2e-5, **kwargs) -> "EnergyModel":
        paths = {name: os.path.join(data_dir, f"{name}.tsv")
                 for name in ("rama", "rotamers", "pairwise")}
        for p in paths.values():
            if not os.path.exists(p):
                raise EnergyDataError(f"missing energy data file: {p}")
        rama_tables, spacing = tables.read_rama(paths["rama"])
        rots, probs = tables.read_rotamers(paths["rotamers"])
        checksums = {os.path.basename(p): tables.file_checksum(p)
                     for p in paths.values()}
        return cls(
            rama=RamachandranGrid(rama_tables, spacing, cutoff=cutoff),
            omega=OmegaModel(),
            rotamers=RotamerLibrary(rots, probs),
            pairwise=PairwiseEnergyTable.from_file(paths["pairwise"]),
            checksums=checksums,
            **kwargs,
        )

    # -- dihedral terms ------------------------------------------------------

    def rama_term(self, res_type: str, phi: float, psi: float,
                  strict: bool = True) -> float:
        """-log p(phi, psi); +inf on masked cells; strict requires on-grid."""
        return self.rama.neg_log_prob(res_type, phi, psi, strict=strict)

    def omega_logdensity(self, res_type: str, omega: float) -> float:
        return self.omega.logdensity(res_type, omega)

    # -- interaction terms ----------------------------------------------------

    def interaction_energy(self, new: AtomSet, context: AtomSet) -> float:
        """Sum of table lookups over cross pairs; +inf on any clash."""
        if len(new) == 0 or len(context) == 0:
            return 0.0
        return self.pairwise.pair_sum(new.coords, _meta(new), context.coords,
                                      _meta(context))

    def internal_energy(self, group: AtomSet) -> float:
        if len(group) < 2:
            return 0.0
        return float(self.pairwise.internal_sum_batch(group.coords[None], _meta(group))[0])

    def group_energy(self, new: AtomSet, context: AtomSet) -> float:
        """Cross pairs plus the new group's own scored pairs."""
        return self.interaction_energy(new, context) + self.internal_energy(new)

    # -- increments ------------------------------------------------------------

    def backbone_increment(self, rama_type: str, phi: float, psi: float,
                           omega_type: str | None, omega: float | None,
                           new_atoms: AtomSet, context: AtomSet,
                           reachable: bool = True) -> float:
        """Delta H for one grown residue: dihedral terms plus beta2 * f."""
        if not reachable:
            return math.inf
        dihedral = self.rama_term(rama_type, phi, psi)
        if omega is not None:
            dihedral += -self.omega_logdensity(omega_type, omega)
        if math.isinf(dihedral):
            return math.inf
        return self.beta1 * dihedral + self.beta2 * self.group_energy(new_atoms, context)

    def closure_increment(self, bridge_dihedrals, bridge_omegas,
                          new_atoms: AtomSet, context: AtomSet) -> float:
        """Delta H for the closure-determined bridge.

        bridge_dihedrals: [(type, phi, psi)] for the three bridge residues;
        bridge_omegas: [(type, omega)] for the omegas fixed by the closure.
        Dihedral terms for the closure-determined angles are charged unless
        score_closure_dihedrals is off.
        """
        dihedral = 0.0
        if self.score_closure_dihedrals:
            for res_type, phi, psi in bridge_dihedrals:
                dihedral += self.rama_term(res_type, phi, psi, strict=False)
            for res_type, om in bridge_omegas:
                dihedral += -self.omega_logdensity(res_type, om)
        if math.isinf(dihedral):
            return math.inf
        return self.beta1 * dihedral + self.beta2 * self.group_energy(new_atoms, context)

    def sidechain_increment(self, new_sc: AtomSet, context: AtomSet) -> float:
        """Delta H for side-chain atoms: uniform rotamer prior, beta4 * f."""
        return self.beta4 * self.group_energy(new_sc, context)
