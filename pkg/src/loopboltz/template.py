"""PDB template ingestion, segment definition, and structure output.

Only fixed-column ATOM records of one chain are honored; HETATM, waters,
hydrogens, and other chains are ignored.  Alternate locations resolve to the
highest occupancy (first seen on ties).  Insertion codes are rejected.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .energy import AtomSet
from .geometry import (
    BackboneDihedrals,
    GeometryError,
    IdealGeometry,
    dihedral_angle,
    extend_backbone,
    place_atom,
    place_carbonyl_oxygen,
)
from .residues import (
    AA1_TO_3,
    AA3_TO_1,
    N_CHI,
    ResidueGeometry,
    build_sidechain,
    sidechain_atom_names,
)

log = logging.getLogger(__name__)

BACKBONE_NAMES = ("N", "CA", "C", "O")


class TemplateError(ValueError):
    """Unusable template input."""


@dataclass(frozen=True)
class SegmentSpec:
    """Inclusive residue range plus the target sequence to model there."""

    start: int
    end: int
    sequence: str

    def __post_init__(self):
        if self.end < self.start:
            raise TemplateError(f"segment end {self.end} before start {self.start}")
        length = self.end - self.start + 1
        if len(self.sequence) != length:
            raise TemplateError(
                f"sequence length {len(self.sequence)} != segment length {length}")
        if length < 4:
            raise TemplateError("segment must span at least 4 residues")
        bad = [c for c in self.sequence if c not in AA1_TO_3]
        if bad:
            raise TemplateError(f"sequence has non-amino-acid letters: {bad}")

    def __len__(self):
        return self.end - self.start + 1

    @property
    def positions(self):
        return range(self.start, self.end + 1)


@dataclass
class Template:
    """A parsed chain with an optional mutable segment.

    residues maps author sequence numbers to ResidueGeometry; gaps lists
    numbering jumps seen in the file.  Immutable by convention: mutation
    returns a new Template.
    """

    chain: str
    residues: dict
    gaps: list = field(default_factory=list)
    segment: SegmentSpec | None = None
    _fixed: AtomSet | None = field(default=None, repr=False)

    def residue(self, seqnum: int) -> ResidueGeometry:
        return self.residues[seqnum]

    def has_atom(self, seqnum: int, name: str) -> bool:
        res = self.residues.get(seqnum)
        if res is None:
            return False
        if name in BACKBONE_NAMES:
            return name in res.backbone_atoms
        return any(n == name for n, _ in res.side_chain_atoms)

    def atom(self, seqnum: int, name: str) -> np.ndarray:
        res = self.residues[seqnum]
        if name in BACKBONE_NAMES:
            return np.asarray(res.backbone_atoms[name], dtype=float)
        for n, coord in res.side_chain_atoms:
            if n == name:
                return np.asarray(coord, dtype=float)
        raise KeyError(f"{name} not present in residue {seqnum}")

    def fixed_atoms(self) -> AtomSet:
        """Every atom held fixed during sampling (cached)."""
        if self._fixed is not None:
            return self._fixed
        seg = self.segment
        items = []
        for seqnum in sorted(self.residues):
            res = self.residues[seqnum]
            interior = seg is not None and seg.start < seqnum < seg.end
            if interior:
                continue
            for name, coord in res.atom_items():
                if seg is not None and seqnum == seg.start and name != "N" and name != "CA":
                    continue
                if seg is not None and seqnum == seg.end and name not in ("CA", "C", "O"):
                    continue
                items.append((seqnum, res.amino_acid_type, name, coord))
        fixed = AtomSet.from_atoms(items)
        object.__setattr__(self, "_fixed", fixed)
        return fixed


def _element_is_hydrogen(name: str, element: str) -> bool:
    if element.strip() in ("H", "D"):
        return True
    stripped = name.strip().lstrip("0123456789")
    return stripped[:1] in ("H", "D")


def parse_template(pdb_text, chain: str) -> Template:
    """Parse one chain's ATOM records into a Template (no segment yet)."""
    if isinstance(pdb_text, bytes):
        pdb_text = pdb_text.decode("ascii", errors="replace")
    if hasattr(pdb_text, "read"):
        pdb_text = pdb_text.read()

    # (resseq, atom_name) -> (occupancy, order_index, res_name, coord)
    best: dict = {}
    res_names: dict = {}
    order = 0
    skipped_res = set()
    in_model = 0
    for line in io.StringIO(pdb_text):
        rec = line[:6]
        if rec == "MODEL ":
            in_model += 1
            if in_model > 1:
                break  # only the first model of a multi-model file
            continue
        if rec != "ATOM  ":
            continue
        if line[21] != chain:
            continue
        icode = line[26]
        if icode not in (" ", ""):
            raise TemplateError(f"insertion codes unsupported (residue {line[22:27]!r})")
        res_name3 = line[17:20].strip()
        if res_name3 not in AA3_TO_1:
            if res_name3 not in skipped_res:
                log.warning("skipping unknown residue name %r", res_name3)
                skipped_res.add(res_name3)
            continue
        name = line[12:16].strip()
        element = line[76:78] if len(line) >= 78 else ""
        if _element_is_hydrogen(name, element):
            continue
        seqnum = int(line[22:26])
        altloc = line[16]
        try:
            occ = float(line[54:60])
        except ValueError:
            occ = 1.0
        coord = (float(line[30:38]), float(line[38:46]), float(line[46:54]))
        key = (seqnum, name)
        keep = best.get(key)
        if keep is None or (altloc != " " and occ > keep[0] + 1e-12):
            best[key] = (occ, order, res_name3, coord)
        res_names.setdefault(seqnum, res_name3)
        order += 1

    if not best:
        raise TemplateError(f"no usable ATOM records for chain {chain!r}")

    residues = {}
    for seqnum in sorted(res_names):
        atoms = sorted(
            ((key[1],) + val for key, val in best.items() if key[0] == seqnum),
            key=lambda t: t[2],
        )
        backbone = {}
        side = []
        for name, _occ, _order, _res3, coord in atoms:
            if name in BACKBONE_NAMES:
                backbone[name] = np.array(coord)
            else:
                side.append((name, np.array(coord)))
        residues[seqnum] = ResidueGeometry(
            AA3_TO_1[res_names[seqnum]], backbone, side, seqnum=seqnum)

    seqnums = sorted(residues)
    gaps = [(a, b) for a, b in zip(seqnums, seqnums[1:]) if b - a > 1]
    for a, b in gaps:
        log.warning("chain %s: gap between residues %d and %d", chain, a, b)
    return Template(chain=chain, residues=residues, gaps=gaps)


def apply_mutation(template: Template, segment: SegmentSpec) -> Template:
    """Attach a segment spec: replace its sequence and discard the atoms that
    will be sampled (interior atoms; the anchors keep N/CA and CA/C/O)."""
    for pos in (segment.start, segment.end):
        if pos not in template.residues:
            raise TemplateError(f"segment position {pos} not in template")
        if not template.has_atom(pos, "CA"):
            raise TemplateError(f"segment anchor {pos} lacks a resolved CA atom")
    for pos, name in ((segment.start - 1, "C"), (segment.end + 1, "N")):
        if pos not in template.residues or not template.has_atom(pos, name):
            raise TemplateError(
                f"residue {pos} must provide atom {name} to anchor the segment")

    anchors = np.stack([template.atom(segment.start, "CA"),
                        template.atom(segment.end, "CA")])
    residues = {}
    for seqnum in sorted(template.residues):
        res = template.residues[seqnum]
        if segment.start < seqnum < segment.end:
            new_type = segment.sequence[seqnum - segment.start]
            residues[seqnum] = ResidueGeometry(new_type, {}, [], seqnum=seqnum)
            continue
        if seqnum == segment.start:
            bb = {k: v for k, v in res.backbone_atoms.items() if k in ("N", "CA")}
            residues[seqnum] = ResidueGeometry(segment.sequence[0], bb, [], seqnum=seqnum)
            continue
        if seqnum == segment.end:
            bb = {k: v for k, v in res.backbone_atoms.items() if k in ("CA", "C", "O")}
            residues[seqnum] = ResidueGeometry(segment.sequence[-1], bb, [], seqnum=seqnum)
            continue
        missing = [n for n in ("N", "CA", "C") if n not in res.backbone_atoms]
        if missing:
            coords = [c for _, c in res.atom_items()]
            near = coords and min(
                float(np.linalg.norm(np.asarray(c) - a))
                for c in coords for a in anchors) < 10.0
            msg = (f"fixed residue {seqnum} missing backbone atoms {missing}")
            if near:
                raise TemplateError(msg + " within 10 A of the segment anchors")
            log.warning("%s (far from segment, kept as partial context)", msg)
        residues[seqnum] = res
    return Template(chain=template.chain, residues=residues,
                    gaps=list(template.gaps), segment=segment)


def iter_backbone_dihedrals(pdb_text):
    """Yield (type, phi, psi) over all chains of a file; corpus estimation."""
    chains = sorted({line[21] for line in io.StringIO(pdb_text)
                     if line[:6] == "ATOM  "})
    for chain in chains:
        try:
            template = parse_template(pdb_text, chain)
        except TemplateError:
            continue
        seqnums = sorted(template.residues)
        for prev, cur, nxt in zip(seqnums, seqnums[1:], seqnums[2:]):
            if cur - prev != 1 or nxt - cur != 1:
                continue
            try:
                phi = dihedral_angle(template.atom(prev, "C"), template.atom(cur, "N"),
                                     template.atom(cur, "CA"), template.atom(cur, "C"))
                psi = dihedral_angle(template.atom(cur, "N"), template.atom(cur, "CA"),
                                     template.atom(cur, "C"), template.atom(nxt, "N"))
            except (KeyError, GeometryError):
                continue
            yield template.residues[cur].amino_acid_type, phi, psi


# -- output -------------------------------------------------------------------

def _format_atom(serial, name, res3, chain, seqnum, coord, element):
    name_field = f" {name:<3s}" if len(name) < 4 else name
    return (
        f"ATOM  {serial:5d} {name_field}{'':1s}{res3:>3s} {chain:1s}"
        f"{seqnum:4d}{'':1s}   {coord[0]:8.3f}{coord[1]:8.3f}{coord[2]:8.3f}"
        f"{1.0:6.2f}{0.0:6.2f}          {element:>2s}  \n"
    )


def _conformation_records(conf, chain):
    lines = []
    serial = 1
    for res in conf.residues:
        res3 = AA1_TO_3[res.amino_acid_type]
        for name, coord in res.atom_items():
            element = name.strip()[0]
            lines.append(_format_atom(serial, name, res3, chain, res.seqnum,
                                      np.asarray(coord), element))
            serial += 1
    return lines


def write_conformations(conformations, mode: str = "multi", chain: str = "A"):
    """Render conformations as PDB text.

    mode="multi": one string with a MODEL block per conformation (numbered in
    input order); mode="per-sample": list of single-structure strings.
    Weights and energies go into REMARK lines.
    """
    if mode not in ("multi", "per-sample"):
        raise ValueError(f"unknown mode {mode!r}")
    blocks = []
    for i, conf in enumerate(conformations, start=1):
        head = []
        if mode == "multi":
            head.append(f"MODEL     {i:4d}\n")
        label = getattr(conf, "label", None)
        if label:
            head.append(f"REMARK  99 LABEL {label}\n")
        head.append(f"REMARK  99 ID {getattr(conf, 'conf_id', i)}\n")
        head.append(f"REMARK  99 WEIGHT {conf.weight:.10g}\n")
        head.append(f"REMARK  99 ENERGY {conf.total_energy:.10g}\n")
        body = _conformation_records(conf, chain)
        tail = ["ENDMDL\n"] if mode == "multi" else ["END\n"]
        blocks.append("".join(head + body + tail))
    if mode == "multi":
        return "".join(blocks) + "END\n"
    return blocks


def write_template_pdb(template: Template) -> str:
    """Serialize a template's resolved atoms back to PDB text."""
    lines = []
    serial = 1
    for seqnum in sorted(template.residues):
        res = template.residues[seqnum]
        res3 = AA1_TO_3[res.amino_acid_type]
        for name, coord in res.atom_items():
            lines.append(_format_atom(serial, name, res3, template.chain, seqnum,
                                      np.asarray(coord), name.strip()[0]))
            serial += 1
    lines.append("END\n")
    return "".join(lines)


# -- synthesis ----------------------------------------------------------------

def synthesize_template(sequence: str, dihedrals, chain: str = "A",
                        start: int = 1, chi: dict | None = None,
                        geom: IdealGeometry | None = None) -> Template:
    """Build an ideal-geometry chain as a Template (for toys and tests).

    dihedrals: list of (phi, psi, omega) per residue; omega of residue i is
    the peptide torsion joining residues i and i+1 (the last omega unused).
    chi maps sequence index -> chi vector; types default to their first
    rotamer-free build (all chi = -60).
    """
    geom = geom or IdealGeometry()
    if len(dihedrals) != len(sequence):
        raise ValueError("need one (phi, psi, omega) triple per residue")
    chi = chi or {}

    n = np.array([0.0, 0.0, 0.0])
    ca = np.array([geom.bond_n_ca, 0.0, 0.0])
    c = place_atom(np.array([-0.44, 0.9, 0.2]), n, ca, geom.bond_ca_c,
                   geom.angle_n_ca_c, float(dihedrals[0][0]))
    backbones = [(n, ca, c)]
    for i in range(1, len(sequence)):
        phi_prev, psi_prev, omega_prev = (float(v) for v in dihedrals[i - 1])
        phi_i = float(dihedrals[i][0])
        prev = backbones[-1]
        junction = BackboneDihedrals(phi=phi_i, psi=psi_prev, omega=omega_prev)
        n_i, ca_i, c_i = extend_backbone(prev, junction, "right", geom)
        backbones.append((n_i, ca_i, c_i))

    residues = {}
    for i, aa in enumerate(sequence):
        n_i, ca_i, c_i = backbones[i]
        if i + 1 < len(sequence):
            o_i = place_carbonyl_oxygen(ca_i, c_i, backbones[i + 1][0], geom)
        else:
            o_i = place_atom(n_i, ca_i, c_i, geom.bond_c_o, geom.angle_ca_c_o,
                             float(dihedrals[i][1]) - 180.0)
        chis = np.asarray(chi.get(i, np.full(N_CHI[aa], -60.0)), dtype=float)
        sc_coords = build_sidechain(n_i, ca_i, c_i, aa, chis, geom)
        side = list(zip(sidechain_atom_names(aa), sc_coords))
        residues[start + i] = ResidueGeometry(
            aa, {"N": n_i, "CA": ca_i, "C": c_i, "O": o_i}, side, seqnum=start + i)
    return Template(chain=chain, residues=residues)
