import numpy as np
import pytest

from loopboltz.residues import ResidueGeometry
from loopboltz.template import (
    SegmentSpec,
    Template,
    TemplateError,
    apply_mutation,
    iter_backbone_dihedrals,
    parse_template,
    synthesize_template,
    write_conformations,
    write_template_pdb,
)

HELIX = (-60.0, -45.0, 180.0)


@pytest.fixture(scope="module")
def toy_template():
    seq = "ADSKVGGNYLER"
    return synthesize_template(seq, [HELIX] * len(seq), chain="A", start=100)


@pytest.fixture(scope="module")
def toy_pdb(toy_template):
    return write_template_pdb(toy_template)


def test_parse_round_trip(toy_template, toy_pdb):
    parsed = parse_template(toy_pdb, "A")
    assert sorted(parsed.residues) == sorted(toy_template.residues)
    for seqnum, res in toy_template.residues.items():
        got = parsed.residues[seqnum]
        assert got.amino_acid_type == res.amino_acid_type
        for name, coord in res.atom_items():
            # PDB fixed-width precision: 3 decimals
            np.testing.assert_allclose(parsed.atom(seqnum, name), coord, atol=1e-3)
        assert [n for n, _ in got.atom_items()] == [n for n, _ in res.atom_items()]


def test_parse_requires_records():
    with pytest.raises(TemplateError):
        parse_template("HEADER  NOTHING\nEND\n", "A")
    with pytest.raises(TemplateError):
        parse_template("ATOM      1  CA  ALA B   1      0.000   0.000   0.000"
                       + " " * 20 + "\n", "A")


def test_parse_skips_unknown_residues(toy_pdb, caplog):
    hacked = toy_pdb.replace("ALA A 100", "UNK A 100")
    with caplog.at_level("WARNING"):
        parsed = parse_template(hacked, "A")
    assert 100 not in parsed.residues
    assert any("unknown residue" in r.message for r in caplog.records)


def test_parse_rejects_insertion_codes(toy_pdb):
    bad = []
    for line in toy_pdb.splitlines(keepends=True):
        if line.startswith("ATOM") and " 101 " in line:
            line = line[:26] + "A" + line[27:]
        bad.append(line)
    with pytest.raises(TemplateError):
        parse_template("".join(bad), "A")


def test_parse_altloc_highest_occupancy(toy_pdb):
    lines = [l for l in toy_pdb.splitlines(keepends=True) if l.startswith("ATOM")]
    target = next(l for l in lines if l[12:16].strip() == "CA" and int(l[22:26]) == 100)
    x, y, z = float(target[30:38]), float(target[38:46]), float(target[46:54])
    alt_a = target[:16] + "A" + target[17:54] + "  0.40" + target[60:]
    alt_b = (target[:16] + "B" + target[17:30]
             + f"{x + 0.03:8.3f}{y:8.3f}{z:8.3f}" + "  0.60" + target[60:])
    doctored = toy_pdb.replace(target, alt_a + alt_b)
    parsed = parse_template(doctored, "A")
    np.testing.assert_allclose(parsed.atom(100, "CA"), [x + 0.03, y, z], atol=1e-3)


def test_parse_records_gaps(toy_template):
    txt = "".join(
        line for line in write_template_pdb(toy_template).splitlines(keepends=True)
        if not (line.startswith("ATOM") and int(line[22:26]) in (105, 106))
    )
    parsed = parse_template(txt, "A")
    assert parsed.gaps == [(104, 107)]


def test_segment_spec_validation():
    SegmentSpec(438, 450, "SNNLDSKVGGNYN")
    with pytest.raises(TemplateError):
        SegmentSpec(438, 450, "SNN")
    with pytest.raises(TemplateError):
        SegmentSpec(438, 440, "SNN")  # too short
    with pytest.raises(TemplateError):
        SegmentSpec(438, 450, "SNNLDSKVGGNYX")


def test_apply_mutation_drops_interior(toy_template):
    seg = SegmentSpec(102, 109, "GGGGGGGG")
    mutated = apply_mutation(toy_template, seg)
    assert mutated.segment == seg
    # interior atoms gone, types replaced
    for pos in range(103, 109):
        res = mutated.residues[pos]
        assert res.amino_acid_type == "G"
        assert not res.backbone_atoms and not res.side_chain_atoms
    # anchors keep their halves
    assert set(mutated.residues[102].backbone_atoms) == {"N", "CA"}
    assert set(mutated.residues[109].backbone_atoms) == {"CA", "C", "O"}
    # fixed atoms elsewhere untouched
    np.testing.assert_array_equal(mutated.atom(100, "CA"), toy_template.atom(100, "CA"))
    fixed = mutated.fixed_atoms()
    assert not np.any((fixed.res > 102) & (fixed.res < 109))


def test_identity_mutation_equivalent(toy_template):
    seq = "".join(toy_template.residues[p].amino_acid_type for p in range(102, 110))
    mutated = apply_mutation(toy_template, SegmentSpec(102, 109, seq))
    for pos in range(103, 109):
        assert mutated.residues[pos].amino_acid_type == \
            toy_template.residues[pos].amino_acid_type
        assert not mutated.residues[pos].backbone_atoms


def test_apply_mutation_position_errors(toy_template):
    with pytest.raises(TemplateError):
        apply_mutation(toy_template, SegmentSpec(99, 105, "G" * 7))
    with pytest.raises(TemplateError):
        apply_mutation(toy_template, SegmentSpec(150, 160, "G" * 11))
    # the anchor needs a neighbour C on the left: segment at the very start fails
    with pytest.raises(TemplateError):
        apply_mutation(toy_template, SegmentSpec(100, 105, "G" * 6))


def test_missing_backbone_near_segment_errors(toy_template):
    # drop residue 104's C while segment 102-109 needs the region intact
    txt = "".join(
        line for line in write_template_pdb(toy_template).splitlines(keepends=True)
        if not (line.startswith("ATOM") and int(line[22:26]) == 110
                and line[12:16].strip() == "C")
    )
    parsed = parse_template(txt, "A")
    with pytest.raises(TemplateError, match="within 10 A"):
        apply_mutation(parsed, SegmentSpec(102, 109, "G" * 8))


def test_write_conformations_modes(toy_template):
    class Conf:
        def __init__(self, residues, conf_id):
            self.residues = residues
            self.conf_id = conf_id
            self.weight = 0.5
            self.total_energy = -1.25
            self.label = "reference"

    residues = [toy_template.residues[p] for p in sorted(toy_template.residues)]
    confs = [Conf(residues, 1), Conf(residues, 2)]
    multi = write_conformations(confs, mode="multi")
    assert multi.count("MODEL") == 2
    assert multi.count("REMARK  99 WEIGHT 0.5") == 2
    assert "REMARK  99 ENERGY -1.25" in multi
    singles = write_conformations(confs, mode="per-sample")
    assert len(singles) == 2 and all(s.startswith("REMARK") for s in singles)
    assert write_conformations([], mode="multi") == "END\n"
    with pytest.raises(ValueError):
        write_conformations(confs, mode="bogus")
    # models parse back at PDB precision
    parsed = parse_template(multi, "A")
    np.testing.assert_allclose(parsed.atom(100, "CA"),
                               toy_template.atom(100, "CA"), atol=1e-3)


def test_iter_backbone_dihedrals(toy_pdb):
    triples = list(iter_backbone_dihedrals(toy_pdb))
    assert len(triples) == 10  # 12 residues, ends excluded
    for aa, phi, psi in triples:
        # PDB 3-decimal coordinates shift torsions by up to ~0.1 degrees
        assert phi == pytest.approx(-60.0, abs=0.2)
        assert psi == pytest.approx(-45.0, abs=0.2)


def test_synthesize_matches_requested_dihedrals(toy_template):
    seqnums = sorted(toy_template.residues)
    for prev, cur, nxt in zip(seqnums, seqnums[1:], seqnums[2:]):
        from loopboltz.geometry import dihedral_angle
        phi = dihedral_angle(toy_template.atom(prev, "C"), toy_template.atom(cur, "N"),
                             toy_template.atom(cur, "CA"), toy_template.atom(cur, "C"))
        assert phi == pytest.approx(-60.0, abs=1e-9)
