"""Energy data tables: file formats, readers/writers, and stand-in generators.

The sampler's energy terms are table-driven so published parameter sets can
be dropped in.  The generators here produce documented stand-ins:

* Ramachandran grids: uniform, a smooth multi-basin synthetic distribution,
  or empirical counts from a user-supplied PDB corpus with Laplace smoothing.
* A Lennard-Jones 12-6 pairwise table over C/N/O/S classes built from
  standard van der Waals radii, capped at +-10 kcal/mol with repulsion above
  +10 marked as an infeasible clash (sentinel INF).
* A rotamer list with curated trans/gauche combinations per type.

All files are tab-separated text; see the write_* functions for the exact
row layouts.
"""

from __future__ import annotations

import hashlib
import math
import os

import numpy as np

ELEMENTS = ("C", "N", "O", "S")
VDW_RADIUS = {"C": 1.70, "N": 1.625, "O": 1.48, "S": 1.78}
LJ_WELL_DEPTH = {"C": 0.105, "N": 0.170, "O": 0.210, "S": 0.250}

PAIR_BIN_WIDTH = 0.1
PAIR_MAX_DISTANCE = 8.0
CLASH_ENERGY = 10.0  # kcal/mol; repulsion above this is an infeasible clash

AMINO_ACIDS_1 = tuple("ACDEFGHIKLMNPQRSTVWY")

# curated stand-in rotamer positions (degrees).  Serine carries the standard
# three single-dihedral positions; multi-chi types take trans/gauche products.
_G = (-65.0, -177.0, 62.0)


def _product(*axes):
    out = [()]
    for axis in axes:
        out = [p + (v,) for p in out for v in axis]
    return out


ROTAMER_STANDIN: dict[str, list[tuple[float, ...]]] = {
    "S": [(65.6,), (-179.2,), (-63.8,)],
    "C": [(-65.0,), (-178.0,), (63.0,)],
    "T": [(62.0,), (-175.0,), (-61.0,)],
    "V": [(175.0,), (-64.0,), (63.0,)],
    "P": [(27.0, -35.0), (-27.0, 36.0)],
    "L": _product(_G, (175.0, 65.0, -60.0)),
    "I": _product((-61.0, -168.0, 60.0), (170.0, 66.0, -60.0)),
    "D": _product(_G, (-30.0, 0.0, 30.0)),
    "N": _product(_G, (-75.0, 0.0, 75.0)),
    "H": _product(_G, (-90.0, 90.0)),
    "F": _product(_G, (90.0, -90.0)),
    "Y": _product(_G, (90.0, -90.0)),
    "W": _product(_G, (-100.0, 100.0)),
    "M": _product(_G, (-65.0, 180.0, 65.0), (-75.0, 75.0, 180.0)),
    "E": _product(_G, (-65.0, 180.0, 65.0), (-30.0, 0.0, 30.0)),
    "Q": _product(_G, (-65.0, 180.0, 65.0), (-60.0, 0.0, 60.0)),
    "K": _product(_G, (-68.0, 180.0, 65.0), (180.0, -68.0, 65.0), (180.0, -65.0, 65.0)),
    "R": _product(_G, (-68.0, 180.0, 65.0), (180.0, -68.0, 65.0), (180.0, -85.0, 85.0)),
}

# synthetic Ramachandran basins: (weight, mu_phi, mu_psi, sd_phi, sd_psi)
_BASINS_GENERAL = (
    (0.40, -63.0, -43.0, 13.0, 13.0),
    (0.30, -118.0, 130.0, 19.0, 19.0),
    (0.20, -75.0, 150.0, 13.0, 13.0),
    (0.10, 57.0, 45.0, 11.0, 11.0),
)
_BASINS_GLY = (
    (0.25, -63.0, -43.0, 16.0, 16.0),
    (0.25, 63.0, 43.0, 16.0, 16.0),
    (0.25, -90.0, 150.0, 22.0, 22.0),
    (0.25, 90.0, -150.0, 22.0, 22.0),
)
_BASINS_PRO = (
    (0.55, -63.0, -35.0, 9.0, 13.0),
    (0.45, -63.0, 145.0, 9.0, 13.0),
)


def grid_values(n: int) -> np.ndarray:
    """Grid angle values -180, -180+360/n, ..., in degrees."""
    return -180.0 + np.arange(n) * (360.0 / n)


def gen_rama_uniform(n: int = 72) -> dict[str, np.ndarray]:
    cell = np.full((n, n), 1.0 / (n * n))
    return {aa: cell.copy() for aa in AMINO_ACIDS_1}


def gen_rama_basins(n: int = 72) -> dict[str, np.ndarray]:
    """Smooth synthetic per-type (phi, psi) distributions on an n x n grid."""
    vals = grid_values(n)
    phi, psi = np.meshgrid(vals, vals, indexing="ij")

    def wrapped_sq(delta, sd):
        d = np.mod(delta + 180.0, 360.0) - 180.0
        return (d / sd) ** 2

    def table(basins):
        t = np.zeros((n, n))
        for w, mp, ms, sp, ss in basins:
            t += w * np.exp(-0.5 * (wrapped_sq(phi - mp, sp) + wrapped_sq(psi - ms, ss)))
        return t / t.sum()

    general = table(_BASINS_GENERAL)
    out = {}
    for aa in AMINO_ACIDS_1:
        if aa == "G":
            out[aa] = table(_BASINS_GLY)
        elif aa == "P":
            out[aa] = table(_BASINS_PRO)
        else:
            out[aa] = general.copy()
    return out


def gen_rama_from_corpus(pdb_dir, n: int = 72, alpha: float = 1.0) -> dict[str, np.ndarray]:
    """Empirical (phi, psi) counts from every .pdb file in a directory,
    Laplace-smoothed with pseudo-count alpha."""
    from .template import iter_backbone_dihedrals  # local import: avoid cycle

    counts = {aa: np.full((n, n), float(alpha)) for aa in AMINO_ACIDS_1}
    spacing = 360.0 / n
    files = sorted(
        f for f in os.listdir(pdb_dir) if f.lower().endswith((".pdb", ".ent"))
    )
    if not files:
        raise FileNotFoundError(f"no PDB files found in {pdb_dir}")
    for fname in files:
        with open(os.path.join(pdb_dir, fname)) as fh:
            text = fh.read()
        for aa, phi, psi in iter_backbone_dihedrals(text):
            i = int(round((phi + 180.0) / spacing)) % n
            j = int(round((psi + 180.0) / spacing)) % n
            counts[aa][i, j] += 1.0
    return {aa: c / c.sum() for aa, c in counts.items()}


def gen_pairwise_lj():
    """LJ 12-6 energies over element-class pairs, binned by distance.

    Returns (energies, bin_width, max_distance) with energies shaped
    (4, 4, n_bins); np.inf marks clash bins.
    """
    n_bins = int(round(PAIR_MAX_DISTANCE / PAIR_BIN_WIDTH))
    mids = (np.arange(n_bins) + 0.5) * PAIR_BIN_WIDTH
    energies = np.zeros((len(ELEMENTS), len(ELEMENTS), n_bins))
    for i, a in enumerate(ELEMENTS):
        for j, b in enumerate(ELEMENTS):
            rm = VDW_RADIUS[a] + VDW_RADIUS[b]
            eps = math.sqrt(LJ_WELL_DEPTH[a] * LJ_WELL_DEPTH[b])
            c6 = (rm / mids) ** 6
            e = eps * (c6 * c6 - 2.0 * c6)
            e = np.where(e > CLASH_ENERGY, np.inf, np.clip(e, -CLASH_ENERGY, CLASH_ENERGY))
            energies[i, j] = e
    return energies, PAIR_BIN_WIDTH, PAIR_MAX_DISTANCE


# -- file IO -----------------------------------------------------------------

def write_rama(path, tables: dict[str, np.ndarray], spacing: float | None = None):
    """Rows: type, phi_index, psi_index, probability (tab-separated)."""
    n = next(iter(tables.values())).shape[0]
    spacing = spacing if spacing is not None else 360.0 / n
    with open(path, "w") as fh:
        fh.write(f"# grid_spacing_deg\t{spacing:g}\n")
        for aa in sorted(tables):
            t = tables[aa]
            if t.shape != (n, n):
                raise ValueError(f"table for {aa} has shape {t.shape}, expected ({n},{n})")
            for i in range(n):
                row = t[i]
                for j in range(n):
                    fh.write(f"{aa}\t{i}\t{j}\t{row[j]:.8g}\n")


def read_rama(path):
    """Returns (tables: dict type -> (n, n) probs, spacing_deg)."""
    spacing = None
    entries: dict[str, list] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("\t")
                if key == "grid_spacing_deg":
                    spacing = float(val)
                continue
            aa, i, j, p = line.split("\t")
            entries.setdefault(aa, []).append((int(i), int(j), float(p)))
    if spacing is None:
        raise ValueError(f"{path}: missing grid spacing header")
    n = int(round(360.0 / spacing))
    if abs(n * spacing - 360.0) > 1e-9:
        raise ValueError(f"{path}: spacing {spacing} does not divide 360")
    tables = {}
    for aa, rows in entries.items():
        t = np.zeros((n, n))
        for i, j, p in rows:
            t[i, j] = p
        tables[aa] = t
    return tables, spacing


def write_rotamers(path, rotamers: dict[str, list[tuple[float, ...]]],
                   probabilities: dict[str, list[float]] | None = None):
    """Rows: type, rotamer_index, chi1..chi4 (blank when absent), probability."""
    with open(path, "w") as fh:
        fh.write("# type\trotamer\tchi1\tchi2\tchi3\tchi4\tprobability\n")
        for aa in sorted(rotamers):
            rots = rotamers[aa]
            probs = probabilities[aa] if probabilities else [1.0 / len(rots)] * len(rots)
            for idx, (chis, p) in enumerate(zip(rots, probs)):
                cols = [f"{c:.6g}" for c in chis] + [""] * (4 - len(chis))
                fh.write(f"{aa}\t{idx}\t" + "\t".join(cols) + f"\t{p:.8g}\n")


def read_rotamers(path):
    """Returns (rotamers: dict type -> list of chi tuples, probs dict)."""
    rotamers: dict[str, list] = {}
    probs: dict[str, list] = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            aa, _idx, c1, c2, c3, c4, p = parts
            chis = tuple(float(c) for c in (c1, c2, c3, c4) if c != "")
            rotamers.setdefault(aa, []).append(chis)
            probs.setdefault(aa, []).append(float(p))
    return rotamers, probs


def write_pairwise(path, energies, bin_width, max_distance):
    """Rows: type_a, type_b, bin_low, bin_high, energy (INF marks a clash)."""
    n_bins = energies.shape[2]
    with open(path, "w") as fh:
        fh.write(f"# bin_width\t{bin_width:g}\n")
        fh.write(f"# max_distance\t{max_distance:g}\n")
        for i, a in enumerate(ELEMENTS):
            for j, b in enumerate(ELEMENTS):
                if j < i:
                    continue
                for k in range(n_bins):
                    e = energies[i, j, k]
                    val = "INF" if math.isinf(e) else f"{e:.8g}"
                    fh.write(
                        f"{a}\t{b}\t{k * bin_width:.6g}\t{(k + 1) * bin_width:.6g}\t{val}\n"
                    )


def read_pairwise(path):
    """Returns (energies (4, 4, n_bins), bin_width, max_distance)."""
    bin_width = max_distance = None
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("\t")
                if key == "bin_width":
                    bin_width = float(val)
                elif key == "max_distance":
                    max_distance = float(val)
                continue
            a, b, lo, hi, e = line.split("\t")
            rows.append((a, b, float(lo), math.inf if e == "INF" else float(e)))
    if bin_width is None or max_distance is None:
        raise ValueError(f"{path}: missing bin_width/max_distance header")
    n_bins = int(round(max_distance / bin_width))
    idx = {e: i for i, e in enumerate(ELEMENTS)}
    energies = np.zeros((len(ELEMENTS), len(ELEMENTS), n_bins))
    seen = np.zeros((len(ELEMENTS), len(ELEMENTS), n_bins), dtype=bool)
    for a, b, lo, e in rows:
        if a not in idx or b not in idx:
            raise ValueError(f"{path}: unknown atom type pair {a}-{b}")
        k = int(round(lo / bin_width))
        energies[idx[a], idx[b], k] = e
        energies[idx[b], idx[a], k] = e
        seen[idx[a], idx[b], k] = seen[idx[b], idx[a], k] = True
    if not seen.all():
        raise ValueError(f"{path}: incomplete pairwise table")
    return energies, bin_width, max_distance


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def generate_default_tables(out_dir, rama_style: str = "basins", n: int = 72,
                            pdb_corpus=None):
    """Write a complete, loadable table set into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    if pdb_corpus is not None:
        tables = gen_rama_from_corpus(pdb_corpus, n=n)
    elif rama_style == "uniform":
        tables = gen_rama_uniform(n)
    elif rama_style == "basins":
        tables = gen_rama_basins(n)
    else:
        raise ValueError(f"unknown rama style {rama_style!r}")
    write_rama(os.path.join(out_dir, "rama.tsv"), tables)
    write_rotamers(os.path.join(out_dir, "rotamers.tsv"), ROTAMER_STANDIN)
    energies, bw, md = gen_pairwise_lj()
    write_pairwise(os.path.join(out_dir, "pairwise.tsv"), energies, bw, md)
    return [os.path.join(out_dir, f) for f in ("rama.tsv", "rotamers.tsv", "pairwise.tsv")]
