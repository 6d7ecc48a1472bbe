"""Sequential Monte Carlo sampler for loop conformations.

The segment grows one residue per step, alternating between the left and
right ends (or strictly left-to-right).  Every step proposes all K grid
(phi, psi) pairs per particle, draws omega from its density, scores the
incremental energy, prunes dead growth directions through side-chain
pre-computation, and renormalizes; the population is reduced back to N by
optimal resampling whenever it overflows.  The last step solves the
three-residue analytic closure, spawning one intermediate particle per
closure solution.  Side chains are finalized per particle from the stored
joint candidates plus greedy draws for the bridge residues; particles whose
side chains cannot be completed end with weight zero.

Growth bookkeeping: a left step for residue i consumes (phi_i, psi_i,
omega_i) and places C_i, O_i, N_{i+1}, CA_{i+1}.  A right step for residue
j places C_j using the phi sampled by the previous right step (phi_{j+1}
rotates C_j about the N_{j+1}-CA_{j+1} axis), so each right step banks its
own phi for the next; at the closure the bank fixes the derived right
anchors (C and CA of the last bridge residue).

The candidate weight pass needs side-chain information only as a
feasibility gate (infinite energies come solely from clash bins), so it
runs clash checks exactly but defers energy values; survivors of the
resampling step are then materialized with exact stored-joint energies.

Determinism: all randomness flows through per-(step, particle) generators
spawned from the master seed, and reductions run in fixed particle order,
so results are bit-identical for any worker-thread count.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .closure import ClosureProblem, solve_closure
from .energy import AtomSet, ELEM_INDEX, EnergyModel, atom_code, exclusion_mask
from .geometry import IdealGeometry, max_ca_span, place_atoms, wrap_angles
from .residues import N_CHI, ResidueGeometry, build_sidechains_batch, sidechain_atom_names
from .resampling import optimal_resample, systematic_select
from .template import Template

log = logging.getLogger(__name__)

_TABLE_REACH = 8.0      # pairwise table range
_SC_REACH = 7.6         # farthest side-chain atom from its CA
_CLASH_REACH = 3.7      # largest clash-bin distance over pair types
_SPAN_SLACK = 0.08
_CHUNK = 2_000_000      # element budget for batched distance blocks


class ExtinctionError(RuntimeError):
    """Every growth direction died at some step."""

    def __init__(self, step_record):
        self.step_record = step_record
        super().__init__(
            f"population extinct at step {step_record.step} "
            f"(residue index {step_record.position}): {step_record.counts}")


@dataclass
class SamplerConfig:
    n_particles: int = 50000        # N
    n_joint: int = 25               # N_s stored joint side-chain candidates
    n_rotamer: int = 20             # n_s stored per-residue rotamer candidates
    seed: int = 0
    growth_order: str = "alternating"   # or "left-to-right"
    closure: bool = True                # open-chain toy mode when False
    sample_bridge_omega: bool = False   # otherwise bridge omegas sit at the mode
    threads: int = 1

    def __post_init__(self):
        if self.n_particles < 1 or self.n_joint < 1 or self.n_rotamer < 1:
            raise ValueError("n_particles, n_joint, n_rotamer must all be >= 1")
        if self.growth_order not in ("alternating", "left-to-right"):
            raise ValueError(f"unknown growth order {self.growth_order!r}")

    def as_dict(self):
        return {
            "n_particles": self.n_particles, "n_joint": self.n_joint,
            "n_rotamer": self.n_rotamer, "seed": self.seed,
            "growth_order": self.growth_order, "closure": self.closure,
            "sample_bridge_omega": self.sample_bridge_omega,
            "threads": self.threads,
        }


@dataclass
class StepRecord:
    step: int
    position: int
    side: str
    m_in: int
    m_out: int
    ess: float
    counts: dict

    def tsv(self):
        c = self.counts
        return (f"{self.step}\t{self.position}\t{self.side}\t{self.m_in}\t"
                f"{self.m_out}\t{self.ess:.2f}\t{c['rama']}\t{c['reach']}\t"
                f"{c['clash']}\t{c['sidechain']}\t{c['closure']}")

    @staticmethod
    def tsv_header():
        return ("step\tposition\tside\tM\tM_prime\tess\tdead_rama\tdead_reach\t"
                "dead_clash\tdead_sidechain\tdead_closure")


@dataclass
class Conformation:
    conf_id: int
    label: str
    residues: list                  # ResidueGeometry per covered position
    dihedrals: dict                 # seg index -> (phi, psi, omega-or-None)
    chi: dict                       # seg index -> tuple of chi angles
    weight: float
    total_energy: float
    increments: list                # charged Delta-H values, in charge order
    bridge: tuple                   # bridge segment indices (() in open mode)
    segment_start: int = 0


@dataclass
class WeightedSample:
    conformations: list
    provenance: dict

    def weights(self):
        return np.array([c.weight for c in self.conformations])


# -- growth plan -----------------------------------------------------------


@dataclass
class GrowthStep:
    index: int
    side: str            # "left" | "right_first" | "right"
    position: int        # segment index grown (0-based)
    rama_type: str
    omega_type: str | None
    is_closure: bool


def build_growth_plan(sequence: str, order: str, closure: bool):
    l = len(sequence)
    n_steps = l - 3
    slots = []
    if order == "left-to-right":
        slots = [("left", s) for s in range(n_steps)]
    else:
        left, right = 0, l - 1
        for j in range(n_steps):
            if j % 2 == 0:
                slots.append(("left", left))
                left += 1
            else:
                slots.append(("right_first" if right == l - 1 else "right", right))
                right -= 1
    steps = []
    for j, (side, s) in enumerate(slots):
        omega_type = None if side == "right_first" else sequence[s + 1]
        steps.append(GrowthStep(
            index=j, side=side, position=s, rama_type=sequence[s],
            omega_type=omega_type, is_closure=closure and j == n_steps - 1))
    left_grown = sum(1 for side, _ in slots if side == "left")
    bridge = (left_grown, left_grown + 1, left_grown + 2) if closure else ()
    return steps, bridge


# -- particle state ----------------------------------------------------------


@dataclass
class JointSet:
    """Stored joint side-chain candidates for one particle."""

    chi_by_res: dict                # seg index -> (n_joint, n_chi) array
    denergy: np.ndarray             # (n_joint,) cumulative side-chain Delta-H
    coords: np.ndarray              # (n_joint, S, 3)
    res: np.ndarray                 # (S,)
    elem: np.ndarray                # (S,)
    code: np.ndarray                # (S,)

    @classmethod
    def empty(cls):
        return cls({}, np.zeros(1), np.zeros((1, 0, 3)), np.zeros(0, np.int32),
                   np.zeros(0, np.int8), np.zeros(0, np.int8))

    @property
    def n_joint(self):
        return len(self.denergy)


@dataclass
class Particle:
    atoms: AtomSet
    index_map: dict                 # (seg index, atom name) -> row in atoms
    dihedrals: dict                 # seg index -> [phi, psi, omega]
    banked_phi: float | None
    left_front: int                 # residue index of the left tip CA
    right_front: int                # residue index of the right tip CA
    weight: float
    sc: JointSet
    charged: list                   # Delta-H values charged so far
    idx: int = 0

    def atom(self, pos, name):
        return self.atoms.coords[self.index_map[(pos, name)]]


def _root_particle() -> Particle:
    return Particle(atoms=AtomSet.empty(), index_map={}, dihedrals={},
                    banked_phi=None, left_front=0, right_front=-1, weight=1.0,
                    sc=JointSet.empty(), charged=[], idx=0)


class RunState:
    """Everything shared across steps: template context, plan, caches."""

    def __init__(self, template: Template, model: EnergyModel, config: SamplerConfig):
        if template.segment is None:
            raise ValueError("template carries no segment; call apply_mutation first")
        self.template = template
        self.model = model
        self.config = config
        self.geom = IdealGeometry()
        seg = template.segment
        self.seq = seg.sequence
        self.start = seg.start
        self.l = len(seg)
        self.steps, self.bridge = build_growth_plan(self.seq, config.growth_order,
                                                    config.closure)
        n = model.rama.n
        self.K = n * n
        vals = -180.0 + np.arange(n) * model.rama.spacing
        self.phi_flat = np.repeat(vals, n)
        self.psi_flat = np.tile(vals, n)
        self.neglog_flat = {t: model.rama.neg_log[t].reshape(-1)
                            for t in model.rama.neg_log}
        self.fixed = template.fixed_atoms()
        self.tree = cKDTree(self.fixed.coords) if len(self.fixed) else None
        self.span = max_ca_span(self.geom) + _SPAN_SLACK
        self.anchor = {
            "C_prev": np.asarray(template.atom(seg.start - 1, "C"), dtype=float),
            "N_0": np.asarray(template.atom(seg.start, "N"), dtype=float),
            "CA_0": np.asarray(template.atom(seg.start, "CA"), dtype=float),
            "CA_last": np.asarray(template.atom(seg.end, "CA"), dtype=float),
            "C_last": np.asarray(template.atom(seg.end, "C"), dtype=float),
            "N_next": np.asarray(template.atom(seg.end + 1, "N"), dtype=float),
        }
        self.next_type = template.residues[seg.end + 1].amino_acid_type
        self.rot_chi = {t: model.rotamers.chi(t) for t in set(self.seq)}
        from .closure import _canonical_unit_cached, _geom_key, _norm, _sub
        unit = _canonical_unit_cached(_geom_key(self.geom), 180.0)
        self.virtual_bond = _norm(_sub(unit[3], unit[0]))
        self.sc_meta_cache = {}

    def rng(self, *key):
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.config.seed, spawn_key=key))

    def context_near(self, center, particle: Particle, radius: float) -> AtomSet:
        """Fixed + placed atoms within `radius` of a point."""
        parts = []
        if self.tree is not None:
            idx = self.tree.query_ball_point(np.asarray(center, dtype=float), radius)
            if idx:
                idx = np.array(sorted(idx))
                f = self.fixed
                parts.append(AtomSet(f.coords[idx], f.res[idx], f.elem[idx],
                                     f.code[idx]))
        placed = particle.atoms
        if len(placed):
            d = np.linalg.norm(placed.coords - np.asarray(center), axis=1)
            keep = d < radius
            if keep.any():
                parts.append(AtomSet(placed.coords[keep], placed.res[keep],
                                     placed.elem[keep], placed.code[keep]))
        if not parts:
            return AtomSet.empty()
        return AtomSet.concat(parts)

    def seg_res(self, s):
        return self.start + s

    def meta_for(self, items):
        """(res, elem, code) arrays for (seg index, name) descriptors."""
        key = tuple(items)
        hit = self.sc_meta_cache.get(key)
        if hit is not None:
            return hit
        res = np.array([self.seg_res(s) for s, _ in items], dtype=np.int32)
        elem = np.array([ELEM_INDEX[n[0]] for _, n in items], dtype=np.int8)
        code = np.array([atom_code(n, self.seq[s]) for s, n in items], dtype=np.int8)
        self.sc_meta_cache[key] = (res, elem, code)
        return res, elem, code

    def get_atom(self, particle: Particle, pos: int, name: str):
        """Placed atom with template-anchor fallbacks."""
        row = particle.index_map.get((pos, name))
        if row is not None:
            return particle.atoms.coords[row]
        if pos == -1 and name == "C":
            return self.anchor["C_prev"]
        if pos == 0 and name in ("N", "CA"):
            return self.anchor["N_0" if name == "N" else "CA_0"]
        if pos == self.l - 1 and name in ("CA", "C"):
            return self.anchor["CA_last" if name == "CA" else "C_last"]
        if pos == self.l and name == "N":
            return self.anchor["N_next"]
        raise KeyError(f"atom ({pos}, {name}) not available")


# -- batched clash/energy kernels ---------------------------------------------


def _pair_values(state, coords_a, meta_a, coords_b, meta_b):
    """(K, m, M) scored pair energies (excluded pairs are 0)."""
    pw = state.model.pairwise
    res_a, elem_a, code_a = meta_a
    res_b, elem_b, code_b = meta_b
    excl = exclusion_mask(res_a, code_a, res_b, code_b)
    d = coords_a[:, :, None, :] - coords_b[None, None, :, :]
    dist = np.sqrt(np.sum(d * d, axis=-1))
    e = pw._padded[elem_a[:, None], elem_b[None, :], pw.bin_of(dist)]
    return np.where(excl[None, :, :], 0.0, e)


def _chunked(total, block_elems, inner):
    step = max(1, block_elems // max(inner, 1))
    for lo in range(0, total, step):
        yield lo, min(lo + step, total)


def _cross_sum(state, coords_a, meta_a, coords_b, meta_b):
    """(K,) scored sums of a batched group against a fixed group, chunked."""
    k, m = coords_a.shape[0], coords_a.shape[1]
    mb = len(coords_b)
    if mb == 0 or m == 0:
        return np.zeros(k)
    out = np.empty(k)
    for lo, hi in _chunked(k, _CHUNK, m * mb):
        out[lo:hi] = _pair_values(state, coords_a[lo:hi], meta_a,
                                  coords_b, meta_b).sum(axis=(1, 2))
    return out


def _cross_any_inf(state, coords_a, meta_a, coords_b, meta_b):
    """(K,) clash flags of a batched group against a fixed group, chunked."""
    k, m = coords_a.shape[0], coords_a.shape[1]
    mb = len(coords_b)
    if mb == 0 or m == 0:
        return np.zeros(k, dtype=bool)
    out = np.empty(k, dtype=bool)
    for lo, hi in _chunked(k, _CHUNK, m * mb):
        out[lo:hi] = np.isinf(
            _pair_values(state, coords_a[lo:hi], meta_a, coords_b, meta_b)
        ).any(axis=(1, 2))
    return out


# -- per-step candidate evaluation ---------------------------------------------


@dataclass
class StepDraws:
    omega: np.ndarray | None
    omega_logp: np.ndarray | None
    chi_noise: np.ndarray
    u_rotsel: np.ndarray
    u_jointsel: np.ndarray
    bridge_omega: np.ndarray | None


def _bridge_omega_type(state: RunState, col: int) -> str:
    r = state.bridge[0]
    nxt = r + 1 + col
    return state.seq[nxt] if nxt <= state.l - 1 else state.next_type


def _draw_step_randoms(state: RunState, step: GrowthStep, pidx: int) -> StepDraws:
    """Fixed consumption schedule per (step, particle); phases A and B agree."""
    rng = state.rng(0, step.index, pidx)
    k = state.K
    model = state.model
    if step.omega_type is not None:
        omega = model.omega.sample(step.omega_type, rng, k)
        omega_logp = model.omega.logdensity_vec(step.omega_type, omega)
    else:
        omega = omega_logp = None
    n_rot = len(state.rot_chi[step.rama_type])
    chi_noise = rng.standard_normal((k, n_rot)) * model.rotamers.first_chi_sd
    u_rotsel = rng.random(k)
    u_jointsel = rng.random(k)
    bridge_omega = None
    if step.is_closure:
        modes = np.array([model.omega.mode(_bridge_omega_type(state, c))
                          for c in range(3)])
        if state.config.sample_bridge_omega:
            z = rng.standard_normal((k, 3))
            u = rng.random((k, 3))
            bridge_omega = np.empty((k, 3))
            for col in range(3):
                mean = np.full(k, 180.0)
                if _bridge_omega_type(state, col) == "P":
                    mean = np.where(u[:, col] < model.omega.pro_cis_weight, 0.0, 180.0)
                bridge_omega[:, col] = mean + model.omega.sd * z[:, col]
            bridge_omega = wrap_angles(bridge_omega)
        else:
            bridge_omega = np.broadcast_to(modes, (k, 3)).copy()
    return StepDraws(omega, omega_logp, chi_noise, u_rotsel, u_jointsel, bridge_omega)


def _place_candidates(state: RunState, particle: Particle, step: GrowthStep,
                      phis, psis, omegas):
    """New backbone atoms for all candidates: (K, m, 3), names, new-tip CA."""
    geom = state.geom
    s = step.position
    kk = len(phis)
    if step.side == "left":
        c_prev = state.get_atom(particle, s - 1, "C")
        n_s = state.get_atom(particle, s, "N")
        ca_s = state.get_atom(particle, s, "CA")
        c = place_atoms(c_prev, n_s, ca_s, geom.bond_ca_c, geom.angle_n_ca_c, phis)
        n1 = place_atoms(n_s, ca_s, c, geom.bond_c_n, geom.angle_ca_c_n, psis)
        ca1 = place_atoms(ca_s, c, n1, geom.bond_n_ca, geom.angle_c_n_ca, omegas)
        o = place_atoms(n1, np.broadcast_to(ca_s, c.shape), c, geom.bond_c_o,
                        geom.angle_ca_c_o, np.full(kk, 180.0))
        atoms = np.stack([c, o, n1, ca1], axis=1)
        return atoms, [(s, "C"), (s, "O"), (s + 1, "N"), (s + 1, "CA")], ca1
    if step.side == "right_first":
        n = place_atoms(state.anchor["N_next"], state.anchor["C_last"],
                        state.anchor["CA_last"], geom.bond_n_ca, geom.angle_n_ca_c,
                        psis)
        return n[:, None, :], [(s, "N")], None
    c_next = state.get_atom(particle, s + 1, "C")
    ca_next = state.get_atom(particle, s + 1, "CA")
    n_next = state.get_atom(particle, s + 1, "N")
    c = place_atoms(c_next, ca_next, n_next, geom.bond_c_n, geom.angle_c_n_ca,
                    np.full(kk, particle.banked_phi))
    ca = place_atoms(np.broadcast_to(ca_next, c.shape),
                     np.broadcast_to(n_next, c.shape), c, geom.bond_ca_c,
                     geom.angle_ca_c_n, omegas)
    n = place_atoms(np.broadcast_to(n_next, c.shape), c, ca, geom.bond_n_ca,
                    geom.angle_n_ca_c, psis)
    o = place_atoms(np.broadcast_to(n_next, c.shape), ca, c, geom.bond_c_o,
                    geom.angle_ca_c_o, np.full(kk, 180.0))
    atoms = np.stack([c, ca, n, o], axis=1)
    return atoms, [(s, "C"), (s, "CA"), (s, "N"), (s, "O")], ca


def _reach_mask(state: RunState, particle: Particle, step: GrowthStep, new_ca):
    """Mask of candidates whose tip can still connect to the far end."""
    if not state.config.closure or new_ca is None:
        return None
    s = step.position
    if step.side == "left":
        tip, far_idx = s + 1, particle.right_front if particle.right_front >= 0 \
            else state.l - 1
    else:
        tip, far_idx = s, particle.left_front
    links = abs(far_idx - tip)
    if links <= 0:
        return None
    far = state.get_atom(particle, far_idx, "CA")
    d = np.linalg.norm(new_ca - np.asarray(far), axis=1)
    return d <= links * state.span


def _backbone_for_sc(state, particle, step, new_atoms, names):
    """Per-candidate (N, CA, C) of the grown residue; (nk, 3) each."""
    s = step.position
    nk = len(new_atoms)
    pos_of = {pn: i for i, pn in enumerate(names)}

    def get(name):
        i = pos_of.get((s, name))
        if i is not None:
            return new_atoms[:, i, :]
        return np.broadcast_to(state.get_atom(particle, s, name), (nk, 3))

    return get("N"), get("CA"), get("C")


def _rotamer_chi(state: RunState, step: GrowthStep, draws: StepDraws, ks):
    """(len(ks), n_rot, n_chi) chi matrices with first-angle noise applied."""
    base = state.rot_chi[step.rama_type]
    n_rot, n_chi = base.shape
    chi = np.broadcast_to(base, (len(ks), n_rot, n_chi)).copy()
    if n_chi:
        chi[:, :, 0] = wrap_angles(chi[:, :, 0] + draws.chi_noise[ks])
    return chi


def _build_rotamer_atoms(state, step, bb, chi):
    """(nk, n_rot, n_at, 3) side-chain atoms per candidate x rotamer."""
    nk, n_rot, _ = chi.shape
    n, ca, c = bb
    rep = lambda a: np.repeat(a, n_rot, axis=0)
    coords = build_sidechains_batch(rep(n), rep(ca), rep(c), step.rama_type,
                                    chi.reshape(nk * n_rot, -1), state.geom)
    return coords.reshape(nk, n_rot, -1, 3)


def _sc_names_meta(state: RunState, s: int):
    names = sidechain_atom_names(state.seq[s])
    return names, state.meta_for([(s, n) for n in names])


@dataclass
class StepEval:
    parent: int
    log_inc: np.ndarray          # per surviving entry
    cand_k: np.ndarray
    sol_idx: np.ndarray          # -1 for non-closure steps
    delta_h: np.ndarray          # charged Delta-H per entry
    counts: dict


def _joint_flat(sc: JointSet, cols=None):
    """Joint atoms flattened to (nj*S, 3) with per-joint column groups."""
    coords = sc.coords if cols is None else sc.coords[:, cols, :]
    res = sc.res if cols is None else sc.res[cols]
    elem = sc.elem if cols is None else sc.elem[cols]
    code = sc.code if cols is None else sc.code[cols]
    nj, s = coords.shape[0], coords.shape[1]
    flat = coords.reshape(nj * s, 3)
    meta = (np.tile(res, nj), np.tile(elem, nj), np.tile(code, nj))
    groups = [(j * s, (j + 1) * s) for j in range(nj)]
    return flat, meta, groups


def _grouped_any_inf(state, coords_a, meta_a, flat_b, meta_b, groups):
    """(K, n_groups) clash flags against grouped context columns, chunked."""
    k, m = coords_a.shape[0], coords_a.shape[1]
    mb = len(flat_b)
    out = np.empty((k, len(groups)), dtype=bool)
    if mb == 0 or m == 0:
        out[:] = False
        return out
    for lo, hi in _chunked(k, _CHUNK, m * mb):
        vals = np.isinf(_pair_values(state, coords_a[lo:hi], meta_a, flat_b, meta_b))
        any_bad = vals.any(axis=1)
        for gi, (a, b) in enumerate(groups):
            out[lo:hi, gi] = any_bad[:, a:b].any(axis=1)
    return out


def _sidechain_feasible(state, particle, step, draws, new_atoms, names, ctx, ks):
    """Exact clash-based feasibility of side-chain completion per candidate.

    A direction is feasible iff some (stored joint, new rotamer) pairing is
    clash-free against the context, the new backbone, and each other.
    """
    s = step.position
    res_type = state.seq[s]
    sc = particle.sc
    nk = len(ks)
    meta_new = state.meta_for(tuple(names))
    center = new_atoms[ks].reshape(-1, 3).mean(axis=0)
    spread = float(np.linalg.norm(new_atoms[ks].reshape(-1, 3) - center,
                                  axis=1).max()) if nk else 0.0

    # stored joints against the new backbone atoms
    if sc.coords.shape[1]:
        dmin = np.linalg.norm(sc.coords - center, axis=2).min(axis=0)
        cols = np.flatnonzero(dmin < spread + _CLASH_REACH + 0.2)
        if len(cols):
            flat, meta_b, groups = _joint_flat(sc, cols)
            joint_ok = ~_grouped_any_inf(state, new_atoms[ks], meta_new, flat,
                                         meta_b, groups)
        else:
            joint_ok = np.ones((nk, sc.n_joint), dtype=bool)
    else:
        joint_ok = np.ones((nk, sc.n_joint), dtype=bool)

    # new-residue rotamers against context and own new backbone
    sc_names, meta_rot = _sc_names_meta(state, s)
    if not sc_names:
        return joint_ok.any(axis=1)
    chi = _rotamer_chi(state, step, draws, ks)
    bb = _backbone_for_sc(state, particle, step, new_atoms[ks], names)
    rot_atoms = _build_rotamer_atoms(state, step, bb, chi)
    nk_, n_rot, n_at, _ = rot_atoms.shape
    flat_rot = rot_atoms.reshape(nk, n_rot * n_at, 3)
    meta_flat = (np.tile(meta_rot[0], n_rot), np.tile(meta_rot[1], n_rot),
                 np.tile(meta_rot[2], n_rot))
    groups_rot = [(r * n_at, (r + 1) * n_at) for r in range(n_rot)]
    bad_ctx = _grouped_any_inf(state, flat_rot, meta_flat, ctx.coords,
                               (ctx.res, ctx.elem, ctx.code), groups_rot) \
        if len(ctx) else np.zeros((nk, n_rot), dtype=bool)
    # own-backbone pairing is per candidate: diagonal blocks only
    bad_own = np.zeros((nk, n_rot), dtype=bool)
    if new_atoms.shape[1]:
        pw = state.model.pairwise
        excl = exclusion_mask(meta_flat[0], meta_flat[2], meta_new[0], meta_new[2])
        for lo, hi in _chunked(nk, _CHUNK, n_rot * n_at * new_atoms.shape[1]):
            d = flat_rot[lo:hi, :, None, :] - new_atoms[ks][lo:hi, None, :, :]
            bins = pw.bin_of(np.sqrt(np.sum(d * d, axis=-1)))
            e = pw._padded[meta_flat[1][:, None], meta_new[1][None, :], bins]
            bad = np.isinf(e) & ~excl[None, :, :]
            bad_own[lo:hi] = bad.reshape(hi - lo, n_rot, n_at, -1).any(axis=(2, 3))
    rot_ok = ~(bad_ctx | bad_own)

    feasible = joint_ok.any(axis=1) & rot_ok.any(axis=1)
    if not sc.coords.shape[1] or not feasible.any():
        return feasible

    # rotamer x joint cross clashes, bounding-sphere prefiltered
    dmin = np.linalg.norm(sc.coords - center, axis=2).min(axis=0)
    cols = np.flatnonzero(dmin < spread + _SC_REACH + _CLASH_REACH + 0.5)
    if not len(cols):
        return feasible
    joint_near = sc.coords[:, cols, :]
    joint_c = joint_near.mean(axis=1)
    joint_r = np.linalg.norm(joint_near - joint_c[:, None, :], axis=-1).max(axis=1)
    rot_c = rot_atoms.mean(axis=2)
    rot_r = np.linalg.norm(rot_atoms - rot_c[:, :, None, :], axis=-1).max(axis=2)
    d_c = np.linalg.norm(rot_c[:, :, None, :] - joint_c[None, None, :, :], axis=-1)
    maybe = d_c <= rot_r[:, :, None] + joint_r[None, None, :] + _CLASH_REACH
    ok_pair = np.ones((nk, n_rot, sc.n_joint), dtype=bool)
    need_rows = np.flatnonzero((maybe & rot_ok[:, :, None] & joint_ok[:, None, :])
                               .any(axis=(1, 2)))
    if len(need_rows):
        pw = state.model.pairwise
        elem_sc = sc.elem[cols]
        for i in need_rows:
            d = rot_atoms[i][:, :, None, None, :] - joint_near[None, None, :, :, :]
            bins = pw.bin_of(np.sqrt(np.sum(d * d, axis=-1)))
            e = pw._padded[np.asarray(meta_rot[1])[None, :, None, None],
                           elem_sc[None, None, None, :], bins]
            ok_pair[i] = ~np.isinf(e).any(axis=(1, 3))
    combo = rot_ok[:, :, None] & joint_ok[:, None, :] & ok_pair
    return combo.any(axis=(1, 2))


def _evaluate_step(state: RunState, particle: Particle, step: GrowthStep) -> StepEval:
    model = state.model
    K = state.K
    draws = _draw_step_randoms(state, step, particle.idx)
    counts = {"rama": 0, "reach": 0, "clash": 0, "sidechain": 0, "closure": 0}

    neglog_rama = state.neglog_flat[step.rama_type]
    alive = np.isfinite(neglog_rama)
    counts["rama"] = int(K - alive.sum())
    log_inc = np.where(alive, -model.beta1 * neglog_rama, -np.inf)
    delta_h = np.where(alive, model.beta1 * neglog_rama, np.inf)
    if draws.omega is not None:
        log_inc = log_inc + (model.beta1 - 1.0) * draws.omega_logp
        delta_h = delta_h - model.beta1 * draws.omega_logp

    new_atoms, names, new_ca = _place_candidates(
        state, particle, step, state.phi_flat, state.psi_flat, draws.omega)

    reach = _reach_mask(state, particle, step, new_ca)
    if reach is not None and not step.is_closure:
        counts["reach"] = int((alive & ~reach).sum())
        alive &= reach

    center = new_atoms.reshape(-1, 3).mean(axis=0)
    spread = float(np.linalg.norm(new_atoms.reshape(-1, 3) - center, axis=1).max())
    radius = spread + _SC_REACH + _TABLE_REACH + 0.5
    ctx = state.context_near(center, particle, radius)

    meta_new = state.meta_for(tuple(names))
    if model.beta2 != 0.0:
        e_bb = _cross_sum(state, new_atoms, meta_new, ctx.coords,
                          (ctx.res, ctx.elem, ctx.code))
        if len(names) > 1:
            e_bb = e_bb + model.pairwise.internal_sum_batch(new_atoms, meta_new)
        clash = ~np.isfinite(e_bb)
        counts["clash"] = int((alive & clash).sum())
        alive &= ~clash
        safe_e = np.where(np.isfinite(e_bb), e_bb, 0.0)
        log_inc = np.where(alive, log_inc - model.beta2 * safe_e, -np.inf)
        delta_h = np.where(alive, delta_h + model.beta2 * safe_e, np.inf)

    if alive.any() and model.beta4 != 0.0:
        ks = np.flatnonzero(alive)
        feas = _sidechain_feasible(state, particle, step, draws, new_atoms, names,
                                   ctx, ks)
        dead = ks[~feas]
        counts["sidechain"] = len(dead)
        alive[dead] = False
        log_inc[dead] = -np.inf
        delta_h[dead] = np.inf

    if not step.is_closure:
        ks = np.flatnonzero(alive)
        return StepEval(particle.idx, log_inc[ks], ks,
                        np.full(len(ks), -1, dtype=np.int64), delta_h[ks], counts)

    entries_k, entries_sol, entries_log, entries_dh = [], [], [], []
    ks = np.flatnonzero(alive)
    closed_k = set()
    for k in ks:
        sols, dhs = _closure_solutions(state, particle, step, int(k), new_atoms[k],
                                       names, draws)
        if sols is None or not len(sols):
            continue
        for si, dh_c in enumerate(dhs):
            if not math.isfinite(dh_c):
                continue
            entries_k.append(int(k))
            entries_sol.append(si)
            entries_log.append(log_inc[k] - dh_c)
            entries_dh.append(delta_h[k] + dh_c)
            closed_k.add(int(k))
    counts["closure"] = int(len(ks)) - len(closed_k)
    return StepEval(particle.idx, np.array(entries_log, dtype=float),
                    np.array(entries_k, dtype=np.int64),
                    np.array(entries_sol, dtype=np.int64),
                    np.array(entries_dh, dtype=float), counts)


# -- closure -----------------------------------------------------------------


def _derive_right_anchor(state, particle, step, k, atom_at):
    """C and CA of the last bridge residue, from the banked phi and omega."""
    r = state.bridge[0]
    geom = state.geom

    def get(pos, name):
        hit = atom_at.get((pos, name))
        return hit if hit is not None else state.get_atom(particle, pos, name)

    if r + 2 == state.l - 1:
        return (state.anchor["CA_last"], state.anchor["C_last"],
                state.anchor["N_next"], None)
    c_a = get(r + 3, "C")
    ca_a = get(r + 3, "CA")
    n_a = get(r + 3, "N")
    banked = state.phi_flat[k] if step.position == r + 3 else particle.banked_phi
    omega3 = float(_bridge_omegas(state, particle, step, k)[2])
    c3 = place_atoms(c_a, ca_a, n_a, geom.bond_c_n, geom.angle_c_n_ca,
                     np.array([banked]))[0]
    ca3 = place_atoms(np.atleast_2d(ca_a), np.atleast_2d(n_a), np.atleast_2d(c3),
                      geom.bond_ca_c, geom.angle_ca_c_n, np.array([omega3]))[0]
    return ca3, c3, n_a, (ca3, c3)


def _bridge_omegas(state, particle, step, k):
    draws = getattr(particle, "_draws_cache", None)
    if draws is not None and draws[0] == step.index:
        return draws[1].bridge_omega[k]
    d = _draw_step_randoms(state, step, particle.idx)
    particle._draws_cache = (step.index, d)
    return d.bridge_omega[k]


def _closure_solutions(state, particle, step, k, new_atoms_k, names, draws):
    """Solve the bridge for one candidate; returns (solutions, per-sol dH)."""
    r = state.bridge[0]
    atom_at = {pn: new_atoms_k[i] for i, pn in enumerate(names)}
    particle._draws_cache = (step.index, draws)

    def get(pos, name):
        hit = atom_at.get((pos, name))
        return hit if hit is not None else state.get_atom(particle, pos, name)

    left = np.stack([np.asarray(get(r - 1, "C"), dtype=float),
                     np.asarray(get(r, "N"), dtype=float),
                     np.asarray(get(r, "CA"), dtype=float)])
    ca3, c3, n_next3, derived = _derive_right_anchor(state, particle, step, k, atom_at)

    d13 = float(np.linalg.norm(np.asarray(ca3) - left[2]))
    if d13 > 2.0 * state.virtual_bond + 0.2 or d13 < 1e-6:
        return None, []

    omegas = draws.bridge_omega[k]
    problem = ClosureProblem(
        left_anchor=left,
        right_anchor=np.stack([np.asarray(ca3, dtype=float),
                               np.asarray(c3, dtype=float),
                               np.asarray(n_next3, dtype=float)]),
        bridge_types=(state.seq[r], state.seq[r + 1], state.seq[r + 2]),
        omegas=(float(omegas[0]), float(omegas[1])), geom=state.geom)
    sols, sol_atoms = solve_closure(problem, with_atoms=True)
    if len(sols) == 0:
        return None, []

    model = state.model
    bridge_center = 0.5 * (left[2] + np.asarray(ca3))
    ctx = state.context_near(bridge_center, particle,
                             d13 * 0.5 + 6.0 + _TABLE_REACH + 0.5)
    meta_new = state.meta_for(tuple(names))
    dhs = []
    for i in range(len(sols)):
        coords, meta = _bridge_atom_set(state, particle, sol_atoms[i], derived,
                                        atom_at)
        if model.beta2 != 0.0:
            e = _cross_sum(state, coords[None], meta, ctx.coords,
                           (ctx.res, ctx.elem, ctx.code))[0]
            e += _cross_sum(state, coords[None], meta, new_atoms_k, meta_new)[0]
            e += model.pairwise.internal_sum_batch(coords[None], meta)[0]
            if not math.isfinite(e):
                dhs.append(math.inf)
                continue
        else:
            e = 0.0
        dihedral_term = 0.0
        if model.score_closure_dihedrals:
            for j in range(3):
                dihedral_term += model.rama.neg_log_prob(
                    state.seq[r + j], sols[i][2 * j], sols[i][2 * j + 1],
                    strict=False)
            dihedral_term -= model.omega.logdensity(_bridge_omega_type(state, 0),
                                                    float(omegas[0]))
            dihedral_term -= model.omega.logdensity(_bridge_omega_type(state, 1),
                                                    float(omegas[1]))
            if derived is not None:
                dihedral_term -= model.omega.logdensity(
                    _bridge_omega_type(state, 2), float(omegas[2]))
        dh = model.beta1 * dihedral_term + _scaled(model.beta2, e)
        dhs.append(dh if math.isfinite(dh) else math.inf)
    return sols, dhs


def _bridge_atom_set(state, particle, sol_atoms, derived, atom_at):
    """Every new bridge backbone atom (with carbonyl oxygens) for charging."""
    r = state.bridge[0]
    geom = state.geom
    c1, n2, ca2, c2, n3 = (np.asarray(a, dtype=float) for a in sol_atoms)

    def get(pos, name):
        hit = atom_at.get((pos, name))
        return np.asarray(hit if hit is not None
                          else state.get_atom(particle, pos, name), dtype=float)

    items = [(r, "C", c1), (r + 1, "N", n2), (r + 1, "CA", ca2),
             (r + 1, "C", c2), (r + 2, "N", n3)]
    ca_r = get(r, "CA")
    o_r = place_atoms(n2, np.atleast_2d(ca_r), np.atleast_2d(c1), geom.bond_c_o,
                      geom.angle_ca_c_o, np.array([180.0]))[0]
    o_r1 = place_atoms(n3, np.atleast_2d(ca2), np.atleast_2d(c2), geom.bond_c_o,
                       geom.angle_ca_c_o, np.array([180.0]))[0]
    items += [(r, "O", o_r), (r + 1, "O", o_r1)]
    if derived is not None:
        ca3, c3 = (np.asarray(a, dtype=float) for a in derived)
        n_after = get(r + 3, "N")
        o_r2 = place_atoms(np.atleast_2d(n_after), np.atleast_2d(ca3),
                           np.atleast_2d(c3), geom.bond_c_o, geom.angle_ca_c_o,
                           np.array([180.0]))[0]
        items += [(r + 2, "CA", ca3), (r + 2, "C", c3), (r + 2, "O", o_r2)]
    coords = np.stack([it[2] for it in items])
    meta = state.meta_for(tuple((it[0], it[1]) for it in items))
    return coords, meta


# -- materialization -----------------------------------------------------------


def _append_atoms(state, particle, items):
    """New Particle atom arrays with `items` = [(pos, name, coord)] appended."""
    coords = np.array([it[2] for it in items], dtype=float).reshape(-1, 3)
    meta = state.meta_for(tuple((p, n) for p, n, _ in items))
    added = AtomSet(coords, meta[0].copy(), meta[1].copy(), meta[2].copy())
    atoms = AtomSet.concat([particle.atoms, added])
    index_map = dict(particle.index_map)
    base = len(particle.atoms)
    for i, (p, n, _) in enumerate(items):
        index_map[(p, n)] = base + i
    return atoms, index_map


def _exact_sidechain_update(state, particle, step, draws, k, new_atoms_k, names,
                            new_backbone_extra=None):
    """Exact stored-joint update for one surviving candidate.

    Returns (JointSet, feasible) after combining the parent's joints with the
    new residue's kept rotamers, including both cross terms.
    new_backbone_extra optionally adds the closure bridge atoms so the joint
    energies stay consistent on the final step.
    """
    s = step.position
    cfg = state.config
    model = state.model
    sc = particle.sc
    sc_names, meta_rot = _sc_names_meta(state, s)
    center = new_atoms_k.mean(axis=0)
    radius = float(np.linalg.norm(new_atoms_k - center, axis=1).max()) \
        + _SC_REACH + _TABLE_REACH + 0.5
    ctx = state.context_near(center, particle, radius)
    meta_new = state.meta_for(tuple(names))

    extra_coords = meta_extra = None
    if new_backbone_extra is not None:
        extra_coords, meta_extra = new_backbone_extra

    # new-rotamer energies against context + the candidate's new atoms
    chi = _rotamer_chi(state, step, draws, np.array([k]))[0]       # (n_rot, n_chi)
    n_rot = len(chi)
    if sc_names:
        bb = _backbone_for_sc(state, particle, step, new_atoms_k[None], names)
        rot_atoms = _build_rotamer_atoms(state, step, bb, chi[None])[0]  # (n_rot, A, 3)
        e_rot = _cross_sum(state, rot_atoms, meta_rot, ctx.coords,
                           (ctx.res, ctx.elem, ctx.code))
        e_rot += _cross_sum(state, rot_atoms, meta_rot, new_atoms_k, meta_new)
        if extra_coords is not None:
            e_rot += _cross_sum(state, rot_atoms, meta_rot, extra_coords, meta_extra)
        e_rot = _scaled(model.beta4, e_rot)
    else:
        rot_atoms = np.zeros((1, 0, 3))
        e_rot = np.zeros(1)
        n_rot = 1
        chi = np.zeros((1, 0))

    # trim rotamers to n_s
    finite_rot = np.isfinite(e_rot)
    if not finite_rot.any():
        return None, False
    m_keep = min(cfg.n_rotamer, int(finite_rot.sum()))
    if m_keep < int(finite_rot.sum()) or True:
        wts = np.where(finite_rot, np.exp(-(e_rot - e_rot[finite_rot].min())), 0.0)
        kept_rot = systematic_select(wts, m_keep, float(draws.u_rotsel[k]))
    e_rot_k = e_rot[kept_rot]
    rot_atoms_k = rot_atoms[kept_rot]
    chi_k = chi[kept_rot]

    # old joints against the new backbone atoms (cross term 1)
    nj = sc.n_joint
    if sc.coords.shape[1]:
        flat, meta_b, groups = _joint_flat(sc)
        vals = _pair_values(state, new_atoms_k[None], meta_new, flat, meta_b)[0]
        cross1 = _scaled(model.beta4,
                         np.array([vals[:, a:b].sum() for a, b in groups]))
        if extra_coords is not None:
            vals2 = _pair_values(state, extra_coords[None], meta_extra, flat,
                                 meta_b)[0]
            cross1 = cross1 + _scaled(
                model.beta4, np.array([vals2[:, a:b].sum() for a, b in groups]))
    else:
        cross1 = np.zeros(nj)

    # new rotamers against old joint side chains (cross term 2)
    if sc.coords.shape[1] and rot_atoms_k.shape[1]:
        pw = state.model.pairwise
        nr, n_at = rot_atoms_k.shape[0], rot_atoms_k.shape[1]
        d = rot_atoms_k[:, :, None, None, :] - sc.coords[None, None, :, :, :]
        bins = pw.bin_of(np.sqrt(np.sum(d * d, axis=-1)))
        e = pw._padded[np.asarray(meta_rot[1])[None, :, None, None],
                       sc.elem[None, None, None, :], bins]
        cross2 = _scaled(model.beta4, e.sum(axis=(1, 3)).T)   # (nj, nr)
    else:
        cross2 = np.zeros((nj, len(kept_rot)))

    total = (sc.denergy[:, None] + cross1[:, None] + e_rot_k[None, :] + cross2)
    finite = np.isfinite(total)
    if not finite.any():
        return None, False
    m_joint = min(cfg.n_joint, int(finite.sum()))
    flat_tot = total.reshape(-1)
    wts = np.where(np.isfinite(flat_tot),
                   np.exp(-(flat_tot - flat_tot[np.isfinite(flat_tot)].min())), 0.0)
    sel = systematic_select(wts, m_joint, float(draws.u_jointsel[k]))
    j_sel, r_sel = np.unravel_index(sel, total.shape)

    # assemble the new joint set
    new_chi = {}
    for pos, arr in sc.chi_by_res.items():
        new_chi[pos] = arr[j_sel]
    if chi_k.shape[1] or state.seq[s] in ("A",):
        new_chi[s] = chi_k[r_sel]
    elif sc_names:
        new_chi[s] = chi_k[r_sel]
    if sc.coords.shape[1] or rot_atoms_k.shape[1]:
        old = sc.coords[j_sel] if sc.coords.shape[1] else \
            np.zeros((len(sel), 0, 3))
        new = rot_atoms_k[r_sel] if rot_atoms_k.shape[1] else \
            np.zeros((len(sel), 0, 3))
        coords = np.concatenate([old, new], axis=1)
        res = np.concatenate([sc.res, meta_rot[0]]) if rot_atoms_k.shape[1] \
            else sc.res
        elem = np.concatenate([sc.elem, meta_rot[1]]) if rot_atoms_k.shape[1] \
            else sc.elem
        code = np.concatenate([sc.code, meta_rot[2]]) if rot_atoms_k.shape[1] \
            else sc.code
    else:
        coords = np.zeros((len(sel), 0, 3))
        res, elem, code = sc.res, sc.elem, sc.code
    joints = JointSet(new_chi, flat_tot[sel], coords, res, elem, code)
    return joints, True


def _materialize(state, particle, step, k, sol_idx, weight, log_entry_dh):
    """Build the child particle for one surviving candidate."""
    draws = _draw_step_randoms(state, step, particle.idx)
    phis = state.phi_flat
    psis = state.psi_flat
    new_atoms, names, _ = _place_candidates(state, particle, step, phis, psis,
                                            draws.omega)
    new_atoms_k = new_atoms[k]
    s = step.position

    extra = None
    bridge_items = []
    if step.is_closure and sol_idx >= 0:
        sols, dhs = _closure_solutions(state, particle, step, k, new_atoms_k,
                                       names, draws)
        sol = sols[sol_idx]
        atom_at = {pn: new_atoms_k[i] for i, pn in enumerate(names)}
        ca3, c3, n_next3, derived = _derive_right_anchor(state, particle, step, k,
                                                         atom_at)
        problem = ClosureProblem(
            left_anchor=np.stack([
                np.asarray(atom_at.get((state.bridge[0] - 1, "C"),
                                       state.get_atom(particle, state.bridge[0] - 1, "C")),
                           dtype=float),
                np.asarray(atom_at.get((state.bridge[0], "N"),
                                       state.get_atom(particle, state.bridge[0], "N")),
                           dtype=float),
                np.asarray(atom_at.get((state.bridge[0], "CA"),
                                       state.get_atom(particle, state.bridge[0], "CA")),
                           dtype=float)]),
            right_anchor=np.stack([np.asarray(ca3, dtype=float),
                                   np.asarray(c3, dtype=float),
                                   np.asarray(n_next3, dtype=float)]),
            omegas=(float(draws.bridge_omega[k][0]), float(draws.bridge_omega[k][1])),
            geom=state.geom)
        _, sol_atoms = solve_closure(problem, with_atoms=True)
        coords, meta = _bridge_atom_set(state, particle, sol_atoms[sol_idx], derived,
                                        {pn: new_atoms_k[i] for i, pn in enumerate(names)})
        extra = (coords, meta)
        r = state.bridge[0]
        bnames = [(r, "C"), (r + 1, "N"), (r + 1, "CA"), (r + 1, "C"), (r + 2, "N"),
                  (r, "O"), (r + 1, "O")]
        if derived is not None:
            bnames += [(r + 2, "CA"), (r + 2, "C"), (r + 2, "O")]
        bridge_items = [(p, n, coords[i]) for i, (p, n) in enumerate(bnames)]

    joints, ok = _exact_sidechain_update(state, particle, step, draws, k,
                                         new_atoms_k, names,
                                         new_backbone_extra=extra)
    if not ok:
        raise AssertionError("materialized candidate lost side-chain feasibility")

    items = [(p, n, new_atoms_k[i]) for i, (p, n) in enumerate(names)] + bridge_items
    atoms, index_map = _append_atoms(state, particle, items)

    dihedrals = {p: list(v) for p, v in particle.dihedrals.items()}
    entry = dihedrals.setdefault(s, [None, None, None])
    entry[0] = float(phis[k])
    entry[1] = float(psis[k])
    banked = particle.banked_phi
    left_front, right_front = particle.left_front, particle.right_front
    if step.side == "left":
        entry[2] = float(draws.omega[k])
        left_front = s + 1
    elif step.side == "right_first":
        banked = float(phis[k])
        right_front = state.l - 1
    else:
        dihedrals.setdefault(s, entry)
        entry[2] = None
        # the sampled omega is the peptide between s and s+1
        dihedrals[s][2] = float(draws.omega[k])
        banked = float(phis[k])
        right_front = s

    charged = list(particle.charged) + [float(log_entry_dh)]

    if step.is_closure and sol_idx >= 0:
        r = state.bridge[0]
        sols, _ = _closure_solutions(state, particle, step, k, new_atoms_k, names,
                                     draws)
        sol = sols[sol_idx]
        om = draws.bridge_omega[k]
        for j in range(3):
            ent = dihedrals.setdefault(r + j, [None, None, None])
            ent[0] = float(sol[2 * j])
            ent[1] = float(sol[2 * j + 1])
        dihedrals[r][2] = float(om[0])
        dihedrals[r + 1][2] = float(om[1])
        if r + 2 != state.l - 1:
            dihedrals[r + 2][2] = float(om[2])

    child = Particle(atoms=atoms, index_map=index_map, dihedrals=dihedrals,
                     banked_phi=banked, left_front=left_front,
                     right_front=right_front, weight=weight, sc=joints,
                     charged=charged)
    return child


# -- the run loop ----------------------------------------------------------------


def _scaled(beta: float, e):
    """beta * e with the 0 * inf = 0 convention (a zero coefficient switches
    the term off entirely, clashes included)."""
    if beta == 0.0:
        return np.zeros_like(e) if isinstance(e, np.ndarray) else 0.0
    return beta * e


def _logsumexp(v):
    m = np.max(v)
    if not np.isfinite(m):
        return -np.inf
    return m + math.log(np.exp(v - m).sum())


def _run_phase_a(state, population, step):
    cfg = state.config
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            return list(pool.map(lambda p: _evaluate_step(state, p, step),
                                 population))
    return [_evaluate_step(state, p, step) for p in population]


def propagate_population(state: RunState, population, step: GrowthStep):
    """One propagate(+closure)+resample step; returns (population, record)."""
    cfg = state.config
    evals = _run_phase_a(state, population, step)

    parents, ks, sols, logs, dhs = [], [], [], [], []
    counts = {"rama": 0, "reach": 0, "clash": 0, "sidechain": 0, "closure": 0}
    for pi, ev in enumerate(evals):
        for key in counts:
            counts[key] += ev.counts[key]
        if len(ev.cand_k) == 0:
            continue
        logw = math.log(population[pi].weight) if population[pi].weight > 0 else -np.inf
        parents.append(np.full(len(ev.cand_k), pi, dtype=np.int64))
        ks.append(ev.cand_k)
        sols.append(ev.sol_idx)
        logs.append(ev.log_inc + logw)
        dhs.append(ev.delta_h)
    record = StepRecord(step.index, step.position, step.side,
                        m_in=len(population), m_out=0, ess=0.0, counts=counts)
    if not parents:
        raise ExtinctionError(record)
    parents = np.concatenate(parents)
    ks = np.concatenate(ks)
    sols = np.concatenate(sols)
    logs = np.concatenate(logs)
    dhs = np.concatenate(dhs)

    lz = _logsumexp(logs)
    if not np.isfinite(lz):
        raise ExtinctionError(record)
    w = np.exp(logs - lz)
    w = w / w.sum()
    m_prime = len(w)
    record.m_out = m_prime
    record.ess = float(1.0 / np.sum(w * w))

    if m_prime > cfg.n_particles:
        rng = state.rng(1, step.index)
        keep_idx, new_w = optimal_resample(w, cfg.n_particles, rng)
    else:
        keep_idx, new_w = np.arange(m_prime), w

    survivors = [(int(parents[i]), int(ks[i]), int(sols[i]), float(new_w[j]),
                  float(dhs[i]))
                 for j, i in enumerate(keep_idx)]

    def build(args):
        j, (pi, k, sol, wgt, dh) = args
        child = _materialize(state, population[pi], step, k, sol, wgt, dh)
        child.idx = j
        return child

    tasks = list(enumerate(survivors))
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            children = list(pool.map(build, tasks))
    else:
        children = [build(t) for t in tasks]
    return children, record


def finalize_particle(state: RunState, particle: Particle, label, conf_id):
    """Draw final side chains; weight zero when no completion exists."""
    model = state.model
    cfg = state.config
    rng = state.rng(2, particle.idx)
    sc = particle.sc
    weight = particle.weight
    increments = list(particle.charged)
    chi_final = {}

    # re-weight stored joints with the bridge-backbone cross term, then draw one
    denergy = sc.denergy.copy()
    if state.config.closure and sc.coords.shape[1]:
        r = state.bridge[0]
        rows = [particle.index_map[(p, n)]
                for (p, n) in particle.index_map
                if r <= p <= r + 2]
        if rows:
            b = particle.atoms
            rows = np.array(sorted(rows))
            bset = (b.coords[rows], (b.res[rows], b.elem[rows], b.code[rows]))
            flat, meta_b, groups = _joint_flat(sc)
            vals = _pair_values(state, bset[0][None], bset[1], flat, meta_b)[0]
            cross = np.array([vals[:, a:b_].sum() for a, b_ in groups])
            denergy = denergy + _scaled(model.beta4, cross)
    finite = np.isfinite(denergy)
    if not finite.any():
        return _assemble(state, particle, label, conf_id, 0.0, {}, increments)
    p = np.where(finite, np.exp(-(denergy - denergy[finite].min())), 0.0)
    p = p / p.sum()
    j = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum()))
    j = min(j, len(p) - 1)
    increments.append(float(denergy[j]))
    for pos, arr in sc.chi_by_res.items():
        chi_final[pos] = tuple(float(v) for v in arr[j])
    chosen_sc = (sc.coords[j], (sc.res, sc.elem, sc.code))

    # greedy bridge side chains
    bridge_sc = []
    if state.config.closure:
        r = state.bridge[0]
        for pos in (r, r + 1, r + 2):
            res_type = state.seq[pos]
            names = sidechain_atom_names(res_type)
            if not names:
                chi_final[pos] = ()
                continue
            base = state.rot_chi[res_type]
            n_rot, n_chi = base.shape
            chi = base.copy()
            if n_chi:
                noise = rng.standard_normal(n_rot) * model.rotamers.first_chi_sd
                chi[:, 0] = wrap_angles(chi[:, 0] + noise)
            n = state.get_atom(particle, pos, "N")
            ca = state.get_atom(particle, pos, "CA")
            c = state.get_atom(particle, pos, "C")
            atoms = build_sidechains_batch(
                np.tile(n, (n_rot, 1)), np.tile(ca, (n_rot, 1)),
                np.tile(c, (n_rot, 1)), res_type, chi, state.geom)
            meta = state.meta_for(tuple((pos, nm) for nm in names))
            center = np.asarray(ca, dtype=float)
            ctx = state.context_near(center, particle,
                                     _SC_REACH + _TABLE_REACH + 0.5)
            e = _cross_sum(state, atoms, meta, ctx.coords,
                           (ctx.res, ctx.elem, ctx.code))
            e += _cross_sum(state, atoms, meta, chosen_sc[0], chosen_sc[1])
            for prev_coords, prev_meta in bridge_sc:
                e += _cross_sum(state, atoms, meta, prev_coords, prev_meta)
            e = _scaled(model.beta4, e)
            ok = np.isfinite(e)
            if not ok.any():
                return _assemble(state, particle, label, conf_id, 0.0, {},
                                 increments)
            pr = np.where(ok, np.exp(-(e - e[ok].min())), 0.0)
            pr = pr / pr.sum()
            ri = int(np.searchsorted(np.cumsum(pr), rng.random() * pr.sum()))
            ri = min(ri, n_rot - 1)
            increments.append(float(e[ri]))
            chi_final[pos] = tuple(float(v) for v in chi[ri])
            bridge_sc.append((atoms[ri], meta))

    # attach the chosen joint chi values and coordinates
    return _assemble(state, particle, label, conf_id, weight, chi_final,
                     increments, chosen_sc=chosen_sc, bridge_sc=bridge_sc)


def _assemble(state, particle, label, conf_id, weight, chi_final, increments,
              chosen_sc=None, bridge_sc=None):
    seg = state.template.segment
    residues = []
    sc_by_res = {}
    if chosen_sc is not None:
        coords, (res, elem, code) = chosen_sc
        for i in range(len(res)):
            sc_by_res.setdefault(int(res[i]), []).append(coords[i])
    if bridge_sc:
        for coords, meta in bridge_sc:
            for i in range(len(meta[0])):
                sc_by_res.setdefault(int(meta[0][i]), []).append(coords[i])

    dihedrals = {}
    for s in range(state.l):
        pos = state.seg_res(s)
        bb = {}
        for name in ("N", "CA", "C", "O"):
            row = particle.index_map.get((s, name))
            if row is not None:
                bb[name] = particle.atoms.coords[row].copy()
            else:
                try:
                    bb[name] = np.asarray(state.template.atom(pos, name))
                except KeyError:
                    pass
        sc_names = sidechain_atom_names(state.seq[s])
        sc_coords = sc_by_res.get(pos, [])
        side = list(zip(sc_names, sc_coords)) if len(sc_coords) == len(sc_names) \
            else []
        if bb or side:
            residues.append(ResidueGeometry(state.seq[s], bb, side, seqnum=pos))
        d = particle.dihedrals.get(s)
        if d is not None:
            dihedrals[s] = (d[0], d[1], d[2])
    return Conformation(conf_id=conf_id, label=label, residues=residues,
                        dihedrals=dihedrals,
                        chi={state.seg_res(p): v for p, v in chi_final.items()},
                        weight=weight,
                        total_energy=float(sum(increments)) if weight > 0 else math.inf,
                        increments=increments, bridge=tuple(
                            state.seg_res(b) for b in state.bridge),
                        segment_start=seg.start)


def run_smc(template: Template, model: EnergyModel, config: SamplerConfig,
            label: str = "sample"):
    """Full SMC run; returns (WeightedSample, [StepRecord])."""
    state = RunState(template, model, config)
    population = [_root_particle()]
    records = []
    for step in state.steps:
        population, record = propagate_population(state, population, step)
        records.append(record)
        log.info("step %d (%s residue %d): M'=%d ess=%.1f",
                 step.index, step.side, step.position, record.m_out, record.ess)

    cfg = state.config
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            confs = list(pool.map(
                lambda t: finalize_particle(state, t[1], label, t[0]),
                enumerate(population)))
    else:
        confs = [finalize_particle(state, p, label, i)
                 for i, p in enumerate(population)]

    live = [c for c in confs if c.weight > 0]
    dead = len(confs) - len(live)
    total = sum(c.weight for c in live)
    if total <= 0:
        raise ExtinctionError(StepRecord(len(state.steps), -1, "finalize",
                                         len(population), 0, 0.0,
                                         {"rama": 0, "reach": 0, "clash": 0,
                                          "sidechain": dead, "closure": 0}))
    for i, c in enumerate(live):
        c.weight = c.weight / total
        c.conf_id = i
    provenance = {
        "config": config.as_dict(),
        "checksums": dict(model.checksums),
        "label": label,
        "segment": {"start": template.segment.start, "end": template.segment.end,
                    "sequence": template.segment.sequence,
                    "chain": template.chain},
        "finalize_failures": dead,
    }
    return WeightedSample(live, provenance), records
