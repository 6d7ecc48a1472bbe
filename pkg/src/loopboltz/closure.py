"""Analytic tripeptide loop closure.

Solves for the six free backbone torsions (phi, psi of three consecutive
bridge residues) that join a placed left chain to fixed right-side anchors
with ideal bond geometry and fixed peptide omegas.

The chain's two free rigid peptide units plus the middle C-alpha position
give three rotational unknowns: sigma (rotation of the CA triangle about the
fixed CA1->CA3 axis) and tau1, tau2 (spins of the two units about their
virtual CA->CA bonds).  Each pivot's N-CA-C joint angle yields one equation
that is bilinear in the cosines/sines of exactly two unknowns:

    E1(sigma, tau1) = 0,   E2(tau1, tau2) = 0,   E3(sigma, tau2) = 0.

Half-tangent substitution turns E1/E2 into quadratics whose resultant in
tau1 is a quartic in tan(tau2/2); its Sylvester resultant with E3 collapses
the system to a single trigonometric polynomial h(sigma) of degree <= 12.
h is sampled on a uniform grid, recovered exactly by FFT, and its roots read
off the unit circle of the companion spectrum.  Every candidate is polished
by Newton iteration and must pass a forward-rebuild junction check before it
is returned, so spurious roots are filtered by construction.

Hot paths use plain tuple arithmetic instead of numpy: the solver runs once
per candidate growth direction inside the sampler, so per-call overhead
matters more than vector width here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .geometry import GeometryError, IdealGeometry

__all__ = ["ClosureProblem", "solve_closure", "rebuild_bridge", "junction_ok"]

_FFT_SAMPLES = 32  # trig degree of h is <= 12, so 32 samples are alias-free
_ROOT_CIRCLE_TOL = 2e-3
_PREFILTER_TOL = 1e-3
_NEWTON_TOL = 1e-12
_DEDUPE_TOL = 1e-5  # degrees

JUNCTION_DIST_TOL = 1e-3  # Angstrom
JUNCTION_ANGLE_TOL = 0.1  # degrees


# -- scalar 3-vector helpers (tuples in, tuples out) ------------------------

def _sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _add(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def _scale(a, s):
    return (a[0] * s, a[1] * s, a[2] * s)


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _cross(a, b):
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def _norm(a):
    return math.sqrt(_dot(a, a))


def _unit(a):
    n = _norm(a)
    if n < 1e-12:
        raise GeometryError("zero-length direction")
    return _scale(a, 1.0 / n)


def _nerf(a, b, c, bond, angle_deg, torsion_deg):
    """Scalar NeRF: place d bonded to c; same conventions as geometry.place_atom."""
    ang = math.radians(angle_deg)
    tor = -math.radians(torsion_deg)
    bc = _unit(_sub(c, b))
    ab = _sub(b, a)
    n = _cross(ab, bc)
    nn = _norm(n)
    if nn < 1e-9:
        raise GeometryError("collinear reference atoms")
    n = _scale(n, 1.0 / nn)
    m = _cross(n, bc)
    sa = math.sin(ang)
    d0 = -bond * math.cos(ang)
    d1 = bond * math.cos(tor) * sa
    d2 = bond * math.sin(tor) * sa
    return (
        c[0] + d0 * bc[0] + d1 * m[0] + d2 * n[0],
        c[1] + d0 * bc[1] + d1 * m[1] + d2 * n[1],
        c[2] + d0 * bc[2] + d1 * m[2] + d2 * n[2],
    )


def _dihedral(p1, p2, p3, p4):
    """Scalar signed torsion in degrees, None when degenerate."""
    b1 = _sub(p2, p1)
    b2 = _sub(p3, p2)
    b3 = _sub(p4, p3)
    n1 = _cross(b1, b2)
    n2 = _cross(b2, b3)
    b2n = _norm(b2)
    if b2n < 1e-9 or _norm(n1) < 1e-9 or _norm(n2) < 1e-9:
        return None
    m1 = _cross(n1, _scale(b2, 1.0 / b2n))
    ang = math.degrees(math.atan2(_dot(m1, n2), _dot(n1, n2)))
    if ang <= -180.0:
        ang += 360.0
    return ang


def _rotate(axis, t, v):
    """Rodrigues rotation of v about unit axis by t radians."""
    ct, st = math.cos(t), math.sin(t)
    kv = _dot(axis, v)
    kxv = _cross(axis, v)
    return (
        v[0] * ct + kxv[0] * st + axis[0] * kv * (1 - ct),
        v[1] * ct + kxv[1] * st + axis[1] * kv * (1 - ct),
        v[2] * ct + kxv[2] * st + axis[2] * kv * (1 - ct),
    )


def _perp_reference(u):
    ref = (0.0, 0.0, 1.0) if abs(u[2]) < 0.9 else (1.0, 0.0, 0.0)
    return _unit(_sub(ref, _scale(u, _dot(u, ref))))


@dataclass(frozen=True)
class ClosureProblem:
    """Anchors and residue types for one bridge-closure instance.

    left_anchor: positions of the last three placed backbone atoms before the
        bridge, in chain order (C of the previous residue, N and CA of the
        first bridge residue).
    right_anchor: the first three determined backbone atoms at the right
        boundary, in chain order (CA and C of the last bridge residue, N of
        the residue after the bridge).
    bridge_types: one-letter amino-acid types of the three bridge residues.
    omegas: peptide torsions inside the bridge (residue1->2, residue2->3),
        fixed during the solve (default: trans).
    """

    left_anchor: np.ndarray
    right_anchor: np.ndarray
    bridge_types: tuple[str, str, str] = ("G", "G", "G")
    omegas: tuple[float, float] = (180.0, 180.0)
    geom: IdealGeometry = field(default_factory=IdealGeometry)

    def __post_init__(self):
        left = np.asarray(self.left_anchor, dtype=float).reshape(3, 3)
        right = np.asarray(self.right_anchor, dtype=float).reshape(3, 3)
        object.__setattr__(self, "left_anchor", left)
        object.__setattr__(self, "right_anchor", right)
        pts = np.vstack([left, right])
        if not np.all(np.isfinite(pts)):
            raise GeometryError("closure anchors must be finite")
        for block in (left, right):
            for i in range(3):
                for j in range(i + 1, 3):
                    d = block[i] - block[j]
                    if float(d @ d) < 1e-12:
                        raise GeometryError("coincident anchor atoms")


@lru_cache(maxsize=64)
def _canonical_unit_cached(geom_key, omega):
    geom = IdealGeometry(*geom_key)
    ca_a = (0.0, 0.0, 0.0)
    c_a = (geom.bond_ca_c, 0.0, 0.0)
    dummy = (0.0, 1.0, 0.0)
    n_b = _nerf(dummy, ca_a, c_a, geom.bond_c_n, geom.angle_ca_c_n, 0.0)
    ca_b = _nerf(ca_a, c_a, n_b, geom.bond_n_ca, geom.angle_c_n_ca, omega)
    return ca_a, c_a, n_b, ca_b


def _geom_key(geom: IdealGeometry):
    return (
        geom.bond_n_ca, geom.bond_ca_c, geom.bond_c_n, geom.bond_c_o,
        geom.bond_ca_cb, geom.angle_n_ca_c, geom.angle_ca_c_n,
        geom.angle_c_n_ca, geom.angle_ca_c_o, geom.angle_c_ca_cb,
        geom.torsion_n_c_ca_cb,
    )


def _map_unit(unit, origin, direction):
    """Rigidly place a canonical unit: CA_a at origin, virtual bond along
    `direction`, deterministic spin-zero convention.  Returns (C_a, N_b)."""
    ca_a, c_a, n_b, ca_b = unit
    w_hat = _unit(_sub(ca_b, ca_a))
    ca = _sub(c_a, ca_a)
    y_unit = _unit(_sub(ca, _scale(w_hat, _dot(ca, w_hat))))
    z_unit = _cross(w_hat, y_unit)
    m = _perp_reference(direction)
    z_to = _cross(direction, m)

    def apply(v):
        rel = _sub(v, ca_a)
        comp = (_dot(rel, w_hat), _dot(rel, y_unit), _dot(rel, z_unit))
        return (
            origin[0] + comp[0] * direction[0] + comp[1] * m[0] + comp[2] * z_to[0],
            origin[1] + comp[0] * direction[1] + comp[1] * m[1] + comp[2] * z_to[1],
            origin[2] + comp[0] * direction[2] + comp[1] * m[2] + comp[2] * z_to[2],
        )

    return apply(c_a), apply(n_b)


def _rot_coeffs(axis, v):
    """Rodrigues split: R(axis, t) v = a0 + ac*cos(t) + as*sin(t)."""
    a0 = _scale(axis, _dot(axis, v))
    return a0, _sub(v, a0), _cross(axis, v)


def _pair_matrix(fixed_triplet, moving_triplet, cos_theta):
    """3x3 coefficients of dot(u(alpha), v(beta)) - cos_theta over the basis
    {1, cos, sin} x {1, cos, sin}; row index is alpha, column beta."""
    c = [[_dot(u, v) for v in moving_triplet] for u in fixed_triplet]
    c[0][0] -= cos_theta
    return c


def _quad_from_row(v0, v1, v2):
    """E(beta) = v0 + v1 cos + v2 sin as half-tangent quadratic (x^2, x, 1)."""
    return v0 - v1, 2.0 * v2, v0 + v1


def _fix_first(m, alpha):
    """Collapse the alpha (row) index of a 3x3 trig matrix at a fixed angle."""
    ca, sa = math.cos(alpha), math.sin(alpha)
    return tuple(m[0][j] + m[1][j] * ca + m[2][j] * sa for j in range(3))


def _eval_bilinear(m, alpha, beta):
    v0, v1, v2 = _fix_first(m, alpha)
    return v0 + v1 * math.cos(beta) + v2 * math.sin(beta)


def _quad_roots(c2, c1, c0, scale):
    """Real roots of c2 x^2 + c1 x + c0 as angles, plus pi on degree drop."""
    roots = []
    eps = 1e-12 * max(scale, 1e-30)
    if abs(c2) <= eps:
        if abs(c1) > eps:
            roots.append(2.0 * math.atan(-c0 / c1))
        roots.append(math.pi)
        return roots
    disc = c1 * c1 - 4.0 * c2 * c0
    if disc < -1e-9 * max(scale * scale, 1e-30):
        return roots
    sq = math.sqrt(max(disc, 0.0))
    roots.append(2.0 * math.atan((-c1 + sq) / (2.0 * c2)))
    roots.append(2.0 * math.atan((-c1 - sq) / (2.0 * c2)))
    return roots


# half-tangent images of {1, cos, sin} after multiplying by (1 + x^2)
_HALF_TAN = np.array([[1.0, 0.0, 1.0], [1.0, 0.0, -1.0], [0.0, 2.0, 0.0]])

_SIGMAS = np.arange(_FFT_SAMPLES) * (2.0 * math.pi / _FFT_SAMPLES)
_COS_S = np.cos(_SIGMAS)
_SIN_S = np.sin(_SIGMAS)


class _ClosureSystem:
    """Base configuration plus the three bilinear constraint matrices."""

    def __init__(self, problem: ClosureProblem):
        geom = problem.geom
        la = problem.left_anchor
        ra = problem.right_anchor
        c_prev, n1, ca1 = tuple(la[0]), tuple(la[1]), tuple(la[2])
        ca3, c3, n_next = tuple(ra[0]), tuple(ra[1]), tuple(ra[2])
        self.problem = problem
        self.geom = geom
        self.feasible = False

        key = _geom_key(geom)
        unit1 = _canonical_unit_cached(key, problem.omegas[0])
        unit2 = _canonical_unit_cached(key, problem.omegas[1])
        r1 = _norm(_sub(unit1[3], unit1[0]))
        r2 = _norm(_sub(unit2[3], unit2[0]))

        d13 = _norm(_sub(ca3, ca1))
        if d13 < 1e-6 or d13 > r1 + r2 or d13 < abs(r1 - r2):
            return
        e_hat = _scale(_sub(ca3, ca1), 1.0 / d13)
        a = (r1 * r1 - r2 * r2 + d13 * d13) / (2.0 * d13)
        rho_sq = r1 * r1 - a * a
        if rho_sq <= 1e-12:
            return
        rho = math.sqrt(rho_sq)

        n1_dir = _sub(n1, ca1)
        ex = _sub(n1_dir, _scale(e_hat, _dot(e_hat, n1_dir)))
        ex = _perp_reference(e_hat) if _norm(ex) < 1e-9 else _unit(ex)

        ca2 = _add(ca1, _add(_scale(e_hat, a), _scale(ex, rho)))
        u1 = _unit(_sub(ca2, ca1))
        u2 = _unit(_sub(ca3, ca2))
        c1_0, n2_0 = _map_unit(unit1, ca1, u1)
        c2_0, n3_0 = _map_unit(unit2, ca2, u2)

        cos_theta = math.cos(math.radians(geom.angle_n_ca_c))
        neg_e = _scale(e_hat, -1.0)
        # R_e(sigma)^T applied to the fixed end vectors
        self.m1 = _pair_matrix(
            _rot_coeffs(neg_e, _unit(_sub(n1, ca1))),
            _rot_coeffs(u1, _unit(_sub(c1_0, ca1))),
            cos_theta,
        )
        self.m2 = _pair_matrix(
            _rot_coeffs(u1, _unit(_sub(n2_0, ca2))),
            _rot_coeffs(u2, _unit(_sub(c2_0, ca2))),
            cos_theta,
        )
        self.m3 = _pair_matrix(
            _rot_coeffs(neg_e, _unit(_sub(c3, ca3))),
            _rot_coeffs(u2, _unit(_sub(n3_0, ca3))),
            cos_theta,
        )

        self.e_hat = e_hat
        self.u1 = u1
        self.u2 = u2
        self.ca1 = ca1
        self.ca2_0 = ca2
        self.ca3 = ca3
        self.c1_0 = c1_0
        self.n2_0 = n2_0
        self.c2_0 = c2_0
        self.n3_0 = n3_0
        # bipolynomial coefficients of E2 over tan-half variables (tau1, tau2)
        self.p2_poly = _HALF_TAN.T @ np.asarray(self.m2) @ _HALF_TAN
        self.scale = float(np.max(np.abs(self.m2))) + 1e-30
        self.feasible = True

    # -- elimination ------------------------------------------------------

    def h_samples(self):
        """The eliminated function h(sigma) on the FFT grid (vectorized)."""
        m1 = np.asarray(self.m1)
        m3 = np.asarray(self.m3)
        # quadratic-in-tan(tau1/2) coefficients, one per sigma sample
        v = m1[0][:, None] + np.outer(m1[1], _COS_S) + np.outer(m1[2], _SIN_S)
        p2, p1, p0 = v[0] - v[1], 2.0 * v[2], v[0] + v[1]
        q = self.p2_poly  # q[i, j]: tau1 power i, tau2 power j
        a_t = np.multiply.outer(p2, q[0]) - np.multiply.outer(p0, q[2])
        b_t = np.multiply.outer(p2, q[1]) - np.multiply.outer(p1, q[2])
        c_t = np.multiply.outer(p1, q[0]) - np.multiply.outer(p0, q[1])
        r12 = _polymul_last(a_t, a_t) - _polymul_last(b_t, c_t)  # quartic in t2
        w = m3[0][:, None] + np.outer(m3[1], _COS_S) + np.outer(m3[2], _SIN_S)
        r2, r1, r0 = w[0] - w[1], 2.0 * w[2], w[0] + w[1]
        return _resultant_quartic_quadratic(r12, r2, r1, r0)

    def residuals(self, x):
        sigma, tau1, tau2 = x
        return (
            _eval_bilinear(self.m1, sigma, tau1),
            _eval_bilinear(self.m2, tau1, tau2),
            _eval_bilinear(self.m3, sigma, tau2),
        )

    def newton(self, x):
        sigma, tau1, tau2 = x
        tol = _NEWTON_TOL * self.scale
        for _ in range(30):
            f1 = _eval_bilinear(self.m1, sigma, tau1)
            f2 = _eval_bilinear(self.m2, tau1, tau2)
            f3 = _eval_bilinear(self.m3, sigma, tau2)
            if max(abs(f1), abs(f2), abs(f3)) < tol:
                return sigma, tau1, tau2
            j = np.array(
                [
                    [_eval_dalpha(self.m1, sigma, tau1), _eval_dbeta(self.m1, sigma, tau1), 0.0],
                    [0.0, _eval_dalpha(self.m2, tau1, tau2), _eval_dbeta(self.m2, tau1, tau2)],
                    [_eval_dalpha(self.m3, sigma, tau2), 0.0, _eval_dbeta(self.m3, sigma, tau2)],
                ]
            )
            try:
                step = np.linalg.solve(j, np.array([f1, f2, f3]))
            except np.linalg.LinAlgError:
                return None
            if not np.all(np.isfinite(step)) or np.max(np.abs(step)) > 1.0:
                return None
            sigma -= step[0]
            tau1 -= step[1]
            tau2 -= step[2]
        f = self.residuals((sigma, tau1, tau2))
        return (sigma, tau1, tau2) if max(abs(v) for v in f) < 1e-9 * self.scale else None

    # -- reconstruction ----------------------------------------------------

    def atoms(self, sigma, tau1, tau2):
        """Bridge atoms (C1, N2, CA2, C2, N3) for one solution triple."""
        ca1, ca3 = self.ca1, self.ca3

        def spin1(p):
            return _add(ca1, _rotate(self.e_hat, sigma, _rotate(self.u1, tau1, _sub(p, ca1))))

        def spin2(p):
            q = _add(ca3, _rotate(self.u2, tau2, _sub(p, ca3)))
            return _add(ca1, _rotate(self.e_hat, sigma, _sub(q, ca1)))

        c1 = spin1(self.c1_0)
        n2 = spin1(self.n2_0)
        ca2 = _add(ca1, _rotate(self.e_hat, sigma, _sub(self.ca2_0, ca1)))
        c2 = spin2(self.c2_0)
        n3 = spin2(self.n3_0)
        return np.array([c1, n2, ca2, c2, n3])


def _eval_dalpha(m, alpha, beta):
    ca, sa = math.cos(alpha), math.sin(alpha)
    cb, sb = math.cos(beta), math.sin(beta)
    return sum((-sa * m[1][j] + ca * m[2][j]) * f for j, f in enumerate((1.0, cb, sb)))


def _eval_dbeta(m, alpha, beta):
    v0, v1, v2 = _fix_first(m, alpha)
    return -v1 * math.sin(beta) + v2 * math.cos(beta)


def _polymul_last(a, b):
    """Multiply polynomials stored along the last axis (lowest power first)."""
    n = a.shape[-1] + b.shape[-1] - 1
    out = np.zeros(a.shape[:-1] + (n,))
    for i in range(a.shape[-1]):
        out[..., i : i + b.shape[-1]] += a[..., i : i + 1] * b
    return out


def _resultant_quartic_quadratic(quartic, b2, b1, b0):
    """det of the 6x6 Sylvester matrix of a quartic (coeff axis last, lowest
    power first) and a quadratic, batched over leading axes."""
    shape = quartic.shape[:-1]
    syl = np.zeros(shape + (6, 6))
    a = quartic[..., ::-1]  # highest power first
    for r in range(2):
        syl[..., r, r : r + 5] = a
    b = np.stack([b2, b1, b0], axis=-1)
    for r in range(4):
        syl[..., 2 + r, r : r + 3] = b
    return np.linalg.det(syl)


def solve_closure(problem: ClosureProblem, with_atoms: bool = False):
    """All bridge torsion solutions, sorted by the first dihedral.

    Returns an (n, 6) array of (phi1, psi1, phi2, psi2, phi3, psi3) in
    degrees, 0 <= n <= 16; with_atoms additionally returns an (n, 5, 3)
    array of the rebuilt interior atoms (C1, N2, CA2, C2, N3).  An empty
    result means the anchors admit no closed bridge.
    """
    system = _ClosureSystem(problem)
    empty = (np.zeros((0, 6)), np.zeros((0, 5, 3))) if with_atoms else np.zeros((0, 6))
    if not system.feasible:
        return empty

    h = system.h_samples()
    h_max = float(np.max(np.abs(h)))
    if not math.isfinite(h_max) or h_max < 1e-300:
        return empty
    coeffs = np.fft.fft(h / h_max) / _FFT_SAMPLES
    k = 12
    poly = np.concatenate([coeffs[-k:], coeffs[: k + 1]])  # z^0 .. z^{2k}
    poly = np.trim_zeros(np.where(np.abs(poly) < 1e-13, 0.0, poly), "b")
    if len(poly) < 2:
        return empty
    roots = np.roots(poly[::-1])
    sigma_roots = np.angle(roots[np.abs(np.abs(roots) - 1.0) < _ROOT_CIRCLE_TOL])

    found = []
    for sigma in sigma_roots:
        p2, p1, p0 = _quad_from_row(*_fix_first(system.m1, sigma))
        for tau1 in _quad_roots(p2, p1, p0, system.scale):
            q2, q1, q0 = _quad_from_row(*_fix_first(system.m2, tau1))
            for tau2 in _quad_roots(q2, q1, q0, system.scale):
                if abs(_eval_bilinear(system.m3, sigma, tau2)) > _PREFILTER_TOL * system.scale:
                    continue
                x = system.newton((float(sigma), tau1, tau2))
                if x is not None:
                    found.append(x)

    solutions = []
    atom_sets = []
    raw = []
    for x in found:
        if any(_angle_dist(x, y) < 1e-8 for y in raw):
            continue
        atoms = system.atoms(*x)
        torsions = _measure_torsions(problem, atoms)
        if torsions is None:
            continue
        if not junction_ok(problem, torsions):
            continue
        if any(np.max(np.abs(_wrap_arr(torsions - s))) < _DEDUPE_TOL for s in solutions):
            continue
        solutions.append(torsions)
        atom_sets.append(atoms)
        raw.append(x)

    if not solutions:
        return empty
    order = np.argsort([s[0] for s in solutions], kind="stable")
    sols = np.stack([solutions[i] for i in order])
    if with_atoms:
        return sols, np.stack([atom_sets[i] for i in order])
    return sols


def _angle_dist(x, y):
    return max(
        abs(math.remainder(a - b, 2.0 * math.pi)) for a, b in zip(x, y)
    )


def _wrap_arr(deg):
    a = np.mod(np.asarray(deg) + 180.0, 360.0) - 180.0
    a[a <= -180.0] += 360.0
    return a


def _measure_torsions(problem, atoms):
    la, ra = problem.left_anchor, problem.right_anchor
    c_prev, n1, ca1 = tuple(la[0]), tuple(la[1]), tuple(la[2])
    ca3, c3, n_next = tuple(ra[0]), tuple(ra[1]), tuple(ra[2])
    c1, n2, ca2, c2, n3 = (tuple(p) for p in atoms)
    vals = (
        _dihedral(c_prev, n1, ca1, c1),
        _dihedral(n1, ca1, c1, n2),
        _dihedral(c1, n2, ca2, c2),
        _dihedral(n2, ca2, c2, n3),
        _dihedral(c2, n3, ca3, c3),
        _dihedral(n3, ca3, c3, n_next),
    )
    if any(v is None for v in vals):
        return None
    return np.array(vals)


def rebuild_bridge(problem: ClosureProblem, torsions):
    """Forward-rebuild the bridge from the left anchor for verification.

    Returns (atoms, ca3_rebuilt, c3_rebuilt) with atoms = (C1, N2, CA2, C2, N3).
    """
    geom = problem.geom
    la = problem.left_anchor
    c_prev, n1, ca1 = tuple(la[0]), tuple(la[1]), tuple(la[2])
    phi1, psi1, phi2, psi2, phi3, _ = (float(t) for t in torsions)
    w1, w2 = problem.omegas
    c1 = _nerf(c_prev, n1, ca1, geom.bond_ca_c, geom.angle_n_ca_c, phi1)
    n2 = _nerf(n1, ca1, c1, geom.bond_c_n, geom.angle_ca_c_n, psi1)
    ca2 = _nerf(ca1, c1, n2, geom.bond_n_ca, geom.angle_c_n_ca, w1)
    c2 = _nerf(c1, n2, ca2, geom.bond_ca_c, geom.angle_n_ca_c, phi2)
    n3 = _nerf(n2, ca2, c2, geom.bond_c_n, geom.angle_ca_c_n, psi2)
    ca3 = _nerf(ca2, c2, n3, geom.bond_n_ca, geom.angle_c_n_ca, w2)
    c3 = _nerf(c2, n3, ca3, geom.bond_ca_c, geom.angle_n_ca_c, phi3)
    return np.array([c1, n2, ca2, c2, n3]), np.array(ca3), np.array(c3)


def junction_ok(problem: ClosureProblem, torsions) -> bool:
    """Forward rebuild plus junction bond/angle test against the anchors."""
    geom = problem.geom
    ra = problem.right_anchor
    ca3_t, c3_t, n_next = tuple(ra[0]), tuple(ra[1]), tuple(ra[2])
    _, ca3, c3 = rebuild_bridge(problem, torsions)
    ca3 = tuple(ca3)
    c3 = tuple(c3)
    if _norm(_sub(ca3, ca3_t)) > JUNCTION_DIST_TOL:
        return False
    if _norm(_sub(c3, c3_t)) > JUNCTION_DIST_TOL:
        return False
    if abs(_norm(_sub(c3, n_next)) - geom.bond_c_n) > JUNCTION_DIST_TOL:
        return False
    v1 = _sub(ca3, c3)
    v2 = _sub(n_next, c3)
    cosang = _dot(v1, v2) / (_norm(v1) * _norm(v2))
    ang = math.degrees(math.acos(max(-1.0, min(1.0, cosang))))
    if abs(ang - geom.angle_ca_c_n) > JUNCTION_ANGLE_TOL:
        return False
    return True
