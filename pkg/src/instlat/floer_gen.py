"""Critical points of the perturbed flatness functional.

A generator is a connection solving  curvature = perturbation gradient,
found by Gauss-Newton on the weighted face residual and stored in its
canonical gauge-slice representative.  Nondegeneracy is read from an
extended Hessian on (edge cochains) ⊕ (vertex cochains):

    [  A   B ]        A ~ symmetrized wedge contraction of the residual
    [ Bᵀ   0 ]            linearization (curl minus perturbation term),
                      B ~ minus the covariant vertex coboundary.

All blocks are assembled in coordinates orthonormal for the weighted
metric, so symmetry and mutual adjointness of the off-diagonal blocks
hold by construction.  The A block is damped by a smooth shrinkage onto
the row space of the residual Jacobian: directions along which the
residual does not move to first order (gauge directions at a solution,
and genuine degenerate directions) are annihilated exactly, which is
what makes degeneracy detection a kernel statement rather than a
tolerance fight.

Relative gradings are spectral-flow counts of the extended Hessian
family along the straight cochain path between slice representatives,
plus a sector term built from the circle-winding content of the two
connections as found (the slice collapses that content, so it has to be
banked before slicing).  In finite dimensions the net signed crossing
count telescopes to the difference of negative-eigenvalue counts, which
is what makes the grading additive and exactly integral.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import lattice as lat
from . import liealg as la
from . import perturb as pt
from . import rng as rng_mod
from .errors import (ConvergedToReducible, CrossingUnresolved,
                     NonConvergence, NotNearInteger)

__all__ = [
    "FloerGenerator",
    "GradingContext",
    "ExtendedHessian",
    "find_hflat",
    "enumerate_generators",
    "extended_hessian",
    "nondegeneracy",
    "commutant_dimension_of",
    "grading_modulus",
    "relative_grading",
    "cs_index_check",
    "write_generator_table",
]


# ---------------------------------------------------------------- data types

@dataclass
class FloerGenerator:
    """One critical point, held in its canonical gauge slice.

    cs_value is a real lift (period recorded alongside); winding is the
    raw circle content of the connection as found, before slicing —
    differences of windings carry the sector data that slicing forgets.
    """

    conn: lat.LatticeConnection
    cs_value: float
    hessian_gap: float
    grading_anchor: int = None
    winding: float = 0.0
    period: float = 0.0
    residual: float = 0.0
    nondegenerate: bool = False
    reducible: bool = False


@dataclass(frozen=True)
class GradingContext:
    """Which gauge subgroup gradings are taken relative to."""

    subgroup_kind: str
    r: int

    _MODULI = {"identity_component": None, "ker_parity": "4r", "G_Sigma": 4}

    def __post_init__(self):
        if self.subgroup_kind not in self._MODULI:
            raise ValueError(f"unknown subgroup kind {self.subgroup_kind!r}")

    @property
    def modulus(self):
        rule = self._MODULI[self.subgroup_kind]
        if rule == "4r":
            return 4 * self.r
        return rule


def grading_modulus(kind: str, r: int):
    """None (a Z-grading) for the identity component; 4r for the parity
    kernel; 4 for the full fiber gauge group."""
    return GradingContext(kind, r).modulus


def cs_index_check(q4_value: int, b1: int, bplus: int, r: int) -> int:
    """Closed-four-manifold index count for the projective unitary group:
    2*q4 - (r^2 - 1)(1 - b1 + b+)."""
    return 2 * q4_value - (r * r - 1) * (1 - b1 + bplus)


# --------------------------------------------------------- coordinate frames

def _frames(cx):
    ctx = cx.spec.ctx
    basis = la.su_basis(ctx)
    return ctx, basis, len(basis)


def _edge_coords(cx, basis, field):
    ctx = cx.spec.ctx
    out = np.empty(cx.n_edges * len(basis))
    for e in range(cx.n_edges):
        out[e * len(basis):(e + 1) * len(basis)] = (
            np.sqrt(cx.edge_weight[e])
            * la.to_coords(basis, field[e], ctx.kappa))
    return out


def _edge_field(cx, basis, coords):
    r = cx.spec.ctx.r
    dim = len(basis)
    out = np.zeros((cx.n_edges, r, r), dtype=complex)
    for e in range(cx.n_edges):
        out[e] = la.from_coords(
            basis, coords[e * dim:(e + 1) * dim]) / np.sqrt(
                cx.edge_weight[e])
    return out


def _vertex_coords(cx, basis, field):
    ctx = cx.spec.ctx
    out = np.empty(cx.n_vertices * len(basis))
    for v in range(cx.n_vertices):
        out[v * len(basis):(v + 1) * len(basis)] = la.to_coords(
            basis, field[v], ctx.kappa)
    return out


def _vertex_field(cx, basis, coords):
    r = cx.spec.ctx.r
    dim = len(basis)
    out = np.zeros((cx.n_vertices, r, r), dtype=complex)
    for v in range(cx.n_vertices):
        out[v] = la.from_coords(basis, coords[v * dim:(v + 1) * dim])
    return out


# -------------------------------------------------- residual and its Jacobian

def _residual_field(conn, H, cx):
    E = lat.curvature(conn, cx)
    if H is not None and H.terms:
        E = E - pt.pert_gradient(H, conn, cx)
    return E


def _residual_coords(cx, basis, E):
    ctx = cx.spec.ctx
    out = np.empty(cx.n_faces * len(basis))
    for f in range(cx.n_faces):
        out[f * len(basis):(f + 1) * len(basis)] = (
            np.sqrt(cx.face_weight[f])
            * la.to_coords(basis, E[f], ctx.kappa))
    return out


def _group_directions(conn, basis):
    """Per edge, the log-coordinate increments matching group-translated
    directions: direction matrix D[e][i] satisfies
    d/ds expm(v_e + s D[e][i]) = hol_e @ basis_i at s = 0, so columns built
    from these describe h -> h expm(s mu) families.  At v = 0 they reduce
    to the basis itself."""
    out = []
    for e in range(conn.cx.n_edges):
        v = conn.v[e]
        ev = la.expm(v)
        out.append([la.dexpinv(v, ev @ b @ ev.conj().T) for b in basis])
    return out


def _linearization_columns(conn, H, cx, fd_step=1e-6, frame="group"):
    """Face-cochain derivative of the residual along each orthonormal edge
    direction: columns[e*dim+i] = dE along basis_i at e / sqrt(w_e).

    frame="group" differentiates along h -> h expm(s mu) families (the
    frame the symmetric operator lives in, where gauge and stabilizer
    tangents have closed forms); frame="additive" differentiates in the
    raw log coordinate (used by the root finder, whose iterate is v)."""
    ctx, basis, dim = _frames(cx)
    r = ctx.r
    hol = conn.holonomies()
    n1 = cx.n_edges * dim
    if frame == "group":
        dirs = _group_directions(conn, basis)
    else:
        dirs = [list(basis)] * cx.n_edges
    cols = np.zeros((n1, cx.n_faces, r, r), dtype=complex)
    for f in range(cx.n_faces):
        edge_ids, apply = lat.face_jacobian(conn, f, hol)
        for pos, e in enumerate(edge_ids):
            scale = 1.0 / np.sqrt(cx.edge_weight[e])
            for i in range(dim):
                cols[e * dim + i, f] += scale * apply(pos, dirs[e][i])
    if H is not None and H.terms:
        for e in range(cx.n_edges):
            scale = 1.0 / np.sqrt(cx.edge_weight[e])
            ev = la.expm(conn.v[e])
            for i in range(dim):
                vp = conn.v.copy()
                vm = conn.v.copy()
                if frame == "group":
                    vp[e] = la.logm(ev @ la.expm(fd_step * basis[i]), ctx)
                    vm[e] = la.logm(ev @ la.expm(-fd_step * basis[i]), ctx)
                else:
                    vp[e] = conn.v[e] + fd_step * basis[i]
                    vm[e] = conn.v[e] - fd_step * basis[i]
                xp = pt.pert_gradient(
                    H, lat.LatticeConnection(cx, conn.background, vp), cx)
                xm = pt.pert_gradient(
                    H, lat.LatticeConnection(cx, conn.background, vm), cx)
                cols[e * dim + i] -= scale * (xp - xm) / (2.0 * fd_step)
    return cols


def _jacobian_matrix(cx, basis, cols):
    n1 = cols.shape[0]
    out = np.empty((cx.n_faces * len(basis), n1))
    for b in range(n1):
        out[:, b] = _residual_coords(cx, basis, cols[b])
    return out


# --------------------------------------------------------- pairing covector

def _pairing_covector(conn, G, background_only=False):
    """Edge field c with pairing(conn, G, beta) = sum_e inner(c_e, beta_e),
    exact by Ad-invariance of the metric."""
    cx = conn.cx
    r = cx.spec.ctx.r
    hol = conn.background if background_only else conn.holonomies()
    cov = np.zeros((cx.n_edges, r, r), dtype=complex)
    for cell in cx.cells:
        f = cell["bottom"]
        edges, signs = cx.faces[f]
        T = lat._face_word_transports(cx, hol, f)
        cov[cell["vertical_base"]] += G[f]
        gtils = [T[i].conj().T @ G[cell["sides"][i][0]] @ T[i]
                 for i in range(len(edges))]
        suffix = np.zeros((r, r), dtype=complex)
        for j in reversed(range(len(edges))):
            e, s = edges[j], signs[j]
            theta = T[j].conj().T if s > 0 else T[j].conj().T @ hol[e]
            cov[e] += s * (theta.conj().T @ suffix @ theta)
            suffix = suffix + gtils[j]
    return cov


# ----------------------------------------------------------- extended Hessian

@dataclass
class ExtendedHessian:
    """Assembled symmetric operator on edge ⊕ vertex cochains."""

    matrix: np.ndarray
    cx: object
    basis: np.ndarray
    n1: int
    n0: int

    def apply(self, xi_field, zeta_field):
        x = np.concatenate([
            _edge_coords(self.cx, self.basis, xi_field),
            _vertex_coords(self.cx, self.basis, zeta_field)])
        y = self.matrix @ x
        return (_edge_field(self.cx, self.basis, y[:self.n1]),
                _vertex_field(self.cx, self.basis, y[self.n1:]))

    def symmetry_defect(self) -> float:
        return float(np.max(np.abs(self.matrix - self.matrix.T)))


def extended_hessian(genr, H, cx=None) -> ExtendedHessian:
    """Extended Hessian at a generator (or at any connection, for path
    families): block A is the symmetrized wedge contraction of the
    residual linearization (rows and columns along group-translated edge
    directions); block B is minus the covariant vertex coboundary; the
    lower-diagonal block is Bᵀ, so the matrix is symmetric by
    construction."""
    conn = getattr(genr, "conn", genr)
    cx = cx or conn.cx
    ctx, basis, dim = _frames(cx)
    n1 = cx.n_edges * dim
    n0 = cx.n_vertices * dim

    cols = _linearization_columns(conn, H, cx)

    Q = np.empty((n1, n1))
    for b in range(n1):
        cov = _pairing_covector(conn, cols[b])
        for e in range(cx.n_edges):
            Q[e * dim:(e + 1) * dim, b] = la.to_coords(
                basis, cov[e], ctx.kappa) / np.sqrt(cx.edge_weight[e])
    A = 0.5 * (Q + Q.T)

    B = np.empty((n1, n0))
    r = ctx.r
    for v in range(cx.n_vertices):
        for i in range(dim):
            zeta = np.zeros((cx.n_vertices, r, r), dtype=complex)
            zeta[v] = basis[i]
            B[:, v * dim + i] = _edge_coords(
                cx, basis, -lat.vertex_coboundary(conn, zeta))

    D = np.zeros((n1 + n0, n1 + n0))
    D[:n1, :n1] = A
    D[:n1, n1:] = B
    D[n1:, :n1] = B.T
    return ExtendedHessian(matrix=D, cx=cx, basis=basis, n1=n1, n0=n0)


def _commutator_map(mats, basis):
    """Matrix of X -> ([X, M_k])_k in algebra-basis coordinates; its
    kernel is the commutant."""
    cols = []
    for b in basis:
        stacked = []
        for m in mats:
            c = m @ b - b @ m
            stacked.append(np.concatenate([c.real.ravel(), c.imag.ravel()]))
        cols.append(np.concatenate(stacked))
    return np.stack(cols, axis=1)


def commutant_dimension_of(mats, ctx) -> int:
    """Dimension of the traceless anti-Hermitian commutant of a matrix
    set (zero exactly when the set is irreducible)."""
    basis = la.su_basis(ctx)
    if not mats:
        return len(basis)
    M = _commutator_map(mats, basis)
    s = np.linalg.svd(M, compute_uv=False)
    return len(basis) - int(np.sum(s > 1e-10))


def _commutant_basis(cx, basis, conn):
    hol = conn.holonomies()
    mats = [hol[e] for e in range(cx.n_edges)]
    M = _commutator_map(mats, basis)
    _, s, vt = np.linalg.svd(M)
    keep = [vt[k] for k in range(len(s)) if s[k] <= 1e-10] + \
           [vt[k] for k in range(len(s), len(basis))]
    return [la.from_coords(basis, c) for c in keep]


def _stabilizer_vectors(cx, basis, conn):
    """Orthonormalized extended-space vectors spanning the stabilizer's
    structural footprint at a reducible point, exact kernel vectors of
    the extended Hessian for every compatible perturbation:

    - (0, zeta) with zeta constant in the commutant of all holonomies
      (the gauge extension the stabilizer never uses), and
    - (xi, 0) with xi the circle-twist tangent: vertical holonomies
      multiplied by expm(theta * alpha_e * zeta) with the distribution
      alpha_e ~ 1/w_e along each closed vertical run (divergence-free),
      a flat family for any fiber-supported perturbation."""
    dim = len(basis)
    n1 = cx.n_edges * dim
    n0 = cx.n_vertices * dim
    r = cx.spec.ctx.r
    raw = []
    commutant = _commutant_basis(cx, basis, conn)
    columns = lat._vertical_columns(cx)
    for zeta in commutant:
        field = np.stack([zeta] * cx.n_vertices)
        vec = np.zeros(n1 + n0)
        vec[n1:] = _vertex_coords(cx, basis, field)
        raw.append(vec)
        if columns:
            xi = np.zeros((cx.n_edges, r, r), dtype=complex)
            for col in columns:
                inv_w = np.array([1.0 / cx.edge_weight[e] for e in col])
                alphas = inv_w / inv_w.sum()
                for e, alpha in zip(col, alphas):
                    xi[e] += alpha * zeta
            vec = np.zeros(n1 + n0)
            vec[:n1] = _edge_coords(cx, basis, xi)
            raw.append(vec)
    if not raw:
        return []
    q, rmat = np.linalg.qr(np.stack(raw, axis=1))
    return [q[:, k] for k in range(q.shape[1])
            if abs(rmat[k, k]) > 1e-12 * max(1.0, abs(rmat[0, 0]))]


def nondegeneracy(genr, H, cx=None, gap_min: float = 1e-4):
    """(flag, gap): smallest |eigenvalue| of the extended Hessian with the
    exact stabilizer directions deflated away (a reducible generator's
    constant commutant is structural, not a degeneracy)."""
    conn = getattr(genr, "conn", genr)
    cx = cx or conn.cx
    ctx, basis, _ = _frames(cx)
    ext = extended_hessian(conn, H, cx)
    D = ext.matrix.copy()
    scale = max(float(np.max(np.abs(D))), 1.0)
    for vec in _stabilizer_vectors(cx, basis, conn):
        D += (1e3 * scale) * np.outer(vec, vec)
    eig = np.linalg.eigvalsh(D)
    gap = float(np.min(np.abs(eig)))
    return bool(gap > gap_min), gap


# --------------------------------------------------------------- root finding

def find_hflat(start, H, cx=None, tol: float = 1e-10, max_iter: int = 60,
               allow_reducible: bool = False,
               gap_min: float = 1e-4) -> FloerGenerator:
    """Gauss-Newton on the weighted residual from the given start.

    Returns the canonical slice representative with its Chern-Simons
    lift, circle winding, and spectral gap.  Raises NonConvergence when
    the budget runs out and ConvergedToReducible when the limit has a
    nontrivial commutant (suppressed by allow_reducible)."""
    cx = cx or start.cx
    ctx, basis, dim = _frames(cx)
    H = H if H is not None else pt.HoloPert.zero()

    v = start.v.copy()
    conn = lat.LatticeConnection(cx, start.background, v)
    E = _residual_field(conn, H, cx)
    R = _residual_coords(cx, basis, E)
    res = float(np.linalg.norm(R))
    iterations = 0
    while res >= tol:
        if iterations >= max_iter:
            raise NonConvergence(
                f"residual {res:.3e} after {max_iter} Gauss-Newton steps",
                module="floer_gen", operation="find_hflat",
                residual=res, iterations=iterations)
        cols = _linearization_columns(conn, H, cx, frame="additive")
        J = _jacobian_matrix(cx, basis, cols)
        step, *_ = np.linalg.lstsq(J, -R, rcond=1e-12)
        t = 1.0
        improved = False
        for _ in range(12):
            v_try = v + t * _edge_field(cx, basis, step)
            conn_try = lat.LatticeConnection(cx, start.background, v_try)
            E_try = _residual_field(conn_try, H, cx)
            R_try = _residual_coords(cx, basis, E_try)
            res_try = float(np.linalg.norm(R_try))
            if res_try < res:
                improved = True
                break
            t *= 0.5
        if not improved:
            raise NonConvergence(
                f"line search stalled at residual {res:.3e}",
                module="floer_gen", operation="find_hflat",
                residual=res, iterations=iterations)
        v, conn, R, res = v_try, conn_try, R_try, res_try
        iterations += 1

    winding = lat.circle_winding(conn)[1]
    sliced, _ = lat.coulomb_gauge_fix(conn)
    hol = sliced.holonomies()
    cdim = commutant_dimension_of([hol[e] for e in range(cx.n_edges)], ctx)
    if cdim > 0 and not allow_reducible:
        raise ConvergedToReducible(
            f"limit holonomies have a {cdim}-dimensional commutant",
            module="floer_gen", operation="find_hflat",
            residual=float(cdim))
    cs = lat.chern_simons(conn, cx, H=H, gauge_fix=True)
    flag, gap = nondegeneracy(sliced, H, cx, gap_min=gap_min)
    return FloerGenerator(
        conn=sliced, cs_value=float(cs), hessian_gap=gap,
        winding=float(winding), period=lat.cs_period(ctx),
        residual=lat.flatness_residual(sliced, cx, H),
        nondegenerate=flag, reducible=bool(cdim > 0))


def enumerate_generators(background, H, cx=None, seed: int = 0,
                         n_starts: int = 12, spread: float = 0.3,
                         tol: float = 1e-10, max_iter: int = 60,
                         allow_reducible: bool = False,
                         match_tol: float = 1e-6):
    """Generators reachable from the background and randomized starts,
    deduplicated by slice distance and sorted by Chern-Simons value."""
    cx = cx or background.cx
    ctx, _, _ = _frames(cx)
    found = []
    for k in range(n_starts):
        if k == 0:
            v = np.zeros_like(background.v)
        else:
            gen = rng_mod.stream(seed, "hflat-start", k)
            v = np.stack([la.random_algebra(ctx, gen, spread)
                          for _ in range(cx.n_edges)])
        start = lat.LatticeConnection(cx, background.background, v)
        try:
            g = find_hflat(start, H, cx, tol=tol, max_iter=max_iter,
                           allow_reducible=allow_reducible)
        except (NonConvergence, ConvergedToReducible):
            continue
        if not any(np.max(np.abs(g.conn.v - h.conn.v)) < match_tol
                   for h in found):
            found.append(g)
    found.sort(key=lambda g: (g.cs_value, float(np.linalg.norm(g.conn.v))))
    return found


# ------------------------------------------------------------- spectral flow

def _negative_count(matrix, thr):
    eig = np.linalg.eigvalsh(matrix)
    small = float(np.min(np.abs(eig)))
    return int(np.sum(eig < -thr)), small


def relative_grading(a: FloerGenerator, b: FloerGenerator, H, cx=None,
                     gctx: GradingContext = None, n_points: int = 128,
                     reg: float = 1e-12, crossing_tol: float = 1e-9,
                     max_refine: int = 12):
    """Spectral flow from a to b plus the circle-sector term.

    The flow is the net signed count of eigenvalue crossings of the
    extended-Hessian family along the straight cochain path between the
    slice representatives; in finite dimensions that count telescopes to
    the difference of negative-eigenvalue counts between consecutive
    samples, so sampling only has to certify that no sample sits on an
    unresolved crossing.  The sector term adds 4 * (bundle twist) *
    (winding difference), rounded — for gauge-translated generators the
    path is constant, the flow vanishes, and the sector term alone
    carries the exact shift."""
    cx = cx or a.conn.cx
    ctx = cx.spec.ctx
    if not np.allclose(a.conn.background, b.conn.background, atol=1e-12):
        raise ValueError("generators live over different backgrounds")

    va, vb = a.conn.v, b.conn.v
    size = cx.n_edges * (ctx.r ** 2 - 1) + cx.n_vertices * (ctx.r ** 2 - 1)
    eye = np.eye(size)

    def matrix_at(t):
        conn = lat.LatticeConnection(cx, a.conn.background,
                                     (1.0 - t) * va + t * vb)
        return extended_hessian(conn, H, cx).matrix + reg * eye

    flow = 0
    if np.max(np.abs(vb - va)) > 0:
        ts = list(np.linspace(0.0, 1.0, n_points + 1))
        counts = []
        for t in ts:
            m = matrix_at(t)
            n_neg, small = _negative_count(m, crossing_tol)
            shift = 0
            while small <= crossing_tol and shift < max_refine:
                # a sample on a crossing cannot be classified; nudge it
                t = min(t + (ts[1] - ts[0]) * (0.5 ** (shift + 2)), 1.0)
                m = matrix_at(t)
                n_neg, small = _negative_count(m, crossing_tol)
                shift += 1
            if small <= crossing_tol:
                raise CrossingUnresolved(
                    f"eigenvalue pinned within {crossing_tol:g} of zero "
                    f"near path time {t:.6f}",
                    module="floer_gen", operation="relative_grading",
                    residual=float(small))
            counts.append(n_neg)
        flow = counts[0] - counts[-1]

    raw_sector = ctx.d * (b.winding - a.winding)
    sector = int(np.rint(raw_sector))
    if abs(raw_sector - sector) > 0.25:
        raise NotNearInteger(
            "winding sector between generators is not near an integer",
            module="floer_gen", operation="relative_grading",
            residual=float(abs(raw_sector - sector)))
    mu = flow + 4 * sector
    if gctx is not None and gctx.modulus is not None:
        mu %= gctx.modulus
    return mu


# ----------------------------------------------------------------- reporting

def write_generator_table(gens, H, cx, path, gctx: GradingContext = None,
                          anchor: int = 0):
    """CSV table: id, cs_value, gap, grading vs. the anchor generator, and
    the per-piece restriction fingerprints (loop holonomy traces)."""
    rows = []
    fp_headers = []
    for piece, loops in cx.fingerprint_bases:
        for k in range(len(loops)):
            fp_headers += [f"fp_{piece}_{k}_re", f"fp_{piece}_{k}_im"]
    for i, g in enumerate(gens):
        row = {"id": i, "cs_value": repr(float(g.cs_value)),
               "gap": repr(float(g.hessian_gap))}
        if gens and i != anchor:
            try:
                row["grading_vs_anchor"] = relative_grading(
                    gens[anchor], g, H, cx, gctx)
            except Exception:
                row["grading_vs_anchor"] = ""
        else:
            row["grading_vs_anchor"] = 0
        hol = g.conn.holonomies()
        for piece, loops in cx.fingerprint_bases:
            for k, loop in enumerate(loops):
                tr = np.trace(lat._path_holonomy(hol, loop))
                row[f"fp_{piece}_{k}_re"] = repr(float(tr.real))
                row[f"fp_{piece}_{k}_im"] = repr(float(tr.imag))
        rows.append(row)
    headers = ["id", "cs_value", "gap", "grading_vs_anchor"] + fp_headers
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=headers)
        w.writeheader()
        for row in rows:
            w.writerow(row)
    return path
