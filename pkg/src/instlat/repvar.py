"""Twisted surface-group representation varieties.

A rank-r twisted representation of a genus-g surface group is a tuple
(A_1, B_1, ..., A_g, B_g) in SU(r)^{2g} with

    prod_j A_j B_j A_j^{-1} B_j^{-1} = omega_d * Id,

omega_d the central twist from the LieContext.  This module finds such
tuples, measures distances between their conjugacy classes, and samples
the quotient variety by clustered restarts.

The solver is Riemannian gradient descent with left-multiplicative
retraction new = expm(-step * grad) @ current and Armijo backtracking;
seeds are exponentials of Gaussian algebra elements (scale 1.0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import liealg as la
from .errors import NoSolution, NonConvergence, Reducible, SpectralGapTooSmall
from .rng import stream

__all__ = [
    "SurfaceRep",
    "ModuliSample",
    "relator",
    "relator_residual",
    "solve_rep",
    "tangent_dimension",
    "canonicalize",
    "conj_distance",
    "sample_moduli",
    "pauli_rep",
    "commutant_dimension",
    "rep_to_json",
    "rep_from_json",
]


@dataclass
class SurfaceRep:
    """Ordered generator tuple (A_1, B_1, ..., A_g, B_g); shape (2g, r, r)."""

    genus: int
    ctx: la.LieContext
    gens: np.ndarray

    def __post_init__(self):
        self.gens = np.asarray(self.gens, dtype=complex)
        if self.gens.shape != (2 * self.genus, self.ctx.r, self.ctx.r):
            raise ValueError("generator array has wrong shape")
        for g in self.gens:
            la.group_element(g, tol=1e-10)

    def copy(self) -> "SurfaceRep":
        return SurfaceRep(self.genus, self.ctx, self.gens.copy())

    def conjugate(self, g: np.ndarray) -> "SurfaceRep":
        gd = g.conj().T
        return SurfaceRep(self.genus, self.ctx, np.array([g @ x @ gd for x in self.gens]))


@dataclass
class ModuliSample:
    """Clustered output of repeated solves.

    points: canonicalized reps; labels: cluster index per point;
    reducible: per-point flag; representatives: one index per cluster.
    Cluster representatives are pairwise separated by more than
    2 * cluster_radius in conj_distance.
    """

    points: list
    labels: list
    reducible: list
    representatives: list
    cluster_radius: float
    distance_matrix: np.ndarray = field(repr=False, default=None)

    @property
    def n_clusters(self) -> int:
        return len(self.representatives)


def pauli_rep(ctx: la.LieContext) -> SurfaceRep:
    """The closed-form genus-1 solution for r=2, d=1: (i sigma_x, i sigma_y)."""
    if ctx.r != 2 or ctx.d % 2 != 1:
        raise ValueError("closed-form pair exists only for r=2, odd twist")
    a = np.array([[0.0, 1j], [1j, 0.0]])
    b = np.array([[0.0, 1.0], [-1.0, 0.0]])
    return SurfaceRep(1, ctx, np.array([a, b]))


def relator(rep: SurfaceRep) -> np.ndarray:
    """Product of commutators [A_j, B_j] in generator order."""
    r = rep.ctx.r
    w = np.eye(r, dtype=complex)
    for j in range(rep.genus):
        a = rep.gens[2 * j]
        b = rep.gens[2 * j + 1]
        w = w @ a @ b @ a.conj().T @ b.conj().T
    return w


def relator_residual(rep: SurfaceRep) -> float:
    """Frobenius distance of the relator from the central twist."""
    return float(np.linalg.norm(relator(rep) - rep.ctx.omega_matrix))


def _split_gens(rep):
    return rep.gens[0::2], rep.gens[1::2]


def _objective_and_grad(gens, omega, genus):
    """Squared residual and its left-trivialized gradient.

    Gradient is per generator in su(r) (anti-Hermitian traceless), for the
    perturbation X -> expm(eps xi) X.
    """
    r = gens.shape[-1]
    eye = np.eye(r, dtype=complex)
    comms = []
    for j in range(genus):
        a, b = gens[2 * j], gens[2 * j + 1]
        comms.append(a @ b @ a.conj().T @ b.conj().T)
    # prefix products L_j = C_1 ... C_{j-1}
    prefixes = [eye]
    for c in comms[:-1]:
        prefixes.append(prefixes[-1] @ c)
    w = prefixes[-1] @ comms[-1]
    m = w - omega * eye
    f = float(np.real(np.trace(m @ m.conj().T)))
    wm = w @ m.conj().T
    grad = np.zeros_like(gens)
    for j in range(genus):
        a, b = gens[2 * j], gens[2 * j + 1]
        lj = prefixes[j]
        nj = lj.conj().T @ wm @ lj
        u = a @ b @ a.conj().T
        # d f(A_j; xi) = 2 Re tr(xi (N - Ad(U^-1) N))
        ga = nj - u.conj().T @ nj @ u
        nj2 = (lj @ comms[j]).conj().T @ wm @ (lj @ comms[j])
        gb = a.conj().T @ nj @ a - nj2
        # pairing <xi, zeta> = -Re tr(xi zeta): gradient = -2 proj(.)
        grad[2 * j] = -2.0 * la.project_algebra(ga)
        grad[2 * j + 1] = -2.0 * la.project_algebra(gb)
    return f, grad


def solve_rep(
    genus: int,
    ctx: la.LieContext,
    seed: int = 0,
    tol: float = 1e-10,
    max_iter: int = 20000,
) -> SurfaceRep:
    """Find a twisted representation by Riemannian descent from a seeded start.

    Deterministic for fixed arguments.  Raises NoSolution for genus 0 with a
    nonzero twist, NonConvergence when the iteration budget runs out above
    tol.
    """
    if genus == 0:
        if ctx.d % ctx.r != 0:
            raise NoSolution(
                "empty variety: genus 0 admits no twisted representation",
                module="repvar",
                operation="solve_rep",
            )
        return SurfaceRep(0, ctx, np.zeros((0, ctx.r, ctx.r)))
    rng = stream(seed, "repvar", "solve", genus, ctx.r, ctx.d)
    gens = np.array([la.random_group(ctx, rng, 1.0) for _ in range(2 * genus)])
    omega = ctx.omega
    step = 0.25
    f, grad = _objective_and_grad(gens, omega, genus)
    for it in range(max_iter):
        if f < tol * tol:
            break
        gnorm2 = float(sum(np.real(np.trace(g @ g.conj().T)) for g in grad))
        if gnorm2 < 1e-30:
            # stalled at a non-solution critical point: kick and continue
            gens = np.array([la.expm(la.random_algebra(ctx, rng, 0.2)) @ g for g in gens])
            f, grad = _objective_and_grad(gens, omega, genus)
            continue
        accepted = False
        while step > 1e-14:
            cand = np.array(
                [la.expm(-step * grad[k]) @ gens[k] for k in range(2 * genus)]
            )
            fc, gc = _objective_and_grad(cand, omega, genus)
            if fc <= f - 0.5 * step * gnorm2:
                gens, f, grad = cand, fc, gc
                step = min(step * 1.5, 4.0)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            gens = np.array([la.expm(la.random_algebra(ctx, rng, 0.05)) @ g for g in gens])
            f, grad = _objective_and_grad(gens, omega, genus)
            step = 0.25
    gens = np.array([la.project_group(g) for g in gens])
    rep = SurfaceRep(genus, ctx, gens)
    res = relator_residual(rep)
    if res >= tol:
        raise NonConvergence(
            "relator residual above tolerance",
            module="repvar",
            operation="solve_rep",
            residual=res,
        )
    return rep


def _relator_linearization(rep: SurfaceRep) -> np.ndarray:
    """Real matrix of the relator differential in su-coordinates.

    Rows: su(r) coords of d(relator) * relator^{-1}; columns: left-trivialized
    directions (xi_1, eta_1, ..., xi_g, eta_g).
    """
    ctx = rep.ctx
    basis = la.su_basis(ctx)
    m = basis.shape[0]
    genus = rep.genus
    eye = np.eye(ctx.r, dtype=complex)
    comms = []
    for j in range(genus):
        a, b = rep.gens[2 * j], rep.gens[2 * j + 1]
        comms.append(a @ b @ a.conj().T @ b.conj().T)
    prefixes = [eye]
    for c in comms[:-1]:
        prefixes.append(prefixes[-1] @ c)
    cols = []
    for j in range(genus):
        a, b = rep.gens[2 * j], rep.gens[2 * j + 1]
        lj = prefixes[j]
        u = a @ b @ a.conj().T
        lc = lj @ comms[j]
        for k in range(m):
            xi = basis[k]
            val = lj @ (xi - u @ xi @ u.conj().T) @ lj.conj().T
            cols.append(la.to_coords(basis, la.project_algebra(val), ctx.kappa))
        for k in range(m):
            eta = basis[k]
            val = (lj @ a) @ eta @ (lj @ a).conj().T - lc @ eta @ lc.conj().T
            cols.append(la.to_coords(basis, la.project_algebra(val), ctx.kappa))
    return np.array(cols).T  # shape (m, 2g m)


def _orbit_map(rep: SurfaceRep) -> np.ndarray:
    """Conjugation-orbit directions as a (2g m, m) real matrix."""
    ctx = rep.ctx
    basis = la.su_basis(ctx)
    m = basis.shape[0]
    cols = []
    for k in range(m):
        xi = basis[k]
        col = []
        for x in rep.gens:
            col.append(la.to_coords(basis, la.project_algebra(xi - x @ xi @ x.conj().T), ctx.kappa))
        cols.append(np.concatenate(col))
    return np.array(cols).T


def _rank_with_gap(mat: np.ndarray, tol: float, gap_min: float, what: str) -> int:
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv.size == 0:
        return 0
    cut = float(tol)
    rank = int(np.sum(sv > cut))
    if 0 < rank < sv.size:
        gap = sv[rank - 1] / max(sv[rank], 1e-300)
        if gap < gap_min:
            raise SpectralGapTooSmall(
                f"singular-value gap too small for {what}",
                module="repvar",
                operation="tangent_dimension",
                residual=float(gap),
            )
    return rank


def tangent_dimension(rep: SurfaceRep, tol: float = 1e-6, gap_min: float = 1e3) -> int:
    """Moduli tangent dimension: ker(relator linearization) minus orbit rank.

    Rank decisions by SVD threshold tol; the singular-value ratio across each
    chosen cut must exceed gap_min, otherwise SpectralGapTooSmall.
    """
    lin = _relator_linearization(rep)
    orb = _orbit_map(rep)
    ncols = lin.shape[1]
    rank_lin = _rank_with_gap(lin, tol, gap_min, "relator linearization")
    rank_orb = _rank_with_gap(orb, tol, gap_min, "orbit map")
    return (ncols - rank_lin) - rank_orb


def commutant_dimension(rep: SurfaceRep, tol: float = 1e-8) -> int:
    """Complex dimension of the joint commutant of the generator tuple."""
    r = rep.ctx.r
    eye = np.eye(r)
    blocks = []
    for x in rep.gens:
        blocks.append(np.kron(x, eye) - np.kron(eye, x.T))
    if not blocks:
        return r * r
    k = np.vstack(blocks)
    sv = np.linalg.svd(k, compute_uv=False)
    return int(np.sum(sv < tol))


def _spectral_anchor(rep: SurfaceRep, sep: float = 1e-8):
    """First generator with well-separated eigenphases, plus its index."""
    for idx, g in enumerate(rep.gens):
        w = np.linalg.eigvals(g)
        th = np.sort(np.angle(w))
        gaps = np.diff(np.concatenate([th, [th[0] + 2 * np.pi]]))
        if np.min(np.abs(gaps)) > sep:
            return idx
    return None


def canonicalize(rep: SurfaceRep, tol: float = 1e-10):
    """Conjugate into the canonical slice.

    The anchor generator (A_1 generically) becomes diagonal with eigenphases
    sorted descending; the residual torus freedom is fixed by rotating the
    next generator's subdiagonal entries real positive.  Returns
    (canonical_rep, conjugator) with canonical = g . rep . g^{-1}.

    Raises Reducible when the tuple has a commutant of dimension > 1.
    """
    if rep.genus == 0:
        return rep.copy(), np.eye(rep.ctx.r, dtype=complex)
    if commutant_dimension(rep) > 1:
        raise Reducible(
            "positive-dimensional stabilizer",
            module="repvar",
            operation="canonicalize",
        )
    r = rep.ctx.r
    anchor = _spectral_anchor(rep)
    if anchor is None:
        # all generators have clustered spectra; fall back to the product
        anchor = 0
    a = rep.gens[anchor]
    w, v = la._eig_unitary(a)
    order = np.argsort(-np.angle(w))
    v = v[:, order]
    g0 = v.conj().T
    out = rep.conjugate(g0)
    partner = anchor + 1 if anchor + 1 < 2 * rep.genus else 0
    b = out.gens[partner]
    phases = np.zeros(r)
    for k in range(r - 1):
        entry = b[k + 1, k]
        if abs(entry) > 1e-12:
            phases[k + 1] = phases[k] + np.angle(entry)
        else:
            phases[k + 1] = phases[k]
    dvec = np.exp(-1j * phases)
    dvec = dvec / dvec[0]
    dmat = np.diag(dvec)
    out = out.conjugate(dmat)
    conj = dmat @ g0
    return out, conj


def _conj_dist_sq_grad(g, xs, ys):
    """0.5 d/dxi sum_j |g x_j g^-1 - y_j|_F^2 for g -> expm(xi) g."""
    f = 0.0
    grad = np.zeros_like(g)
    for x, y in zip(xs, ys):
        gx = g @ x @ g.conj().T
        m = gx - y
        f += float(np.real(np.trace(m @ m.conj().T)))
        # d gx = [xi, gx]; df = 2 Re tr([xi,gx] m^dag) = 2 Re tr(xi [gx, m^dag])
        grad += 2.0 * la.project_algebra(gx @ m.conj().T - m.conj().T @ gx)
    return f, grad


def conj_distance(
    rep1: SurfaceRep,
    rep2: SurfaceRep,
    n_starts: int = 8,
    seed: int = 0,
    max_iter: int = 300,
) -> float:
    """min over g in SU(r) of sum_j |g A_j g^-1 - A'_j|_F, by multistart descent.

    Starts: identity, the canonical-slice alignment conjugator, and seeded
    random elements.  The minimized surrogate is the sum of squares; the
    reported value is the sum of Frobenius norms at the best g found.
    """
    ctx = rep1.ctx
    xs, ys = rep1.gens, rep2.gens
    starts = [np.eye(ctx.r, dtype=complex)]
    try:
        _, h1 = canonicalize(rep1)
        _, h2 = canonicalize(rep2)
        starts.append(h2.conj().T @ h1)
    except Reducible:
        pass
    rng = stream(seed, "repvar", "conjdist")
    for _ in range(max(0, n_starts - len(starts))):
        starts.append(la.random_group(ctx, rng, 1.0))
    best_f, best_g = np.inf, starts[0]
    for g in starts:
        step = 0.1
        f, grad = _conj_dist_sq_grad(g, xs, ys)
        for _ in range(max_iter):
            gnorm2 = float(np.real(np.trace(grad @ grad.conj().T)))
            if gnorm2 < 1e-26 or f < 1e-26:
                break
            moved = False
            while step > 1e-13:
                cand = la.expm(-step * grad) @ g
                fc, gc = _conj_dist_sq_grad(cand, xs, ys)
                if fc <= f - 0.25 * step * gnorm2:
                    g, f, grad = cand, fc, gc
                    step = min(step * 1.6, 2.0)
                    moved = True
                    break
                step *= 0.5
            if not moved:
                break
        if f < best_f:
            best_f, best_g = f, g
    total = 0.0
    for x, y in zip(xs, ys):
        total += float(np.linalg.norm(best_g @ x @ best_g.conj().T - y))
    return total


def sample_moduli(
    genus: int,
    ctx: la.LieContext,
    n_restarts: int,
    cluster_radius: float = 1e-4,
    seed: int = 0,
    with_distance_matrix: bool = True,
) -> ModuliSample:
    """Sample the representation variety by seeded restarts and cluster.

    Points that fail to converge are retried with follow-on seeds so the
    sample always carries n_restarts converged points.  Points with a
    nontrivial commutant are kept and flagged reducible (they are skipped as
    cluster representatives of irreducible classes only when canonicalization
    refuses them; clustering falls back to raw conj_distance).
    """
    points = []
    reducible = []
    attempt = 0
    while len(points) < n_restarts and attempt < 10 * n_restarts + 50:
        try:
            rep = solve_rep(genus, ctx, seed=1000 * seed + attempt)
        except NonConvergence:
            attempt += 1
            continue
        attempt += 1
        red = commutant_dimension(rep) > 1
        if not red:
            rep = canonicalize(rep)[0]
        points.append(rep)
        reducible.append(bool(red))
    if len(points) < n_restarts:
        raise NonConvergence(
            "too many failed restarts",
            module="repvar",
            operation="sample_moduli",
            residual=float(n_restarts - len(points)),
        )
    labels = [-1] * len(points)
    representatives = []
    for i, rep in enumerate(points):
        for ci, ridx in enumerate(representatives):
            if conj_distance(points[ridx], rep) < cluster_radius:
                labels[i] = ci
                break
        if labels[i] < 0:
            representatives.append(i)
            labels[i] = len(representatives) - 1
    # merge representatives violating the 2-radius separation invariant
    merged = True
    while merged:
        merged = False
        for a in range(len(representatives)):
            for b in range(a + 1, len(representatives)):
                d = conj_distance(points[representatives[a]], points[representatives[b]])
                if d <= 2 * cluster_radius:
                    for i in range(len(labels)):
                        if labels[i] == b:
                            labels[i] = a
                        elif labels[i] > b:
                            labels[i] -= 1
                    del representatives[b]
                    merged = True
                    break
            if merged:
                break
    dm = None
    if with_distance_matrix:
        n = len(points)
        dm = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                d = conj_distance(points[i], points[j], n_starts=3)
                dm[i, j] = dm[j, i] = d
    return ModuliSample(
        points=points,
        labels=labels,
        reducible=reducible,
        representatives=representatives,
        cluster_radius=cluster_radius,
        distance_matrix=dm,
    )


def rep_to_json(rep: SurfaceRep) -> dict:
    """Interleaved real/imag, row-major; context carried alongside."""
    flat = []
    for g in rep.gens:
        for row in g:
            for z in row:
                flat.extend([float(np.real(z)), float(np.imag(z))])
    return {
        "genus": rep.genus,
        "r": rep.ctx.r,
        "kappa": rep.ctx.kappa,
        "d": rep.ctx.d,
        "data": flat,
    }


def rep_from_json(obj: dict) -> SurfaceRep:
    ctx = la.LieContext(obj["r"], obj.get("kappa", 1.0), obj.get("d", 0))
    genus = obj["genus"]
    r = ctx.r
    arr = np.array(obj["data"], dtype=float)
    z = arr[0::2] + 1j * arr[1::2]
    gens = z.reshape(2 * genus, r, r)
    return SurfaceRep(genus, ctx, gens)
