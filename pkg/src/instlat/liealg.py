"""su(r) / SU(r) numerical kernel.

All downstream geometry is phrased over a fixed LieContext: the rank r, the
inner-product normalization kappa, and the twist class d with its central
representative omega_d = exp(2 pi i d / r) Id.

Conventions
-----------
* inner(mu, nu) = -kappa * Re tr(mu nu).  Positive definite on
  anti-Hermitian matrices.
* expm is the plain matrix exponential (scaling and squaring, Pade degree
  fixed at 13).  Any sign baked into holonomy conventions lives in
  lattice.py, not here.
* logm takes the principal branch on unitary input and splits off the
  central part: the returned matrix is traceless and the dropped phase is an
  integer mod r, available from logm_with_phase.

Everything here is a pure function of its arguments; nothing mutates shared
state, so callers may fan out across workers freely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BranchCut

__all__ = [
    "LieContext",
    "group_element",
    "algebra_element",
    "inner",
    "norm",
    "expm",
    "logm",
    "logm_with_phase",
    "pu_log",
    "adjoint",
    "su_basis",
    "to_coords",
    "from_coords",
    "dexp",
    "dexpinv",
    "random_algebra",
    "random_group",
    "project_algebra",
    "project_group",
]

_UNITARY_TOL = 1e-12


@dataclass(frozen=True)
class LieContext:
    """Rank, metric normalization and twist class for one problem instance."""

    r: int
    kappa: float = 1.0
    d: int = 0

    def __post_init__(self):
        if self.r < 2:
            raise ValueError("rank must be >= 2")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        object.__setattr__(self, "d", int(self.d) % self.r)

    @property
    def omega(self) -> complex:
        """Scalar of the central twist representative."""
        return np.exp(2j * np.pi * self.d / self.r)

    @property
    def omega_matrix(self) -> np.ndarray:
        return self.omega * np.eye(self.r)

    @property
    def dim_algebra(self) -> int:
        return self.r * self.r - 1

    def central_root(self, k: int = 1) -> complex:
        return np.exp(2j * np.pi * (k % self.r) / self.r)


def group_element(mat, tol: float = _UNITARY_TOL) -> np.ndarray:
    """Validate a candidate SU(r) element and hand back a C-contiguous copy.

    Raises ValueError if the matrix is not unitary with unit determinant to
    within `tol`.
    """
    g = np.ascontiguousarray(mat, dtype=complex)
    r = g.shape[0]
    if g.shape != (r, r):
        raise ValueError("square matrix expected")
    udef = np.linalg.norm(g @ g.conj().T - np.eye(r))
    ddef = abs(np.linalg.det(g) - 1.0)
    if udef > tol or ddef > tol:
        raise ValueError(
            f"not special unitary: unitary defect {udef:.3e}, det defect {ddef:.3e}"
        )
    return g


def algebra_element(mat, tol: float = _UNITARY_TOL) -> np.ndarray:
    """Validate anti-Hermitian tracelessness, return a contiguous copy."""
    m = np.ascontiguousarray(mat, dtype=complex)
    r = m.shape[0]
    if m.shape != (r, r):
        raise ValueError("square matrix expected")
    adef = np.linalg.norm(m + m.conj().T)
    tdef = abs(np.trace(m))
    if adef > tol or tdef > tol:
        raise ValueError(
            f"not in su(r): anti-Hermitian defect {adef:.3e}, trace {tdef:.3e}"
        )
    return m


def inner(ctx: LieContext, mu, nu) -> float:
    """Ad-invariant inner product -kappa * Re tr(mu nu)."""
    return -ctx.kappa * float(np.real(np.trace(mu @ nu)))


def norm(ctx: LieContext, mu) -> float:
    return float(np.sqrt(max(inner(ctx, mu, mu), 0.0)))


# Pade-13 coefficients for the matrix exponential; degree fixed, scaling by
# powers of two down to the usual theta_13 ball.
_PADE13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_THETA13 = 5.371920351148152


def expm(mu: np.ndarray) -> np.ndarray:
    """Matrix exponential, scaling-and-squaring with fixed Pade degree 13."""
    a = np.asarray(mu, dtype=complex)
    n = a.shape[0]
    nrm = np.linalg.norm(a, 1)
    s = 0
    if nrm > _THETA13:
        s = int(np.ceil(np.log2(nrm / _THETA13)))
        a = a / (2.0 ** s)
    b = _PADE13
    ident = np.eye(n, dtype=complex)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a2 @ a4
    u = a @ (
        a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
        + b[7] * a6
        + b[5] * a4
        + b[3] * a2
        + b[1] * ident
    )
    v = (
        a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
        + b[6] * a6
        + b[4] * a4
        + b[2] * a2
        + b[0] * ident
    )
    out = np.linalg.solve(-u + v, u + v)
    for _ in range(s):
        out = out @ out
    return out


def _eig_unitary(g: np.ndarray):
    """Unitary diagonalization g = U diag(w) U^*.

    numpy's eig does not promise orthonormal eigenvectors for normal input,
    so re-orthonormalize within degenerate clusters via QR.
    """
    w, vmat = np.linalg.eig(g)
    # cluster by eigenvalue proximity, orthonormalize each cluster
    order = np.argsort(np.angle(w))
    w = w[order]
    vmat = vmat[:, order]
    n = len(w)
    i = 0
    while i < n:
        j = i + 1
        while j < n and abs(w[j] - w[i]) < 1e-8:
            j += 1
        if j - i > 1:
            q, _ = np.linalg.qr(vmat[:, i:j])
            vmat[:, i:j] = q
        else:
            vmat[:, i] = vmat[:, i] / np.linalg.norm(vmat[:, i])
        i = j
    return w, vmat


def logm_with_phase(g: np.ndarray, ctx: LieContext, branch_tol: float = 1e-8):
    """Principal log of a special unitary matrix, center split off.

    Returns (mu, k) with mu traceless anti-Hermitian and k an integer mod r
    such that expm(mu) * central_root(k) reproduces g.  Raises BranchCut when
    any eigenvalue sits within branch_tol of -1.
    """
    g = np.asarray(g, dtype=complex)
    r = g.shape[0]
    w, vmat = _eig_unitary(g)
    if np.min(np.abs(w + 1.0)) < branch_tol:
        raise BranchCut(
            "eigenvalue at the branch cut",
            module="liealg",
            operation="logm",
            residual=float(np.min(np.abs(w + 1.0))),
        )
    theta = np.angle(w)  # principal phases in (-pi, pi]
    raw = (vmat * (1j * theta)) @ vmat.conj().T
    raw = 0.5 * (raw - raw.conj().T)  # strip numerical Hermitian dust
    tr = np.trace(raw)
    # det g = 1 forces sum(theta) into 2 pi Z; that multiple is the phase.
    k = int(np.rint(np.imag(tr) / (2.0 * np.pi)))
    mu = raw - (tr / r) * np.eye(r)
    return mu, k % ctx.r


def logm(g: np.ndarray, ctx: LieContext | None = None, branch_tol: float = 1e-8) -> np.ndarray:
    """Traceless principal log; the recorded central phase is discarded.

    For inputs whose eigenphase sum is zero (the generic case) this is a
    two-sided inverse of expm to roundoff.
    """
    if ctx is None:
        ctx = LieContext(np.asarray(g).shape[0])
    mu, _ = logm_with_phase(g, ctx, branch_tol)
    return mu


def pu_log(g: np.ndarray, ctx: LieContext, branch_tol: float = 1e-8):
    """Minimal-norm log modulo the center.

    Scans the r central branches g * omega^c and returns (mu, k) with mu
    traceless anti-Hermitian of least norm and expm(mu) = g *
    central_root(k).  Central elements log to zero exactly.  Raises
    BranchCut when the winning branch hugs the principal cut or ties
    with another branch: that is the genuine projective cut.
    """
    g = np.asarray(g, dtype=complex)
    r = g.shape[0]
    w, vmat = _eig_unitary(g)
    theta = np.angle(w)
    cands = []
    for c in range(r):
        sh = theta + 2.0 * np.pi * c / r
        sh = np.mod(sh + np.pi, 2.0 * np.pi) - np.pi
        edge = np.pi - np.max(np.abs(sh))
        mean = np.sum(sh) / r
        cost = float(np.sum((sh - mean) ** 2))
        cands.append((cost, c, sh, mean, edge))
    cands.sort(key=lambda t: (t[0], t[1]))

    def build(cand):
        cost, c, sh, mean, edge = cand
        raw = (vmat * (1j * (sh - mean))) @ vmat.conj().T
        mu = 0.5 * (raw - raw.conj().T)
        k = int(np.rint(mean * r / (2.0 * np.pi)))
        return mu, (c - k) % r

    tied = [cand for cand in cands if cand[0] - cands[0][0] < branch_tol]
    built = [build(cand) for cand in tied]
    mu0 = built[0][0]
    for mu_i, _ in built[1:]:
        # a tie is only ambiguous if the tied branches log differently
        if np.max(np.abs(mu_i - mu0)) > 1e-10:
            raise BranchCut(
                "tied central branches at the projective cut",
                module="liealg",
                operation="pu_log",
                residual=float(tied[1][0] - tied[0][0]),
            )
    # among equivalent branches keep the one farthest from the cut
    pick = max(range(len(tied)), key=lambda i: tied[i][4])
    if tied[pick][4] < branch_tol:
        raise BranchCut(
            "eigenvalue at the projective branch cut",
            module="liealg",
            operation="pu_log",
            residual=float(tied[pick][4]),
        )
    return built[pick]


def adjoint(g: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Ad_g(mu) = g mu g^{-1}; unitary input, so the inverse is the dagger."""
    return g @ mu @ g.conj().T


def su_basis(ctx: LieContext) -> np.ndarray:
    """Orthonormal basis of su(r) for inner(); shape (r^2-1, r, r)."""
    r, kap = ctx.r, ctx.kappa
    out = np.zeros((r * r - 1, r, r), dtype=complex)
    idx = 0
    s = 1.0 / np.sqrt(2.0 * kap)
    for a in range(r):
        for b in range(a + 1, r):
            m = np.zeros((r, r), dtype=complex)
            m[a, b] = 1.0
            m[b, a] = -1.0
            out[idx] = s * m
            idx += 1
            m = np.zeros((r, r), dtype=complex)
            m[a, b] = 1j
            m[b, a] = 1j
            out[idx] = s * m
            idx += 1
    for k in range(1, r):
        diag = np.zeros(r, dtype=complex)
        diag[:k] = 1j
        diag[k] = -1j * k
        out[idx] = np.diag(diag) / np.sqrt(kap * k * (k + 1))
        idx += 1
    return out


def to_coords(basis: np.ndarray, mu: np.ndarray, kappa: float) -> np.ndarray:
    """Coordinates of mu in an orthonormal basis (real vector)."""
    # <B_i, mu> = -kappa Re tr(B_i mu)
    return -kappa * np.real(np.einsum("kij,ji->k", basis, mu))


def from_coords(basis: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.einsum("k,kij->ij", np.asarray(c, dtype=float), basis)


def dexp(mu: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Right-trivialized differential of expm.

    d/dt expm(mu + t delta) at t=0 equals dexp(mu, delta) @ expm(mu).
    Computed exactly in the eigenbasis of mu (anti-Hermitian input).
    """
    w, vmat = np.linalg.eigh(1j * np.asarray(mu, dtype=complex))
    theta = -w  # mu = V diag(i theta) V^*
    x = 1j * (theta[:, None] - theta[None, :])
    small = np.abs(x) < 1e-12
    xs = np.where(small, 1.0, x)
    g = np.where(small, 1.0 + x / 2.0 + x * x / 6.0, (np.exp(xs) - 1.0) / xs)
    wdel = vmat.conj().T @ delta @ vmat
    return vmat @ (g * wdel) @ vmat.conj().T


def dexpinv(mu: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Inverse of dexp(mu, .) on su(r)."""
    w, vmat = np.linalg.eigh(1j * np.asarray(mu, dtype=complex))
    theta = -w
    x = 1j * (theta[:, None] - theta[None, :])
    small = np.abs(x) < 1e-12
    xs = np.where(small, 1.0, x)
    g = np.where(small, 1.0 - x / 2.0 + x * x / 12.0, xs / (np.exp(xs) - 1.0))
    wdel = vmat.conj().T @ delta @ vmat
    return vmat @ (g * wdel) @ vmat.conj().T


def project_algebra(m: np.ndarray) -> np.ndarray:
    """Nearest traceless anti-Hermitian matrix (Frobenius projection)."""
    m = np.asarray(m, dtype=complex)
    r = m.shape[0]
    a = 0.5 * (m - m.conj().T)
    return a - (np.trace(a) / r) * np.eye(r)


def project_group(m: np.ndarray) -> np.ndarray:
    """Nearest special unitary matrix via polar decomposition + det fix."""
    u, _, vh = np.linalg.svd(m)
    g = u @ vh
    r = g.shape[0]
    det = np.linalg.det(g)
    # rotate the overall phase back onto the unit determinant slice
    g = g * det ** (-1.0 / r)
    if abs(np.linalg.det(g) - 1.0) > 1e-10:
        # r-th root ambiguity; fix by brute force over central roots
        best = None
        for k in range(r):
            cand = g * np.exp(2j * np.pi * k / r)
            dd = abs(np.linalg.det(cand) - 1.0)
            if best is None or dd < best[0]:
                best = (dd, cand)
        g = best[1]
    return g


def random_algebra(ctx: LieContext, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Gaussian element of su(r): iid N(0, scale^2) coordinates."""
    basis = su_basis(ctx)
    c = rng.normal(0.0, scale, size=basis.shape[0])
    return from_coords(basis, c)


def random_group(ctx: LieContext, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """expm of a Gaussian algebra element; Haar-like for large scale."""
    return expm(random_algebra(ctx, rng, scale))
