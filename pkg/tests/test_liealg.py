"""Unit tests for the Lie numerics layer."""

import numpy as np
import pytest
import scipy.linalg

from instlat import liealg as la
from instlat.errors import BranchCut

SX = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SY = np.array([[0.0, -1j], [1j, 0.0]], dtype=complex)
SZ = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)

CTX2 = la.LieContext(2, 1.0, 0)
CTX3 = la.LieContext(3, 1.0, 0)


def test_inner_pauli_orthogonal():
    assert la.inner(CTX2, 1j * SX, 1j * SY) == pytest.approx(0.0, abs=1e-14)


def test_inner_pauli_norm():
    assert la.inner(CTX2, 1j * SZ, 1j * SZ) == pytest.approx(2.0, abs=1e-14)


def test_inner_mixed_zero():
    assert la.inner(CTX2, 1j * SX, 1j * SZ) == pytest.approx(0.0, abs=1e-14)


def test_inner_scales_with_kappa():
    ctx = la.LieContext(2, 2.5, 0)
    assert la.inner(ctx, 1j * SZ, 1j * SZ) == pytest.approx(5.0, abs=1e-13)


def test_inner_positive_definite():
    rng = np.random.default_rng(0)
    for _ in range(50):
        mu = la.random_algebra(CTX3, rng)
        n = la.inner(CTX3, mu, mu)
        assert n > 0 or np.linalg.norm(mu) < 1e-14


def test_inner_ad_invariant():
    rng = np.random.default_rng(1)
    for _ in range(20):
        mu = la.random_algebra(CTX3, rng)
        nu = la.random_algebra(CTX3, rng)
        g = la.random_group(CTX3, rng)
        lhs = la.inner(CTX3, la.adjoint(g, mu), la.adjoint(g, nu))
        assert lhs == pytest.approx(la.inner(CTX3, mu, nu), abs=1e-12)


def test_expm_zero():
    assert np.linalg.norm(la.expm(np.zeros((3, 3))) - np.eye(3)) < 1e-15


def test_expm_pi_sigma_z():
    assert np.linalg.norm(la.expm(np.pi * 1j * SZ) + np.eye(2)) < 1e-12


def test_expm_matches_reference_large_norm():
    # own Pade-13 against the scipy oracle up to Frobenius norm 10
    rng = np.random.default_rng(2)
    for _ in range(20):
        mu = la.random_algebra(CTX3, rng)
        mu *= 10.0 / np.linalg.norm(mu)
        assert np.linalg.norm(la.expm(mu) - scipy.linalg.expm(mu)) < 1e-10


def test_expm_group_valued():
    rng = np.random.default_rng(3)
    for _ in range(20):
        g = la.expm(la.random_algebra(CTX3, rng, scale=3.0))
        la.group_element(g, tol=1e-10)


def test_logm_roundtrip_from_algebra():
    rng = np.random.default_rng(4)
    for _ in range(30):
        mu = la.random_algebra(CTX3, rng, scale=0.8)
        back = la.logm(la.expm(mu), CTX3)
        assert np.linalg.norm(back - mu) < 1e-10


def test_expm_logm_roundtrip_group():
    rng = np.random.default_rng(5)
    for _ in range(30):
        g = la.random_group(CTX3, rng, scale=0.8)
        assert np.linalg.norm(la.expm(la.logm(g, CTX3)) - g) < 1e-12


def test_logm_branch_cut_raises():
    with pytest.raises(BranchCut) as ei:
        la.logm(-np.eye(2), CTX2)
    assert ei.value.module == "liealg"


def test_logm_near_branch_raises():
    g = scipy.linalg.expm(1j * (np.pi - 1e-10) * SZ)
    with pytest.raises(BranchCut):
        la.logm(g, CTX2)


def test_logm_central_phase():
    ctx = la.LieContext(3, 1.0, 1)
    g = ctx.omega * np.eye(3)
    mu, k = la.logm_with_phase(g, ctx)
    assert np.linalg.norm(mu) < 1e-12
    assert k == 1


def test_logm_phase_composes_with_central_roots():
    ctx = la.LieContext(3, 1.0, 0)
    rng = np.random.default_rng(6)
    mu = la.random_algebra(ctx, rng, scale=0.3)
    g = la.expm(mu)
    _, k = la.logm_with_phase(ctx.central_root(2) * g, ctx)
    assert k == 2


def test_logm_output_in_algebra():
    rng = np.random.default_rng(7)
    for _ in range(20):
        g = la.random_group(CTX3, rng, scale=1.2)
        mu = la.logm(g, CTX3)
        la.algebra_element(mu, tol=1e-10)


def test_su_basis_orthonormal():
    for ctx in (CTX2, CTX3, la.LieContext(4, 1.0, 0)):
        basis = la.su_basis(ctx)
        assert basis.shape[0] == ctx.r * ctx.r - 1
        for i in range(basis.shape[0]):
            for j in range(basis.shape[0]):
                want = 1.0 if i == j else 0.0
                assert la.inner(ctx, basis[i], basis[j]) == pytest.approx(want, abs=1e-12)


def test_coords_roundtrip():
    rng = np.random.default_rng(8)
    basis = la.su_basis(CTX3)
    for _ in range(10):
        mu = la.random_algebra(CTX3, rng)
        c = la.to_coords(basis, mu, CTX3.kappa)
        assert np.linalg.norm(la.from_coords(basis, c) - mu) < 1e-12


def test_dexp_matches_finite_difference():
    rng = np.random.default_rng(9)
    eps = 1e-6
    for _ in range(10):
        mu = la.random_algebra(CTX2, rng, scale=0.7)
        delta = la.random_algebra(CTX2, rng)
        fd = (la.expm(mu + eps * delta) - la.expm(mu - eps * delta)) / (2 * eps)
        an = la.dexp(mu, delta) @ la.expm(mu)
        assert np.linalg.norm(fd - an) < 1e-8


def test_dexpinv_inverts_dexp():
    rng = np.random.default_rng(10)
    for _ in range(10):
        mu = la.random_algebra(CTX3, rng, scale=0.6)
        delta = la.random_algebra(CTX3, rng)
        back = la.dexpinv(mu, la.dexp(mu, delta))
        assert np.linalg.norm(back - delta) < 1e-10


def test_adjoint_composition():
    rng = np.random.default_rng(11)
    g = la.random_group(CTX3, rng)
    h = la.random_group(CTX3, rng)
    mu = la.random_algebra(CTX3, rng)
    lhs = la.adjoint(g @ h, mu)
    rhs = la.adjoint(g, la.adjoint(h, mu))
    assert np.linalg.norm(lhs - rhs) < 1e-11


def test_project_group_near_identity():
    rng = np.random.default_rng(12)
    g = la.random_group(CTX3, rng)
    noisy = g + 1e-9 * rng.standard_normal((3, 3))
    proj = la.project_group(noisy)
    la.group_element(proj, tol=1e-12)
    assert np.linalg.norm(proj - g) < 1e-7


def test_context_validation():
    with pytest.raises(ValueError):
        la.LieContext(1, 1.0, 0)
    with pytest.raises(ValueError):
        la.LieContext(2, -1.0, 0)
    ctx = la.LieContext(2, 1.0, 3)
    assert ctx.d == 1


def test_omega_matrix():
    ctx = la.LieContext(2, 1.0, 1)
    assert np.linalg.norm(ctx.omega_matrix + np.eye(2)) < 1e-15
