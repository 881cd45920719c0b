"""Unit tests for the representation-variety module."""

import numpy as np
import pytest

from instlat import liealg as la
from instlat import repvar as rv
from instlat.errors import NoSolution, NonConvergence, Reducible

CTX21 = la.LieContext(2, 1.0, 1)
CTX20 = la.LieContext(2, 1.0, 0)


def test_pauli_pair_satisfies_relator():
    assert rv.relator_residual(rv.pauli_rep(CTX21)) < 1e-14


def test_identity_tuple_residual_twisted():
    rep = rv.SurfaceRep(1, CTX21, np.array([np.eye(2, dtype=complex)] * 2))
    assert rv.relator_residual(rep) == pytest.approx(2 * np.sqrt(2), abs=1e-12)


def test_identity_tuple_residual_untwisted():
    rep = rv.SurfaceRep(1, CTX20, np.array([np.eye(2, dtype=complex)] * 2))
    assert rv.relator_residual(rep) == pytest.approx(0.0, abs=1e-14)


def test_objective_gradient_matches_fd():
    rng = np.random.default_rng(7)
    gens = np.array([la.random_group(CTX21, rng, 0.8) for _ in range(4)])
    _, grad = rv._objective_and_grad(gens, CTX21.omega, 2)
    basis = la.su_basis(CTX21)
    eps = 1e-6
    for gi in range(4):
        for k in range(3):
            xi = basis[k]
            plus = gens.copy()
            plus[gi] = la.expm(eps * xi) @ gens[gi]
            minus = gens.copy()
            minus[gi] = la.expm(-eps * xi) @ gens[gi]
            fp, _ = rv._objective_and_grad(plus, CTX21.omega, 2)
            fm, _ = rv._objective_and_grad(minus, CTX21.omega, 2)
            fd = (fp - fm) / (2 * eps)
            an = -float(np.real(np.trace(xi @ grad[gi])))
            assert fd == pytest.approx(an, abs=5e-8)


def test_solve_rep_converges_and_is_deterministic():
    r1 = rv.solve_rep(1, CTX21, seed=3)
    r2 = rv.solve_rep(1, CTX21, seed=3)
    assert rv.relator_residual(r1) < 1e-10
    assert np.array_equal(r1.gens, r2.gens)


def test_solve_rep_different_seeds_converge():
    for seed in range(8):
        rep = rv.solve_rep(1, CTX21, seed=seed)
        assert rv.relator_residual(rep) < 1e-10


def test_solved_rep_is_conjugate_to_pauli():
    # independent check: two separately seeded solves both land on the
    # closed-form class, so the variety is a single point
    p = rv.pauli_rep(CTX21)
    for seed in (3, 17):
        rep = rv.solve_rep(1, CTX21, seed=seed)
        assert rv.conj_distance(rep, p) < 1e-6


def test_genus_zero_twisted_is_empty():
    with pytest.raises(NoSolution):
        rv.solve_rep(0, CTX21, seed=0)


def test_genus_zero_untwisted_trivial():
    rep = rv.solve_rep(0, CTX20, seed=0)
    assert rep.gens.shape == (0, 2, 2)
    assert rv.relator_residual(rep) == 0.0


def test_tangent_dimensions():
    cases = [(1, 2, 1, 0), (2, 2, 1, 6), (3, 2, 1, 12), (2, 3, 1, 16)]
    for genus, r, d, expect in cases:
        ctx = la.LieContext(r, 1.0, d)
        rep = rv.solve_rep(genus, ctx, seed=5)
        assert rv.tangent_dimension(rep) == expect


def test_relator_linearization_matches_fd():
    rng = np.random.default_rng(13)
    rep = rv.solve_rep(2, CTX21, seed=9)
    lin = rv._relator_linearization(rep)
    basis = la.su_basis(CTX21)
    eps = 1e-6
    w0 = rv.relator(rep)
    direc = rng.standard_normal(lin.shape[1])
    pert = rep.gens.copy()
    for gi in range(4):
        xi = la.from_coords(basis, direc[3 * gi : 3 * gi + 3])
        pert[gi] = la.expm(eps * xi) @ rep.gens[gi]
    w1 = rv.relator(rv.SurfaceRep(2, CTX21, np.array([la.project_group(g) for g in pert])))
    fd = la.to_coords(basis, la.project_algebra((w1 - w0) @ np.linalg.inv(w0)), 1.0) / eps
    assert np.linalg.norm(lin @ direc - fd) < 1e-4 * max(1.0, np.linalg.norm(fd))


def test_canonicalize_slice_property():
    rep = rv.solve_rep(1, CTX21, seed=3)
    rng = np.random.default_rng(11)
    c0, _ = rv.canonicalize(rep)
    for _ in range(5):
        g = la.random_group(CTX21, rng)
        c1, _ = rv.canonicalize(rep.conjugate(g))
        assert np.max(np.abs(c0.gens - c1.gens)) < 1e-8


def test_canonicalize_idempotent():
    rep = rv.solve_rep(2, CTX21, seed=4)
    c0, _ = rv.canonicalize(rep)
    c1, _ = rv.canonicalize(c0)
    assert np.max(np.abs(c0.gens - c1.gens)) < 1e-10


def test_canonicalize_anchor_diagonal_sorted():
    rep = rv.solve_rep(1, CTX21, seed=3)
    c, _ = rv.canonicalize(rep)
    a = c.gens[0]
    off = a - np.diag(np.diag(a))
    assert np.max(np.abs(off)) < 1e-10
    ph = np.angle(np.diag(a))
    assert np.all(np.diff(ph) <= 1e-12)


def test_canonicalize_conjugator_returned():
    rep = rv.solve_rep(2, CTX21, seed=6)
    c, g = rv.canonicalize(rep)
    redone = rep.conjugate(g)
    assert np.max(np.abs(redone.gens - c.gens)) < 1e-10


def test_canonicalize_rejects_reducible():
    d1 = np.diag([np.exp(0.3j), np.exp(-0.3j)])
    d2 = np.diag([np.exp(0.7j), np.exp(-0.7j)])
    rep = rv.SurfaceRep(1, CTX20, np.array([d1, d2]))
    with pytest.raises(Reducible):
        rv.canonicalize(rep)


def test_conj_distance_conjugate_inputs():
    rep = rv.solve_rep(1, CTX21, seed=3)
    rng = np.random.default_rng(21)
    g = la.random_group(CTX21, rng)
    assert rv.conj_distance(rep, rep.conjugate(g)) < 1e-8


def test_conj_distance_symmetric():
    r1 = rv.solve_rep(2, CTX21, seed=1)
    r2 = rv.solve_rep(2, CTX21, seed=2)
    d12 = rv.conj_distance(r1, r2)
    d21 = rv.conj_distance(r2, r1)
    assert d12 == pytest.approx(d21, abs=1e-8)


def test_conj_distance_zero_on_self():
    rep = rv.solve_rep(1, CTX21, seed=3)
    assert rv.conj_distance(rep, rep) < 1e-10


def test_commutant_dimension_irreducible():
    assert rv.commutant_dimension(rv.pauli_rep(CTX21)) == 1


def test_commutant_dimension_torus_pair():
    d1 = np.diag([np.exp(0.3j), np.exp(-0.3j)])
    d2 = np.diag([np.exp(0.7j), np.exp(-0.7j)])
    rep = rv.SurfaceRep(1, CTX20, np.array([d1, d2]))
    assert rv.commutant_dimension(rep) == 2


def test_sample_moduli_single_point_variety():
    ms = rv.sample_moduli(1, CTX21, 10, seed=1)
    assert ms.n_clusters == 1
    assert not any(ms.reducible)
    assert ms.distance_matrix.shape == (10, 10)
    assert np.max(ms.distance_matrix) < 1e-6


def test_sample_moduli_untwisted_flags_reducibles():
    ms = rv.sample_moduli(1, CTX20, 8, seed=7, with_distance_matrix=False)
    assert any(ms.reducible)


def test_sample_moduli_separation_invariant():
    ms = rv.sample_moduli(1, CTX20, 8, seed=7, with_distance_matrix=False)
    for i, a in enumerate(ms.representatives):
        for b in ms.representatives[i + 1 :]:
            assert rv.conj_distance(ms.points[a], ms.points[b]) > 2 * ms.cluster_radius


def test_json_roundtrip():
    rep = rv.solve_rep(2, CTX21, seed=1)
    back = rv.rep_from_json(rv.rep_to_json(rep))
    assert np.max(np.abs(back.gens - rep.gens)) < 1e-15
    assert back.ctx == rep.ctx
