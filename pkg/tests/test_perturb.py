"""Unit tests for holonomy perturbations and their gradients."""

import json

import numpy as np
import pytest

from instlat import lattice as lat
from instlat import liealg as la
from instlat import perturb as pt
from instlat import repvar as rv
from instlat.errors import NotCompatible, SearchExhausted

CTX = la.LieContext(2, 1.0, 1)


def _complex(genus=1, res=1, steps=4, genus_sequence=()):
    spec = lat.FibrationSpec(ctx=CTX, genus=genus,
                             genus_sequence=genus_sequence,
                             fiber_resolution=res, collar_steps=steps,
                             epsilon=0.7)
    return lat.build_complex(spec)


def _background(cx):
    pauli = rv.pauli_rep(CTX)
    if len(cx.pieces) == 1:
        return lat.flat_background(cx, pauli)
    # genus sequence (2, 1): the handle killed by each attachment region
    # must hold the identity, its partner loop stays free
    free = la.expm(la.from_coords(la.su_basis(CTX), [0.4, -0.3, 0.2]))
    eye = np.eye(CTX.r, dtype=complex)
    thick = rv.SurfaceRep(2, CTX, np.stack(
        [pauli.gens[0], pauli.gens[1], eye, free]))
    return lat.flat_background(cx, [thick, pauli])


def _rand_field(cx, rng, scale):
    return np.stack([la.random_algebra(CTX, rng, scale)
                     for _ in range(cx.n_edges)])


def _conn(cx, bg, rng, scale=0.15):
    return lat.LatticeConnection(cx, bg.background, _rand_field(cx, rng, scale))


def _two_term_pert(cx):
    l1, l2 = cx.loop_edges[1], cx.loop_edges[2]
    t1 = pt.make_term([[l1[0], l1[1]], [l1[1], l1[0]]], [0.6, 0.4],
                      [1, 2, -1], 0.37)
    t2 = pt.make_term([[l2[0]]], [1.0], [1, 1], -0.21)
    return pt.HoloPert(terms=(t1, t2))


@pytest.fixture(scope="module")
def torus():
    cx = _complex()
    bg = _background(cx)
    return cx, bg


# ------------------------------------------------------------- construction

def test_beta_must_sum_to_one():
    with pytest.raises(ValueError):
        pt.make_term([[[(0, 1)]], [[(0, 1)]]], [0.5, 0.6], [1], 1.0)


def test_beta_must_be_nonnegative():
    with pytest.raises(ValueError):
        pt.make_term([[[(0, 1)]], [[(0, 1)]]], [1.5, -0.5], [1], 1.0)


def test_word_letters_must_address_loops():
    with pytest.raises(ValueError):
        pt.make_term([[[(0, 1)]]], [1.0], [2], 1.0)
    with pytest.raises(ValueError):
        pt.make_term([[[(0, 1)]]], [1.0], [0], 1.0)


def test_loops_must_chain_and_close(torus):
    cx, _ = torus
    loop = cx.loop_edges[1][0]
    open_path = loop[:-1]
    bad = pt.HoloPert(terms=(pt.make_term([[open_path]], [1.0], [1], 1.0),))
    with pytest.raises(ValueError):
        pt.validate_pert(bad, cx)


# --------------------------------------------------------------- evaluation

def test_empty_word_gives_rank(torus):
    cx, bg = torus
    rng = np.random.default_rng(0)
    H = pt.HoloPert(terms=(pt.make_term([[cx.loop_edges[1][0]]], [1.0],
                                        [], 1.0),))
    val = pt.eval_pert(H, _conn(cx, bg, rng), cx)
    assert val == pytest.approx(CTX.r, abs=1e-14)


def test_eval_bounded_on_many_random_connections(torus):
    cx, bg = torus
    rng = np.random.default_rng(1)
    H = _two_term_pert(cx)
    bound = pt.c0_bound(H, CTX.r)
    for _ in range(1000):
        c = _conn(cx, bg, rng, scale=float(rng.uniform(0.0, 1.2)))
        assert abs(pt.eval_pert(H, c, cx)) <= bound + 1e-12


def test_eval_gauge_invariant(torus):
    cx, bg = torus
    rng = np.random.default_rng(2)
    H = _two_term_pert(cx)
    for _ in range(5):
        c = _conn(cx, bg, rng)
        u = lat.LatticeGauge(cx, np.stack(
            [la.random_group(CTX, rng) for _ in range(cx.n_vertices)]))
        assert abs(pt.eval_pert(H, lat.apply_gauge(u, c), cx)
                   - pt.eval_pert(H, c, cx)) < 1e-10


# ----------------------------------------------------------------- gradient

def test_zero_perturbation_has_zero_gradient(torus):
    cx, bg = torus
    rng = np.random.default_rng(3)
    X = pt.pert_gradient(pt.HoloPert.zero(), _conn(cx, bg, rng), cx)
    assert not np.any(X)


def test_gradient_matches_finite_differences(torus):
    cx, bg = torus
    rng = np.random.default_rng(4)
    H = _two_term_pert(cx)
    conn = _conn(cx, bg, rng)
    X = pt.pert_gradient(H, conn, cx)
    ff = lat.flow_field(conn, X)

    def shifted(delta, t):
        vv = np.array([la.logm(la.expm(conn.v[e]) @ la.expm(t * delta[e]))
                       for e in range(cx.n_edges)])
        return pt.eval_pert(
            H, lat.LatticeConnection(cx, bg.background, vv), cx)

    h = 1e-5
    for _ in range(50):
        delta = _rand_field(cx, rng, 1.0)
        pred = sum(cx.edge_weight[e] * la.inner(CTX, ff[e], delta[e])
                   for e in range(cx.n_edges))
        fd = (shifted(delta, h) - shifted(delta, -h)) / (2 * h)
        assert abs(fd - pred) < 1e-6


def test_gradient_equivariant(torus):
    cx, bg = torus
    rng = np.random.default_rng(5)
    H = _two_term_pert(cx)
    for _ in range(3):
        conn = _conn(cx, bg, rng)
        u = lat.LatticeGauge(cx, np.stack(
            [la.random_group(CTX, rng) for _ in range(cx.n_vertices)]))
        X = pt.pert_gradient(H, conn, cx)
        Xg = pt.pert_gradient(H, lat.apply_gauge(u, conn), cx)
        for f in range(cx.n_faces):
            ub = u.values[cx.face_base[f]]
            assert np.abs(Xg[f] - ub.conj().T @ X[f] @ ub).max() < 1e-9


def test_gradient_vanishes_on_sectors_exactly(torus):
    cx, bg = torus
    rng = np.random.default_rng(6)
    X = pt.pert_gradient(_two_term_pert(cx), _conn(cx, bg, rng), cx)
    for f in range(cx.n_faces):
        if cx.face_kind[f] == "sector":
            assert not np.any(X[f])


def test_gradient_vanishes_on_block_faces_exactly():
    cx = _complex(genus_sequence=(2, 1), steps=4)
    bg = _background(cx)
    rng = np.random.default_rng(7)
    conn = _conn(cx, bg, rng)
    loops = cx.loop_edges[1]
    H = pt.HoloPert(terms=(pt.make_term([[loops[0], loops[1]]], [1.0],
                                        [1, 2], 0.4),))
    X = pt.pert_gradient(H, conn, cx)
    for f in range(cx.n_faces):
        if cx.face_piece[f].startswith("block"):
            assert not np.any(X[f])


# ------------------------------------------------------------ split/assemble

def test_split_supports_interior_layers(torus):
    cx, _ = torus
    s = pt.split(_two_term_pert(cx), cx)
    assert s.support() == [("collar_0", 1), ("collar_0", 2)]


def test_split_assemble_round_trip_as_functionals(torus):
    cx, bg = torus
    rng = np.random.default_rng(8)
    H = _two_term_pert(cx)
    H2 = pt.assemble(pt.split(H, cx), cx)
    for _ in range(100):
        c = _conn(cx, bg, rng, scale=0.3)
        assert abs(pt.eval_pert(H, c, cx)
                   - pt.eval_pert(H2, c, cx)) < 1e-12


def test_assemble_split_identity_on_split_data(torus):
    cx, _ = torus
    s = pt.split(_two_term_pert(cx), cx)
    assert pt.split(pt.assemble(s, cx), cx) == s


def test_zero_split_assembles_to_zero(torus):
    cx, _ = torus
    H = pt.assemble(pt.SplitHamiltonian(parts={}), cx)
    assert H == pt.HoloPert.zero()


def test_boundary_layer_loop_not_compatible(torus):
    cx, _ = torus
    loop = cx.loop_edges[0][0]
    H = pt.HoloPert(terms=(pt.make_term([[loop]], [1.0], [1], 0.1),))
    with pytest.raises(NotCompatible):
        pt.split(H, cx)


def test_free_edge_loop_not_compatible():
    cx = _complex(genus_sequence=(2, 1), steps=4)
    e = cx.free_edges[0]
    H = pt.HoloPert(terms=(pt.make_term([[[(e, 1)]]], [1.0], [1], 0.1),))
    with pytest.raises(NotCompatible):
        pt.split(H, cx)


def test_seam_layers_not_compatible_multi_piece():
    cx = _complex(genus_sequence=(2, 1), steps=4)
    assert pt.interior_layers(cx, "collar_0") == [1, 2]
    assert pt.interior_layers(cx, "collar_1") == [5, 6]
    for t in (0, 3, 4, 7):
        loop = cx.loop_edges[t][0]
        H = pt.HoloPert(terms=(pt.make_term([[loop]], [1.0], [1], 0.1),))
        with pytest.raises(NotCompatible):
            pt.split(H, cx)


def test_block_edge_changes_leave_eval_fixed():
    cx = _complex(genus_sequence=(2, 1), steps=4)
    bg = _background(cx)
    rng = np.random.default_rng(9)
    loops = cx.loop_edges[1]
    s = pt.split(pt.HoloPert(terms=(
        pt.make_term([[loops[0]]], [1.0], [1, 1], 0.3),)), cx)
    H = pt.assemble(s, cx)
    conn = _conn(cx, bg, rng)
    v2 = conn.v.copy()
    for e in range(cx.n_edges):
        if cx.edge_piece[e].startswith("block"):
            v2[e] = la.random_algebra(CTX, rng, 0.8)
    conn2 = lat.LatticeConnection(cx, bg.background, v2)
    assert pt.eval_pert(H, conn, cx) == pt.eval_pert(H, conn2, cx)


# ------------------------------------------------------------------- search

class _StubGen:
    def __init__(self, gap):
        self.hessian_gap = gap
        self.cs_value = 0.125


def test_search_returns_unchanged_when_already_separated(torus):
    cx, _ = torus
    H0 = _two_term_pert(cx)
    out = pt.nondegenerate_search(cx, H0, lambda H: [_StubGen(0.5)],
                                  rng_seed=1)
    assert out is H0


def test_search_schedule_and_determinism(torus):
    cx, _ = torus
    calls = []

    def finder(H):
        calls.append(H)
        return [_StubGen(1e-6 if len(calls) < 4 else 1.0)]

    out = pt.nondegenerate_search(cx, pt.HoloPert.zero(), finder, rng_seed=7)
    assert len(out.terms) == 3
    for level, term in enumerate(out.terms, start=1):
        assert pt.term_norm(term, CTX.r) <= 2.0 ** -level
        site = {pt.loop_site(cx, p) for fam in term.copies for p in fam}
        assert all(p == "collar_0" for p, _ in site)
        assert all(t in pt.interior_layers(cx, "collar_0") for _, t in site)

    calls2 = []

    def finder2(H):
        calls2.append(H)
        return [_StubGen(1e-6 if len(calls2) < 4 else 1.0)]

    out2 = pt.nondegenerate_search(cx, pt.HoloPert.zero(), finder2,
                                   rng_seed=7)
    assert out2 == out


def test_search_exhaustion_reports_offender(torus):
    cx, _ = torus
    with pytest.raises(SearchExhausted) as exc:
        pt.nondegenerate_search(cx, pt.HoloPert.zero(),
                                lambda H: [_StubGen(0.5), _StubGen(1e-9)],
                                rng_seed=3, max_rounds=2)
    payload = exc.value.payload()
    assert payload["module"] == "perturb"
    assert payload["generator_index"] == 1
    assert payload["residual"] == pytest.approx(1e-9)


# --------------------------------------------------------------------- json

def test_json_round_trip(torus):
    cx, _ = torus
    H = _two_term_pert(cx)
    blob = json.dumps(pt.pert_to_json(H, cx))
    assert pt.pert_from_json(json.loads(blob), cx) == H


def test_json_carries_vertex_lists_words_and_decimals(torus):
    cx, _ = torus
    H = _two_term_pert(cx)
    obj = pt.pert_to_json(H, cx)
    term = obj["terms"][0]
    assert isinstance(term["coefficient"], float)
    assert all(isinstance(w, int) for w in term["word"])
    loop = term["copies"][0][0]
    assert loop["vertices"][0] == loop["vertices"][-1]
    assert len(loop["vertices"]) == len(loop["edges"]) + 1


def test_json_vertex_only_loops_need_unique_edges(torus):
    cx, _ = torus
    H = _two_term_pert(cx)
    obj = pt.pert_to_json(H, cx)
    for term in obj["terms"]:
        for fam in term["copies"]:
            for loop in fam:
                del loop["edges"]
    with pytest.raises(ValueError):
        pt.pert_from_json(obj, cx)
