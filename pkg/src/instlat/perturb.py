"""Holonomy perturbations of the flatness functional.

A perturbation is a finite sum of Wilson-word functionals

    H(a) = sum_k  c_k * sum_tau  beta_{k,tau} * Re Tr W_k(a; tau),

where each term carries a family of closed loops through a common base
vertex (J loops per disk sample tau, with nonnegative bump weights beta
summing to one) and an integer word in the loop letters.  Loops are made
of fiber and chord edges of a single layer, so every functional depends
only on the restriction of the connection to that fiber surface.

The exact differential is assembled as a face two-cochain through the
metric star pairing: the value on the prism face dual to a loop edge is
chosen so that the star transport of the face cochain back onto edges
reproduces the per-edge covector of the analytic derivative.  Faces
without perturbation support — every surface sector and every face of a
handle-attachment region — stay exactly zero.

`split` and `assemble` realize the correspondence between one global
perturbation and its per-collar, per-layer slices; both directions are
exact at the level of evaluated functionals.  `nondegenerate_search`
appends geometrically shrinking random terms until a caller-supplied
generator finder reports a spectral gap above threshold at every
generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import liealg as la
from . import rng as rng_mod
from .errors import NotCompatible, SearchExhausted

__all__ = [
    "PertTerm",
    "HoloPert",
    "SplitHamiltonian",
    "make_term",
    "validate_pert",
    "c0_bound",
    "term_norm",
    "eval_pert",
    "pert_gradient",
    "edge_covector",
    "loop_site",
    "interior_layers",
    "split",
    "assemble",
    "nondegenerate_search",
    "pert_to_json",
    "pert_from_json",
]


# ---------------------------------------------------------------- data types

def _freeze_path(path):
    return tuple((int(e), 1 if s > 0 else -1) for e, s in path)


@dataclass(frozen=True)
class PertTerm:
    """One Wilson-word functional.

    copies[tau][j] is the j-th closed loop of disk sample tau, stored as a
    tuple of (edge, sign) letters; beta[tau] are nonnegative weights with
    sum one; word is a tuple of nonzero letters in ±1..±J addressing the
    loops (negative = inverse); coefficient scales the whole term.
    """

    copies: tuple
    beta: tuple
    word: tuple
    coefficient: float

    def __post_init__(self):
        copies = tuple(tuple(_freeze_path(p) for p in fam)
                       for fam in self.copies)
        beta = tuple(float(b) for b in self.beta)
        word = tuple(int(w) for w in self.word)
        object.__setattr__(self, "copies", copies)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "word", word)
        object.__setattr__(self, "coefficient", float(self.coefficient))
        if len(copies) == 0:
            raise ValueError("a term needs at least one loop family")
        if len(beta) != len(copies):
            raise ValueError("one weight per disk sample required")
        n_loops = {len(fam) for fam in copies}
        if len(n_loops) != 1:
            raise ValueError("every disk sample must carry the same number "
                             "of loops")
        j_max = n_loops.pop()
        if j_max < 1:
            raise ValueError("a loop family cannot be empty")
        if any(b < 0.0 for b in beta):
            raise ValueError("bump weights must be nonnegative")
        if abs(sum(beta) - 1.0) > 1e-12:
            raise ValueError("bump weights must sum to one within 1e-12")
        for w in word:
            if w == 0 or abs(w) > j_max:
                raise ValueError(f"word letter {w} outside ±1..±{j_max}")

    @property
    def n_samples(self) -> int:
        return len(self.copies)

    @property
    def n_loops(self) -> int:
        return len(self.copies[0])


def make_term(loops_by_sample, beta, word, coefficient) -> PertTerm:
    """Convenience constructor accepting nested lists."""
    return PertTerm(copies=tuple(tuple(_freeze_path(p) for p in fam)
                                 for fam in loops_by_sample),
                    beta=tuple(beta), word=tuple(word),
                    coefficient=float(coefficient))


@dataclass(frozen=True)
class HoloPert:
    """A finite sum of Wilson-word functionals."""

    terms: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))

    @classmethod
    def zero(cls) -> "HoloPert":
        return cls(terms=())

    def __add__(self, other: "HoloPert") -> "HoloPert":
        return HoloPert(terms=self.terms + other.terms)


@dataclass
class SplitHamiltonian:
    """Per-collar, per-layer slices of a compatible perturbation.

    parts maps (piece, layer) to a tuple of PertTerm whose loops all live
    at that collar layer.  Boundary layers never appear as keys: the
    sliced functionals vanish there by construction.
    """

    parts: dict = field(default_factory=dict)

    def support(self):
        return sorted(self.parts)

    def __eq__(self, other):
        if not isinstance(other, SplitHamiltonian):
            return NotImplemented
        return self.parts == other.parts


# ------------------------------------------------------------- validation

def _path_ends(cx, path):
    e0, s0 = path[0]
    start = int(cx.edge_tail[e0]) if s0 > 0 else int(cx.edge_head[e0])
    at = start
    for e, s in path:
        tail = int(cx.edge_tail[e]) if s > 0 else int(cx.edge_head[e])
        head = int(cx.edge_head[e]) if s > 0 else int(cx.edge_tail[e])
        if tail != at:
            raise ValueError("loop letters do not chain head to tail")
        at = head
    return start, at


def validate_pert(H: HoloPert, cx) -> None:
    """Check the complex-dependent invariants: loops closed, chained, and
    based at a common vertex within each disk sample."""
    for k, term in enumerate(H.terms):
        for tau, fam in enumerate(term.copies):
            bases = set()
            for path in fam:
                if len(path) == 0:
                    raise ValueError(f"term {k}: empty loop path")
                start, end = _path_ends(cx, path)
                if start != end:
                    raise ValueError(f"term {k}: loop is not closed")
                bases.add(start)
            if len(bases) != 1:
                raise ValueError(
                    f"term {k}, sample {tau}: loops must share one base "
                    f"vertex, found {sorted(bases)}")


def c0_bound(H: HoloPert, r: int) -> float:
    """Sup bound r * sum |coefficients| of the evaluation map."""
    return float(r) * sum(abs(t.coefficient) for t in H.terms)


def term_norm(term: PertTerm, r: int) -> float:
    """Sup bound of a single term; the search schedule caps this."""
    return float(r) * abs(term.coefficient)


# ------------------------------------------------------------- evaluation

def _word_letters(term: PertTerm, tau: int):
    """Flatten the word into one (edge, sign) letter list, traversed first
    letter first; inverse letters walk the loop backwards."""
    out = []
    fam = term.copies[tau]
    for w in term.word:
        path = fam[abs(w) - 1]
        if w > 0:
            out.extend(path)
        else:
            out.extend((e, -s) for e, s in reversed(path))
    return out


def eval_pert(H: HoloPert, conn, cx=None) -> float:
    """Value of the perturbation on a connection.

    Gauge invariant because every word holonomy is conjugated by the gauge
    value at its base vertex, leaving the trace fixed.
    """
    from . import lattice as lat
    cx = cx or conn.cx
    hol = conn.holonomies()
    total = 0.0
    for term in H.terms:
        acc = 0.0
        for tau in range(term.n_samples):
            w = lat._path_holonomy(hol, _word_letters(term, tau))
            acc += term.beta[tau] * float(np.real(np.trace(w)))
        total += term.coefficient * acc
    return total


def edge_covector(H: HoloPert, conn, cx=None) -> np.ndarray:
    """Per-edge derivative of eval_pert in group-translation coordinates.

    D[e] satisfies  d/dt eval(holonomies with h_e -> h_e expm(t delta))
    = inner(D[e], delta)  summed over edges; entries vanish off loop
    edges.
    """
    from . import lattice as lat
    cx = cx or conn.cx
    ctx = cx.spec.ctx
    r = ctx.r
    hol = conn.holonomies()
    acc = np.zeros((cx.n_edges, r, r), dtype=complex)
    for term in H.terms:
        for tau in range(term.n_samples):
            letters = _word_letters(term, tau)
            if not letters:
                continue
            c = term.coefficient * term.beta[tau]
            if c == 0.0:
                continue
            # prefix products Q_t = T_t ... T_1, Q_0 = I
            prefixes = [np.eye(r, dtype=complex)]
            for e, s in letters:
                h = hol[e] if s > 0 else hol[e].conj().T
                prefixes.append(h @ prefixes[-1])
            m = prefixes[-1]
            for t, (e, s) in enumerate(letters, start=1):
                if s > 0:
                    q = prefixes[t - 1]
                    acc[e] += c * (q @ m @ q.conj().T)
                else:
                    q = prefixes[t]
                    acc[e] -= c * (q @ m @ q.conj().T)
    out = np.zeros_like(acc)
    kappa = ctx.kappa
    for e in range(cx.n_edges):
        if np.any(acc[e]):
            out[e] = -(1.0 / kappa) * la.project_algebra(acc[e])
    return out


def pert_gradient(H: HoloPert, conn, cx=None) -> np.ndarray:
    """Face two-cochain X with star transport equal to the derivative.

    For every direction field delta,

        d eval = sum_e  w_e * inner(flow_field(conn, X)[e], delta[e]),

    exactly, whenever the loops run over star-covered edges (always the
    case for single-layer fiber/chord loops at collar layers).  Sectors
    and handle-attachment faces are exactly zero.
    """
    from . import lattice as lat
    cx = cx or conn.cx
    d = edge_covector(H, conn, cx)
    grad = d / cx.edge_weight[:, None, None]
    return lat.reassemble_two_cochain(conn, grad)


# ------------------------------------------------- collar-slice bookkeeping

def loop_site(cx, path):
    """(piece, layer) of a single-layer fiber/chord loop.

    Raises NotCompatible when the loop leaves one fiber surface or uses a
    vertical or handle edge — such a functional touches a 3-cell of an
    attachment region and admits no collar slicing.
    """
    sites = set()
    for e, _ in path:
        kind = cx.edge_kind[e]
        if kind not in ("fiber", "chord"):
            raise NotCompatible(
                f"loop uses a {kind} edge; only fiber and chord edges "
                "stay inside one fiber surface",
                module="perturb", operation="loop_site",
                edge=int(e), kind=kind)
        sites.add((cx.edge_piece[e], int(cx.edge_layer[e])))
    if len(sites) != 1:
        raise NotCompatible(
            "loop edges spread over several layers",
            module="perturb", operation="loop_site",
            sites=sorted(sites))
    return sites.pop()


def interior_layers(cx, piece: str):
    """Layers of a collar piece strictly inside its parameter interval.

    One-piece complexes exclude only the distinguished fiber at layer 0;
    multi-piece complexes also exclude each collar's first and last layer,
    whose cells touch the neighboring attachment regions.
    """
    if not piece.startswith("collar"):
        return []
    cs = cx.spec.collar_steps
    if len(cx.pieces) == 1:
        return list(range(1, cx.n_layers))
    j = int(piece.split("_")[1])
    return list(range(j * cs + 1, (j + 1) * cs - 1))


def _check_interior(cx, piece, layer):
    if layer not in interior_layers(cx, piece):
        raise NotCompatible(
            f"layer {layer} of {piece} meets the fibered boundary; "
            "sliceable loops must sit at strictly interior layers",
            module="perturb", operation="split",
            piece=piece, layer=int(layer))


def split(H: HoloPert, cx) -> SplitHamiltonian:
    """Slice a compatible perturbation by (collar piece, layer).

    Every disk sample is routed to the bucket of its loops' layer; bucket
    weights are renormalized so each slice is again a valid term, with the
    bucket mass folded into the coefficient.  Samples of weight zero are
    dropped (they contribute exactly nothing).
    """
    validate_pert(H, cx)
    parts = {}
    for term in H.terms:
        site_of = []
        for tau in range(term.n_samples):
            sites = {loop_site(cx, path) for path in term.copies[tau]}
            if len(sites) != 1:
                raise NotCompatible(
                    "loops of one disk sample sit at different layers",
                    module="perturb", operation="split",
                    sites=sorted(sites))
            site = sites.pop()
            _check_interior(cx, *site)
            site_of.append(site)
        for site in sorted(set(site_of)):
            taus = [t for t in range(term.n_samples) if site_of[t] == site]
            mass = sum(term.beta[t] for t in taus)
            if mass <= 0.0:
                continue
            if abs(mass - 1.0) <= 1e-12:
                beta = tuple(term.beta[t] for t in taus)
                coeff = term.coefficient
            else:
                beta = tuple(term.beta[t] / mass for t in taus)
                coeff = term.coefficient * mass
            parts.setdefault(site, []).append(PertTerm(
                copies=tuple(term.copies[t] for t in taus),
                beta=beta, word=term.word, coefficient=coeff))
    return SplitHamiltonian(
        parts={k: tuple(v) for k, v in sorted(parts.items())})


def assemble(s: SplitHamiltonian, cx) -> HoloPert:
    """Merge collar slices back into one perturbation.

    The result depends on the connection only through fiber and chord
    holonomies at interior collar layers, so changing a connection on
    handle-region edges leaves the evaluation exactly fixed.
    """
    terms = []
    for (piece, layer) in sorted(s.parts):
        _check_interior(cx, piece, layer)
        terms.extend(s.parts[(piece, layer)])
    return HoloPert(terms=tuple(terms))


# ------------------------------------------------------ nondegeneracy search

def _random_term(cx, gen, cap: float) -> PertTerm:
    """One random Wilson-word term at an interior layer of collar_0 with
    sup norm at most cap."""
    r = cx.spec.ctx.r
    layers = interior_layers(cx, "collar_0")
    if not layers:
        raise NotCompatible(
            "collar_0 has no interior layers to host search terms",
            module="perturb", operation="nondegenerate_search")
    t = int(layers[int(gen.integers(len(layers)))])
    basis = cx.loop_edges[t]
    n = len(basis)
    j1 = int(gen.integers(n))
    loops = [basis[j1]]
    if n > 1 and gen.random() < 0.5:
        j2 = int(gen.integers(n - 1))
        if j2 >= j1:
            j2 += 1
        loops.append(basis[j2])
    n_letters = 1 + int(gen.integers(2))
    word = []
    for _ in range(n_letters):
        letter = 1 + int(gen.integers(len(loops)))
        word.append(letter if gen.random() < 0.7 else -letter)
    sign = 1.0 if gen.random() < 0.5 else -1.0
    scale = 0.5 + 0.5 * gen.random()
    coeff = sign * scale * cap / r
    return make_term([loops], [1.0], word, coeff)


def nondegenerate_search(cx, base_H: HoloPert, generator_finder,
                         rng_seed: int, max_rounds: int = 10,
                         gap_min: float = 1e-4) -> HoloPert:
    """Append shrinking random terms until every generator is spectrally
    separated.

    generator_finder(H) must return the current generator list; each entry
    exposes hessian_gap.  Round l appends one term of sup norm below
    2**-l, with loops confined to interior layers of collar_0.  The walk
    is a pure function of rng_seed.  Raises SearchExhausted with the
    offending generator's data when max_rounds is not enough.
    """
    H = base_H
    worst = None
    for round_idx in range(max_rounds + 1):
        gens = list(generator_finder(H))
        gaps = [float(g.hessian_gap) for g in gens]
        if not gaps or min(gaps) > gap_min:
            return H
        worst = int(np.argmin(gaps))
        if round_idx == max_rounds:
            break
        level = round_idx + 1
        gen = rng_mod.stream(rng_seed, "nondeg", level)
        H = H + HoloPert(terms=(_random_term(cx, gen, 2.0 ** -level),))
    offender = gens[worst]
    raise SearchExhausted(
        f"generator {worst} keeps a spectral gap of {gaps[worst]:.3e} "
        f"after {max_rounds} rounds (threshold {gap_min:g})",
        module="perturb", operation="nondegenerate_search",
        residual=float(gaps[worst]), generator_index=worst,
        rounds=int(max_rounds),
        cs_value=float(getattr(offender, "cs_value", float("nan"))))


# ------------------------------------------------------------- serialization

def _vertex_list(cx, path):
    start, _ = _path_ends(cx, path)
    verts = [start]
    for e, s in path:
        verts.append(int(cx.edge_head[e]) if s > 0 else int(cx.edge_tail[e]))
    return verts


def pert_to_json(H: HoloPert, cx) -> dict:
    """JSON form: loops as vertex index lists (with signed edge arrays for
    exact reconstruction), words as signed integers, coefficients as
    decimals."""
    terms = []
    for term in H.terms:
        copies = []
        for fam in term.copies:
            copies.append([{"vertices": _vertex_list(cx, p),
                            "edges": [[int(e), int(s)] for e, s in p]}
                           for p in fam])
        terms.append({
            "coefficient": float(term.coefficient),
            "word": [int(w) for w in term.word],
            "beta": [float(b) for b in term.beta],
            "copies": copies,
        })
    return {"terms": terms}


def _edges_from_vertices(cx, verts):
    lookup = {}
    for e in range(cx.n_edges):
        a, b = int(cx.edge_tail[e]), int(cx.edge_head[e])
        lookup.setdefault((a, b), []).append((e, 1))
        lookup.setdefault((b, a), []).append((e, -1))
    path = []
    for a, b in zip(verts[:-1], verts[1:]):
        hits = lookup.get((a, b), [])
        if len(hits) != 1:
            raise ValueError(
                f"vertex pair ({a}, {b}) does not name a unique edge; "
                "supply signed edge arrays")
        path.append(hits[0])
    return path


def pert_from_json(obj: dict, cx=None) -> HoloPert:
    terms = []
    for tj in obj["terms"]:
        copies = []
        for fam in tj["copies"]:
            loops = []
            for lj in fam:
                if "edges" in lj:
                    loops.append([(int(e), int(s)) for e, s in lj["edges"]])
                else:
                    if cx is None:
                        raise ValueError("vertex-list loops need the "
                                         "complex for reconstruction")
                    loops.append(_edges_from_vertices(cx, lj["vertices"]))
            copies.append(loops)
        terms.append(make_term(copies, tj["beta"], tj["word"],
                               tj["coefficient"]))
    return HoloPert(terms=tuple(terms))
