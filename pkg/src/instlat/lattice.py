"""Cell complexes for broken circle fibrations, with discrete connections.

The 3-complex is a circular stack of prism slabs.  Each layer carries a
one-vertex polygon model of a closed genus-g surface: loops a_1, b_1, ...,
a_g, b_g cut into `fiber_resolution` segments, the 4g*res-gon fanned into
sector faces by chords from the base vertex.  The fan keeps V = F on every
layer, so each slab admits an edge <-> face bijection (the discrete star)
used by the flow field and the energy bookkeeping.

Slabs are mapping cylinders of cellular maps between consecutive layers:
the identity inside collars, a monodromy substitution on the gluing slab
of a mapping torus, and collapse maps (kill a_g, send b_g to a free loop)
for the elementary-cobordism blocks of an even-length genus sequence.  On
a nonidentity slab every subdivision vertex maps to the base vertex and
each first segment carries the whole image word of its loop.

Connections are stored against a flat twisted background: hol(e) =
background(e) @ expm(v(e)).  Edge holonomies compose leftward (later edges
multiply on the left), so a plaquette word evaluated from its base corner
transforms by Ad(u(base)^-1).  Curvature is the full plaquette logarithm,
which makes gauge covariance exact; its linear part is the transported
coboundary, with d(d(.)) = 0 exact against the flat background.

Metric weights follow the per-direction convention: collar dt-directions
weigh 1 and tangent directions eps^2, blocks weigh eps^2 in every
direction; a cell's weight is the product over its directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import liealg as la
from .errors import (
    BranchCut,
    InvalidGenusSequence,
    LiftAmbiguous,
    NotNearInteger,
)

__all__ = [
    "FibrationSpec",
    "LatticeComplex",
    "LatticeConnection",
    "LatticeGauge",
    "MONODROMY_LIBRARY",
    "build_complex",
    "complex_from_json",
    "flat_background",
    "curvature",
    "linear_curvature",
    "quadratic_curvature",
    "face_jacobian",
    "vertex_coboundary",
    "flatness_residual",
    "flatness_breakdown",
    "chern_simons",
    "chern_simons_path_integral",
    "cs_period",
    "coulomb_gauge_fix",
    "apply_gauge",
    "compose_gauge",
    "identity_gauge",
    "random_gauge",
    "gauge_vertex_cochain",
    "degree",
    "parity",
    "circle_winding",
    "twist_model_gauge",
    "pairing",
    "flow_field",
    "reassemble_two_cochain",
    "norm2_faces",
    "norm2_edges",
    "wilson_loop",
    "connection_to_json",
    "connection_from_json",
    "resolve_monodromy",
]


# monodromy substitutions: loop letter i (0-based) -> word of signed
# 1-based letters.  Every entry rewrites the surface relator to a conjugate
# of itself, which keeps the slab 3-cells well defined.
MONODROMY_LIBRARY = {
    "identity": {},
    # right-handed Dehn twist along a_1: b_1 -> b_1 a_1
    "dehn_a1": {1: (2, 1)},
    # right-handed Dehn twist along b_1: a_1 -> a_1 b_1
    "dehn_b1": {0: (1, 2)},
    # swap of handles 1 and 2 (genus >= 2)
    "swap12": {0: (3,), 1: (4,), 2: (1,), 3: (2,)},
}


def _compose_subst(first: dict, second: dict, n_letters: int) -> dict:
    """Substitution applying `first`, then `second` to the result."""
    out = {}
    for i in range(n_letters):
        word = first.get(i, (i + 1,))
        image = []
        for letter in word:
            j = abs(letter) - 1
            w2 = second.get(j, (j + 1,))
            image.extend(w2 if letter > 0 else tuple(-x for x in reversed(w2)))
        if tuple(image) != (i + 1,):
            out[i] = tuple(image)
    return out


def resolve_monodromy(label: str, genus: int) -> dict:
    """Parse 'name' or 'name1*name2*...' (applied left to right)."""
    subst = {}
    for part in label.split("*"):
        if part not in MONODROMY_LIBRARY:
            raise InvalidGenusSequence(
                f"unknown gluing map label {part!r}",
                module="lattice", operation="build_complex")
        atom = MONODROMY_LIBRARY[part]
        for i in atom:
            if i >= 2 * genus:
                raise InvalidGenusSequence(
                    f"gluing map {part!r} needs genus > {i // 2}",
                    module="lattice", operation="build_complex")
        subst = _compose_subst(subst, atom, 2 * genus)
    return subst


@dataclass(frozen=True)
class FibrationSpec:
    """Combinatorial description of the broken fibration.

    An empty genus_sequence selects mapping-torus mode: a single fiber of
    `genus` with the gluing map `monodromy`.  A nonempty sequence must
    have even length with cyclically adjacent genera differing by one.
    """

    ctx: la.LieContext
    genus_sequence: tuple = ()
    genus: int = 0
    monodromy: str = "identity"
    fiber_resolution: int = 1
    collar_steps: int = 1
    epsilon: float = 1.0

    def __post_init__(self):
        if self.fiber_resolution < 1 or self.collar_steps < 1:
            raise InvalidGenusSequence(
                "resolution and collar_steps must be >= 1",
                module="lattice", operation="build_complex")
        if not 0.0 < self.epsilon <= 1.0:
            raise InvalidGenusSequence(
                "epsilon must lie in (0, 1]",
                module="lattice", operation="build_complex")
        seq = tuple(int(g) for g in self.genus_sequence)
        object.__setattr__(self, "genus_sequence", seq)
        if seq:
            if len(seq) % 2 != 0:
                raise InvalidGenusSequence(
                    "genus sequence length must be even",
                    module="lattice", operation="build_complex")
            for j, g in enumerate(seq):
                nxt = seq[(j + 1) % len(seq)]
                if abs(g - nxt) != 1:
                    raise InvalidGenusSequence(
                        f"adjacent genera {g},{nxt} must differ by one",
                        module="lattice", operation="build_complex")
                if g < 1:
                    raise InvalidGenusSequence(
                        "fiber genus must be >= 1 in the sequence",
                        module="lattice", operation="build_complex")
        else:
            if self.genus < 1:
                raise InvalidGenusSequence(
                    "mapping-torus mode needs genus >= 1",
                    module="lattice", operation="build_complex")
            resolve_monodromy(self.monodromy, self.genus)


class _FiberTemplate:
    """One-vertex fan model of a closed genus-g surface at resolution res.

    Local vertex 0 is the base.  Loop i segment s is a local edge; chords
    run from the base to each subdivision vertex's first occurrence on the
    4g*res-gon boundary.  Faces are the fan sectors; the last sector (the
    one closing the relator word) carries the twist marking.
    """

    def __init__(self, genus: int, res: int):
        self.genus = genus
        self.res = res
        nl = 2 * genus

        def vid(i, s):
            return 0 if s % res == 0 else 1 + i * (res - 1) + (s - 1)

        self.n_vertices = 1 + nl * (res - 1)
        self.seg = np.arange(nl * res).reshape(nl, res)
        self.edge_tail = []
        self.edge_head = []
        for i in range(nl):
            for s in range(res):
                self.edge_tail.append(vid(i, s))
                self.edge_head.append(vid(i, s + 1))
        # relator word expanded into segments
        word = []
        for j in range(genus):
            for letter, sign in ((2 * j, 1), (2 * j + 1, 1),
                                 (2 * j, -1), (2 * j + 1, -1)):
                rng = range(res) if sign > 0 else range(res - 1, -1, -1)
                word.extend((int(self.seg[letter, s]), sign) for s in rng)
        self.word = word
        L = len(word)
        # corner k = start vertex of word position k
        corner_vertex = [
            self.edge_tail[e] if sign > 0 else self.edge_head[e]
            for e, sign in word
        ]
        self.corner_vertex = corner_vertex
        # chords at first occurrences of subdivision vertices
        seen = {0}
        self.chord_corner = []
        for k in range(L):
            v = corner_vertex[k]
            if v not in seen:
                seen.add(v)
                self.chord_corner.append(k)
        self.n_chords = len(self.chord_corner)
        self.chord = []
        base_e = nl * res
        for idx, k in enumerate(self.chord_corner):
            self.edge_tail.append(0)
            self.edge_head.append(corner_vertex[k])
            self.chord.append(base_e + idx)
        self.n_edges = len(self.edge_tail)
        # sector faces between consecutive chord corners
        cuts = [0] + list(self.chord_corner) + [L]
        self.sectors = []
        for i in range(len(cuts) - 1):
            lo, hi = cuts[i], cuts[i + 1]
            bdry = []
            if i > 0:
                bdry.append((self.chord[i - 1], 1))
            bdry.extend(word[lo:hi])
            if i < len(cuts) - 2:
                bdry.append((self.chord[i], -1))
            self.sectors.append(bdry)
        self.twist_sector = len(self.sectors) - 1
        # boundary-word prefix length per chord, for partial holonomies
        self.chord_prefix = {self.chord[i]: self.chord_corner[i]
                             for i in range(self.n_chords)}

    def loop_path(self, i: int):
        """Segment edges of loop i, tail-to-head order."""
        return [(int(e), 1) for e in self.seg[i]]

    def identity_edge_map(self):
        return {e: [(e, 1)] for e in range(self.n_edges)}

    def subst_edge_words(self, subst: dict):
        """Cellular image of each local edge under a loop substitution.

        First segments carry the whole image word; later segments collapse
        to the base vertex.  Chords map to the image of the boundary arc
        they cut off.  A loop mapped to the token "FREE" produces a
        free-edge letter; a loop mapped to () collapses.
        """
        images = {}
        loop_word = {}
        for i in range(2 * self.genus):
            word = subst.get(i, (i + 1,))
            if word == "FREE":
                loop_word[i] = [("FREE", 1)]
                continue
            path = []
            for letter in word:
                j = abs(letter) - 1
                segs = self.loop_path(j)
                path.extend(segs if letter > 0 else
                            [(e, -s) for (e, s) in reversed(segs)])
            loop_word[i] = path
        for i in range(2 * self.genus):
            images[int(self.seg[i, 0])] = list(loop_word[i])
            for s in range(1, self.res):
                images[int(self.seg[i, s])] = []
        for c, k in self.chord_prefix.items():
            path = []
            for e, sign in self.word[:k]:
                img = images[e]
                path.extend(img if sign > 0 else
                            [(x, -s) for (x, s) in reversed(img)])
            images[c] = path
        return images


@dataclass
class LatticeComplex:
    """Immutable after build_complex; all index arrays are global."""

    spec: FibrationSpec
    n_vertices: int = 0
    vertex_layer: list = field(default_factory=list)
    vertex_piece: list = field(default_factory=list)
    edge_tail: np.ndarray = None
    edge_head: np.ndarray = None
    edge_kind: list = field(default_factory=list)    # fiber | chord | vertical | free
    edge_layer: list = field(default_factory=list)
    edge_piece: list = field(default_factory=list)
    edge_weight: np.ndarray = None
    faces: list = field(default_factory=list)        # (edge list, sign list)
    face_kind: list = field(default_factory=list)    # sector | prism
    face_layer: list = field(default_factory=list)
    face_piece: list = field(default_factory=list)
    face_twist: np.ndarray = None
    face_weight: np.ndarray = None
    face_base: list = field(default_factory=list)
    cells: list = field(default_factory=list)
    cell_weight: np.ndarray = None
    layers: list = field(default_factory=list)       # template per layer
    layer_genus: list = field(default_factory=list)
    base_vertex: list = field(default_factory=list)
    loop_edges: list = field(default_factory=list)   # layer -> loop -> path
    star_face: np.ndarray = None
    star_sign: np.ndarray = None
    star_coef: np.ndarray = None
    star_edge: np.ndarray = None
    star_path: list = field(default_factory=list)
    n_layers: int = 0
    monodromy_slab: int = -1
    pieces: list = field(default_factory=list)
    seams: dict = field(default_factory=dict)
    fiber_slices: list = field(default_factory=list)
    fingerprint_bases: list = field(default_factory=list)
    free_edges: list = field(default_factory=list)
    block_free_prism: dict = field(default_factory=dict)
    vertical: dict = field(default_factory=dict)     # (slab, vertex) -> edge

    @property
    def n_edges(self):
        return len(self.edge_kind)

    @property
    def n_faces(self):
        return len(self.faces)

    def euler_characteristics(self):
        """chi of each stored fiber slice, in layer order."""
        return [(layer, len(vs) - len(es) + len(fs))
                for layer, genus, vs, es, fs in self.fiber_slices]

    def circle_loop(self):
        """Section loop through the base vertices (mapping-torus mode)."""
        if self.spec.genus_sequence:
            raise ValueError("circle section requires mapping-torus mode")
        return [(self.vertical[(t, self.base_vertex[t])], 1)
                for t in range(self.n_layers)]

    def to_json(self) -> dict:
        return {
            "genus_sequence": list(self.spec.genus_sequence),
            "genus": self.spec.genus,
            "monodromy": self.spec.monodromy,
            "r": self.spec.ctx.r,
            "kappa": self.spec.ctx.kappa,
            "d": self.spec.ctx.d,
            "fiber_resolution": self.spec.fiber_resolution,
            "collar_steps": self.spec.collar_steps,
            "epsilon": self.spec.epsilon,
        }


def complex_from_json(obj: dict) -> LatticeComplex:
    ctx = la.LieContext(obj["r"], obj.get("kappa", 1.0), obj.get("d", 0))
    return build_complex(FibrationSpec(
        ctx=ctx,
        genus_sequence=tuple(obj.get("genus_sequence", ())),
        genus=obj.get("genus", 0),
        monodromy=obj.get("monodromy", "identity"),
        fiber_resolution=obj.get("fiber_resolution", 1),
        collar_steps=obj.get("collar_steps", 1),
        epsilon=obj.get("epsilon", 1.0),
    ))


def _direction_weight(piece: str, tangent: bool, eps: float) -> float:
    if piece.startswith("block"):
        return eps * eps
    return eps * eps if tangent else 1.0


def build_complex(spec: FibrationSpec) -> LatticeComplex:
    """Assemble the prism-slab complex for the given fibration."""
    cx = LatticeComplex(spec=spec)
    res = spec.fiber_resolution
    eps = spec.epsilon

    if spec.genus_sequence:
        seq = spec.genus_sequence
        npieces = len(seq)
        layer_plan = []
        for j, g in enumerate(seq):
            layer_plan.extend([(g, f"collar_{j}")] * spec.collar_steps)
        cx.pieces = [f"collar_{j}" for j in range(npieces)]
        cx.pieces += [f"block_{j}{(j + 1) % npieces}" for j in range(npieces)]

        def slab_info(s):
            j = s // spec.collar_steps
            if (s + 1) % spec.collar_steps == 0:
                jn = (j + 1) % npieces
                return f"block_{j}{jn}", seq[j], seq[jn]
            return f"collar_{j}", seq[j], seq[j]
    else:
        layer_plan = [(spec.genus, "collar_0")] * spec.collar_steps
        cx.pieces = ["collar_0"]

        def slab_info(s):
            return "collar_0", spec.genus, spec.genus

        cx.monodromy_slab = spec.collar_steps - 1

    T = len(layer_plan)
    cx.n_layers = T
    templates = {}
    for g, _ in layer_plan:
        if g not in templates:
            templates[g] = _FiberTemplate(g, res)

    subst_torus = (resolve_monodromy(spec.monodromy, spec.genus)
                   if not spec.genus_sequence else {})

    # ---- layers
    vert_of, edge_of, face_of = [], [], []
    g_tail, g_head = [], []
    twists = []
    for t, (g, piece) in enumerate(layer_plan):
        tpl = templates[g]
        cx.layers.append(tpl)
        cx.layer_genus.append(g)
        vmap = []
        for _ in range(tpl.n_vertices):
            vmap.append(cx.n_vertices)
            cx.vertex_layer.append(t)
            cx.vertex_piece.append(piece)
            cx.n_vertices += 1
        vert_of.append(vmap)
        cx.base_vertex.append(vmap[0])
        emap = []
        for eloc in range(tpl.n_edges):
            emap.append(len(cx.edge_kind))
            cx.edge_kind.append("fiber" if eloc < 2 * g * res else "chord")
            cx.edge_layer.append(t)
            cx.edge_piece.append(piece)
            g_tail.append(vmap[tpl.edge_tail[eloc]])
            g_head.append(vmap[tpl.edge_head[eloc]])
        edge_of.append(emap)
        fmap = []
        for floc, bdry in enumerate(tpl.sectors):
            fmap.append(len(cx.faces))
            cx.faces.append(([emap[e] for e, s in bdry],
                             [s for e, s in bdry]))
            cx.face_kind.append("sector")
            cx.face_layer.append(t)
            cx.face_piece.append(piece)
            cx.face_base.append(vmap[0])
            twists.append(1 if floc == tpl.twist_sector else 0)
        face_of.append(fmap)
        cx.loop_edges.append(
            [[(emap[e], s) for e, s in tpl.loop_path(i)]
             for i in range(2 * g)])
        cx.fiber_slices.append((t, g, list(vmap), list(emap), list(fmap)))

    # ---- slabs
    slab_piece = []
    for s in range(T):
        piece, g_before, g_after = slab_info(s)
        slab_piece.append(piece)
        is_block = piece.startswith("block")
        # mapping cylinders run thick -> thin, so an ascending block keeps
        # the higher-genus layer as its combinatorial bottom
        if is_block and g_after > g_before:
            t_bot, t_top = (s + 1) % T, s
        else:
            t_bot, t_top = s, (s + 1) % T
        g_bot = layer_plan[t_bot][0]
        tpl_bot = templates[g_bot]
        tpl_top = templates[layer_plan[t_top][0]]

        if is_block:
            killed = 2 * (g_bot - 1)
            subst = {killed: (), killed + 1: "FREE"}
        elif s == cx.monodromy_slab:
            subst = subst_torus
        else:
            subst = {}
        product_slab = (not is_block) and subst == {}

        free_edge = None
        if is_block:
            free_edge = len(cx.edge_kind)
            cx.edge_kind.append("free")
            cx.edge_layer.append(t_top)
            cx.edge_piece.append(piece)
            g_tail.append(cx.base_vertex[t_top])
            g_head.append(cx.base_vertex[t_top])
            cx.free_edges.append(free_edge)

        if product_slab:
            imgs = tpl_bot.identity_edge_map()
        else:
            imgs = tpl_bot.subst_edge_words(subst)

        def to_global(word):
            return [(free_edge if e == "FREE" else edge_of[t_top][e], sg)
                    for e, sg in word]

        # vertical edges
        vmap_bot = vert_of[t_bot]
        for vloc in range(tpl_bot.n_vertices):
            eid = len(cx.edge_kind)
            cx.vertical[(s, vmap_bot[vloc])] = eid
            cx.edge_kind.append("vertical")
            cx.edge_layer.append(t_bot)
            cx.edge_piece.append(piece)
            g_tail.append(vmap_bot[vloc])
            g_head.append(vert_of[t_top][vloc if product_slab else 0])

        # prism faces over bottom edges
        prism_of = {}
        for eloc in range(tpl_bot.n_edges):
            e_g = edge_of[t_bot][eloc]
            img = to_global(imgs[eloc])
            tail_v, head_v = g_tail[e_g], g_head[e_g]
            s_tail = cx.vertical[(s, tail_v)]
            s_head = cx.vertical[(s, head_v)]
            word_e = [(e_g, 1), (s_head, 1)]
            word_e += [(x, -sg) for (x, sg) in reversed(img)]
            word_e += [(s_tail, -1)]
            fid = len(cx.faces)
            prism_of[eloc] = fid
            cx.faces.append(([x for x, sg in word_e],
                             [sg for x, sg in word_e]))
            cx.face_kind.append("prism")
            cx.face_layer.append(t_bot)
            cx.face_piece.append(piece)
            cx.face_base.append(tail_v)
            if is_block and eloc == int(tpl_bot.seg[killed + 1, 0]):
                cx.block_free_prism[piece] = fid

        # 3-cells over bottom sectors, with image chains on the top layer
        n_top_f = len(tpl_top.sectors)
        n_top_e = tpl_top.n_edges + (1 if is_block else 0)
        bmat = np.zeros((n_top_e, n_top_f))
        for floc, bdry in enumerate(tpl_top.sectors):
            for e, sg in bdry:
                bmat[e, floc] += sg
        twist_vec = np.zeros(n_top_f)
        twist_vec[tpl_top.twist_sector] = 1.0

        for floc, bdry in enumerate(tpl_bot.sectors):
            if product_slab:
                top_chain = [(face_of[t_top][floc], 1)]
            else:
                chain = np.zeros(n_top_e)
                for e, sg in bdry:
                    for x, sg2 in imgs[e]:
                        row = tpl_top.n_edges if x == "FREE" else x
                        chain[row] += sg * sg2
                sol, *_ = np.linalg.lstsq(bmat, chain, rcond=None)
                # fix the closed-fiber ambiguity so twist flux matches
                want = float(twists[face_of[t_bot][floc]])
                sol = sol + (want - float(twist_vec @ sol)) * np.ones(n_top_f)
                soli = np.rint(sol)
                if np.max(np.abs(bmat @ soli - chain)) > 1e-8:
                    raise InvalidGenusSequence(
                        "gluing map image chain is not a face boundary",
                        module="lattice", operation="build_complex")
                top_chain = [(face_of[t_top][k], int(soli[k]))
                             for k in range(n_top_f) if soli[k] != 0]
            cx.cells.append({
                "bottom": face_of[t_bot][floc],
                "top_chain": top_chain,
                "sides": [(prism_of[e], sg) for e, sg in bdry],
                "vertical_base": cx.vertical[(s, cx.base_vertex[t_bot])],
                "layer": t_bot,
                "slab": s,
                "piece": piece,
            })

    cx.edge_tail = np.array(g_tail, dtype=int)
    cx.edge_head = np.array(g_head, dtype=int)
    cx.face_twist = np.array(
        twists + [0] * (len(cx.faces) - len(twists)), dtype=int)

    # ---- weights
    ew = np.zeros(cx.n_edges)
    for e in range(cx.n_edges):
        tangent = cx.edge_kind[e] in ("fiber", "chord", "free")
        ew[e] = _direction_weight(cx.edge_piece[e], tangent, eps)
    cx.edge_weight = ew
    fw = np.zeros(cx.n_faces)
    for f in range(cx.n_faces):
        if cx.face_kind[f] == "sector":
            fw[f] = _direction_weight(cx.face_piece[f], True, eps) ** 2
        else:
            fw[f] = (_direction_weight(cx.face_piece[f], False, eps)
                     * _direction_weight(cx.face_piece[f], True, eps))
    cx.face_weight = fw
    cw = np.zeros(len(cx.cells))
    for c, cell in enumerate(cx.cells):
        p = cell["piece"]
        cw[c] = (_direction_weight(p, False, eps)
                 * _direction_weight(p, True, eps) ** 2)
    cx.cell_weight = cw

    _build_star(cx, layer_plan, templates, vert_of, edge_of, face_of,
                slab_piece)
    _build_seams_and_bases(cx, vert_of, edge_of, face_of)
    return cx


def _build_star(cx, layer_plan, templates, vert_of, edge_of, face_of,
                slab_piece):
    """Edge <-> face bijection per collar slab, with transport paths.

    Loop segments pair with the prism face over the symplectic partner
    (a_j <-> b_j, opposite signs); chords pair with their own prism;
    vertical edges pair with sector faces (base vertex <-> twist sector,
    each chord-target vertex <-> the sector its chord closes).
    """
    n_e, n_f = cx.n_edges, cx.n_faces
    star_face = -np.ones(n_e, dtype=int)
    star_sign = np.zeros(n_e)
    star_edge = -np.ones(n_f, dtype=int)
    cx.star_path = [None] * n_e
    res = cx.spec.fiber_resolution

    prism_face_of_edge = {}
    for f in range(n_f):
        if cx.face_kind[f] == "prism":
            prism_face_of_edge[cx.faces[f][0][0]] = f

    for s in range(cx.n_layers):
        if slab_piece[s].startswith("block"):
            continue
        t = s
        g = layer_plan[t][0]
        tpl = templates[g]
        emap, fmap, vmap = edge_of[t], face_of[t], vert_of[t]
        for j in range(g):
            for q in range(res):
                ea = emap[int(tpl.seg[2 * j, q])]
                eb = emap[int(tpl.seg[2 * j + 1, q])]
                if ea in prism_face_of_edge and eb in prism_face_of_edge:
                    star_face[ea] = prism_face_of_edge[eb]
                    star_sign[ea] = 1.0
                    star_face[eb] = prism_face_of_edge[ea]
                    star_sign[eb] = -1.0
        for c in tpl.chord:
            ec = emap[c]
            if ec in prism_face_of_edge:
                star_face[ec] = prism_face_of_edge[ec]
                star_sign[ec] = 1.0
        ev = cx.vertical.get((s, vmap[0]))
        if ev is not None:
            star_face[ev] = fmap[tpl.twist_sector]
            star_sign[ev] = 1.0
        for idx, k in enumerate(tpl.chord_corner):
            ev = cx.vertical.get((s, vmap[tpl.corner_vertex[k]]))
            if ev is not None:
                star_face[ev] = fmap[idx]
                star_sign[ev] = 1.0

        for e in emap + [cx.vertical[(s, v)] for v in vmap]:
            f = star_face[e]
            if f < 0:
                continue
            cx.star_path[e] = _vertex_path(
                cx, t, tpl, emap, cx.face_base[f], int(cx.edge_tail[e]))

    coef = np.zeros(n_e)
    for e in range(n_e):
        f = star_face[e]
        if f >= 0:
            coef[e] = np.sqrt(cx.edge_weight[e] * cx.face_weight[f])
            star_edge[f] = e
    cx.star_face = star_face
    cx.star_sign = star_sign
    cx.star_coef = coef
    cx.star_edge = star_edge


def _vertex_path(cx, t, tpl, emap, v_from, v_to):
    """Canonical edge path v_from -> v_to within layer t, through the base."""
    def base_to(vglob):
        for loop in range(2 * tpl.genus):
            out = []
            for q in range(tpl.res):
                e = emap[int(tpl.seg[loop, q])]
                out.append((e, 1))
                if int(cx.edge_head[e]) == vglob:
                    return out
        return []

    path = []
    if v_from != cx.base_vertex[t]:
        path.extend([(e, -s) for e, s in reversed(base_to(v_from))])
    if v_to != cx.base_vertex[t]:
        path.extend(base_to(v_to))
    return path


def _build_seams_and_bases(cx, vert_of, edge_of, face_of):
    spec = cx.spec
    if spec.genus_sequence:
        npieces = len(spec.genus_sequence)
        for j in range(npieces):
            jn = (j + 1) % npieces
            t = (j + 1) * spec.collar_steps - 1
            cx.seams[(f"collar_{j}", f"block_{j}{jn}")] = {
                "vertices": list(vert_of[t]),
                "edges": list(edge_of[t]),
                "faces": list(face_of[t]),
            }
            t2 = ((j + 1) * spec.collar_steps) % cx.n_layers
            cx.seams[(f"block_{j}{jn}", f"collar_{jn}")] = {
                "vertices": list(vert_of[t2]),
                "edges": list(edge_of[t2]),
                "faces": list(face_of[t2]),
            }
        for j in range(npieces):
            jn = (j + 1) % npieces
            thin_is_next = spec.genus_sequence[jn] < spec.genus_sequence[j]
            t_thin = (((j + 1) * spec.collar_steps) % cx.n_layers
                      if thin_is_next else (j + 1) * spec.collar_steps - 1)
            g_thin = min(spec.genus_sequence[j], spec.genus_sequence[jn])
            loops = [cx.loop_edges[t_thin][i] for i in range(2 * g_thin)]
            free = [[(e, 1)] for e in cx.free_edges
                    if cx.edge_piece[e] == f"block_{j}{jn}"]
            cx.fingerprint_bases.append((f"block_{j}{jn}", loops + free))
    else:
        cx.fingerprint_bases.append(
            ("collar_0",
             [cx.loop_edges[0][i] for i in range(2 * spec.genus)]))


# ------------------------------------------------------------- connections

@dataclass
class LatticeConnection:
    """background @ expm(v) per edge; the background is flat as twisted."""

    cx: LatticeComplex
    background: np.ndarray
    v: np.ndarray

    def copy(self):
        return LatticeConnection(self.cx, self.background, self.v.copy())

    def holonomies(self):
        out = np.empty_like(self.background)
        for e in range(self.cx.n_edges):
            out[e] = self.background[e] @ la.expm(self.v[e])
        return out

    def edge_holonomy(self, e):
        return self.background[e] @ la.expm(self.v[e])


@dataclass
class LatticeGauge:
    """Vertex-indexed group elements."""

    cx: LatticeComplex
    values: np.ndarray

    def __post_init__(self):
        for u in self.values:
            la.group_element(u, tol=1e-8)


def _path_holonomy(hol, path):
    r = hol.shape[-1]
    out = np.eye(r, dtype=complex)
    for e, s in path:
        h = hol[e]
        out = (h if s > 0 else h.conj().T) @ out
    return out


def wilson_loop(conn: LatticeConnection, path) -> np.ndarray:
    return _path_holonomy(conn.holonomies(), path)


def flat_background(cx: LatticeComplex, reps,
                    intertwiner=None) -> LatticeConnection:
    """Flat twisted background from fiber representation data.

    reps: one SurfaceRep per collar piece, pushed to every layer of that
    collar.  On a mapping torus with nonidentity monodromy phi the rep and
    the intertwiner S must satisfy rho(phi(x)) = S rho(x) S^-1 on loops;
    the gluing slab's vertical edges then carry S.  On blocks the thick
    rep must kill the collapsed loop (rho(a_g) = Id); the free-edge value
    is solved from prism-face closure.
    """
    ctx = cx.spec.ctx
    r = ctx.r
    if not isinstance(reps, (list, tuple)):
        reps = [reps]
    bg = np.tile(np.eye(r, dtype=complex), (cx.n_edges, 1, 1))

    def collar_of_layer(t):
        return 0 if not cx.spec.genus_sequence else t // cx.spec.collar_steps

    for t in range(cx.n_layers):
        tpl = cx.layers[t]
        gens = reps[collar_of_layer(t)].gens
        emap = cx.fiber_slices[t][3]
        nseg = tpl.seg.shape[1]
        for i in range(2 * tpl.genus):
            # spread each loop holonomy evenly over its segments: keeps
            # per-edge content small so gauge images of the background
            # stay clear of the log fold and refine with resolution
            try:
                root = la.expm(la.logm(gens[i], ctx) / nseg)
            except BranchCut:
                root = None
            if root is None or nseg == 1:
                bg[emap[int(tpl.seg[i, 0])]] = gens[i]
            else:
                for k in range(nseg):
                    bg[emap[int(tpl.seg[i, k])]] = root
        for c, k in tpl.chord_prefix.items():
            h = np.eye(r, dtype=complex)
            for e, sg in tpl.word[:k]:
                he = bg[emap[e]]
                h = (he if sg > 0 else he.conj().T) @ h
            bg[emap[c]] = h

    if intertwiner is not None and cx.monodromy_slab >= 0:
        for (slab, _), eid in cx.vertical.items():
            if slab == cx.monodromy_slab:
                bg[eid] = intertwiner

    # free block edges: closure of the square prism over the freed loop
    for piece, f in cx.block_free_prism.items():
        edges, signs = cx.faces[f]
        e = next(x for x in edges if cx.edge_kind[x] == "free")
        idx = edges.index(e)
        pre = np.eye(r, dtype=complex)
        for k in range(idx + 1, len(edges)):
            hx = bg[edges[k]]
            pre = (hx if signs[k] > 0 else hx.conj().T) @ pre
        post = np.eye(r, dtype=complex)
        for k in range(idx):
            hx = bg[edges[k]]
            post = (hx if signs[k] > 0 else hx.conj().T) @ post
        target = pre.conj().T @ post.conj().T
        bg[e] = la.project_group(
            target if signs[idx] > 0 else target.conj().T)

    return LatticeConnection(
        cx, bg, np.zeros((cx.n_edges, r, r), dtype=complex))


# ---------------------------------------------------------------- curvature

def _face_word_transports(cx, hol, f):
    """Running holonomies T_i along face f's boundary word; T_0 = Id."""
    edges, signs = cx.faces[f]
    r = hol.shape[-1]
    T = [np.eye(r, dtype=complex)]
    for e, s in zip(edges, signs):
        h = hol[e] if s > 0 else hol[e].conj().T
        T.append(h @ T[-1])
    return T


def _twisted_plaquette(cx, hol, f):
    T = _face_word_transports(cx, hol, f)
    plaq = T[-1]
    if cx.face_twist[f]:
        plaq = plaq * (np.conj(cx.spec.ctx.omega) ** int(cx.face_twist[f]))
    return plaq, T


def curvature(conn: LatticeConnection, cx: LatticeComplex = None) -> np.ndarray:
    """Plaquette logarithm per face, valued at the face base corner.

    F(f) is the minimal-norm log of omega^-twist(f) * plaquette(f) taken
    modulo the center, so a centrally shifted plaquette still reads as
    flat: the structure group is projective and central flux through a
    face is a discrete class, not curvature.  Exactly zero on the flat
    background and exactly Ad(u(base)^-1)-covariant under apply_gauge.
    """
    cx = cx or conn.cx
    ctx = cx.spec.ctx
    hol = conn.holonomies()
    r = ctx.r
    out = np.zeros((cx.n_faces, r, r), dtype=complex)
    for f in range(cx.n_faces):
        plaq, _ = _twisted_plaquette(cx, hol, f)
        out[f] = la.pu_log(plaq, ctx)[0]
    return out


def linear_curvature(conn: LatticeConnection, w: np.ndarray,
                     background_only: bool = True) -> np.ndarray:
    """Transported coboundary of the edge cochain w: the exact linear part
    of `curvature` at the background (or at the full connection)."""
    cx = conn.cx
    r = cx.spec.ctx.r
    hol = conn.background if background_only else conn.holonomies()
    out = np.zeros((cx.n_faces, r, r), dtype=complex)
    for f in range(cx.n_faces):
        edges, signs = cx.faces[f]
        T = _face_word_transports(cx, hol, f)
        acc = np.zeros((r, r), dtype=complex)
        for i, (e, s) in enumerate(zip(edges, signs)):
            theta = T[i].conj().T if s > 0 else T[i].conj().T @ hol[e]
            acc += s * (theta @ w[e] @ theta.conj().T)
        out[f] = acc
    return out


def quadratic_curvature(conn: LatticeConnection, w: np.ndarray) -> np.ndarray:
    """[w cup w]: twice the second-order term of the plaquette log at the
    background; the sum over ordered word positions of [X_i, X_j], i > j."""
    cx = conn.cx
    r = cx.spec.ctx.r
    hol = conn.background
    out = np.zeros((cx.n_faces, r, r), dtype=complex)
    for f in range(cx.n_faces):
        edges, signs = cx.faces[f]
        T = _face_word_transports(cx, hol, f)
        acc = np.zeros((r, r), dtype=complex)
        run = np.zeros((r, r), dtype=complex)
        for i, (e, s) in enumerate(zip(edges, signs)):
            theta = T[i].conj().T if s > 0 else T[i].conj().T @ hol[e]
            x = s * (theta @ w[e] @ theta.conj().T)
            acc += x @ run - run @ x
            run += x
        out[f] = acc
    return out


def face_jacobian(conn: LatticeConnection, f: int, hol=None):
    """Exact differential of curvature(f) in the edge cochain, at conn.

    Returns (edge_ids, apply) with apply(i, delta) the dF contribution of
    perturbing v(edge_ids[i]) by delta.
    """
    cx = conn.cx
    ctx = cx.spec.ctx
    if hol is None:
        hol = conn.holonomies()
    edges, signs = cx.faces[f]
    plaq, T = _twisted_plaquette(cx, hol, f)
    F = la.pu_log(plaq, ctx)[0]
    thetas = []
    for i, s in enumerate(signs):
        # right-trivialized insertion point: Ad(P T_{i+1}^-1) for forward
        # letters, Ad(P T_i^-1) for reversed ones
        thetas.append(plaq @ (T[i + 1].conj().T if s > 0
                              else T[i].conj().T))

    def apply(i, delta):
        e, s = edges[i], signs[i]
        dh_h = conn.background[e] @ la.dexp(conn.v[e], delta) \
            @ conn.background[e].conj().T
        val = s * (thetas[i] @ dh_h @ thetas[i].conj().T)
        return la.dexpinv(F, la.project_algebra(val))

    return list(edges), apply


def vertex_coboundary(conn: LatticeConnection, xi: np.ndarray,
                      background_only: bool = False) -> np.ndarray:
    """(d xi)(e) = Ad(hol(e)^-1) xi(head) - xi(tail)."""
    cx = conn.cx
    r = cx.spec.ctx.r
    hol = conn.background if background_only else conn.holonomies()
    out = np.zeros((cx.n_edges, r, r), dtype=complex)
    for e in range(cx.n_edges):
        h = hol[e]
        out[e] = h.conj().T @ xi[cx.edge_head[e]] @ h - xi[cx.edge_tail[e]]
    return out


# ------------------------------------------------------------------- norms

def norm2_faces(cx: LatticeComplex, G: np.ndarray) -> float:
    ctx = cx.spec.ctx
    return float(sum(cx.face_weight[f] * la.inner(ctx, G[f], G[f])
                     for f in range(cx.n_faces)))


def norm2_edges(cx: LatticeComplex, w: np.ndarray) -> float:
    ctx = cx.spec.ctx
    return float(sum(cx.edge_weight[e] * la.inner(ctx, w[e], w[e])
                     for e in range(cx.n_edges)))


def flatness_residual(conn: LatticeConnection, cx: LatticeComplex = None,
                      H=None) -> float:
    """Weighted L2 norm of F - X_H over all faces."""
    cx = cx or conn.cx
    G = curvature(conn, cx)
    if H is not None:
        from . import perturb
        G = G - perturb.pert_gradient(H, conn, cx)
    return float(np.sqrt(norm2_faces(cx, G)))


def flatness_breakdown(conn: LatticeConnection, cx: LatticeComplex = None,
                       H=None) -> dict:
    """Squared residual split by (piece, face kind); entries scale by fixed
    epsilon powers when the same v data is reweighted."""
    cx = cx or conn.cx
    G = curvature(conn, cx)
    if H is not None:
        from . import perturb
        G = G - perturb.pert_gradient(H, conn, cx)
    ctx = cx.spec.ctx
    out = {}
    for f in range(cx.n_faces):
        key = (cx.face_piece[f], cx.face_kind[f])
        out[key] = out.get(key, 0.0) + cx.face_weight[f] * la.inner(
            ctx, G[f], G[f])
    return out


# ------------------------------------------------------------------- gauge

def apply_gauge(u: LatticeGauge, conn: LatticeConnection) -> LatticeConnection:
    """h -> u(head)^-1 h u(tail), re-split against the fixed background.

    Vertical runs are stored with S^1-continuous branches: the seam edge
    of each run (its largest log) is moved to the matrix-log branch
    nearest minus the sum of the run's other logs, so a transformation
    that climbs the circle k times keeps its true accumulated branch
    instead of the principal fold.  No-op for small transformations,
    whose principal logs already satisfy run continuity.
    """
    cx = conn.cx
    ctx = cx.spec.ctx
    vals = u.values
    vnew = np.empty_like(conn.v)
    for e in range(cx.n_edges):
        h = conn.background[e] @ la.expm(conn.v[e])
        hp = vals[cx.edge_head[e]].conj().T @ h @ vals[cx.edge_tail[e]]
        vnew[e] = la.logm(conn.background[e].conj().T @ hp, ctx)
    for col in _vertical_columns(cx):
        if len(col) < 3:
            continue
        norms = [np.linalg.norm(vnew[e]) for e in col]
        seam = col[int(np.argmax(norms))]
        target = -sum(vnew[e] for e in col if e != seam)
        vnew[seam] = _rebranch(vnew[seam], target)
    return LatticeConnection(cx, conn.background, vnew)


def compose_gauge(u: LatticeGauge, w: LatticeGauge) -> LatticeGauge:
    """Pointwise w(x) u(x): apply_gauge(compose_gauge(u, w), a) equals
    apply_gauge(u, apply_gauge(w, a))."""
    return LatticeGauge(u.cx, np.array(
        [a @ b for a, b in zip(w.values, u.values)]))


def identity_gauge(cx: LatticeComplex) -> LatticeGauge:
    r = cx.spec.ctx.r
    return LatticeGauge(
        cx, np.tile(np.eye(r, dtype=complex), (cx.n_vertices, 1, 1)))


def random_gauge(cx: LatticeComplex, rng, scale: float = 1.0) -> LatticeGauge:
    ctx = cx.spec.ctx
    return LatticeGauge(cx, np.array(
        [la.expm(la.random_algebra(ctx, rng, scale))
         for _ in range(cx.n_vertices)]))


def gauge_vertex_cochain(u: LatticeGauge, xi: np.ndarray) -> np.ndarray:
    return np.array([g.conj().T @ x @ g for g, x in zip(u.values, xi)])


def _twist_generator(ctx: la.LieContext, m: int = 1) -> np.ndarray:
    """Traceless generator whose exponential is the m-th central root."""
    r = ctx.r
    return 2j * np.pi * m * np.diag([1.0 - 1.0 / r] + [-1.0 / r] * (r - 1))


def twist_model_gauge(cx: LatticeComplex, m: int = 1) -> LatticeGauge:
    """S^1-winding central-twist transformation: u at layer t is
    expm((t/T) Xi_m) with expm(Xi_m) central; degree m times the bundle
    twist, circle parity m mod r."""
    ctx = cx.spec.ctx
    r = ctx.r
    T = cx.n_layers
    xi = _twist_generator(ctx, m)
    vals = np.empty((cx.n_vertices, r, r), dtype=complex)
    for vtx in range(cx.n_vertices):
        vals[vtx] = la.expm((cx.vertex_layer[vtx] / T) * xi)
    return LatticeGauge(cx, vals)


def _vertical_columns(cx: LatticeComplex):
    """Closed runs of vertical edges around the circle, one per layer-0
    vertex whose run returns to its start; edges oriented bottom to top."""
    cols = []
    for v0 in range(cx.n_vertices):
        if cx.vertex_layer[v0] != 0:
            continue
        col, z = [], v0
        ok = True
        for s in range(cx.n_layers):
            e = cx.vertical.get((s, z))
            if e is None:
                ok = False
                break
            col.append(e)
            z = int(cx.edge_head[e])
        if ok and z == v0:
            cols.append(col)
    return cols


def _rebranch(v: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Move v to the matrix-log branch nearest target, keeping expm(v)
    and the trace fixed.  Returns v itself when no shift is needed."""
    w, V = np.linalg.eigh(1j * v)
    psi = -w
    t = np.diag(V.conj().T @ target @ V).imag
    n = np.rint((t - psi) / (2.0 * np.pi)).astype(int)
    while n.sum() != 0:
        sgn = -1 if n.sum() > 0 else 1
        resid = (psi + 2.0 * np.pi * n) - t
        j = int(np.argmin(np.abs(resid + sgn * 2.0 * np.pi)))
        n[j] += sgn
    if not n.any():
        return v
    out = V @ np.diag(1j * (psi + 2.0 * np.pi * n)) @ V.conj().T
    return 0.5 * (out - out.conj().T)


def circle_winding(conn: LatticeConnection):
    """Consensus integer S^1-winding stored in the cochain.

    A transformation that climbs the circle k times leaves, on each
    vertical run, small per-layer logs plus one seam edge whose log
    carries the accumulated coweight content k(T-1)/T; the seam is the
    run's largest log, its content is de-biased by T/(T-1) and averaged
    over runs.  Near-zero cochains read 0.  Returns (winding, raw mean).
    """
    cx = conn.cx
    ctx = cx.spec.ctx
    xi = _twist_generator(ctx)
    nxi = la.inner(ctx, xi, xi)
    vals = []
    for col in _vertical_columns(cx):
        T = len(col)
        if T < 3:
            continue
        norms = [np.linalg.norm(conn.v[e]) for e in col]
        seam = col[int(np.argmax(norms))]
        w = la.inner(ctx, conn.v[seam], xi) / nxi
        vals.append(w * T / (T - 1.0))
    if not vals:
        return 0, 0.0
    mean = float(np.mean(vals))
    return int(np.rint(mean)), mean


# ------------------------------------------------------------ cup pairing

def pairing(conn: LatticeConnection, G: np.ndarray, beta: np.ndarray,
            background_only: bool = False) -> float:
    """Topological pairing: sum over 3-cells of <G wedge beta>.

    Per cell: the bottom face pairs with the vertical edge at its base
    corner; each side prism face, transported to the base corner, pairs
    with the partial sum of transported beta letters preceding its bottom
    edge.  Transports use the connection (or only the background).
    """
    cx = conn.cx
    ctx = cx.spec.ctx
    hol = conn.background if background_only else conn.holonomies()
    total = 0.0
    for cell in cx.cells:
        f = cell["bottom"]
        edges, signs = cx.faces[f]
        T = _face_word_transports(cx, hol, f)
        total += la.inner(ctx, G[f], beta[cell["vertical_base"]])
        run = np.zeros_like(G[f])
        for i, (e, s) in enumerate(zip(edges, signs)):
            theta = T[i].conj().T if s > 0 else T[i].conj().T @ hol[e]
            gtil = T[i].conj().T @ G[cell["sides"][i][0]] @ T[i]
            total += la.inner(ctx, gtil, run)
            run += s * (theta @ beta[e] @ theta.conj().T)
    return float(total)


# ----------------------------------------------------- circle invariants

def cs_period(ctx: la.LieContext) -> float:
    return 4.0 * np.pi ** 2 * ctx.kappa / ctx.r


def coulomb_gauge_fix(conn: LatticeConnection, tol: float = 1e-12,
                      max_iter: int = 200):
    """Minimal weighted-norm representative on the gauge orbit.

    Three deterministic passes.  First a spanning-tree normalization
    equates tree-edge holonomies with the background; that map is an
    exact orbit invariant (any gauge factor cancels on the co-tree
    holonomies up to a transported constant), so every image of the same
    connection enters the solver from the same point.  Then gradient
    descent on the center-blind weighted log-norm, then damped Newton on
    the stationarity equation (weighted divergence of v vanishes).  The
    returned cochain is reduced modulo the center edge by edge, making
    the representative insensitive to central holonomy shifts.  Returns
    (fixed_connection, gauge_used).
    """
    cx = conn.cx
    ctx = cx.spec.ctx
    r = ctx.r
    n = cx.n_vertices
    bg = conn.background
    base_hol = conn.holonomies()

    u = np.tile(np.eye(r, dtype=complex), (n, 1, 1))
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    order = [0]
    adj = [[] for _ in range(n)]
    for e in range(cx.n_edges):
        adj[cx.edge_tail[e]].append(e)
        adj[cx.edge_head[e]].append(e)
    qi = 0
    while qi < len(order):
        x = order[qi]
        qi += 1
        for e in sorted(adj[x]):
            tl, hd = int(cx.edge_tail[e]), int(cx.edge_head[e])
            if tl == x and not seen[hd]:
                u[hd] = la.project_group(base_hol[e] @ u[tl]
                                         @ bg[e].conj().T)
                seen[hd] = True
                order.append(hd)
            elif hd == x and not seen[tl]:
                u[tl] = la.project_group(base_hol[e].conj().T @ u[hd]
                                         @ bg[e])
                seen[tl] = True
                order.append(tl)

    def hols_of(uu):
        out = np.empty((cx.n_edges, r, r), dtype=complex)
        for e in range(cx.n_edges):
            out[e] = (uu[cx.edge_head[e]].conj().T @ base_hol[e]
                      @ uu[cx.edge_tail[e]])
        return out

    def pu_norm2(hols):
        tot = 0.0
        for e in range(cx.n_edges):
            mu = la.pu_log(bg[e].conj().T @ hols[e], ctx)[0]
            tot += cx.edge_weight[e] * la.inner(ctx, mu, mu)
        return tot

    def grad_of(hols):
        g = np.zeros((n, r, r), dtype=complex)
        for e in range(cx.n_edges):
            mu = la.pu_log(bg[e].conj().T @ hols[e], ctx)[0]
            core = bg[e] @ mu @ bg[e].conj().T
            w = cx.edge_weight[e]
            g[cx.edge_tail[e]] += w * la.project_algebra(
                hols[e].conj().T @ core @ hols[e])
            g[cx.edge_head[e]] -= w * la.project_algebra(core)
        return g

    hols = hols_of(u)
    f = pu_norm2(hols)
    step = 0.5
    for _ in range(max_iter):
        try:
            g = grad_of(hols)
        except BranchCut:
            break
        gn = sum(la.inner(ctx, x, x) for x in g)
        if gn < 1e-12:
            break
        moved = False
        while step > 1e-14:
            unew = np.array([la.expm(-step * g[k]) @ u[k]
                             for k in range(n)])
            hnew = hols_of(unew)
            try:
                fc = pu_norm2(hnew)
            except BranchCut:
                # step drove an edge log onto the cut; shrink and retry
                step *= 0.5
                continue
            if fc <= f - 0.25 * step * gn:
                u, hols, f = unew, hnew, fc
                step = min(step * 1.5, 2.0)
                moved = True
                break
            step *= 0.5
        if not moved:
            break

    basis = la.su_basis(ctx)
    dim = basis.shape[0]
    incident = [[] for _ in range(n)]
    for e in range(cx.n_edges):
        incident[cx.edge_tail[e]].append(e)
        if cx.edge_head[e] != cx.edge_tail[e]:
            incident[cx.edge_head[e]].append(e)

    def edge_contrib(e, hol):
        bg = conn.background[e]
        core = bg @ la.pu_log(bg.conj().T @ hol, ctx)[0] @ bg.conj().T
        w = cx.edge_weight[e]
        return (w * la.project_algebra(hol.conj().T @ core @ hol),
                -w * la.project_algebra(core))

    def full_state(uu):
        g = np.zeros((n, r, r), dtype=complex)
        hols = np.empty((cx.n_edges, r, r), dtype=complex)
        parts = []
        for e in range(cx.n_edges):
            hols[e] = (uu[cx.edge_head[e]].conj().T @ base_hol[e]
                       @ uu[cx.edge_tail[e]])
            gt, gh = edge_contrib(e, hols[e])
            parts.append((gt, gh))
            g[cx.edge_tail[e]] += gt
            g[cx.edge_head[e]] += gh
        gv = np.concatenate(
            [la.to_coords(basis, g[k], ctx.kappa) for k in range(n)])
        return gv, hols, parts

    def column_delta(k, bk, t, hols, parts):
        # re-evaluates only edges incident to vertex k
        dg = np.zeros((n, r, r), dtype=complex)
        ep = la.expm(t * bk)
        em = ep.conj().T
        for e in incident[k]:
            h = hols[e]
            if cx.edge_tail[e] == k:
                h = h @ ep
            if cx.edge_head[e] == k:
                h = em @ h
            gt, gh = edge_contrib(e, h)
            dg[cx.edge_tail[e]] += gt - parts[e][0]
            dg[cx.edge_head[e]] += gh - parts[e][1]
        return np.concatenate(
            [la.to_coords(basis, dg[k2], ctx.kappa) for k2 in range(n)])

    try:
        gv, hols, parts = full_state(u)
        for _ in range(30):
            res = np.linalg.norm(gv)
            if res < tol:
                break
            fd = 1e-6
            jac = np.empty((n * dim, n * dim))
            for k in range(n):
                for b in range(dim):
                    bk = u[k].conj().T @ basis[b] @ u[k]
                    jac[:, k * dim + b] = (
                        column_delta(k, bk, fd, hols, parts)
                        - column_delta(k, bk, -fd, hols, parts)) / (2 * fd)
            xi, *_ = np.linalg.lstsq(jac, gv, rcond=None)
            damp = 1.0
            improved = False
            while damp > 1e-6:
                unew = np.array([
                    la.project_group(la.expm(-damp * la.from_coords(
                        basis, xi[k * dim:(k + 1) * dim])) @ u[k])
                    for k in range(n)])
                try:
                    gnew, hnew, pnew = full_state(unew)
                except BranchCut:
                    damp *= 0.5
                    continue
                if np.linalg.norm(gnew) < res:
                    u, gv, hols, parts = unew, gnew, hnew, pnew
                    improved = True
                    break
                damp *= 0.5
            if not improved:
                break
    except BranchCut:
        # polish aborted at a cut; the descent result stands
        pass
    hols = hols_of(u)
    vfix = np.empty_like(conn.v)
    for e in range(cx.n_edges):
        vfix[e] = la.pu_log(bg[e].conj().T @ hols[e], ctx)[0]
    return LatticeConnection(cx, bg, vfix), LatticeGauge(cx, u)


def chern_simons(conn: LatticeConnection, cx: LatticeComplex = None, H=None,
                 gauge_fix: bool = True) -> float:
    """Cup-product Chern-Simons value relative to the stored background.

    CS = 1/2 <d v, v> + 1/6 <[v cup v], v> - (H(conn) - H(background)),
    evaluated on the minimal-norm orbit representative when gauge_fix is
    set, plus the topological sector: the bundle twist linked with the
    circle winding stored in the cochain, in period units.  The slicing
    realizes identity-component invariance exactly (up to the slice
    solver tolerance) while winding transformations shift the value by
    whole periods.  Flows use gauge_fix=False for raw step control.
    """
    cx = cx or conn.cx
    ctx = cx.spec.ctx
    work = conn
    sector = 0
    if gauge_fix:
        sector = circle_winding(conn)[0]
        work, _ = coulomb_gauge_fix(conn)
    v = work.v
    dv = linear_curvature(work, v, background_only=True)
    qv = quadratic_curvature(work, v)
    val = 0.5 * pairing(work, dv, v, background_only=True)
    val += pairing(work, qv, v, background_only=True) / 6.0
    val += cs_period(ctx) * ctx.d * sector
    if H is not None:
        from . import perturb
        bg_conn = LatticeConnection(cx, conn.background,
                                    np.zeros_like(conn.v))
        val -= (perturb.eval_pert(H, conn, cx)
                - perturb.eval_pert(H, bg_conn, cx))
    return float(val)


def chern_simons_path_integral(conn: LatticeConnection,
                               n_nodes: int = 64) -> float:
    """Line-integral realization int_0^1 <F(s v) wedge v> ds (Simpson).

    Uses the background pairing so the only shared ingredient with the
    polynomial formula is the bilinear form; with that choice the two
    routes agree through cubic order and differ at quartic.  Straight
    paths between flat points cross the matrix-log cut at rational s, so
    a node landing on a cut is stepped off by 1e-6.
    """
    cx = conn.cx
    v = conn.v
    if n_nodes % 2:
        n_nodes += 1
    svals = np.linspace(0.0, 1.0, n_nodes + 1)

    def node(s):
        c = LatticeConnection(cx, conn.background, s * v)
        return pairing(c, curvature(c, cx), v, background_only=True)

    vals = []
    for s in svals:
        try:
            vals.append(node(s))
        except BranchCut:
            vals.append(node(s + (1e-6 if s < 1.0 else -1e-6)))
    w = np.ones(n_nodes + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return float((1.0 / n_nodes) / 3.0 * np.dot(w, vals))


def degree(u: LatticeGauge, conn0: LatticeConnection,
           cx: LatticeComplex = None, n_nodes: int = 64,
           residual_tol: float = 0.1):
    """Chern-Weil degree of a gauge transformation.

    Drives conn0 and u*conn0 to their canonical orbit representatives,
    integrates <F(a(s)) wedge da/ds> along the straight cochain path
    between the representatives (Simpson; the integrand is cubic in s),
    and adds the flux-linking sector: bundle twist times the circle
    winding difference stored in the two cochains.  The smooth integral
    carries the identity-component content (near zero once both ends sit
    on the slice), the sector term carries the distributional content
    that a straight path between large cochains cannot resolve.  The
    period-normalized total is rounded; NotNearInteger signals a lattice
    too coarse to certify the class.  Returns (degree, raw ratio).
    """
    cx = cx or conn0.cx
    ctx = cx.spec.ctx
    conn1 = apply_gauge(u, conn0)
    wind0 = circle_winding(conn0)[1]
    wind1 = circle_winding(conn1)[1]
    f0, _ = coulomb_gauge_fix(conn0)
    f1, _ = coulomb_gauge_fix(conn1)
    v0 = f0.v
    dv = f1.v - v0
    if n_nodes % 2:
        n_nodes += 1
    svals = np.linspace(0.0, 1.0, n_nodes + 1)

    def node(s):
        vs = v0 + s * dv
        c = LatticeConnection(cx, conn0.background, vs)
        F = linear_curvature(c, vs, background_only=True)
        F = F + 0.5 * quadratic_curvature(c, vs)
        return pairing(c, F, dv, background_only=True)

    vals = [node(s) for s in svals]
    w = np.ones(n_nodes + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    integral = float((1.0 / n_nodes) / 3.0 * np.dot(w, vals))
    raw = integral / cs_period(ctx) + ctx.d * (wind1 - wind0)
    k = int(np.rint(raw))
    if abs(raw - k) > residual_tol:
        raise NotNearInteger(
            "degree integral is not near an integer",
            module="lattice", operation="degree",
            residual=float(abs(raw - k)))
    return k, raw


def parity(u: LatticeGauge, loop, ctx: la.LieContext = None,
           radius: float = None) -> int:
    """Central lifting defect of u around a closed edge path, in Z_r.

    Walks the loop choosing the nearest central shift between consecutive
    values; the accumulated shift mod r is the parity.  Raises
    LiftAmbiguous when a step's best shift is not decisive (farther than
    the disambiguation radius, or tied)."""
    cx = u.cx
    ctx = ctx or cx.spec.ctx
    r = ctx.r
    omega = np.exp(2j * np.pi / r)
    if radius is None:
        radius = 0.99 * abs(omega - 1.0) * np.sqrt(r) / 2.0
    verts = [int(cx.edge_tail[loop[0][0]]) if loop[0][1] > 0
             else int(cx.edge_head[loop[0][0]])]
    for e, s in loop:
        verts.append(int(cx.edge_head[e]) if s > 0 else int(cx.edge_tail[e]))
    if verts[0] != verts[-1]:
        raise ValueError("parity loop must be closed")
    total = 0
    for k in range(len(verts) - 1):
        a = u.values[verts[k]]
        b = u.values[verts[k + 1]]
        dists = [np.linalg.norm(b - omega ** j * a) for j in range(r)]
        order = np.argsort(dists)
        best = int(order[0])
        if dists[best] > radius or (
                r > 1 and abs(dists[best] - dists[int(order[1])]) < 1e-9):
            raise LiftAmbiguous(
                "consecutive gauge values too far for a canonical lift",
                module="lattice", operation="parity",
                residual=float(dists[best]))
        total += best
    return total % r


# ---------------------------------------------------------- star/flow field

def flow_field(conn: LatticeConnection, G: np.ndarray) -> np.ndarray:
    """Star transport of a face cochain onto edges.

    norm2_edges of the result equals norm2_faces(G) over star-covered
    faces exactly, and the assignment is exactly gauge-covariant because
    transports use the connection itself.
    """
    cx = conn.cx
    r = cx.spec.ctx.r
    hol = conn.holonomies()
    out = np.zeros((cx.n_edges, r, r), dtype=complex)
    for e in range(cx.n_edges):
        f = cx.star_face[e]
        if f < 0:
            continue
        theta = _path_holonomy(hol, cx.star_path[e])
        out[e] = (cx.star_sign[e] * (cx.star_coef[e] / cx.edge_weight[e])
                  * (theta @ G[f] @ theta.conj().T))
    return out


def reassemble_two_cochain(conn: LatticeConnection,
                           edge_grad: np.ndarray) -> np.ndarray:
    """Inverse star: the face cochain X with flow_field(conn, X) equal to
    the given edge field.  Faces without a star partner stay exactly zero."""
    cx = conn.cx
    r = cx.spec.ctx.r
    hol = conn.holonomies()
    out = np.zeros((cx.n_faces, r, r), dtype=complex)
    for e in range(cx.n_edges):
        f = cx.star_face[e]
        if f < 0 or cx.star_coef[e] == 0.0:
            continue
        theta = _path_holonomy(hol, cx.star_path[e])
        out[f] = (cx.star_sign[e] * (cx.edge_weight[e] / cx.star_coef[e])
                  * (theta.conj().T @ edge_grad[e] @ theta))
    return out


# ------------------------------------------------------------ serialization

def connection_to_json(conn: LatticeConnection) -> dict:
    def pack(arr):
        return [float(x) for x in
                np.stack([arr.real, arr.imag], axis=-1).ravel()]
    return {
        "spec": conn.cx.to_json(),
        "background": pack(conn.background),
        "v": pack(conn.v),
    }


def connection_from_json(obj: dict,
                         cx: LatticeComplex = None) -> LatticeConnection:
    if cx is None:
        cx = complex_from_json(obj["spec"])
    r = cx.spec.ctx.r

    def unpack(data):
        arr = np.array(data, dtype=float).reshape(-1, r, r, 2)
        return arr[..., 0] + 1j * arr[..., 1]

    return LatticeConnection(cx, unpack(obj["background"]), unpack(obj["v"]))
