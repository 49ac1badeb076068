"""Domains, simple structured meshes, graph partitioning and collocation sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import networkx as nx
import numpy as np

from .errors import SamplingError

MAX_NEAR_ATTEMPTS = 10_000
BOUNDARY_TOL = 1e-10


@dataclass(frozen=True)
class Domain:
    kind: str
    bounds: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == "interval":
            a, b = self.bounds
            if not a < b:
                raise ValueError("empty interval")
        elif self.kind == "rectangle":
            ax, bx, ay, by = self.bounds
            if not (ax < bx and ay < by):
                raise ValueError("empty rectangle")
        elif self.kind != "unit_circle":
            raise ValueError(f"unsupported domain kind {self.kind!r}")

    @property
    def d(self) -> int:
        return 1 if self.kind == "interval" else 2

    @property
    def measure(self) -> float:
        if self.kind == "interval":
            return self.bounds[1] - self.bounds[0]
        if self.kind == "rectangle":
            ax, bx, ay, by = self.bounds
            return (bx - ax) * (by - ay)
        return np.pi

    def contains(self, X, tol: float = BOUNDARY_TOL) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.kind == "interval":
            a, b = self.bounds
            return (X[:, 0] >= a - tol) & (X[:, 0] <= b + tol)
        if self.kind == "rectangle":
            ax, bx, ay, by = self.bounds
            return (
                (X[:, 0] >= ax - tol)
                & (X[:, 0] <= bx + tol)
                & (X[:, 1] >= ay - tol)
                & (X[:, 1] <= by + tol)
            )
        return np.linalg.norm(X, axis=1) <= 1.0 + tol

    def on_boundary(self, X, tol: float = BOUNDARY_TOL) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.kind == "interval":
            a, b = self.bounds
            return (np.abs(X[:, 0] - a) <= tol) | (np.abs(X[:, 0] - b) <= tol)
        if self.kind == "rectangle":
            ax, bx, ay, by = self.bounds
            inside = self.contains(X, tol)
            edge = (
                (np.abs(X[:, 0] - ax) <= tol)
                | (np.abs(X[:, 0] - bx) <= tol)
                | (np.abs(X[:, 1] - ay) <= tol)
                | (np.abs(X[:, 1] - by) <= tol)
            )
            return inside & edge
        return np.abs(np.linalg.norm(X, axis=1) - 1.0) <= tol

    def sample_interior(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "interval":
            a, b = self.bounds
            return rng.uniform(a, b, size=(n, 1))
        if self.kind == "rectangle":
            ax, bx, ay, by = self.bounds
            return np.column_stack([rng.uniform(ax, bx, n), rng.uniform(ay, by, n)])
        r = np.sqrt(rng.uniform(0.0, 1.0, n))
        t = rng.uniform(0.0, 2.0 * np.pi, n)
        return np.column_stack([r * np.cos(t), r * np.sin(t)])

    def sample_boundary(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Uniform points on the boundary.

        The 1D boundary is the two endpoints; they are used alternately so
        that any ``n >= 2`` covers both.
        """
        if self.kind == "interval":
            a, b = self.bounds
            return np.where(np.arange(n) % 2 == 0, a, b).astype(np.float64)[:, None]
        if self.kind == "rectangle":
            ax, bx, ay, by = self.bounds
            lx, ly = bx - ax, by - ay
            s = rng.uniform(0.0, 2.0 * (lx + ly), n)
            X = np.empty((n, 2))
            for i, t in enumerate(s):
                if t < lx:
                    X[i] = (ax + t, ay)
                elif t < lx + ly:
                    X[i] = (bx, ay + t - lx)
                elif t < 2 * lx + ly:
                    X[i] = (bx - (t - lx - ly), by)
                else:
                    X[i] = (ax, by - (t - 2 * lx - ly))
            return X
        t = rng.uniform(0.0, 2.0 * np.pi, n)
        return np.column_stack([np.cos(t), np.sin(t)])


def interval(a: float = 0.0, b: float = 1.0) -> Domain:
    return Domain("interval", (float(a), float(b)))


def rectangle(ax=-1.0, bx=1.0, ay=-1.0, by=1.0) -> Domain:
    return Domain("rectangle", (float(ax), float(bx), float(ay), float(by)))


def unit_circle() -> Domain:
    return Domain("unit_circle")


# --------------------------------------------------------------------------
# meshes


@dataclass
class Mesh:
    """Simplicial mesh.

    ``boundary_facets`` holds vertex indices of boundary facets (one vertex in
    1D, an edge in 2D) and ``boundary_normals`` their outward unit normals.
    """

    vertices: np.ndarray
    elements: np.ndarray
    boundary_facets: np.ndarray
    boundary_normals: np.ndarray

    @property
    def d(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def element_measures(self) -> np.ndarray:
        V = self.vertices[self.elements]
        if self.d == 1:
            return V[:, 1, 0] - V[:, 0, 0]
        e1 = V[:, 1] - V[:, 0]
        e2 = V[:, 2] - V[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.boundary_facets.ravel())

    def centroids(self) -> np.ndarray:
        return self.vertices[self.elements].mean(axis=1)


def _orient(vertices, elements):
    V = vertices[elements]
    e1 = V[:, 1] - V[:, 0]
    e2 = V[:, 2] - V[:, 0]
    neg = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] < 0
    elements[neg] = elements[neg][:, [0, 2, 1]]
    return elements


def _boundary_edges(vertices, elements):
    """Edges used by exactly one triangle, with outward normals."""
    edges = {}
    for tri in elements:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            if key in edges:
                edges[key] = None
            else:
                edges[key] = (a, b)
    facets = np.array([v for v in edges.values() if v is not None], dtype=int)
    # counter-clockwise triangles: outward normal of directed edge (a, b) is (dy, -dx)
    t = vertices[facets[:, 1]] - vertices[facets[:, 0]]
    normals = np.column_stack([t[:, 1], -t[:, 0]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return facets, normals


def _interval_mesh(dom, n):
    a, b = dom.bounds
    v = np.linspace(a, b, n + 1)[:, None]
    elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    return Mesh(v, elements, np.array([[0], [n]]), np.array([[-1.0], [1.0]]))


def _rectangle_mesh(dom, target):
    ax, bx, ay, by = dom.bounds
    k = max(1, int(round(np.sqrt(target / 2.0))))
    xs = np.linspace(ax, bx, k + 1)
    ys = np.linspace(ay, by, k + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((k + 1) ** 2).reshape(k + 1, k + 1)
    tris = []
    for j in range(k):
        for i in range(k):
            v00, v10, v01, v11 = idx[j, i], idx[j, i + 1], idx[j + 1, i], idx[j + 1, i + 1]
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    elements = _orient(vertices, np.array(tris, dtype=int))
    facets, normals = _boundary_edges(vertices, elements)
    return Mesh(vertices, elements, facets, normals)


def _circle_mesh(target):
    """Concentric rings with 6k vertices on ring k; boundary ring on the circle."""
    nr = max(1, int(round(np.sqrt(target / 6.0))))
    verts = [np.zeros(2)]
    start = [0]
    for k in range(1, nr + 1):
        start.append(len(verts))
        n = 6 * k
        r = k / nr
        for m in range(n):
            t = 2.0 * np.pi * m / n
            verts.append(np.array([r * np.cos(t), r * np.sin(t)]))
    vertices = np.array(verts)
    # snap the outer ring exactly onto the unit circle
    outer = slice(start[nr], len(vertices))
    vertices[outer] /= np.linalg.norm(vertices[outer], axis=1, keepdims=True)
    tris = []
    for m in range(6):
        tris.append((0, start[1] + m, start[1] + (m + 1) % 6))
    for k in range(2, nr + 1):
        n0, n1 = 6 * (k - 1), 6 * k
        s0, s1 = start[k - 1], start[k]
        i = j = 0
        while i < n0 or j < n1:
            a_next = (i + 1) / n0
            b_next = (j + 1) / n1
            if j >= n1 or (i < n0 and a_next < b_next):
                tris.append((s0 + i % n0, s0 + (i + 1) % n0, s1 + j % n1))
                i += 1
            else:
                tris.append((s0 + i % n0, s1 + (j + 1) % n1, s1 + j % n1))
                j += 1
    elements = _orient(vertices, np.array(tris, dtype=int))
    facets, normals = _boundary_edges(vertices, elements)
    return Mesh(vertices, elements, facets, normals)


def coarse_mesh(dom: Domain, target_elements: int) -> Mesh:
    """Structured mesh with roughly ``target_elements`` elements.

    Intervals get exactly that many segments; rectangles ``2k^2`` triangles
    with ``k = round(sqrt(target/2))``; the unit circle ``6k^2`` triangles.
    """
    if target_elements < 1:
        raise ValueError("target_elements must be >= 1")
    if dom.kind == "interval":
        return _interval_mesh(dom, int(target_elements))
    if dom.kind == "rectangle":
        return _rectangle_mesh(dom, target_elements)
    if dom.kind == "unit_circle":
        return _circle_mesh(target_elements)
    raise ValueError(f"unsupported domain kind {dom.kind!r}")


fine_mesh = coarse_mesh


def locate_elements(mesh: Mesh, X, tol: float = 1e-12) -> np.ndarray:
    """Index of an element containing each point (-1 if none)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.full(X.shape[0], -1, dtype=int)
    if mesh.d == 1:
        edges = mesh.vertices[:, 0]
        # interval meshes are built sorted
        k = np.searchsorted(edges, X[:, 0], side="right") - 1
        k = np.clip(k, 0, mesh.n_elements - 1)
        inside = (X[:, 0] >= edges[0] - tol) & (X[:, 0] <= edges[-1] + tol)
        out[inside] = k[inside]
        return out
    V = mesh.vertices[mesh.elements]
    v0 = V[:, 0]
    e1 = V[:, 1] - v0
    e2 = V[:, 2] - v0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    chunk = max(1, 2_000_000 // max(mesh.n_elements, 1))
    for s in range(0, X.shape[0], chunk):
        P = X[s : s + chunk, None, :] - v0[None]
        l1 = (P[..., 0] * e2[:, 1] - P[..., 1] * e2[:, 0]) / det
        l2 = (e1[:, 0] * P[..., 1] - e1[:, 1] * P[..., 0]) / det
        ok = (l1 >= -tol) & (l2 >= -tol) & (l1 + l2 <= 1 + tol)
        has = ok.any(axis=1)
        idx = np.argmax(ok, axis=1)
        out[s : s + chunk] = np.where(has, idx, -1)
    return out


def save_mesh(mesh: Mesh, path) -> None:
    """Plain-text mesh file.

    Header line: ``msgreen-mesh 1 <d> <n_vertices> <n_elements> <n_facets>``,
    then one line per vertex (coordinates), per element (vertex indices) and
    per boundary facet (vertex indices followed by the outward normal).
    """
    lines = [
        f"msgreen-mesh 1 {mesh.d} {len(mesh.vertices)} {mesh.n_elements} {len(mesh.boundary_facets)}"
    ]
    lines += [" ".join(float(c).hex() for c in v) for v in mesh.vertices]
    lines += [" ".join(str(int(i)) for i in e) for e in mesh.elements]
    for f, n in zip(mesh.boundary_facets, mesh.boundary_normals):
        lines.append(" ".join([*(str(int(i)) for i in f), *(float(c).hex() for c in n)]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    rows = Path(path).read_text().splitlines()
    head = rows[0].split()
    if head[0] != "msgreen-mesh" or head[1] != "1":
        raise ValueError("not a msgreen mesh file")
    d, nv, ne, nf = map(int, head[2:])
    body = rows[1:]
    vertices = np.array([[float.fromhex(c) for c in r.split()] for r in body[:nv]])
    elements = np.array([[int(c) for c in r.split()] for r in body[nv : nv + ne]], dtype=int)
    per = 1 if d == 1 else 2
    facets, normals = [], []
    for r in body[nv + ne : nv + ne + nf]:
        parts = r.split()
        facets.append([int(c) for c in parts[:per]])
        normals.append([float.fromhex(c) for c in parts[per:]])
    return Mesh(
        vertices.reshape(nv, d),
        elements,
        np.array(facets, dtype=int).reshape(nf, per),
        np.array(normals).reshape(nf, d),
    )


# --------------------------------------------------------------------------
# graph partitioning


def adjacency_graph(mesh: Mesh) -> nx.Graph:
    """One node per element; edges between elements sharing a facet."""
    g = nx.Graph()
    g.add_nodes_from(range(mesh.n_elements))
    owner: dict[tuple, int] = {}
    for e, verts in enumerate(mesh.elements):
        if mesh.d == 1:
            facets = [(int(v),) for v in verts]
        else:
            a, b, c = (int(v) for v in verts)
            facets = [tuple(sorted(p)) for p in ((a, b), (b, c), (c, a))]
        for f in facets:
            other = owner.get(f)
            if other is None:
                owner[f] = e
            else:
                g.add_edge(other, e)
    return g


@dataclass
class Partition:
    part_of: np.ndarray

    @property
    def n_parts(self) -> int:
        return int(self.part_of.max()) + 1

    def elements_of(self, part_id: int) -> np.ndarray:
        return np.nonzero(self.part_of == part_id)[0]


def fiedler_vector(g: nx.Graph, nodes) -> np.ndarray:
    """Fiedler vector of the unnormalised Laplacian of the induced subgraph.

    Sign fixed so that the entry of the smallest node index is non-positive.
    """
    nodes = list(nodes)
    L = nx.laplacian_matrix(g.subgraph(nodes), nodelist=nodes).toarray().astype(np.float64)
    _, vecs = np.linalg.eigh(L)
    v = vecs[:, 1]
    if v[int(np.argmin(nodes))] > 0:
        v = -v
    return v


def _repair(g, side_a, side_b):
    """Move all but the largest component of each side across."""
    for _ in range(4):
        moved = False
        for src, dst in ((side_a, side_b), (side_b, side_a)):
            comps = sorted(nx.connected_components(g.subgraph(src)), key=lambda c: (-len(c), min(c)))
            for comp in comps[1:]:
                src -= comp
                dst |= comp
                moved = True
        if not moved:
            break
    return side_a, side_b


def _bisect(g, nodes, p, next_id, part_of):
    if p == 1:
        part_of[list(nodes)] = next_id
        return next_id + 1
    nodes = sorted(nodes)
    p_left = p // 2
    v = fiedler_vector(g, nodes)
    order = np.lexsort((np.array(nodes), v))
    n_left = int(round(len(nodes) * p_left / p))
    n_left = min(max(n_left, p_left), len(nodes) - (p - p_left))
    left = {nodes[i] for i in order[:n_left]}
    right = set(nodes) - left
    left, right = _repair(g, left, right)
    if len(left) < p_left or len(right) < p - p_left:
        raise ValueError("bisection produced a side too small to split further")
    next_id = _bisect(g, left, p_left, next_id, part_of)
    return _bisect(g, right, p - p_left, next_id, part_of)


def _global_repair(g, part_of):
    for _ in range(10):
        changed = False
        for pid in range(int(part_of.max()) + 1):
            members = np.nonzero(part_of == pid)[0]
            comps = sorted(nx.connected_components(g.subgraph(members)), key=lambda c: (-len(c), min(c)))
            for comp in comps[1:]:
                votes: dict[int, int] = {}
                for n in comp:
                    for nb in g.neighbors(n):
                        q = int(part_of[nb])
                        if q != pid:
                            votes[q] = votes.get(q, 0) + 1
                if votes:
                    target = max(sorted(votes), key=lambda q: votes[q])
                    part_of[list(comp)] = target
                    changed = True
        if not changed:
            break
    return part_of


def partition(g: nx.Graph, p: int) -> Partition:
    """Recursive spectral bisection into ``p`` connected parts.

    Each bisection orders the nodes by the Fiedler vector and cuts at the
    position proportional to the number of parts requested on each side, so
    that both halves stay balanced; disconnected leftovers are moved to the
    neighbouring side.
    """
    n = g.number_of_nodes()
    if p < 1 or p > n:
        raise ValueError(f"cannot split {n} elements into {p} parts")
    part_of = np.full(n, -1, dtype=int)
    comps = list(nx.connected_components(g))
    if len(comps) != 1:
        raise ValueError("element adjacency graph is not connected")
    _bisect(g, set(g.nodes), p, 0, part_of)
    return Partition(_global_repair(g, part_of))


# --------------------------------------------------------------------------
# collocation sampling


@dataclass
class SampleBatch:
    """Collocation pairs for one subdomain.

    Each ``*_x`` / ``*_y`` pair of arrays has one row per (x, y) pair.
    """

    y_anchors: np.ndarray
    boundary_x: np.ndarray
    boundary_y: np.ndarray
    near_x: np.ndarray
    near_y: np.ndarray
    far_x: np.ndarray
    far_y: np.ndarray

    @property
    def interior_x(self) -> np.ndarray:
        return np.concatenate([self.near_x, self.far_x])

    @property
    def interior_y(self) -> np.ndarray:
        return np.concatenate([self.near_y, self.far_y])

    @property
    def d(self) -> int:
        return self.y_anchors.shape[1]


def _uniform_in_elements(mesh, elems, rng, n):
    meas = mesh.element_measures()[elems]
    pick = rng.choice(len(elems), size=n, p=meas / meas.sum())
    V = mesh.vertices[mesh.elements[elems[pick]]]
    if mesh.d == 1:
        t = rng.uniform(0.0, 1.0, n)[:, None]
        return V[:, 0] + t * (V[:, 1] - V[:, 0])
    r1 = np.sqrt(rng.uniform(0.0, 1.0, n))[:, None]
    r2 = rng.uniform(0.0, 1.0, n)[:, None]
    return (1 - r1) * V[:, 0] + r1 * (1 - r2) * V[:, 1] + r1 * r2 * V[:, 2]


def sample_near(dom: Domain, y, radius: float, rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform points of the ball ``B(y, radius)`` intersected with the domain."""
    y = np.asarray(y, dtype=np.float64)
    out = np.empty((n, dom.d))
    for i in range(n):
        for _ in range(MAX_NEAR_ATTEMPTS):
            if dom.d == 1:
                x = y + rng.uniform(-radius, radius, 1)
            else:
                r = radius * np.sqrt(rng.uniform())
                t = rng.uniform(0.0, 2.0 * np.pi)
                x = y + r * np.array([np.cos(t), np.sin(t)])
            if dom.contains(x, tol=0.0)[0]:
                out[i] = x
                break
        else:
            raise SamplingError(
                f"no point of B({y}, {radius}) inside the domain after {MAX_NEAR_ATTEMPTS} attempts"
            )
    return out


def make_batch(dom: Domain, y_anchors, counts, epsilon: float, rng: np.random.Generator) -> SampleBatch:
    """Pairs for the given anchors; ``counts = (n_bdry, n_near, n_far)`` per anchor."""
    n_bdry, n_near, n_far = counts
    Y = np.atleast_2d(np.asarray(y_anchors, dtype=np.float64))
    if Y.shape[1] != dom.d:
        Y = Y.reshape(-1, dom.d)
    bx, nx_, fx = [], [], []
    for y in Y:
        bx.append(dom.sample_boundary(rng, n_bdry))
        nx_.append(sample_near(dom, y, 2.0 * epsilon, rng, n_near))
        fx.append(dom.sample_interior(rng, n_far))
    return SampleBatch(
        y_anchors=Y,
        boundary_x=np.concatenate(bx),
        boundary_y=np.repeat(Y, n_bdry, axis=0),
        near_x=np.concatenate(nx_),
        near_y=np.repeat(Y, n_near, axis=0),
        far_x=np.concatenate(fx),
        far_y=np.repeat(Y, n_far, axis=0),
    )


def sample_batch(dom, mesh, part: Partition, part_id: int, counts, epsilon: float, rng_seed: int) -> SampleBatch:
    """Training pairs for subdomain ``part_id``.

    ``counts = (n_y, n_bdry, n_near, n_far)``; the last three are per anchor.
    The generator is seeded with ``rng_seed ^ part_id``.
    """
    n_y, n_bdry, n_near, n_far = counts
    if min(counts) < 1:
        raise ValueError("all sample counts must be >= 1")
    if not 0 <= part_id < part.n_parts:
        raise ValueError(f"part_id {part_id} out of range")
    rng = np.random.default_rng(int(rng_seed) ^ int(part_id))
    Y = _uniform_in_elements(mesh, part.elements_of(part_id), rng, n_y)
    return make_batch(dom, Y, (n_bdry, n_near, n_far), epsilon, rng)
