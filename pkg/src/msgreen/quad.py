"""Quadrature rules and the Green's-integral solve u(x) = sum_q w_q f(y_q) G(x, y_q)."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .geom import Domain, Mesh, Partition, locate_elements
from .msnn import model_value
from .pde import feature_map

GL_MAX = 20
DEFAULT_GL = 3
DEFAULT_DUNAVANT = 3


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes on the reference element ([-1, 1] or the unit triangle) and weights."""

    kind: str
    degree: int
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def n_points(self) -> int:
        return self.weights.shape[0]


def gauss_legendre(n: int) -> QuadratureRule:
    """n-point Gauss-Legendre rule on [-1, 1], exact to degree 2n - 1."""
    if not 1 <= n <= GL_MAX:
        raise ValueError(f"Gauss-Legendre order must be in [1, {GL_MAX}], got {n}")
    x, w = np.polynomial.legendre.leggauss(n)
    return QuadratureRule("gauss_legendre", 2 * n - 1, x[:, None], w)


def _orbit(bary, weight):
    """All distinct permutations of a barycentric triple."""
    pts = sorted(set(itertools.permutations(bary)))
    return pts, [weight] * len(pts)


def _dunavant_table(degree):
    s15 = np.sqrt(15.0)
    if degree == 1:
        return [((1 / 3, 1 / 3, 1 / 3), 1.0)]
    if degree == 2:
        return [((2 / 3, 1 / 6, 1 / 6), 1 / 3)]
    if degree == 3:
        return [((1 / 3, 1 / 3, 1 / 3), -27 / 48), ((0.6, 0.2, 0.2), 25 / 48)]
    if degree == 4:
        a, b = 0.445948490915965, 0.091576213509771
        return [
            ((1 - 2 * a, a, a), 0.223381589678011),
            ((1 - 2 * b, b, b), 0.109951743655322),
        ]
    if degree == 5:
        a1 = (6 - s15) / 21
        a2 = (6 + s15) / 21
        return [
            ((1 / 3, 1 / 3, 1 / 3), 9 / 40),
            ((1 - 2 * a1, a1, a1), (155 - s15) / 1200),
            ((1 - 2 * a2, a2, a2), (155 + s15) / 1200),
        ]
    raise ValueError(f"unsupported Dunavant degree {degree}; choose 1-5")


def dunavant(degree: int) -> QuadratureRule:
    """Symmetric triangle rule on (0,0), (1,0), (0,1); weights sum to 1/2."""
    pts, wts = [], []
    for bary, w in _dunavant_table(degree):
        p, q = _orbit(bary, w)
        pts += p
        wts += q
    B = np.array(pts)
    # barycentric (l0, l1, l2) -> reference (xi, eta) = (l1, l2)
    return QuadratureRule("dunavant", degree, B[:, 1:].copy(), 0.5 * np.array(wts))


# --------------------------------------------------------------------------
# meshes


@dataclass
class QuadratureMesh:
    mesh: Mesh
    points: np.ndarray
    weights: np.ndarray
    element_of: np.ndarray

    @property
    def total_weight(self) -> float:
        return float(np.sum(self.weights))


def quadrature_mesh(mesh: Mesh, rule: QuadratureRule | None = None) -> QuadratureMesh:
    """Map a reference rule onto every element of ``mesh``."""
    if rule is None:
        rule = gauss_legendre(DEFAULT_GL) if mesh.d == 1 else dunavant(DEFAULT_DUNAVANT)
    V = mesh.vertices[mesh.elements]
    ne, nq = mesh.n_elements, rule.n_points
    if mesh.d == 1:
        if rule.kind != "gauss_legendre":
            raise ValueError("1D meshes need a Gauss-Legendre rule")
        a, b = V[:, 0, 0], V[:, 1, 0]
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        pts = mid[:, None] + half[:, None] * rule.nodes[None, :, 0]
        wts = half[:, None] * rule.weights[None]
        points = pts.reshape(-1, 1)
    else:
        if rule.kind != "dunavant":
            raise ValueError("triangle meshes need a Dunavant rule")
        v0 = V[:, 0]
        J = np.stack([V[:, 1] - v0, V[:, 2] - v0], axis=2)  # (ne, 2, 2)
        points = (v0[:, None, :] + np.einsum("eij,qj->eqi", J, rule.nodes)).reshape(-1, 2)
        det = np.abs(J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0])
        wts = det[:, None] * rule.weights[None]
    return QuadratureMesh(mesh, points, wts.ravel(), np.repeat(np.arange(ne), nq))


def integrate(f: Callable, qmesh: QuadratureMesh) -> float:
    return float(np.dot(qmesh.weights, f(qmesh.points)))


def solve_with_green(green: Callable, f, qmesh: QuadratureMesh, eval_points, chunk_pairs: int = 400_000) -> np.ndarray:
    """u(x) = sum_q w_q f(y_q) G(x, y_q) at each eval point.

    ``green(X, Y)`` returns kernel values for row pairs. ``f`` is a callable
    of quadrature points or an array of its values there.
    """
    X = np.atleast_2d(np.asarray(eval_points, dtype=np.float64))
    if X.shape[1] != qmesh.mesh.d and X.shape[0] == qmesh.mesh.d:
        X = X.T
    Yq = qmesh.points
    fv = np.asarray(f(Yq) if callable(f) else f, dtype=np.float64)
    wf = qmesh.weights * fv
    nq = Yq.shape[0]
    out = np.empty(X.shape[0])
    step = max(1, chunk_pairs // nq)
    for s in range(0, X.shape[0], step):
        Xc = X[s : s + step]
        k = Xc.shape[0]
        G = np.asarray(green(np.repeat(Xc, nq, axis=0), np.tile(Yq, (k, 1)))).reshape(k, nq)
        out[s : s + step] = G @ wf
    return out


# --------------------------------------------------------------------------
# boundary term


@dataclass
class BoundaryQuadrature:
    points: np.ndarray
    weights: np.ndarray
    normals: np.ndarray


def boundary_quadrature(dom: Domain, mesh: Mesh | None = None, n: int = 256, n_gl: int = 3) -> BoundaryQuadrature:
    """Points, weights and outward normals on the boundary.

    Intervals use the two endpoints with unit weight; the unit circle an
    equispaced trapezoid rule in angle (``n`` points); polygons Gauss-Legendre
    on each boundary facet of ``mesh``.
    """
    if dom.kind == "interval":
        a, b = dom.bounds
        return BoundaryQuadrature(np.array([[a], [b]]), np.ones(2), np.array([[-1.0], [1.0]]))
    if dom.kind == "unit_circle":
        t = 2.0 * np.pi * np.arange(n) / n
        P = np.column_stack([np.cos(t), np.sin(t)])
        return BoundaryQuadrature(P, np.full(n, 2.0 * np.pi / n), P.copy())
    if mesh is None:
        raise ValueError("polygonal boundaries need a mesh")
    rule = gauss_legendre(n_gl)
    A = mesh.vertices[mesh.boundary_facets[:, 0]]
    B = mesh.vertices[mesh.boundary_facets[:, 1]]
    s = 0.5 * (rule.nodes[:, 0] + 1.0)
    P = A[:, None] + s[None, :, None] * (B - A)[:, None]
    L = np.linalg.norm(B - A, axis=1)
    W = 0.5 * L[:, None] * rule.weights[None]
    N = np.repeat(mesh.boundary_normals, rule.n_points, axis=0)
    return BoundaryQuadrature(P.reshape(-1, 2), W.ravel(), N)


def boundary_term(green_grad_y: Callable, g2, principal: Callable, bq: BoundaryQuadrature, eval_points) -> np.ndarray:
    """sum_q w_q g2(y_q) n(y_q) . B(y_q) grad_y G(x, y_q) at each eval point.

    ``B`` is the principal matrix of L = div(B grad) + lower order terms, so
    ``-lap`` has ``B = -I``.  Added to the volume term this recovers the
    solution with Dirichlet data ``g2``.
    """
    X = np.atleast_2d(np.asarray(eval_points, dtype=np.float64))
    Yb = bq.points
    gv = np.asarray(g2(Yb) if callable(g2) else g2, dtype=np.float64) * np.ones(Yb.shape[0])
    if not np.any(gv):
        return np.zeros(X.shape[0])
    flux = np.einsum("qi,qij->qj", bq.normals, principal(Yb))  # n^T B
    nb = Yb.shape[0]
    out = np.empty(X.shape[0])
    for i, x in enumerate(X):
        grad = np.asarray(green_grad_y(np.repeat(x[None], nb, axis=0), Yb)).reshape(nb, -1)
        out[i] = np.sum(bq.weights * gv * np.sum(flux * grad, axis=1))
    return out


# --------------------------------------------------------------------------
# learned kernels


def model_kernel(model) -> Callable:
    """G(X, Y) backed by one Network or MsNet."""

    def green(X, Y):
        return model_value(model, X, Y)

    return green


def model_grad_y(model) -> Callable:
    """grad_y G(X, Y) of a model through its x-free directions in feature space."""

    def grad(X, Y):
        X = np.atleast_2d(X)
        Y = np.atleast_2d(Y)
        d = X.shape[1]
        V = np.zeros((d, 3 * d))
        for i in range(d):
            V[i, d + i] = 1.0
            V[i, 2 * d + i] = -1.0
        Z = feature_map(X, Y)
        return sum(net.jets(Z, V, ()).tangents for net in model.components).T

    return grad


class RoutedKernel:
    """Kernel assembled from per-part models; each y is routed to its part."""

    def __init__(self, models: Mapping[int, object], mesh: Mesh, part: Partition):
        missing = set(range(part.n_parts)) - set(models)
        if missing:
            raise ValueError(f"no model for parts {sorted(missing)}")
        self.models = dict(models)
        self.mesh = mesh
        self.part = part
        self._centroids = mesh.centroids()

    def route(self, Y) -> np.ndarray:
        """Part id owning each row of Y (nearest element for points just outside)."""
        Y = np.atleast_2d(Y)
        U, inv = np.unique(Y, axis=0, return_inverse=True)
        el = locate_elements(self.mesh, U)
        miss = np.flatnonzero(el < 0)
        if miss.size:
            d2 = np.sum((U[miss, None, :] - self._centroids[None]) ** 2, axis=2)
            el[miss] = np.argmin(d2, axis=1)
        return self.part.part_of[el][np.ravel(inv)]

    def __call__(self, X, Y) -> np.ndarray:
        X = np.atleast_2d(X)
        Y = np.atleast_2d(Y)
        ids = self.route(Y)
        out = np.empty(X.shape[0])
        for pid in np.unique(ids):
            rows = np.flatnonzero(ids == pid)
            out[rows] = model_value(self.models[int(pid)], X[rows], Y[rows])
        return out


def write_solution_csv(path, X, u, u_ref) -> None:
    """Columns x0[, x1], u_theta, u_reference, abs_error."""
    X = np.atleast_2d(X)
    if X.shape[0] == 1 and X.shape[1] != 1 and np.size(u) != 1:
        X = X.T
    names = [f"x{i}" for i in range(X.shape[1])]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(names + ["u_theta", "u_reference", "abs_error"])
        for row, a, b in zip(X, u, u_ref):
            wr.writerow([repr(float(v)) for v in row] + [repr(float(a)), repr(float(b)), repr(abs(float(a) - float(b)))])
