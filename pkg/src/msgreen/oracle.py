"""Reference solvers: 1D finite differences, 2D P1 finite elements, reference kernels."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded
from scipy.sparse.linalg import spsolve

from . import geom
from .errors import SolverError
from .pde import Mollifier, OperatorSpec, ProblemSpec
from .quad import dunavant


@dataclass
class DiscreteField:
    """Nodal values on a mesh; linear interpolation in between."""

    mesh: geom.Mesh
    values: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape != (self.mesh.vertices.shape[0],):
            raise ValueError("one value per mesh vertex expected")

    @property
    def nodes(self) -> np.ndarray:
        return self.mesh.vertices

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.mesh.d == 1:
            return np.interp(X[:, 0], self.mesh.vertices[:, 0], self.values)
        el = geom.locate_elements(self.mesh, X, tol=1e-10)
        if np.any(el < 0):
            raise ValueError("interpolation point outside the mesh")
        V = self.mesh.vertices[self.mesh.elements[el]]
        T = np.stack([V[:, 1] - V[:, 0], V[:, 2] - V[:, 0]], axis=2)
        lam = np.linalg.solve(T, (X - V[:, 0])[..., None])[..., 0]
        bary = np.column_stack([1.0 - lam.sum(axis=1), lam])
        return np.sum(bary * self.values[self.mesh.elements[el]], axis=1)


# --------------------------------------------------------------------------
# 1D finite differences


def solve_1d(c: Callable, f: Callable, n: int, a: float = 0.0, b: float = 1.0) -> DiscreteField:
    """Central differences for -u'' - c u = f on n interior nodes, u(a) = u(b) = 0.

    ``c`` and ``f`` take an ``(N, 1)`` array of points.
    """
    if n < 3:
        raise ValueError("need at least 3 interior nodes")
    x = np.linspace(a, b, n + 2)
    h = (b - a) / (n + 1)
    xi = x[1:-1, None]
    ab = np.empty((3, n))
    ab[0] = -1.0 / h**2
    ab[1] = 2.0 / h**2 - np.asarray(c(xi), dtype=np.float64)
    ab[2] = -1.0 / h**2
    rhs = np.asarray(f(xi), dtype=np.float64) * np.ones(n)
    try:
        u = solve_banded((1, 1), ab, rhs)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"singular finite-difference system: {exc}") from exc
    if not np.all(np.isfinite(u)):
        raise SolverError("finite-difference solve produced non-finite values")
    vals = np.concatenate([[0.0], u, [0.0]])
    mesh = geom._interval_mesh(geom.interval(a, b), n + 1)
    return DiscreteField(mesh, vals, {"method": "banded", "h": h})


# --------------------------------------------------------------------------
# 2D P1 finite elements


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    interior: np.ndarray


def _p1_gradients(mesh):
    V = mesh.vertices[mesh.elements]
    x, y = V[..., 0], V[..., 1]
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    # grad of barycentric coordinate i: perpendicular of the opposite edge / (2 area)
    bx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    by = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    return bx / (2 * area[:, None]), by / (2 * area[:, None]), area


def assemble_p1(mesh: geom.Mesh, c: Callable, f: Callable, degree: int = 5) -> SparseSystem:
    """Stiffness minus c-weighted mass, load vector, Dirichlet rows eliminated."""
    gx, gy, area = _p1_gradients(mesh)
    K = area[:, None, None] * (gx[:, :, None] * gx[:, None, :] + gy[:, :, None] * gy[:, None, :])
    rule = dunavant(degree)
    lam = np.column_stack([1.0 - rule.nodes.sum(axis=1), rule.nodes])  # (q, 3)
    V = mesh.vertices[mesh.elements]
    pts = np.einsum("qk,ekd->eqd", lam, V)
    ne, nq = pts.shape[:2]
    cv = np.asarray(c(pts.reshape(-1, 2)), dtype=np.float64).reshape(ne, nq)
    fv = np.asarray(f(pts.reshape(-1, 2)), dtype=np.float64).reshape(ne, nq) * np.ones((ne, nq))
    wq = 2.0 * area[:, None] * rule.weights[None]  # physical weights
    M = np.einsum("eq,qi,qj->eij", wq * cv, lam, lam)
    load = np.einsum("eq,qi->ei", wq * fv, lam)
    E = mesh.elements
    rows = np.repeat(E, 3, axis=1).ravel()
    cols = np.tile(E, (1, 3)).ravel()
    nv = mesh.vertices.shape[0]
    A = sp.coo_matrix(((K - M).ravel(), (rows, cols)), shape=(nv, nv)).tocsr()
    b = np.bincount(E.ravel(), weights=load.ravel(), minlength=nv)
    interior = np.setdiff1d(np.arange(nv), mesh.boundary_vertices())
    return SparseSystem(A, b, interior)


@dataclass
class CGLog:
    residuals: list[float] = field(default_factory=list)
    energies: list[float] = field(default_factory=list)
    method: str = "pcg"
    iterations: int = 0


def pcg(A, b, tol: float = 1e-10, maxiter: int | None = None):
    """Jacobi-preconditioned CG; falls back to a direct solve on non-positive curvature.

    Returns ``(x, CGLog)``.  The log holds the residual norm and the energy
    ``x^T A x / 2 - b^T x`` after every iteration.
    """
    n = b.shape[0]
    maxiter = 10 * n if maxiter is None else maxiter
    log = CGLog()
    bn = np.linalg.norm(b)
    x = np.zeros(n)
    if bn == 0.0:
        return x, log
    dinv = 1.0 / A.diagonal()
    if not np.all(np.isfinite(dinv)) or np.any(dinv <= 0):
        return _direct(A, b, log)
    r = b.copy()
    z = dinv * r
    p = z.copy()
    rz = r @ z
    energy = 0.0
    for k in range(maxiter):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0.0:
            return _direct(A, b, log)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        energy -= 0.5 * rz * rz / pAp
        log.residuals.append(float(np.linalg.norm(r)))
        log.energies.append(float(energy))
        log.iterations = k + 1
        if log.residuals[-1] <= tol * bn:
            return x, log
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not converge in {maxiter} iterations")


def _direct(A, b, log):
    log.method = "direct"
    try:
        x = spsolve(A.tocsc(), b)
    except RuntimeError as exc:
        raise SolverError(f"direct solve failed: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise SolverError("singular system")
    return x, log


def solve_2d_fem(c: Callable, f: Callable, mesh: geom.Mesh, tol: float = 1e-10) -> DiscreteField:
    """P1 FEM for -lap u - c u = f with u = 0 on the boundary."""
    if mesh.d != 2:
        raise ValueError("solve_2d_fem needs a triangle mesh")
    sysm = assemble_p1(mesh, c, f)
    I = sysm.interior
    A = sysm.matrix[I][:, I]
    uI, log = pcg(A, sysm.rhs[I], tol)
    u = np.zeros(mesh.vertices.shape[0])
    u[I] = uI
    return DiscreteField(mesh, u, {"method": log.method, "iterations": log.iterations, "log": log})


# --------------------------------------------------------------------------
# reference kernels


def default_resolution(epsilon: float, d: int) -> int:
    """FD interior nodes (1D) or target triangles (2D) resolving the mollifier."""
    if d == 1:
        return int(max(2047, np.ceil(20.0 / epsilon)))
    return 8000


def reference_green(op: OperatorSpec, m: Mollifier, y, domain: geom.Domain, resolution: int | None = None) -> DiscreteField:
    """G_eps(., y): solve L G = N_eps(., y) with zero Dirichlet data.

    1D problems use finite differences with ``resolution`` interior nodes,
    2D problems P1 FEM on a mesh of about ``resolution`` triangles.
    """
    if op.kind != "reaction_form":
        raise NotImplementedError("reference kernels are provided for the reaction form")
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y.shape != (domain.d,):
        raise ValueError(f"y must have dimension {domain.d}")
    if not domain.contains(y[None])[0] or domain.on_boundary(y[None])[0]:
        raise ValueError("y must lie in the open domain")
    n = resolution or default_resolution(m.epsilon, domain.d)

    def rhs(X):
        return m(X, np.broadcast_to(y, X.shape))

    if domain.d == 1:
        a, b = domain.bounds
        return solve_1d(op.c, rhs, n, a, b)
    return solve_2d_fem(op.c, rhs, geom.coarse_mesh(domain, n))


class ReferenceCache:
    """On-disk cache of reference kernels keyed by problem, eps, y and resolution."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(problem: ProblemSpec, epsilon: float, y, resolution: int) -> str:
        blob = json.dumps(
            {
                "problem": problem.key(),
                "epsilon": float(epsilon).hex(),
                "y": [float(v).hex() for v in np.atleast_1d(y)],
                "resolution": int(resolution),
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:24]

    def get(self, problem: ProblemSpec, y, resolution: int | None = None) -> DiscreteField:
        n = resolution or default_resolution(problem.epsilon, problem.d)
        path = self.root / f"{self.key(problem, problem.epsilon, y, n)}.npz"
        if path.exists():
            with np.load(path) as z:
                mesh = geom.Mesh(z["vertices"], z["elements"], z["facets"], z["normals"])
                return DiscreteField(mesh, z["values"], {"cached": True})
        fld = reference_green(problem.operator, problem.mollifier, y, problem.domain, n)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(
            tmp,
            vertices=fld.mesh.vertices,
            elements=fld.mesh.elements,
            facets=fld.mesh.boundary_facets,
            normals=fld.mesh.boundary_normals,
            values=fld.values,
        )
        tmp.replace(path)
        return fld
