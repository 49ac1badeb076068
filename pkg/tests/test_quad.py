from math import factorial

import numpy as np
import pytest

from msgreen import geom, quad
from msgreen.msnn import build_msnet
from msgreen.pde import exact_green_1d


def triangle_monomial(p, q):
    # integral of x^p y^q over the unit triangle
    return factorial(p) * factorial(q) / factorial(p + q + 2)


def test_gauss_legendre_examples():
    r1 = quad.gauss_legendre(1)
    assert r1.nodes[0, 0] == 0.0 and r1.weights[0] == 2.0
    r2 = quad.gauss_legendre(2)
    assert np.allclose(np.sort(r2.nodes[:, 0]), [-1 / np.sqrt(3), 1 / np.sqrt(3)], atol=1e-15)
    assert np.allclose(r2.weights, 1.0, atol=1e-15)
    assert abs(np.dot(r2.weights, r2.nodes[:, 0] ** 3)) < 1e-15
    for n in (0, 21):
        with pytest.raises(ValueError):
            quad.gauss_legendre(n)


@pytest.mark.parametrize("n", range(1, 21))
def test_gauss_legendre_weights_sum(n):
    assert quad.gauss_legendre(n).weights.sum() == pytest.approx(2.0, abs=1e-14)


@pytest.mark.parametrize("degree", [1, 2, 3, 4, 5])
def test_dunavant_weights_and_symmetry(degree):
    r = quad.dunavant(degree)
    assert r.weights.sum() == pytest.approx(0.5, abs=1e-14)
    assert np.all(r.nodes >= 0) and np.all(r.nodes.sum(axis=1) <= 1)


def test_dunavant_examples():
    r = quad.dunavant(1)
    assert np.allclose(r.nodes, [[1 / 3, 1 / 3]]) and r.weights[0] == pytest.approx(0.5)
    r2 = quad.dunavant(2)
    x, y = r2.nodes.T
    assert np.dot(r2.weights, x**2) == pytest.approx(1 / 12, abs=1e-15)
    assert np.dot(r2.weights, x * y) == pytest.approx(1 / 24, abs=1e-15)
    assert np.dot(r2.weights, y**2) == pytest.approx(1 / 12, abs=1e-15)
    with pytest.raises(ValueError):
        quad.dunavant(6)


def _mapped_mesh_1d(n):
    return quad.quadrature_mesh(geom.coarse_mesh(geom.interval(), n))


def test_quadrature_mesh_total_weight():
    assert _mapped_mesh_1d(512).total_weight == pytest.approx(1.0, abs=1e-12)
    qm = quad.quadrature_mesh(geom.coarse_mesh(geom.rectangle(), 800))
    assert qm.total_weight == pytest.approx(4.0, abs=1e-8)


def test_mapped_triangle_integral():
    qm = quad.quadrature_mesh(geom.coarse_mesh(geom.rectangle(), 200), quad.dunavant(5))
    val = quad.integrate(lambda X: X[:, 0] ** 2 * X[:, 1] ** 2 + X[:, 0] ** 3 * X[:, 1] ** 2 + X[:, 0], qm)
    assert val == pytest.approx(4 / 9, abs=1e-12)


def test_solve_zero_and_quadratic():
    qm = quad.quadrature_mesh(geom.coarse_mesh(geom.interval(), 200))
    X = np.linspace(0, 1, 11)[:, None]
    green = lambda A, B: exact_green_1d(A[:, 0], B[:, 0])
    assert np.all(quad.solve_with_green(green, lambda Y: np.zeros(len(Y)), qm, X) == 0)
    u = quad.solve_with_green(green, lambda Y: np.full(len(Y), 2.0), qm, np.array([[0.5]]))
    assert abs(u[0] - 0.25) <= 1e-6


def test_solve_sine():
    qm = quad.quadrature_mesh(geom.coarse_mesh(geom.interval(), 512))
    green = lambda A, B: exact_green_1d(A[:, 0], B[:, 0])
    u = quad.solve_with_green(green, lambda Y: np.pi**2 * np.sin(np.pi * Y[:, 0]), qm, np.array([[0.5]]))
    assert abs(u[0] - 1.0) <= 1e-4


def test_solve_refinement_order_and_linearity():
    green = lambda A, B: exact_green_1d(A[:, 0], B[:, 0])
    f = lambda Y: np.pi**2 * np.sin(np.pi * Y[:, 0])
    X = np.linspace(0.05, 0.95, 7)[:, None]
    rule = quad.gauss_legendre(1)
    errs = []
    for n in (16, 32, 64):
        # eval points sit inside elements so the kink of G is not on a node
        qm = quad.quadrature_mesh(geom.coarse_mesh(geom.interval(), n), rule)
        errs.append(np.max(np.abs(quad.solve_with_green(green, f, qm, X) - np.sin(np.pi * X[:, 0]))))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.9)
    qm = _mapped_mesh_1d(64)
    g = lambda Y: Y[:, 0] ** 2
    a = quad.solve_with_green(green, f, qm, X)
    b = quad.solve_with_green(green, g, qm, X)
    ab = quad.solve_with_green(green, lambda Y: 2 * f(Y) - 3 * g(Y), qm, X)
    assert np.allclose(ab, 2 * a - 3 * b, atol=1e-13)


def test_boundary_quadrature_examples():
    bq = quad.boundary_quadrature(geom.unit_circle())
    assert bq.weights.sum() == pytest.approx(2 * np.pi, abs=1e-8)
    b1 = quad.boundary_quadrature(geom.interval())
    vals = np.array([3.0, 5.0])
    assert np.dot(b1.weights, vals) == 8.0
    mesh = geom.coarse_mesh(geom.rectangle(), 32)
    b2 = quad.boundary_quadrature(geom.rectangle(), mesh)
    assert b2.weights.sum() == pytest.approx(8.0, abs=1e-12)


def test_boundary_term_recovers_dirichlet_data():
    # -u'' = 0 with u(0) = ga, u(1) = gb has u = ga (1 - x) + gb x
    dom = geom.interval()
    bq = quad.boundary_quadrature(dom)

    def grad_y(X, Y):
        x, y = X[:, 0], Y[:, 0]
        return np.where(x < y, -x, 1.0 - x)[:, None]

    principal = lambda Y: -np.ones((Y.shape[0], 1, 1))
    X = np.linspace(0.1, 0.9, 5)[:, None]
    g = lambda Y: np.where(Y[:, 0] < 0.5, 2.0, -1.0)
    u = quad.boundary_term(grad_y, g, principal, bq, X)
    assert np.allclose(u, 2.0 * (1 - X[:, 0]) - 1.0 * X[:, 0], atol=1e-14)
    assert np.all(quad.boundary_term(grad_y, 0.0, principal, bq, X) == 0)


def test_model_grad_y_matches_finite_differences():
    ms = build_msnet(2, [6], [5], 0.3, seed=4)
    X = np.array([[0.1, 0.2], [-0.3, 0.4]])
    Y = np.array([[0.5, -0.1], [0.2, 0.2]])
    g = quad.model_grad_y(ms)(X, Y)
    kern = quad.model_kernel(ms)
    h = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (kern(X, Y + e) - kern(X, Y - e)) / (2 * h)
        assert np.allclose(g[:, i], fd, rtol=1e-6, atol=1e-9)


def test_routed_kernel_queries_owner_part():
    dom = geom.interval()
    mesh = geom.coarse_mesh(dom, 8)
    part = geom.partition(geom.adjacency_graph(mesh), 4)
    models = {p: build_msnet(1, [3], [3], 0.1, seed=p) for p in range(4)}
    k = quad.RoutedKernel(models, mesh, part)
    Y = np.linspace(0, 1, 41)[:, None]
    ids = k.route(Y)
    assert set(ids) == {0, 1, 2, 3}
    for y, pid in zip(Y[:, 0], ids):
        el = part.elements_of(pid)
        lo = mesh.vertices[mesh.elements[el]].min()
        hi = mesh.vertices[mesh.elements[el]].max()
        assert lo <= y <= hi
    X = np.full_like(Y, 0.3)
    vals = k(X, Y)
    for y, pid, v in zip(Y, ids, vals):
        assert v == pytest.approx(quad.model_kernel(models[pid])(np.array([[0.3]]), y[None])[0], rel=1e-13)
    with pytest.raises(ValueError):
        quad.RoutedKernel({0: models[0]}, mesh, part)


def test_solution_csv(tmp_path):
    X = np.array([[0.0], [0.5]])
    quad.write_solution_csv(tmp_path / "s.csv", X, np.array([0.0, 1.0]), np.array([0.0, 0.9]))
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "x0,u_theta,u_reference,abs_error"
    assert float(lines[2].split(",")[-1]) == pytest.approx(0.1)


@pytest.mark.parametrize("degree", [1, 2, 3, 4, 5])
def test_dunavant_monomials(degree):
    r = quad.dunavant(degree)
    x, y = r.nodes.T
    for p in range(degree + 1):
        for q in range(degree + 1 - p):
            assert abs(np.dot(r.weights, x**p * y**q) - triangle_monomial(p, q)) < 1e-12
