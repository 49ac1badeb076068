"""Operators, the Gaussian mollifier, exact kernels and the pointwise residual.

Two operator kinds are supported:

* ``divergence_form``:  L u = div(A(x) grad u)
* ``reaction_form``:    L u = -lap u - c(x) u

Networks take the feature vector ``(x, y, x - y)`` as input, so spatial
derivatives with respect to ``x`` are directional derivatives along
``e_i`` in the first block plus ``e_i`` in the third block.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geom
from .errors import ConfigError
from .net import all_pairs


@dataclass(frozen=True)
class Mollifier:
    epsilon: float

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"mollifier width must lie in (0, 1], got {self.epsilon}")

    def peak(self, d: int) -> float:
        return (1.0 / (self.epsilon * np.sqrt(np.pi))) ** d

    def __call__(self, X, Y) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        d = X.shape[-1]
        r2 = np.sum((X - Y) ** 2, axis=-1)
        return self.peak(d) * np.exp(-r2 / self.epsilon**2)


def mollifier_value(m: Mollifier, x, y, d: int) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if x.shape != (d,) or y.shape != (d,):
        raise ValueError(f"points must have dimension {d}")
    return float(m(x, y))


def exact_green_1d(x, y):
    """Dirichlet Green's function of ``-u''`` on [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.where(x < y, x * (1.0 - y), y * (1.0 - x))
    return float(out) if out.ndim == 0 else out


def exact_green_disk(X, Y):
    """Dirichlet Green's function of ``-lap`` on the unit disk (singular at x = y)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    r = np.linalg.norm(X - Y, axis=1)
    ny = np.linalg.norm(Y, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        Ystar = Y / np.where(ny > 0, ny**2, 1.0)[:, None]
        image = np.where(ny > 0, ny * np.linalg.norm(X - Ystar, axis=1), 1.0)
        return -(np.log(r) - np.log(image)) / (2.0 * np.pi)


def feature_map(x, y) -> np.ndarray:
    """``(x, y, x - y)``; works on single points or on rows of a batch."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("x and y must have the same shape")
    return np.concatenate([x, y, x - y], axis=-1)


def x_directions(d: int) -> np.ndarray:
    """Rows are d(feature_map)/d(x_i) in feature space."""
    V = np.zeros((d, 3 * d))
    for i in range(d):
        V[i, i] = 1.0
        V[i, 2 * d + i] = 1.0
    return V


# --------------------------------------------------------------------------
# coefficients


def _c_zero(X):
    return np.zeros(X.shape[0])


def _c_one(X):
    return np.ones(X.shape[0])


def _c_one_plus_x2(X):
    return 1.0 + X[:, 0] ** 2


def _c_one_plus_r2(X):
    return 1.0 + np.sum(X**2, axis=1)


COEFFICIENTS: dict[str, Callable] = {
    "zero": _c_zero,
    "one": _c_one,
    "one_plus_x2": _c_one_plus_x2,
    "one_plus_r2": _c_one_plus_r2,
}


def _identity_A(d):
    def A(X):
        return np.broadcast_to(np.eye(d), (X.shape[0], d, d)).copy()

    def divA(X):
        return np.zeros((X.shape[0], d))

    return A, divA


@dataclass(frozen=True)
class OperatorSpec:
    kind: str
    d: int
    c: Callable | None = None
    A: Callable | None = None
    divA: Callable | None = None
    name: str = ""

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError("spatial dimension must be 1 or 2")
        if self.kind == "reaction_form":
            if self.c is None:
                raise ValueError("reaction_form needs a coefficient c")
        elif self.kind == "divergence_form":
            if self.A is None or self.divA is None:
                raise ValueError("divergence_form needs A and its divergence")
        else:
            raise ValueError(f"unknown operator kind {self.kind!r}")

    @property
    def pairs(self) -> tuple[tuple[int, int], ...]:
        """Second-derivative pairs the operator needs."""
        if self.kind == "reaction_form":
            return tuple((i, i) for i in range(self.d))
        return all_pairs(self.d)

    def principal(self, X) -> np.ndarray:
        """Matrix B with L u = div(B grad u) + lower order terms."""
        X = np.atleast_2d(X)
        if self.kind == "divergence_form":
            return self.A(X)
        return -np.broadcast_to(np.eye(self.d), (X.shape[0], self.d, self.d))

    def reaction(self, X) -> np.ndarray:
        """Zeroth-order coefficient r with L u = ... + r u."""
        X = np.atleast_2d(X)
        if self.kind == "reaction_form":
            return -self.c(X)
        return np.zeros(X.shape[0])


def reaction_form(c="zero", d: int = 1) -> OperatorSpec:
    name = c if isinstance(c, str) else getattr(c, "__name__", "custom")
    fn = COEFFICIENTS[c] if isinstance(c, str) else c
    return OperatorSpec("reaction_form", d, c=fn, name=f"reaction:{name}")


def divergence_form(A=None, divA=None, d: int = 1, name: str = "custom") -> OperatorSpec:
    if A is None:
        A, divA = _identity_A(d)
        name = "identity"
    return OperatorSpec("divergence_form", d, A=A, divA=divA, name=f"divergence:{name}")


def check_divergence(op: OperatorSpec, rng: np.random.Generator, n: int = 8, h: float = 1e-5, tol: float = 1e-6) -> float:
    """Finite-difference spot check of the supplied div(A) (returns max error).

    Raises ``ValueError`` if A is not symmetric or the error exceeds ``tol``.
    """
    if op.kind != "divergence_form":
        return 0.0
    X = rng.uniform(-1.0, 1.0, size=(n, op.d))
    A0 = op.A(X)
    if np.max(np.abs(A0 - np.swapaxes(A0, 1, 2))) > 1e-12:
        raise ValueError("A(x) is not symmetric")
    fd = np.zeros((n, op.d))
    for i in range(op.d):
        e = np.zeros(op.d)
        e[i] = h
        dA = (op.A(X + e) - op.A(X - e)) / (2 * h)
        fd += dA[:, i, :]
    err = float(np.max(np.abs(fd - op.divA(X))))
    if err > tol:
        raise ValueError(f"div(A) inconsistent with A (max error {err:.2e})")
    return err


def apply_operator(op: OperatorSpec, X, value, tangents, seconds) -> np.ndarray:
    """L(phi) at rows of X from x-jets (tangents along x_i, seconds along op.pairs)."""
    X = np.atleast_2d(X)
    if op.kind == "reaction_form":
        return -np.sum(seconds, axis=0) - op.c(X) * value
    A = op.A(X)
    divA = op.divA(X)
    out = np.zeros(X.shape[0])
    for p, (i, j) in enumerate(op.pairs):
        coef = A[:, i, i] if i == j else A[:, i, j] + A[:, j, i]
        out += coef * seconds[p]
    out += np.sum(divA.T * tangents, axis=0)
    return out


def operator_adjoint(op: OperatorSpec, X, dr):
    """Adjoints of (value, tangents, seconds) for ``sum(dr * L(phi))``."""
    X = np.atleast_2d(X)
    n = X.shape[0]
    P = len(op.pairs)
    if op.kind == "reaction_form":
        return -op.c(X) * dr, np.zeros((op.d, n)), -np.broadcast_to(dr, (P, n))
    A = op.A(X)
    divA = op.divA(X)
    asec = np.empty((P, n))
    for p, (i, j) in enumerate(op.pairs):
        coef = A[:, i, i] if i == j else A[:, i, j] + A[:, j, i]
        asec[p] = coef * dr
    return np.zeros(n), divA.T * dr, asec


def _jets(model, Z, V, pairs):
    if hasattr(model, "jets"):
        return model.jets(Z, V, pairs)
    raise TypeError(f"{type(model).__name__} does not provide jets")


def residual_batch(op: OperatorSpec, model, X, Y, m: Mollifier) -> np.ndarray:
    """``L phi(x, y) - N_eps(x, y)`` at each row pair of (X, Y)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    Z = feature_map(X, Y)
    jet = _jets(model, Z, x_directions(op.d), op.pairs)
    return apply_operator(op, X, jet.value, jet.tangents, jet.seconds) - m(X, Y)


def residual(op: OperatorSpec, model, x, y, m: Mollifier) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    return float(residual_batch(op, model, x[None], y[None], m)[0])


# --------------------------------------------------------------------------
# problem description


@dataclass(frozen=True)
class ProblemSpec:
    domain: geom.Domain
    operator: OperatorSpec
    epsilon: float
    coefficient: str = "zero"

    @property
    def d(self) -> int:
        return self.domain.d

    @property
    def mollifier(self) -> Mollifier:
        return Mollifier(self.epsilon)

    def key(self) -> str:
        """Stable hash used to key cached reference solutions."""
        blob = json.dumps(
            {
                "domain": [self.domain.kind, list(self.domain.bounds)],
                "operator": self.operator.name,
                "coefficient": self.coefficient,
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def domain_from_config(cfg: dict) -> geom.Domain:
    kind = cfg.get("domain", "interval")
    bounds = cfg.get("bounds")
    if kind == "interval":
        return geom.interval(*(bounds or (0.0, 1.0)))
    if kind == "rectangle":
        return geom.rectangle(*(bounds or (-1.0, 1.0, -1.0, 1.0)))
    if kind == "unit_circle":
        return geom.unit_circle()
    raise ConfigError(f"unknown domain {kind!r}")


def problem_from_config(cfg: dict) -> ProblemSpec:
    """Build a problem from a ``[problem]`` table.

    Keys: ``domain``, ``bounds``, ``operator`` (``reaction`` only from file),
    ``c`` (one of the names in ``COEFFICIENTS``), ``epsilon``.
    """
    try:
        dom = domain_from_config(cfg)
        c = cfg.get("c", "zero")
        if c not in COEFFICIENTS:
            raise ConfigError(f"unknown coefficient {c!r}; choose from {sorted(COEFFICIENTS)}")
        kind = cfg.get("operator", "reaction")
        if kind != "reaction":
            raise ConfigError("only the reaction operator can be built from a config file")
        eps = float(cfg.get("epsilon", 0.01))
        Mollifier(eps)
        return ProblemSpec(dom, reaction_form(c, dom.d), eps, c)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
