"""Shallow fully connected networks with exact spatial jets.

Values, first and second directional derivatives with respect to the input
are pushed forward layer by layer as a stack of channels.  Parameter
gradients of objectives built from those channels are obtained with a
hand-written reverse sweep over the same forward computation.

Layout of the flat parameter vector: for each layer, the weight matrix
``W`` of shape ``(in_dim, out_dim)`` in row-major order followed by the bias
``b`` of shape ``(out_dim,)``.  A layer maps ``h -> h @ W + b``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InputShapeError, NumericalOverflowError

CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------
# activations


def _tanh_derivs(u, order):
    t = np.tanh(u)
    if order == 0:
        return (t,)
    d1 = 1.0 - t * t
    if order == 1:
        return t, d1
    d2 = -2.0 * t * d1
    if order == 2:
        return t, d1, d2
    return t, d1, d2, d1 * (6.0 * t * t - 2.0)


def _arctan_derivs(u, order):
    f = np.arctan(u)
    if order == 0:
        return (f,)
    q = 1.0 / (1.0 + u * u)
    if order == 1:
        return f, q
    d2 = -2.0 * u * q * q
    if order == 2:
        return f, q, d2
    return f, q, d2, (6.0 * u * u - 2.0) * q * q * q


# name -> callable(u, order) returning (sigma, sigma', ..., sigma^(order))
ACTIVATIONS: dict[str, Callable] = {
    "tanh": _tanh_derivs,
    "arctan": _arctan_derivs,
}


def register_activation(name: str, derivs: Callable) -> None:
    """Add an activation given as ``derivs(u, order)`` up to third order."""
    ACTIVATIONS[name] = derivs


# --------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    has_bias: bool = True

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dimensions must be >= 1, got {self}")

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


@dataclass(frozen=True)
class ScaleParams:
    """Whole-map scale transform ``z -> eps**alpha * f(z / eps**beta)``."""

    epsilon: float = 1.0
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")

    @property
    def input_factor(self) -> float:
        return float(self.epsilon ** (-self.beta))

    @property
    def output_factor(self) -> float:
        return float(self.epsilon**self.alpha)

    @property
    def is_identity(self) -> bool:
        return self.input_factor == 1.0 and self.output_factor == 1.0


@dataclass
class Network:
    layers: tuple[LayerSpec, ...]
    params: np.ndarray
    activation: str = "tanh"
    scale: ScaleParams = field(default_factory=ScaleParams)
    seed: int | None = None

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.params = np.asarray(self.params, dtype=np.float64)
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError("consecutive layer dimensions do not chain")
        expected = sum(l.n_params for l in self.layers)
        if self.params.shape != (expected,):
            raise ValueError(
                f"parameter vector has shape {self.params.shape}, expected ({expected},)"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def n_params(self) -> int:
        return self.params.size

    def weights(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into ``params`` (defaults to this network's vector)."""
        p = self.params if params is None else params
        out = []
        k = 0
        for l in self.layers:
            W = p[k : k + l.in_dim * l.out_dim].reshape(l.in_dim, l.out_dim)
            k += l.in_dim * l.out_dim
            b = p[k : k + l.out_dim]
            k += l.out_dim
            out.append((W, b))
        return out

    def replace(self, **changes) -> "Network":
        return dataclasses.replace(self, **changes)

    def copy(self) -> "Network":
        return self.replace(params=self.params.copy())

    def __call__(self, z):
        return evaluate(self, z)

    def jets(self, Z, directions, pairs=None) -> "BatchJet":
        return jet_batch(self, Z, directions, pairs)

    @property
    def components(self) -> tuple["Network", ...]:
        return (self,)


@dataclass
class SpatialJet:
    value: float
    grad: np.ndarray
    hess: np.ndarray


@dataclass
class BatchJet:
    """Directional jets at a batch of points.

    ``tangents[k, n]`` is the derivative along direction ``k`` at point ``n``;
    ``seconds[p, n]`` the mixed second derivative along ``pairs[p]``.
    """

    value: np.ndarray
    tangents: np.ndarray
    seconds: np.ndarray
    pairs: tuple[tuple[int, int], ...]


# --------------------------------------------------------------------------
# construction


def build_layers(in_dim: int, widths: Sequence[int], out_dim: int = 1) -> tuple[LayerSpec, ...]:
    dims = [in_dim, *widths, out_dim]
    return tuple(LayerSpec(a, b) for a, b in zip(dims[:-1], dims[1:]))


def init_network(
    in_dim: int,
    widths: Sequence[int],
    activation: str = "tanh",
    scale: ScaleParams | None = None,
    seed: int = 0,
) -> Network:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialisation."""
    layers = build_layers(in_dim, widths)
    rng = np.random.default_rng(seed)
    chunks = []
    for l in layers:
        r = 1.0 / np.sqrt(l.in_dim)
        chunks.append(rng.uniform(-r, r, size=l.in_dim * l.out_dim))
        chunks.append(rng.uniform(-r, r, size=l.out_dim))
    return Network(layers, np.concatenate(chunks), activation, scale or ScaleParams(), seed)


def zero_network(in_dim: int, widths: Sequence[int], **kw) -> Network:
    layers = build_layers(in_dim, widths)
    return Network(layers, np.zeros(sum(l.n_params for l in layers)), **kw)


# --------------------------------------------------------------------------
# forward / reverse sweeps


def all_pairs(k: int) -> tuple[tuple[int, int], ...]:
    return tuple((i, j) for i in range(k) for j in range(i, k))


def _as_batch(net: Network, z) -> np.ndarray:
    Z = np.asarray(z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.ndim != 2 or Z.shape[1] != net.in_dim:
        raise InputShapeError(
            f"expected input of dimension {net.in_dim}, got array of shape {np.shape(z)}"
        )
    return Z


def _check_finite(values: np.ndarray, Z: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        bad = np.nonzero(~np.isfinite(values))
        idx = bad[-1][0] if len(bad) else 0
        raise NumericalOverflowError(
            f"non-finite network output at input {Z[idx]}", point=Z[idx].copy()
        )


def _forward(net, Z, directions, pairs, params=None, keep=False):
    """Push (value, tangents, seconds) through all layers.

    Returns ``(value, derivs, tape)`` where ``derivs`` has shape
    ``(K + P, N)`` (tangent channels first).
    """
    acts = ACTIVATIONS[net.activation]
    sin = net.scale.input_factor
    sout = net.scale.output_factor
    h = Z * sin if sin != 1.0 else Z
    if directions is None:
        K, P = 0, 0
        D = None
    else:
        V = np.asarray(directions, dtype=np.float64)
        K = V.shape[0]
        P = len(pairs)
        D = np.zeros((K + P, 1, net.in_dim))
        D[:K, 0, :] = V * sin
    ii = np.array([p[0] for p in pairs], dtype=int) if P else None
    jj = np.array([p[1] for p in pairs], dtype=int) if P else None
    order = 0 if K == 0 else (2 if P else 1)
    need = order + 1 if keep else order

    tape = []
    Ws = net.weights(params)
    last = len(Ws) - 1
    for l, (W, b) in enumerate(Ws):
        u = h @ W + b
        Du = None if D is None else D @ W
        if keep:
            tape.append((h, D, Du))
        if l == last:
            h, D = u, Du
            break
        ds = acts(u, need)
        h = ds[0]
        if D is not None:
            Tu = Du[:K]
            Dn = np.empty((K + P, u.shape[0], u.shape[1]))
            Dn[:K] = ds[1] * Tu
            if P:
                Dn[K:] = ds[2] * Tu[ii] * Tu[jj] + ds[1] * Du[K:]
            D = Dn
        if keep:
            tape[-1] = tape[-1] + (ds,)
    value = h[:, 0]
    derivs = None if D is None else np.broadcast_to(D[:, :, 0], (K + P, Z.shape[0]))
    if sout != 1.0:
        value = value * sout
        derivs = None if derivs is None else derivs * sout
    _check_finite(value, Z)
    if derivs is not None:
        _check_finite(derivs, Z)
    return value, derivs, (tape, K, ii, jj)


def _backward(net, tape_info, adj_value, adj_derivs, params=None):
    """Reverse sweep: accumulate d(objective)/d(params) from output adjoints."""
    acts = ACTIVATIONS[net.activation]
    tape, K, ii, jj = tape_info
    sout = net.scale.output_factor
    Ws = net.weights(params)
    grad = np.zeros(net.n_params)
    gWs = net.weights(grad)

    Hb = (adj_value * sout)[:, None]
    Db = None if adj_derivs is None else (adj_derivs * sout)[:, :, None]
    for l in range(len(Ws) - 1, -1, -1):
        W, _ = Ws[l]
        gW, gb = gWs[l]
        rec = tape[l]
        h, D, Du = rec[0], rec[1], rec[2]
        if l < len(Ws) - 1:
            # Hb, Db are adjoints of this layer's activation outputs
            ds = rec[3]
            s1, s2 = ds[1], (ds[2] if len(ds) > 2 else None)
            ub = s1 * Hb
            if Db is not None:
                Tu = Du[:K]
                Tb = Db[:K]
                Dbu = np.empty(np.broadcast_shapes(Db.shape, Du.shape))
                Dbu[:K] = s1 * Tb
                ub = ub + s2 * np.sum(Tb * Tu, axis=0)
                if ii is not None:
                    Sb = Db[K:]
                    Dbu[K:] = s1 * Sb
                    c2 = s2 * Sb
                    for p, (i, j) in enumerate(zip(ii, jj)):
                        Dbu[i] += c2[p] * Tu[j]
                        Dbu[j] += c2[p] * Tu[i]
                    ub = ub + s2 * np.sum(Sb * Du[K:], axis=0)
                    ub = ub + ds[3] * np.sum(Sb * Tu[ii] * Tu[jj], axis=0)
            else:
                Dbu = None
        else:
            ub = Hb
            Dbu = Db
        gW += h.T @ ub
        gb += ub.sum(axis=0)
        if Dbu is not None:
            if D.shape[1] == 1:
                gW += D[:, 0, :].T @ Dbu.sum(axis=1)
            else:
                gW += D.reshape(-1, D.shape[2]).T @ Dbu.reshape(-1, Dbu.shape[2])
        if l > 0:
            Hb = ub @ W.T
            Db = None if Dbu is None else Dbu @ W.T
    return grad


# --------------------------------------------------------------------------
# public evaluation API


def evaluate(net: Network, z) -> float | np.ndarray:
    """Network value at a point (float) or at a batch of rows (array)."""
    single = np.ndim(z) == 1
    Z = _as_batch(net, z)
    value, _, _ = _forward(net, Z, None, ())
    return float(value[0]) if single else value


def jet_batch(net: Network, Z, directions, pairs=None) -> BatchJet:
    """Directional jets at every row of ``Z``.

    ``directions`` is a ``(K, in_dim)`` array of input-space directions;
    ``pairs`` lists the (i, j), i <= j, second derivatives wanted (default all).
    """
    Z = _as_batch(net, Z)
    V = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if V.shape[1] != net.in_dim:
        raise InputShapeError(f"directions must have {net.in_dim} columns")
    pairs = all_pairs(V.shape[0]) if pairs is None else tuple(tuple(p) for p in pairs)
    value, derivs, _ = _forward(net, Z, V, pairs)
    K = V.shape[0]
    return BatchJet(value, np.array(derivs[:K]), np.array(derivs[K:]), pairs)


def evaluate_jet(net: Network, z) -> SpatialJet:
    """Value, gradient and Hessian with respect to the full input vector."""
    Z = _as_batch(net, z)
    if Z.shape[0] != 1:
        raise InputShapeError("evaluate_jet takes a single point; use jet_batch for batches")
    D = net.in_dim
    jet = jet_batch(net, Z, np.eye(D))
    H = np.empty((D, D))
    for p, (i, j) in enumerate(jet.pairs):
        H[i, j] = H[j, i] = jet.seconds[p, 0]
    return SpatialJet(float(jet.value[0]), jet.tangents[:, 0].copy(), H)


def forward_with_tape(net: Network, Z, directions=None, pairs=(), params=None):
    """Forward sweep that records what the reverse sweep needs.

    Returns ``(BatchJet, tape)``; pass the tape to :func:`backward`.
    """
    Z = _as_batch(net, Z)
    if directions is not None:
        directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        K = directions.shape[0]
    else:
        K = 0
        pairs = ()
    pairs = tuple(tuple(p) for p in pairs)
    value, derivs, tape = _forward(net, Z, directions, pairs, params=params, keep=True)
    if derivs is None:
        derivs = np.zeros((0, Z.shape[0]))
    return BatchJet(value, derivs[:K], derivs[K:], pairs), tape


def backward(net: Network, tape, adj_value, adj_tangents=None, adj_seconds=None, params=None):
    """Parameter gradient given adjoints of the recorded jet channels."""
    adj_value = np.asarray(adj_value, dtype=np.float64)
    adj_derivs = None
    K = tape[1]
    if K > 0:
        P = 0 if tape[2] is None else len(tape[2])
        N = adj_value.shape[0]
        adj_derivs = np.zeros((K + P, N))
        if adj_tangents is not None:
            adj_derivs[:K] = adj_tangents
        if adj_seconds is not None and P:
            adj_derivs[K:] = adj_seconds
    return _backward(net, tape, adj_value, adj_derivs, params)


def loss_param_grad(net: Network, Z, objective, directions=None, pairs=()):
    """Value and parameter gradient of ``objective`` evaluated on jets at ``Z``.

    ``objective(jet)`` receives a :class:`BatchJet` and must return
    ``(value, (adj_value, adj_tangents, adj_seconds))`` where the adjoints are
    the partial derivatives of the value with respect to each jet channel.
    """
    jet, tape = forward_with_tape(net, Z, directions, pairs)
    value, (av, at, asec) = objective(jet)
    return value, backward(net, tape, av, at, asec)


# --------------------------------------------------------------------------
# diagnostics


def layer_magnitude_stats(net: Network) -> list[float]:
    """Per hidden layer mean of ``(|a| (|w|^3 + 2|w|^2|b| + |w||b|^2))^2``.

    ``w``, ``b`` are a neuron's incoming weights (l1 norm) and bias, ``a`` the
    l1 norm of its outgoing weights (the output weight for the last layer).
    """
    Ws = net.weights()
    stats = []
    for l in range(len(Ws) - 1):
        W, b = Ws[l]
        a = np.abs(Ws[l + 1][0]).sum(axis=1)
        w1 = np.abs(W).sum(axis=0)
        ab = np.abs(b)
        eta = w1**3 + 2.0 * w1**2 * ab + w1 * ab**2
        stats.append(float(np.mean((a * eta) ** 2)))
    return stats


def param_magnitude_stat(net: Network) -> float:
    """Barron-type magnitude statistic of the hidden neurons.

    Exact for one hidden layer; for deeper networks the mean of the
    per-layer values from :func:`layer_magnitude_stats`.
    """
    stats = layer_magnitude_stats(net)
    return float(np.mean(stats)) if stats else 0.0


# --------------------------------------------------------------------------
# checkpoints


def network_to_dict(net: Network) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "layers": [[l.in_dim, l.out_dim] for l in net.layers],
        "activation": net.activation,
        "scale": {
            "epsilon": float(net.scale.epsilon).hex(),
            "alpha": float(net.scale.alpha).hex(),
            "beta": float(net.scale.beta).hex(),
        },
        "seed": net.seed,
        "params": [float(v).hex() for v in net.params],
    }


def network_from_dict(d: dict) -> Network:
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    sc = {k: float.fromhex(v) for k, v in d["scale"].items()}
    return Network(
        layers=tuple(LayerSpec(a, b) for a, b in d["layers"]),
        params=np.array([float.fromhex(v) for v in d["params"]]),
        activation=d["activation"],
        scale=ScaleParams(**sc),
        seed=d["seed"],
    )


def save_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net)))


def load_network(path) -> Network:
    return network_from_dict(json.loads(Path(path).read_text()))
