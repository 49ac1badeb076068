"""Two-scale model: a scaled large-scale network plus a plain small-scale one."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .net import (
    BatchJet,
    Network,
    ScaleParams,
    SpatialJet,
    evaluate,
    init_network,
    jet_batch,
    network_from_dict,
    network_to_dict,
)
from .pde import feature_map, x_directions


def default_alpha(d: int) -> float:
    """Output exponent that puts L(phi_1) at the mollifier's O(eps^-d) scale."""
    if d not in (1, 2):
        raise ValueError("spatial dimension must be 1 or 2")
    return float(2 - d)


def large_scale(epsilon: float, d: int, alpha: float | None = None, beta: float = 1.0) -> ScaleParams:
    return ScaleParams(epsilon, default_alpha(d) if alpha is None else alpha, beta)


@dataclass
class MsNet:
    large: Network
    small: Network
    d: int

    def __post_init__(self):
        for net in (self.large, self.small):
            if net.in_dim != 3 * self.d:
                raise ValueError(f"component networks must take {3 * self.d} inputs")
        if not self.small.scale.is_identity:
            raise ValueError("the small-scale network must not be scaled")

    @property
    def epsilon(self) -> float:
        return self.large.scale.epsilon

    @property
    def components(self) -> tuple[Network, Network]:
        return (self.large, self.small)

    def replace(self, **changes) -> "MsNet":
        return dataclasses.replace(self, **changes)

    def with_epsilon(self, epsilon: float) -> "MsNet":
        s = self.large.scale
        return self.replace(large=self.large.replace(scale=ScaleParams(epsilon, s.alpha, s.beta)))

    def jets(self, Z, directions, pairs=None) -> BatchJet:
        a = jet_batch(self.large, Z, directions, pairs)
        b = jet_batch(self.small, Z, directions, pairs)
        return BatchJet(a.value + b.value, a.tangents + b.tangents, a.seconds + b.seconds, a.pairs)

    def __call__(self, z):
        return evaluate(self.large, z) + evaluate(self.small, z)


def build_msnet(
    d: int,
    large_widths: Sequence[int],
    small_widths: Sequence[int],
    epsilon: float,
    alpha: float | None = None,
    beta: float = 1.0,
    activation: str = "tanh",
    seed: int = 0,
) -> MsNet:
    large = init_network(3 * d, large_widths, activation, large_scale(epsilon, d, alpha, beta), seed)
    small = init_network(3 * d, small_widths, activation, ScaleParams(), seed + 1)
    return MsNet(large, small, d)


def build_single(
    d: int,
    widths: Sequence[int],
    epsilon: float | None = None,
    alpha: float | None = None,
    beta: float = 1.0,
    activation: str = "tanh",
    seed: int = 0,
) -> Network:
    """Standalone network; scaled (large-scale) when ``epsilon`` is given."""
    scale = ScaleParams() if epsilon is None else large_scale(epsilon, d, alpha, beta)
    return init_network(3 * d, widths, activation, scale, seed)


def model_value(model, X, Y) -> np.ndarray:
    """Model value at rows of (X, Y) for a Network or an MsNet."""
    Z = feature_map(np.atleast_2d(X), np.atleast_2d(Y))
    return sum(evaluate(net, Z) for net in model.components)


def ms_eval(ms: MsNet, x, y) -> float:
    z = feature_map(np.atleast_1d(x), np.atleast_1d(y))
    return evaluate(ms.large, z) + evaluate(ms.small, z)


def ms_jet(ms: MsNet, x, y) -> tuple[SpatialJet, float]:
    """Jet with respect to x of phi(x, y), and the swapped value phi(y, x)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    d = ms.d
    z = feature_map(x, y)[None]
    jet = ms.jets(z, x_directions(d))
    H = np.empty((d, d))
    for p, (i, j) in enumerate(jet.pairs):
        H[i, j] = H[j, i] = jet.seconds[p, 0]
    swapped = ms_eval(ms, y, x)
    return SpatialJet(float(jet.value[0]), jet.tangents[:, 0].copy(), H), swapped


def msnet_to_dict(ms: MsNet) -> dict:
    return {
        "kind": "msnet",
        "d": ms.d,
        "epsilon": float(ms.epsilon).hex(),
        "large": network_to_dict(ms.large),
        "small": network_to_dict(ms.small),
    }


def model_to_dict(model) -> dict:
    if isinstance(model, MsNet):
        return msnet_to_dict(model)
    return {"kind": "network", "network": network_to_dict(model)}


def model_from_dict(d: dict):
    if d["kind"] == "msnet":
        ms = MsNet(network_from_dict(d["large"]), network_from_dict(d["small"]), int(d["d"]))
        if float.fromhex(d["epsilon"]) != ms.epsilon:
            raise ValueError("checkpoint epsilon does not match the large-scale network")
        return ms
    return network_from_dict(d["network"])


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))
