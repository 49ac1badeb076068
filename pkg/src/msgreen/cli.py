"""Experiment runner: mollifier study, fixed-y training, parameter histograms, full solves.

Usage::

    msgreen fixed-y --config configs/fixed_y_1d_c0.toml --out runs/fy --seed 0
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import __version__, geom, msnn, oracle, pde, quad, train
from .net import param_magnitude_stat
from .errors import ConfigError

KINDS = ("mollifier_study", "fixed_y", "param_hist", "full_solve")
MODEL_KEYS = ("l", "s", "m")


# --------------------------------------------------------------------------
# configuration


@dataclass
class Architecture:
    large: list[int] = field(default_factory=lambda: [20])
    small: list[int] = field(default_factory=lambda: [20])
    single: list[int] = field(default_factory=lambda: [40])
    activation: str = "tanh"
    alpha: float | None = None
    beta: float = 1.0


@dataclass
class Sampling:
    n_y: int = 1
    n_bdry: int = 2
    n_near: int = 500
    n_far: int = 500
    coarse_elements: int = 32
    fine_elements: int | None = None
    eval_points: int = 201


@dataclass
class TrainSection:
    stage1_steps: int = 1000
    stage2_steps: int = 4000
    single_steps: int | None = None
    lr0: list[float] = field(default_factory=lambda: [1e-3])
    decay: list[float] = field(default_factory=lambda: [1.0])
    batch_size: int | None = None
    eval_every: int = 1000


@dataclass
class ExperimentConfig:
    kind: str
    problem: pde.ProblemSpec
    arch: Architecture
    sampling: Sampling
    train: TrainSection
    options: dict
    seed: int = 0
    out: str = "runs"
    raw: dict = field(default_factory=dict)


def _section(cls, table: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(table) - known
    if extra:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
    try:
        return cls(**table)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def validate(cfg: ExperimentConfig) -> None:
    """Check module preconditions before any work is done."""
    if cfg.kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {cfg.kind!r}; choose from {list(KINDS)}")
    a, s, t = cfg.arch, cfg.sampling, cfg.train
    for name, w in (("large", a.large), ("small", a.small), ("single", a.single)):
        if not w or any(int(k) < 1 for k in w):
            raise ConfigError(f"architecture.{name} needs positive widths")
    if a.activation not in ("tanh", "arctan"):
        raise ConfigError(f"unknown activation {a.activation!r}")
    if min(s.n_y, s.n_bdry, s.n_near, s.n_far, s.eval_points) < 1:
        raise ConfigError("sampling counts must be >= 1")
    if t.stage1_steps < 0 or t.stage2_steps < 0:
        raise ConfigError("step counts must be >= 0")
    for lr in t.lr0:
        if not 1e-4 <= lr <= 1e-1:
            raise ConfigError(f"lr0 {lr} outside [1e-4, 1e-1]")
    for dc in t.decay:
        if not 0.9 <= dc <= 1.0:
            raise ConfigError(f"decay {dc} outside [0.9, 1.0]")
    if t.batch_size is not None and t.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if t.eval_every < 1:
        raise ConfigError("eval_every must be >= 1")
    o = cfg.options
    if cfg.kind in ("fixed_y", "param_hist", "mollifier_study"):
        Y = _anchors(o.get("y"), cfg.problem.d)
        dom = cfg.problem.domain
        if np.any(~dom.contains(Y)) or np.any(dom.on_boundary(Y)):
            raise ConfigError("anchors y must lie in the open domain")
    models = o.get("models", list(MODEL_KEYS))
    if any(k not in MODEL_KEYS for k in models):
        raise ConfigError(f"models must be drawn from {list(MODEL_KEYS)}")
    by_model = o.get("lr0_by_model", {})
    if not isinstance(by_model, dict) or any(k not in MODEL_KEYS for k in by_model):
        raise ConfigError(f"lr0_by_model keys must be drawn from {list(MODEL_KEYS)}")
    for lr in (float(v) for vs in by_model.values() for v in _as_list(vs)):
        if not 1e-4 <= lr <= 1e-1:
            raise ConfigError(f"lr0 {lr} outside [1e-4, 1e-1]")
    if cfg.kind in ("mollifier_study", "param_hist"):
        for e in _as_list(o.get("epsilons", [cfg.problem.epsilon])):
            if not 0.0 < float(e) <= 1.0:
                raise ConfigError(f"epsilon {e} outside (0, 1]")
    if cfg.kind == "mollifier_study" and cfg.problem.d != 1:
        raise ConfigError("the mollifier study is defined for 1D problems")
    if cfg.kind == "full_solve":
        if int(o.get("parts", 1)) < 1:
            raise ConfigError("parts must be >= 1")
        if int(o.get("parts", 1)) > s.coarse_elements:
            raise ConfigError("parts cannot exceed sampling.coarse_elements")
        for name in o.get("solutions", []):
            if name not in MANUFACTURED:
                raise ConfigError(f"unknown manufactured solution {name!r}; choose from {sorted(MANUFACTURED)}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    known = {"kind", "seed", "out", "problem", "architecture", "sampling", "train", "experiment"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    if "kind" not in raw:
        raise ConfigError("missing 'kind'")
    problem = pde.problem_from_config(raw.get("problem", {}))
    tr = dict(raw.get("train", {}))
    for k in ("lr0", "decay"):
        if k in tr:
            tr[k] = [float(v) for v in _as_list(tr[k])]
    cfg = ExperimentConfig(
        kind=str(raw["kind"]),
        problem=problem,
        arch=_section(Architecture, raw.get("architecture", {}), "architecture"),
        sampling=_section(Sampling, raw.get("sampling", {}), "sampling"),
        train=_section(TrainSection, tr, "train"),
        options=dict(raw.get("experiment", {})),
        seed=int(raw.get("seed", 0)),
        out=str(raw.get("out", "runs")),
        raw=raw,
    )
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return config_from_dict(raw)


# --------------------------------------------------------------------------
# helpers


def _anchors(y, d: int) -> np.ndarray:
    if y is None:
        y = [0.5] * d
    Y = np.asarray(y, dtype=np.float64)
    return Y.reshape(-1, d)


def eval_grid(dom: geom.Domain, n: int) -> np.ndarray:
    """Deterministic evaluation points: uniform nodes (1D) or an interior lattice (2D)."""
    if dom.d == 1:
        a, b = dom.bounds
        return np.linspace(a, b, n)[:, None]
    if dom.kind == "rectangle":
        ax, bx, ay, by = dom.bounds
        g = np.linspace(0, 1, n)
        X, Y = np.meshgrid(ax + (bx - ax) * g, ay + (by - ay) * g, indexing="xy")
        return np.column_stack([X.ravel(), Y.ravel()])
    g = np.linspace(-1, 1, n)
    X, Y = np.meshgrid(g, g, indexing="xy")
    P = np.column_stack([X.ravel(), Y.ravel()])
    return P[np.sum(P * P, axis=1) <= 0.95**2]


def reference_kernel(problem: pde.ProblemSpec, y, X, cache=None) -> np.ndarray:
    """Ground truth at X: the exact kernel for 1D c=0, a discretised G_eps otherwise."""
    y = np.atleast_1d(y)
    if problem.d == 1 and problem.coefficient == "zero" and problem.domain.bounds == (0.0, 1.0):
        return pde.exact_green_1d(X[:, 0], y[0])
    if cache is not None:
        fld = cache.get(problem, y)
    else:
        fld = oracle.reference_green(problem.operator, problem.mollifier, y, problem.domain)
    return fld(X)


def sup_error_fn(problem, y, X, cache=None) -> Callable:
    ref = reference_kernel(problem, y, X, cache)
    Y = np.broadcast_to(np.atleast_1d(y), X.shape)

    def err(model) -> float:
        return float(np.max(np.abs(msnn.model_value(model, X, Y) - ref)))

    return err


def make_model(cfg: ExperimentConfig, key: str, seed: int, epsilon: float | None = None):
    a = cfg.arch
    d = cfg.problem.d
    eps = cfg.problem.epsilon if epsilon is None else epsilon
    if key == "m":
        return msnn.build_msnet(d, a.large, a.small, eps, a.alpha, a.beta, a.activation, seed)
    if key == "l":
        return msnn.build_single(d, a.single, eps, a.alpha, a.beta, a.activation, seed)
    return msnn.build_single(d, a.single, None, activation=a.activation, seed=seed)


def base_config(cfg: ExperimentConfig, key: str, seed: int) -> train.TrainConfig:
    t = cfg.train
    if key == "m":
        s1, s2 = t.stage1_steps, t.stage2_steps
    else:
        s1, s2 = 0, t.single_steps if t.single_steps is not None else t.stage1_steps + t.stage2_steps
    return train.TrainConfig(
        lr0=t.lr0[0], decay=t.decay[0], stage1_steps=s1, stage2_steps=s2, seed=seed, batch_size=t.batch_size
    )


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in r])


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, wall: float, extra: dict | None = None) -> None:
    man = {
        "command": command,
        "kind": cfg.kind,
        "seed": cfg.seed,
        "config": cfg.raw,
        "versions": {"msgreen": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "wall_clock_seconds": wall,
    }
    if extra:
        man.update(extra)
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=str))


# --------------------------------------------------------------------------
# experiments


def run_mollifier_study(cfg: ExperimentConfig, out: Path) -> list[tuple]:
    """Sup error of G_eps against the reference kernel for every (eps, y)."""
    o = cfg.options
    eps_list = [float(e) for e in _as_list(o.get("epsilons", [1.0, 0.1, 0.01, 0.001]))]
    Y = _anchors(o.get("y", [0.95]), 1)
    dom = cfg.problem.domain
    exact = cfg.problem.coefficient == "zero" and dom.bounds == (0.0, 1.0)
    rows = []
    res = o.get("resolution")
    for e in eps_list:
        m = pde.Mollifier(e)
        n = int(res) if res else oracle.default_resolution(e, 1)
        for y in Y:
            fld = oracle.reference_green(cfg.problem.operator, m, y, dom, n)
            X = fld.nodes
            if exact:
                ref = pde.exact_green_1d(X[:, 0], y[0])
            else:
                # the eps -> 0 limit is approximated by the finest width in the sweep
                fine = oracle.reference_green(cfg.problem.operator, pde.Mollifier(min(eps_list)), y, dom, n)
                ref = fine.values
            rows.append((e, float(y[0]), float(np.max(np.abs(fld.values - ref)))))
            _write_csv(
                out / f"green_eps{e:g}_y{y[0]:g}.csv",
                ["x", "G_eps", "G_ref"],
                zip(X[:, 0].tolist(), fld.values.tolist(), np.asarray(ref).tolist()),
            )
    _write_csv(out / "mollifier_study.csv", ["epsilon", "y", "sup_error"], rows)
    return rows


def fit_fixed_y(cfg: ExperimentConfig, key: str, y, seed: int, err: Callable, batch=None):
    """Grid search (lr0 x decay) for one model kind at one anchor; returns the best GridResult."""
    dom = cfg.problem.domain
    eps = cfg.problem.epsilon
    s = cfg.sampling
    if batch is None:
        rng = np.random.default_rng(seed)
        batch = geom.make_batch(dom, np.atleast_2d(y), (s.n_bdry, s.n_near, s.n_far), eps, rng)
    base = base_config(cfg, key, seed)
    lr0s = _as_list(cfg.options.get("lr0_by_model", {}).get(key, cfg.train.lr0))
    grid = train.config_grid(base, lr0s, cfg.train.decay)
    w = train.LossWeights.default(eps, dom.d)
    best, _ = train.grid_search(
        lambda: make_model(cfg, key, seed),
        batch,
        cfg.problem.operator,
        cfg.problem.mollifier,
        grid,
        w,
        err,
        cfg.train.eval_every,
    )
    return best


def run_fixed_y(cfg: ExperimentConfig, out: Path) -> list[tuple]:
    """Train phi^l, phi^s, phi^m per anchor; CSV of (model, y, step, sup error)."""
    o = cfg.options
    d = cfg.problem.d
    Y = _anchors(o.get("y"), d)
    models = o.get("models", list(MODEL_KEYS))
    X = eval_grid(cfg.problem.domain, cfg.sampling.eval_points)
    cache = oracle.ReferenceCache(out / "cache")
    rows, summary = [], []
    s = cfg.sampling
    for yi, y in enumerate(Y):
        err = sup_error_fn(cfg.problem, y, X, cache)
        rng = np.random.default_rng(cfg.seed)
        batch = geom.make_batch(cfg.problem.domain, y[None], (s.n_bdry, s.n_near, s.n_far), cfg.problem.epsilon, rng)
        for key in models:
            best = fit_fixed_y(cfg, key, y, cfg.seed, err, batch)
            ytag = " ".join(f"{v:g}" for v in y)
            for step, e in best.report.history if best.report else []:
                rows.append((key, ytag, step, float(e)))
            summary.append((key, ytag, best.config.lr0, best.config.decay, float(best.error)))
            if best.model is not None:
                msnn.save_model(best.model, out / f"model_{key}_y{yi}.json")
                train.write_training_log(best.report, out / f"log_{key}_y{yi}.csv")
    _write_csv(out / "fixed_y.csv", ["model", "y", "step", "sup_error"], rows)
    _write_csv(out / "fixed_y_best.csv", ["model", "y", "lr0", "decay", "sup_error"], summary)
    return summary


@dataclass
class HistResult:
    model: str
    epsilon: float
    converged: bool
    steps: int
    error: float
    max_abs_param: float
    stat: float
    params: np.ndarray


def train_to_threshold(cfg, key, epsilon, y, seed, threshold, check_every, max_steps, lr0=None, decay=None):
    """Train until the sup error drops below ``threshold`` (checked every ``check_every`` steps)."""
    problem = dataclasses.replace(cfg.problem, epsilon=epsilon)
    X = eval_grid(problem.domain, cfg.sampling.eval_points)
    err = sup_error_fn(problem, y, X)
    s = cfg.sampling
    rng = np.random.default_rng(seed)
    batch = geom.make_batch(problem.domain, np.atleast_2d(y), (s.n_bdry, s.n_near, s.n_far), epsilon, rng)
    model = make_model(cfg, key, seed, epsilon)
    tc = train.TrainConfig(
        lr0=cfg.train.lr0[0] if lr0 is None else lr0,
        decay=cfg.train.decay[0] if decay is None else decay,
        stage1_steps=cfg.train.stage1_steps if key == "m" else 0,
        stage2_steps=max_steps,
        seed=seed,
        batch_size=cfg.train.batch_size,
    )
    tr = train.Trainer(model, batch, problem.operator, problem.mollifier, tc, train.LossWeights.default(epsilon, problem.d))
    if key == "m" and tc.stage1_steps:
        tr.run(tc.stage1_steps, [0])
    active = None
    e = err(tr.current_model())
    while tr.step < max_steps and e > threshold:
        tr.run(min(check_every, max_steps - tr.step), active)
        e = err(tr.current_model())
    final = tr.current_model()
    params = np.concatenate([n.params for n in final.components])
    stat = float(np.mean([param_magnitude_stat(n) for n in final.components]))
    return HistResult(key, epsilon, e <= threshold, tr.step, e, float(np.max(np.abs(params))), stat, params)


def run_param_hist(cfg: ExperimentConfig, out: Path) -> list[HistResult]:
    o = cfg.options
    eps_list = [float(e) for e in _as_list(o.get("epsilons", [0.01, 0.1, 1.0]))]
    y = _anchors(o.get("y", [0.95]), cfg.problem.d)[0]
    models = o.get("models", ["m", "s", "l"])
    threshold = float(o.get("threshold", 0.01))
    check_every = int(o.get("check_every", 20000))
    max_steps = int(o.get("max_steps", 1_000_000))
    bins = int(o.get("bins", 50))
    results = []
    for e in eps_list:
        for key in models:
            r = train_to_threshold(cfg, key, e, y, cfg.seed, threshold, check_every, max_steps)
            results.append(r)
            counts, edges = np.histogram(r.params, bins=bins)
            _write_csv(
                out / f"hist_{key}_eps{e:g}.csv",
                ["bin_left", "bin_right", "count"],
                zip(edges[:-1].tolist(), edges[1:].tolist(), counts.tolist()),
            )
            np.savetxt(out / f"params_{key}_eps{e:g}.txt", r.params)
    _write_csv(
        out / "param_hist.csv",
        ["model", "epsilon", "converged", "steps", "sup_error", "max_abs_param", "param_stat"],
        [(r.model, r.epsilon, int(r.converged), r.steps, r.error, r.max_abs_param, r.stat) for r in results],
    )
    return results


# manufactured solutions: u and f = -lap u - c u


def _sin_k(k):
    def u(X):
        return np.prod(np.sin(k * np.pi * X), axis=1)

    def neg_lap(X):
        return X.shape[1] * (k * np.pi) ** 2 * u(X)

    return u, neg_lap


def _bubble(X):
    return 1.0 - np.sum(X * X, axis=1)


def _bubble_neg_lap(X):
    return np.full(X.shape[0], 2.0 * X.shape[1])


def _bubble_sin3(X):
    return _bubble(X) * np.prod(np.sin(3 * np.pi * X), axis=1)


def _bubble_sin3_neg_lap(X):
    # -lap(b s) = -s lap b - 2 grad b . grad s - b lap s
    b = _bubble(X)
    s = np.prod(np.sin(3 * np.pi * X), axis=1)
    k = 3 * np.pi
    sx = k * np.cos(k * X[:, 0]) * np.sin(k * X[:, 1])
    sy = k * np.sin(k * X[:, 0]) * np.cos(k * X[:, 1])
    grad_dot = -2 * X[:, 0] * sx - 2 * X[:, 1] * sy
    return 4.0 * s - 2.0 * grad_dot + b * 2 * k**2 * s


MANUFACTURED = {
    "sin_pi": _sin_k(1),
    "sin_3pi": _sin_k(3),
    "bubble": (_bubble, _bubble_neg_lap),
    "bubble_sin_3pi": (_bubble_sin3, _bubble_sin3_neg_lap),
}


def manufactured_rhs(name: str, c: Callable) -> tuple[Callable, Callable]:
    u, neg_lap = MANUFACTURED[name]

    def f(X):
        X = np.atleast_2d(X)
        return neg_lap(X) - c(X) * u(X)

    return u, f


def run_full_solve(cfg: ExperimentConfig, out: Path, workers: int = 1) -> list[tuple]:
    """Partition, train one model per part, assemble the routed kernel, solve."""
    o = cfg.options
    problem = cfg.problem
    dom, eps, s = problem.domain, problem.epsilon, cfg.sampling
    p = int(o.get("parts", 32))
    key = o.get("model", "m")
    coarse = geom.coarse_mesh(dom, s.coarse_elements)
    part = geom.partition(geom.adjacency_graph(coarse), p)
    w = train.LossWeights.default(eps, dom.d)
    tc = base_config(cfg, key, cfg.seed)
    tasks = []
    for pid in range(part.n_parts):
        seed = cfg.seed ^ pid
        batch = geom.sample_batch(dom, coarse, part, pid, (s.n_y, s.n_bdry, s.n_near, s.n_far), eps, cfg.seed)
        tasks.append(
            train.SubdomainTask(
                pid,
                make_model(cfg, key, seed),
                batch,
                problem.operator,
                problem.mollifier,
                dataclasses.replace(tc, seed=seed),
                w,
            )
        )
    trained = train.train_subdomains(tasks, workers)
    kernel = quad.RoutedKernel({pid: m for pid, (m, _) in trained.items()}, coarse, part)
    fine = geom.fine_mesh(dom, s.fine_elements or (512 if dom.d == 1 else 8000))
    qm = quad.quadrature_mesh(fine)
    X = eval_grid(dom, s.eval_points)
    rows = []
    for name in o.get("solutions", ["sin_pi"]):
        u, f = manufactured_rhs(name, problem.operator.c)
        uh = quad.solve_with_green(kernel, f, qm, X)
        ue = u(X)
        sup = float(np.max(np.abs(uh - ue)))
        rel = sup / float(np.max(np.abs(ue)))
        l2 = float(np.sqrt(np.mean((uh - ue) ** 2)))
        rows.append((name, sup, rel, l2))
        quad.write_solution_csv(out / f"solution_{name}.csv", X, uh, ue)
    for pid, (_, rep) in trained.items():
        train.write_training_log(rep, out / f"log_part{pid:03d}.csv")
        msnn.save_model(trained[pid][0], out / f"model_part{pid:03d}.json")
    _write_csv(
        out / "partition.csv",
        ["element", "part"],
        [(i, int(q)) for i, q in enumerate(part.part_of)],
    )
    _write_csv(out / "full_solve.csv", ["solution", "sup_error", "rel_sup_error", "rms_error"], rows)
    return rows


# --------------------------------------------------------------------------
# entry point

COMMANDS = {
    "mollifier-study": "mollifier_study",
    "fixed-y": "fixed_y",
    "param-hist": "param_hist",
    "full-solve": "full_solve",
}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="msgreen", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=list(COMMANDS) + ["validate-config"])
    ap.add_argument("--config", required=True, help="TOML experiment file")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--seed", type=int, help="seed (overrides the config)")
    ap.add_argument("--workers", type=int, default=1, help="parallel subdomain trainers")
    return ap


def run(cfg: ExperimentConfig, out: Path, command: str, workers: int = 1):
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if cfg.kind == "mollifier_study":
        res = run_mollifier_study(cfg, out)
    elif cfg.kind == "fixed_y":
        res = run_fixed_y(cfg, out)
    elif cfg.kind == "param_hist":
        res = run_param_hist(cfg, out)
    else:
        res = run_full_solve(cfg, out, workers)
    write_manifest(out, cfg, command, time.perf_counter() - t0, {"workers": workers})
    return res


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed, raw={**cfg.raw, "seed": args.seed})
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.command == "validate-config":
            print(json.dumps({"status": "ok", "kind": cfg.kind}))
            return 0
        if COMMANDS[args.command] != cfg.kind:
            raise ConfigError(f"command {args.command!r} does not match config kind {cfg.kind!r}")
        out = Path(args.out or cfg.out)
        run(cfg, out, args.command, args.workers)
        print(json.dumps({"status": "ok", "out": str(out)}))
        return 0
    except Exception as exc:
        print(json.dumps({"status": "error", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
