"""Loss assembly, Adam, the staged schedule, grid search and per-part training."""

from __future__ import annotations

import csv
import dataclasses
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalOverflowError, TrainingError
from .geom import SampleBatch
from .msnn import MsNet
from .net import Network, backward, forward_with_tape, param_magnitude_stat
from .pde import Mollifier, OperatorSpec, apply_operator, feature_map, operator_adjoint, x_directions

DECAY_EVERY = 500
DIVERGENCE_FACTOR = 1e6
DIVERGENCE_PATIENCE = 100


@dataclass(frozen=True)
class LossWeights:
    w_res: float = 1.0
    w_bdry: float = 1.0
    w_sym: float = 1.0

    @classmethod
    def default(cls, epsilon: float, d: int) -> "LossWeights":
        w = float(epsilon ** (-d))
        return cls(1.0, w, w)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    decay: float = 1.0
    stage1_steps: int = 0
    stage2_steps: int = 1000
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int | None = None

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps

    def lr(self, step: int) -> float:
        return self.lr0 * self.decay ** (step // DECAY_EVERY)


@dataclass
class LossParts:
    total: float
    bdry: float
    res: float
    sym: float


@dataclass
class TrainReport:
    total: np.ndarray
    bdry: np.ndarray
    res: np.ndarray
    sym: np.ndarray
    lr: np.ndarray
    param_stat_large: np.ndarray
    param_stat_small: np.ndarray
    final: LossParts
    steps: int
    wall_clock: float
    history: list[tuple[int, float]] = field(default_factory=list)

    def final_stats(self) -> tuple[float, float]:
        return float(self.param_stat_large[-1]), float(self.param_stat_small[-1])


# --------------------------------------------------------------------------
# loss


@dataclass
class PreparedBatch:
    """Feature arrays for one SampleBatch, computed once."""

    Zb: np.ndarray
    Zi: np.ndarray
    Zs: np.ndarray
    Xi: np.ndarray
    target: np.ndarray
    d: int

    @classmethod
    def from_batch(cls, batch: SampleBatch, m: Mollifier) -> "PreparedBatch":
        Xi, Yi = batch.interior_x, batch.interior_y
        if Xi.shape[0] == 0:
            raise ValueError("batch has no interior pairs")
        return cls(
            Zb=feature_map(batch.boundary_x, batch.boundary_y),
            Zi=feature_map(Xi, Yi),
            Zs=feature_map(Yi, Xi),
            Xi=Xi,
            target=m(Xi, Yi),
            d=batch.d,
        )

    def subset(self, ib, ii) -> "PreparedBatch":
        return PreparedBatch(self.Zb[ib], self.Zi[ii], self.Zs[ii], self.Xi[ii], self.target[ii], self.d)


def loss_and_grads(nets: Sequence[Network], pb: PreparedBatch, op: OperatorSpec, w: LossWeights, need_grad=True):
    """Three-term loss of the summed networks and its gradient per network."""
    V = x_directions(pb.d)
    pairs = op.pairs
    recs = []
    val = tan = sec = vb = vs = 0.0
    for net in nets:
        ji, ti = forward_with_tape(net, pb.Zi, V, pairs)
        jb, tb = forward_with_tape(net, pb.Zb)
        js, ts = forward_with_tape(net, pb.Zs)
        recs.append((ti, tb, ts))
        val = val + ji.value
        tan = tan + ji.tangents
        sec = sec + ji.seconds
        vb = vb + jb.value
        vs = vs + js.value
    r = apply_operator(op, pb.Xi, val, tan, sec) - pb.target
    q = val - vs
    ni, nb = r.shape[0], np.shape(vb)[0]
    res = float(np.mean(r * r))
    bdry = float(np.mean(vb * vb)) if nb else 0.0
    sym = float(np.mean(q * q))
    total = w.w_bdry * bdry + w.w_res * res + w.w_sym * sym
    parts = LossParts(total, bdry, res, sym)
    if not need_grad:
        return parts, None
    av, at, asec = operator_adjoint(op, pb.Xi, (2.0 * w.w_res / ni) * r)
    av = av + (2.0 * w.w_sym / ni) * q
    adj_s = -(2.0 * w.w_sym / ni) * q
    adj_b = (2.0 * w.w_bdry / max(nb, 1)) * vb
    grads = []
    for net, (ti, tb, ts) in zip(nets, recs):
        g = backward(net, ti, av, at, asec)
        if nb:
            g += backward(net, tb, adj_b)
        g += backward(net, ts, adj_s)
        grads.append(g)
    return parts, grads


def loss(model, batch: SampleBatch, op: OperatorSpec, m: Mollifier, w: LossWeights) -> LossParts:
    """(total, bdry, res, sym) for a Network or MsNet on a batch."""
    pb = PreparedBatch.from_batch(batch, m)
    return loss_and_grads(model.components, pb, op, w, need_grad=False)[0]


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update; returns new (params, state)."""
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    mhat = m / (1.0 - b1**t)
    vhat = v / (1.0 - b2**t)
    return params - lr * mhat / (np.sqrt(vhat) + eps), AdamState(m, v, t)


# --------------------------------------------------------------------------
# training


def _mutable_components(model):
    return list(model.components)


def _rebuild(model, nets):
    if isinstance(model, MsNet):
        return model.replace(large=nets[0], small=nets[1])
    return nets[0]


class Trainer:
    """Stateful Adam loop over the networks of one model.

    ``step`` counts optimiser updates over the whole run and drives the
    learning-rate schedule.
    """

    def __init__(self, model, batch: SampleBatch, op: OperatorSpec, m: Mollifier, cfg: TrainConfig, w: LossWeights):
        self.model = model
        self.nets = [n.copy() for n in _mutable_components(model)]
        self.states = [AdamState.zeros(n.n_params) for n in self.nets]
        self.pb = PreparedBatch.from_batch(batch, m)
        self.op = op
        self.cfg = cfg
        self.w = w
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.log: dict[str, list[float]] = {k: [] for k in ("total", "bdry", "res", "sym", "lr", "stat_l", "stat_s")}
        self.history: list[tuple[int, float]] = []
        self._initial = None
        self._over = 0
        self._t0 = time.perf_counter()

    def _minibatch(self) -> PreparedBatch:
        bs = self.cfg.batch_size
        ni = self.pb.Zi.shape[0]
        if bs is None or bs >= ni:
            return self.pb
        nb_all = self.pb.Zb.shape[0]
        nb = max(1, int(np.ceil(nb_all * bs / ni)))
        ii = np.sort(self.rng.choice(ni, size=bs, replace=False))
        ib = np.sort(self.rng.choice(nb_all, size=min(nb, nb_all), replace=False))
        return self.pb.subset(ib, ii)

    def current_model(self):
        return _rebuild(self.model, self.nets)

    def run(self, n_steps: int, active: Sequence[int] | None = None) -> None:
        active = list(range(len(self.nets))) if active is None else list(active)
        for _ in range(n_steps):
            pb = self._minibatch()
            try:
                parts, grads = loss_and_grads([self.nets[i] for i in active], pb, self.op, self.w)
            except NumericalOverflowError as exc:
                raise TrainingError(f"non-finite network output at step {self.step}", step=self.step) from exc
            if not np.isfinite(parts.total):
                raise TrainingError(f"non-finite loss at step {self.step}", step=self.step)
            if self._initial is None:
                self._initial = parts.total
            self._over = self._over + 1 if parts.total > DIVERGENCE_FACTOR * self._initial else 0
            if self._over >= DIVERGENCE_PATIENCE:
                raise TrainingError(f"training diverged at step {self.step}", step=self.step)
            lr = self.cfg.lr(self.step)
            for i, g in zip(active, grads):
                p, self.states[i] = adam_step(
                    self.nets[i].params, g, self.states[i], lr, self.cfg.adam_betas, self.cfg.adam_eps
                )
                self.nets[i] = self.nets[i].replace(params=p)
            self.log["total"].append(parts.total)
            self.log["bdry"].append(parts.bdry)
            self.log["res"].append(parts.res)
            self.log["sym"].append(parts.sym)
            self.log["lr"].append(lr)
            self.log["stat_l"].append(param_magnitude_stat(self.nets[0]))
            self.log["stat_s"].append(param_magnitude_stat(self.nets[-1]) if len(self.nets) > 1 else 0.0)
            self.step += 1

    def report(self) -> TrainReport:
        final, _ = loss_and_grads(self.nets, self.pb, self.op, self.w, need_grad=False)
        arr = {k: np.asarray(v, dtype=np.float64) for k, v in self.log.items()}
        return TrainReport(
            total=arr["total"],
            bdry=arr["bdry"],
            res=arr["res"],
            sym=arr["sym"],
            lr=arr["lr"],
            param_stat_large=arr["stat_l"],
            param_stat_small=arr["stat_s"],
            final=final,
            steps=self.step,
            wall_clock=time.perf_counter() - self._t0,
            history=list(self.history),
        )


def train_staged(
    model,
    batch: SampleBatch,
    op: OperatorSpec,
    m: Mollifier,
    cfg: TrainConfig,
    w: LossWeights,
    evaluator: Callable | None = None,
    eval_every: int | None = None,
):
    """Train an MsNet (large first, then jointly) or a single Network.

    During stage 1 only the large-scale network enters the loss; the small
    network is untouched.  A plain Network is trained for
    ``stage1_steps + stage2_steps`` steps.  ``evaluator(model) -> float`` is
    recorded in ``report.history`` every ``eval_every`` steps and at the end.
    Returns ``(trained_model, report)``.
    """
    tr = Trainer(model, batch, op, m, cfg, w)
    if isinstance(model, MsNet):
        schedule = [(cfg.stage1_steps, [0]), (cfg.stage2_steps, [0, 1])]
    else:
        schedule = [(cfg.total_steps, [0])]
    for n, active in schedule:
        done = 0
        while done < n:
            chunk = n - done if not (evaluator and eval_every) else min(eval_every - tr.step % eval_every, n - done)
            tr.run(chunk, active)
            done += chunk
            if evaluator and eval_every and tr.step % eval_every == 0:
                tr.history.append((tr.step, float(evaluator(tr.current_model()))))
    if evaluator and (not tr.history or tr.history[-1][0] != tr.step):
        tr.history.append((tr.step, float(evaluator(tr.current_model()))))
    return tr.current_model(), tr.report()


def write_training_log(report: TrainReport, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "lr", "total", "bdry", "res", "sym", "param_stat_large", "param_stat_small"])
        for i in range(report.steps):
            wr.writerow(
                [
                    i,
                    repr(float(report.lr[i])),
                    repr(float(report.total[i])),
                    repr(float(report.bdry[i])),
                    repr(float(report.res[i])),
                    repr(float(report.sym[i])),
                    repr(float(report.param_stat_large[i])),
                    repr(float(report.param_stat_small[i])),
                ]
            )


# --------------------------------------------------------------------------
# grid search and subdomains


@dataclass
class GridResult:
    config: TrainConfig
    model: object
    report: TrainReport
    error: float


def config_grid(base: TrainConfig, lr0s: Sequence[float], decays: Sequence[float]) -> list[TrainConfig]:
    return [dataclasses.replace(base, lr0=float(a), decay=float(b)) for a in lr0s for b in decays]


def grid_search(
    make_model: Callable[[], object],
    batch: SampleBatch,
    op: OperatorSpec,
    m: Mollifier,
    configs: Sequence[TrainConfig],
    w: LossWeights,
    test_error: Callable,
    eval_every: int | None = None,
) -> tuple[GridResult, list[GridResult]]:
    """Train every config from a fresh model; best = smallest final test error.

    Ties go to the smaller ``lr0``, then to the earlier config.  A run that
    aborts counts as infinite error.
    """
    if not configs:
        raise ValueError("empty grid")
    results = []
    for cfg in configs:
        try:
            model, rep = train_staged(make_model(), batch, op, m, cfg, w, test_error, eval_every)
            err = rep.history[-1][1]
        except TrainingError:
            model, rep, err = None, None, float("inf")
        if not np.isfinite(err):
            err = float("inf")
        results.append(GridResult(cfg, model, rep, err))
    order = sorted(range(len(results)), key=lambda i: (results[i].error, results[i].config.lr0, i))
    return results[order[0]], results


@dataclass
class SubdomainTask:
    part_id: int
    model: object
    batch: SampleBatch
    op: OperatorSpec
    m: Mollifier
    cfg: TrainConfig
    w: LossWeights


def _run_task(task: SubdomainTask):
    try:
        model, rep = train_staged(task.model, task.batch, task.op, task.m, task.cfg, task.w)
        return task.part_id, model, rep, None
    except Exception as exc:  # collected and re-raised by train_subdomains
        return task.part_id, None, None, f"{type(exc).__name__}: {exc}"


def train_subdomains(tasks: Sequence[SubdomainTask], workers: int = 1) -> dict:
    """Train each part independently; returns ``{part_id: (model, report)}``.

    Every task carries its own seeded config, so results do not depend on the
    number of workers or the order of execution.
    """
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_run_task, tasks))
    else:
        out = [_run_task(t) for t in tasks]
    failures = {pid: err for pid, _, _, err in out if err is not None}
    if failures:
        raise TrainingError(f"{len(failures)} subdomain(s) failed: {failures}")
    return {pid: (model, rep) for pid, model, rep, _ in sorted(out, key=lambda r: r[0])}
