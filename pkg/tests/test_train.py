import dataclasses

import numpy as np
import pytest

from msgreen import geom, train
from msgreen.errors import TrainingError
from msgreen.geom import SampleBatch
from msgreen.msnn import build_msnet, build_single
from msgreen.net import zero_network
from msgreen.pde import Mollifier, reaction_form

op1 = reaction_form("zero", 1)


def _batch(eps=0.05, y=0.5, seed=0, counts=(2, 30, 30)):
    return geom.make_batch(geom.interval(), [[y]], counts, eps, np.random.default_rng(seed))


def _pair_batch(x, y, bx=(0.0, 1.0)):
    x = np.asarray(x, float)[:, None]
    y = np.asarray(y, float)[:, None]
    bxa = np.asarray(bx, float)[:, None]
    return SampleBatch(
        y_anchors=y[:1],
        boundary_x=bxa,
        boundary_y=np.full_like(bxa, y[0, 0]),
        near_x=x,
        near_y=y,
        far_x=np.zeros((0, 1)),
        far_y=np.zeros((0, 1)),
    )


def test_residual_loss_of_zero_model_at_peak():
    m = Mollifier(0.01)
    net = zero_network(3, [4])
    parts = train.loss(net, _pair_batch([0.3], [0.3]), op1, m, train.LossWeights())
    assert parts.res == pytest.approx(3183.1, abs=0.1)
    assert parts.bdry == 0.0 and parts.sym == 0.0
    assert parts.total == pytest.approx(parts.res)


def test_default_weights():
    w = train.LossWeights.default(0.01, 2)
    assert (w.w_res, w.w_bdry, w.w_sym) == (1.0, pytest.approx(1e4), pytest.approx(1e4))


def test_loss_decomposition_is_exact():
    m = Mollifier(0.05)
    ms = build_msnet(1, [6], [5], 0.05, seed=2)
    w = train.LossWeights(1.0, 3.0, 7.0)
    p = train.loss(ms, _batch(), op1, m, w)
    assert p.total == w.w_bdry * p.bdry + w.w_res * p.res + w.w_sym * p.sym
    assert min(p.bdry, p.res, p.sym) >= 0


def test_loss_of_symmetric_kernel_has_no_symmetry_term():
    from msgreen.net import Network, build_layers

    # weights on x + y only, so phi(x, y) = phi(y, x)
    net = Network(build_layers(3, [2]), np.array([0.4, -0.3, 0.4, -0.3, 0.0, 0.0, 0.9, 0.1, 1.0, -0.5, 0.2]))
    assert train.loss(net, _batch(), op1, Mollifier(0.05), train.LossWeights()).sym < 1e-28


def test_gradients_match_finite_differences():
    m = Mollifier(0.1)
    op = reaction_form("one_plus_x2", 1)
    ms = build_msnet(1, [5], [4], 0.1, seed=3)
    pb = train.PreparedBatch.from_batch(_batch(eps=0.1, counts=(2, 8, 8)), m)
    w = train.LossWeights.default(0.1, 1)
    _, grads = train.loss_and_grads(ms.components, pb, op, w)
    h = 1e-6
    for k, net in enumerate(ms.components):
        fd = np.zeros(net.n_params)
        for j in range(net.n_params):
            e = np.zeros(net.n_params)
            e[j] = h
            nets = list(ms.components)
            nets[k] = net.replace(params=net.params + e)
            a = train.loss_and_grads(nets, pb, op, w, need_grad=False)[0].total
            nets[k] = net.replace(params=net.params - e)
            b = train.loss_and_grads(nets, pb, op, w, need_grad=False)[0].total
            fd[j] = (a - b) / (2 * h)
        assert np.linalg.norm(grads[k] - fd) / np.linalg.norm(fd) < 1e-5


def test_empty_interior_rejected():
    b = dataclasses.replace(_pair_batch([0.2], [0.4]), near_x=np.zeros((0, 1)), near_y=np.zeros((0, 1)))
    with pytest.raises(ValueError):
        train.loss(zero_network(3, [2]), b, op1, Mollifier(0.1), train.LossWeights())


def test_adam_first_step_by_hand():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.5, -0.25, 0.0])
    new, st = train.adam_step(p, g, train.AdamState.zeros(3), 0.1)
    # after bias correction the first step is lr * g / (|g| + eps)
    expect = p - 0.1 * g / (np.abs(g) + 1e-8)
    assert np.allclose(new, expect, atol=1e-15)
    assert st.t == 1
    assert np.allclose(st.m, 0.1 * g, atol=1e-16) and np.allclose(st.v, 0.001 * g * g)
    again, st2 = train.adam_step(new, np.zeros(3), st, 0.1)
    assert st2.t == 2
    assert again[2] == new[2]


def test_adam_zero_gradient_leaves_params():
    p = np.arange(4.0)
    new, _ = train.adam_step(p, np.zeros(4), train.AdamState.zeros(4), 1e-3)
    assert np.array_equal(new, p)


def test_learning_rate_schedule():
    cfg = train.TrainConfig(lr0=1e-2, decay=0.9)
    assert cfg.lr(0) == 1e-2 and cfg.lr(499) == 1e-2
    assert cfg.lr(500) == pytest.approx(9e-3, rel=1e-15)
    assert cfg.lr(1499) == pytest.approx(1e-2 * 0.81, rel=1e-15)
    assert train.TrainConfig(lr0=3e-3).lr(10**6) == 3e-3


def test_staged_schedule_freezes_small_network():
    m = Mollifier(0.05)
    ms = build_msnet(1, [6], [6], 0.05, seed=0)
    cfg = train.TrainConfig(lr0=1e-3, stage1_steps=20, stage2_steps=0)
    out, rep = train.train_staged(ms, _batch(), op1, m, cfg, train.LossWeights.default(0.05, 1))
    assert np.array_equal(out.small.params, ms.small.params)
    assert not np.array_equal(out.large.params, ms.large.params)
    assert rep.steps == 20
    cfg2 = dataclasses.replace(cfg, stage2_steps=5)
    out2, rep2 = train.train_staged(ms, _batch(), op1, m, cfg2, train.LossWeights.default(0.05, 1))
    assert not np.array_equal(out2.small.params, ms.small.params)
    assert rep2.steps == 25 and len(rep2.total) == 25
    # stage 1 loss ignores the small network
    assert rep2.total[0] == pytest.approx(train.loss(ms.replace(small=zero_network(3, [6])), _batch(), op1, m,
                                                     train.LossWeights.default(0.05, 1)).total, rel=1e-13)


def test_single_network_trains_all_steps():
    net = build_single(1, [8], seed=1)
    cfg = train.TrainConfig(stage1_steps=7, stage2_steps=3)
    out, rep = train.train_staged(net, _batch(), op1, Mollifier(0.05), cfg, train.LossWeights())
    assert rep.steps == 10
    assert np.all(rep.param_stat_small == 0.0)


def test_training_reduces_loss_and_is_deterministic():
    m = Mollifier(0.1)
    ms = build_msnet(1, [10], [10], 0.1, seed=5)
    cfg = train.TrainConfig(lr0=3e-3, stage1_steps=100, stage2_steps=100)
    w = train.LossWeights.default(0.1, 1)
    a_model, a = train.train_staged(ms, _batch(eps=0.1), op1, m, cfg, w)
    b_model, b = train.train_staged(ms, _batch(eps=0.1), op1, m, cfg, w)
    assert a.final.total < 0.5 * a.total[0]
    assert np.array_equal(a.total, b.total)
    assert np.array_equal(a_model.large.params, b_model.large.params)


def test_minibatch_determinism_and_size():
    m = Mollifier(0.1)
    net = build_single(1, [6], seed=0)
    cfg = train.TrainConfig(stage2_steps=30, batch_size=10, seed=3)
    w = train.LossWeights()
    tr = train.Trainer(net, _batch(eps=0.1), op1, m, cfg, w)
    pb = tr._minibatch()
    assert pb.Zi.shape[0] == 10 and pb.Zb.shape[0] >= 1
    _, a = train.train_staged(net, _batch(eps=0.1), op1, m, cfg, w)
    _, b = train.train_staged(net, _batch(eps=0.1), op1, m, cfg, w)
    assert np.array_equal(a.total, b.total)
    _, c = train.train_staged(net, _batch(eps=0.1), op1, m, dataclasses.replace(cfg, seed=4), w)
    assert not np.array_equal(a.total, c.total)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises_with_step():
    net = build_single(1, [4], seed=0)
    net = net.replace(params=np.full(net.n_params, np.nan))
    with pytest.raises(TrainingError) as info:
        train.train_staged(net, _batch(), op1, Mollifier(0.05), train.TrainConfig(stage2_steps=3), train.LossWeights())
    assert info.value.step == 0


def test_evaluator_history():
    net = build_single(1, [4], seed=0)
    calls = []

    def ev(model):
        calls.append(1)
        return 0.5

    cfg = train.TrainConfig(stage2_steps=25)
    _, rep = train.train_staged(net, _batch(), op1, Mollifier(0.05), cfg, train.LossWeights(), ev, 10)
    assert [s for s, _ in rep.history] == [10, 20, 25]


def test_training_log_csv(tmp_path):
    net = build_single(1, [4], seed=0)
    _, rep = train.train_staged(net, _batch(), op1, Mollifier(0.05), train.TrainConfig(stage2_steps=4),
                                train.LossWeights())
    train.write_training_log(rep, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,lr,total,bdry,res,sym,param_stat_large,param_stat_small"
    assert len(lines) == 5
    assert float(lines[1].split(",")[2]) == rep.total[0]


def test_grid_search_selection_and_ties():
    m = Mollifier(0.05)
    base = train.TrainConfig(stage2_steps=5)
    grid = train.config_grid(base, [3e-3, 1e-3], [1.0, 0.95])
    assert len(grid) == 4 and grid[0].lr0 == 3e-3 and grid[1].decay == 0.95
    best, results = train.grid_search(lambda: build_single(1, [4], seed=0), _batch(), op1, m, grid,
                                      train.LossWeights(), lambda model: 1.0)
    # all errors tie: smallest lr0, then earliest config
    assert best.config.lr0 == 1e-3 and best.config.decay == 1.0
    assert len(results) == 4
    errs = iter([0.3, 0.1, 0.2, 0.1])
    calls = {}

    def err(model):
        key = id(model)
        if key not in calls:
            calls[key] = next(errs)
        return calls[key]

    best, _ = train.grid_search(lambda: build_single(1, [4], seed=0), _batch(), op1, m, grid,
                                train.LossWeights(), err)
    assert best.error == 0.1 and best.config.lr0 == 1e-3
    with pytest.raises(ValueError):
        train.grid_search(lambda: None, _batch(), op1, m, [], train.LossWeights(), err)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grid_search_counts_failures_as_infinite():
    m = Mollifier(0.05)

    def make():
        net = build_single(1, [4], seed=0)
        return net.replace(params=np.full(net.n_params, np.inf))

    best, results = train.grid_search(make, _batch(), op1, m, [train.TrainConfig(stage2_steps=2)],
                                      train.LossWeights(), lambda model: 0.0)
    assert best.error == float("inf") and best.model is None


def _tasks(order):
    dom = geom.interval()
    mesh = geom.coarse_mesh(dom, 8)
    part = geom.partition(geom.adjacency_graph(mesh), 4)
    m = Mollifier(0.1)
    tasks = []
    for pid in order:
        b = geom.sample_batch(dom, mesh, part, pid, (1, 2, 10, 10), 0.1, 17)
        cfg = train.TrainConfig(stage1_steps=5, stage2_steps=5, seed=17 ^ pid)
        tasks.append(train.SubdomainTask(pid, build_msnet(1, [4], [4], 0.1, seed=pid), b, op1, m, cfg,
                                         train.LossWeights.default(0.1, 1)))
    return tasks


def test_subdomain_training_is_order_invariant():
    a = train.train_subdomains(_tasks([0, 1, 2, 3]))
    b = train.train_subdomains(_tasks([3, 1, 0, 2]))
    assert list(a) == [0, 1, 2, 3] == list(b)
    for pid in a:
        assert np.array_equal(a[pid][0].large.params, b[pid][0].large.params)
    t = _tasks([2])[0]
    single, _ = train.train_staged(t.model, t.batch, t.op, t.m, t.cfg, t.w)
    assert np.array_equal(single.small.params, a[2][0].small.params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_subdomain_failures_are_reported():
    tasks = _tasks([0, 1])
    bad = tasks[1].model.large
    tasks[1] = dataclasses.replace(tasks[1], model=tasks[1].model.replace(
        large=bad.replace(params=np.full(bad.n_params, np.nan))))
    with pytest.raises(TrainingError, match="1 subdomain"):
        train.train_subdomains(tasks)
