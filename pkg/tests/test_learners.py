import numpy as np
import pytest

from mntdp.graph import ModuleLibrary, Path, forward_path
from mntdp.learners import (
    LEARNERS,
    ReplayBuffer,
    fisher_diagonal,
    make_learner,
    search_paths,
)
from mntdp.numeric import softmax_cross_entropy
from mntdp.graph import backward_path
from mntdp.streams import build_stream
from mntdp.training import (
    FitResult,
    HyperGrid,
    TrainBudget,
    fit_with_early_stopping,
    grid_search_task,
    rng_for,
)

FAST = dict(grid=HyperGrid([1e-2], [0.0], [1e-2]), budget=TrainBudget(max_iterations=60, patience=30),
            hidden_dim=16)


@pytest.fixture(scope="module")
def s_minus():
    return build_stream("S-", "desk", 0)


def run(name, stream, datasets, **kw):
    learner = make_learner(name, stream.input_dim, seed=0, **{**FAST, **kw})
    jl = [learner.learn_task(s, d).test_accuracy for s, d in zip(stream.tasks, datasets)]
    fin = [learner.evaluate(s.task_id, *d.test) for s, d in zip(stream.tasks, datasets)]
    return learner, jl, fin


@pytest.mark.parametrize("name", ["mntdp_d", "mntdp_s", "independent", "new_head", "new_leg"])
def test_modular_learners_never_forget(name, s_minus):
    learner, jl, fin = run(name, *s_minus)
    assert jl == fin
    assert learner.library.verify_frozen()


def test_mntdp_d_outcome_info(s_minus):
    learner, _, _ = run("mntdp_d", *s_minus)
    out = learner.outcomes[5]
    assert out.info["n_candidates"] == 4
    assert len(out.info["candidate_val"]) == 4
    assert out.chosen_path == learner.path_for(5)
    assert 0 <= out.info["reused_prefix"] < 4
    # only the chosen candidate's fresh modules survive
    assert out.modules_added == 4 - out.info["reused_prefix"]


def test_mntdp_d_first_candidate_equals_independent(s_minus):
    stream, data = s_minus
    d = make_learner("mntdp_d", 64, seed=3, **FAST)
    ind = make_learner("independent", 64, seed=3, **FAST)
    a = d.learn_task(stream.tasks[0], data[0])
    b = ind.learn_task(stream.tasks[0], data[0])
    assert a.test_accuracy == b.test_accuracy
    assert [d.library[m].checksum() for m in a.chosen_path] == [ind.library[m].checksum() for m in b.chosen_path]


def test_finetune_shares_everything(s_minus):
    learner, jl, fin = run("finetune", *s_minus)
    paths = set(learner.library.task_paths.values())
    assert len(paths) == 1
    assert learner.library.n_modules() == 4


def test_new_head_and_new_leg_structure(s_minus):
    nh, _, _ = run("new_head", *s_minus)
    trunk = nh.path_for(0)[:-1]
    assert all(tuple(nh.path_for(t)[:-1]) == tuple(trunk) for t in range(6))
    nl, _, _ = run("new_leg", *s_minus)
    rest = nl.path_for(0)[1:]
    assert all(tuple(nl.path_for(t)[1:]) == tuple(rest) for t in range(6))
    assert len({nl.path_for(t)[0] for t in range(6)}) == 6


def test_ewc_and_er_auxiliary_memory(s_minus):
    ewc, _, _ = run("ewc_online", *s_minus, ewc_lambda=10.0)
    n = ewc.library.n_params()
    assert ewc.auxiliary_floats() == 2 * n
    er, _, _ = run("er", *s_minus)
    assert er.auxiliary_floats() == sum(x.size for x, _ in er.buffer.store.values())
    assert len(er.buffer.store) == 6


def test_fisher_matches_per_example_loop():
    rng = np.random.default_rng(0)
    lib = ModuleLibrary(5, 4, 3)
    path = Path([lib.spawn_new_module(i, [1, i], 3 if i == 2 else None) for i in range(3)])
    lib[path[0]].freeze(0)
    x, y = rng.normal(size=(9, 5)), rng.integers(0, 3, size=9)
    fast = fisher_diagonal(lib, path, x, y)
    slow = {}
    for i in range(9):
        cache, logits = forward_path(lib, path, x[i:i + 1], train=True)
        g = backward_path(lib, cache, softmax_cross_entropy(logits, y[i:i + 1]).grad)
        for mid, (gw, gb) in g.items():
            sw, sb = slow.get(mid, (0.0, 0.0))
            slow[mid] = (sw + gw**2 / 9, sb + gb**2 / 9)
    assert set(fast) == set(slow) == {path[1], path[2]}
    for mid in fast:
        assert np.allclose(fast[mid][0], slow[mid][0], rtol=1e-12, atol=1e-15)
        assert np.allclose(fast[mid][1], slow[mid][1], rtol=1e-12, atol=1e-15)


def test_replay_buffer_per_class():
    buf = ReplayBuffer(per_class=3)
    y = np.repeat(np.arange(4), [5, 2, 7, 3])
    x = np.arange(len(y), dtype=float)[:, None]
    buf.add_task(0, x, y, np.random.default_rng(0))
    assert [buf.count(0, c) for c in range(4)] == [3, 2, 3, 3]
    assert len(buf) == 11


def test_grid_tie_break_prefers_lower_lr_then_wd():
    def cell(lr, wd):
        return FitResult(0.5, 0, 0, [], {}, {"lr": lr, "weight_decay": wd})

    best, _, results = grid_search_task(cell, HyperGrid())
    assert best == (1e-3, 0.0)
    assert len(results) == 6


def test_early_stopping_restores_best(s_minus):
    stream, data = s_minus
    lib = ModuleLibrary(64, 16, 2)
    path = Path([lib.spawn_new_module(0, 1), lib.spawn_new_module(1, 2, 5)])
    budget = TrainBudget(max_iterations=200, patience=50)
    res = fit_with_early_stopping(lib, path, data[1].train, data[1].val, 1e-2, 0.0, budget, rng_for(0))
    assert lib.accuracy(path, *data[1].val) == res.val_accuracy
    assert res.iterations <= 200
    with pytest.raises(ValueError):
        fit_with_early_stopping(lib, path, (data[1].train.x[:0], data[1].train.y[:0]), data[1].val,
                                1e-2, 0.0, budget, rng_for(0))


def test_search_paths_prefers_the_matching_trunk():
    stream, data = build_stream("S-", "desk", 1)
    good = make_learner("independent", 64, seed=1, hidden_dim=16, n_layers=2,
                        budget=TrainBudget(max_iterations=400, patience=100))
    good.learn_task(stream.tasks[0], data[0])
    good.learn_task(stream.tasks[1], data[1])
    lib = good.library
    head = lib.spawn_new_module(1, 5, 5)
    cands = [Path([lib.task_paths[1][0], head]), Path([lib.task_paths[0][0], head])]
    tx, ty = data[5].train
    out = search_paths(lib, cands, (tx[:20], ty[:20]), (tx[20:], ty[20:]), tuple(data[5].val),
                       1e-2, 0.0, 1e-2, 1.0, TrainBudget(), rng_for(1))
    assert out["choice"] == 1
    assert out["max_prob"][-1] > 0.99
    assert out["iterations"] < TrainBudget().max_iterations


def test_unknown_learner():
    with pytest.raises(ValueError):
        make_learner("pnn", 4)
    assert set(LEARNERS) == {"independent", "finetune", "new_head", "new_leg", "ewc_online", "er",
                             "mntdp_d", "mntdp_s"}
