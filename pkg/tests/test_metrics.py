import numpy as np
import pytest

from mntdp.graph import ModuleLibrary, Path
from mntdp.metrics import (
    AccuracyMatrix,
    FlopCounter,
    account_flops,
    account_memory,
    avg_accuracy,
    forgetting,
    lca,
    transfer,
)


def brute_metrics(jl, fin):
    T = len(fin)
    a = 0.0
    for t in range(T):
        a += fin[t]
    a /= T
    f = 0.0
    for t in range(T - 1):
        f += fin[t] - jl[t]
    f /= T - 1
    return a, f


def brute_lca(curves, beta):
    tot = 0.0
    for c in curves:
        s = 0.0
        for b in range(beta + 1):
            s += c[b]
        tot += s / (beta + 1)
    return tot / len(curves)


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        T = int(rng.integers(2, 12))
        jl, fin = rng.random(T), rng.random(T)
        m = AccuracyMatrix(jl, fin)
        a, f = brute_metrics(list(jl), list(fin))
        assert abs(avg_accuracy(m) - a) < 1e-12
        assert abs(forgetting(m) - f) < 1e-12
        s, i = rng.random(2)
        assert abs(transfer(s, i) - (s - i)) < 1e-12
        curves = [list(rng.random(int(rng.integers(6, 10)))) for _ in range(T)]
        assert abs(lca(curves, 5) - brute_lca(curves, 5)) < 1e-12


def test_forgetting_zero_when_unchanged():
    m = AccuracyMatrix([0.3, 0.7, 0.9], [0.3, 0.7, 0.1])
    assert forgetting(m) == 0.0


def test_edge_cases():
    with pytest.raises(ValueError):
        avg_accuracy(AccuracyMatrix([], []))
    with pytest.raises(ValueError):
        forgetting(AccuracyMatrix([0.5], [0.5]))
    with pytest.raises(ValueError):
        AccuracyMatrix([1.5], [0.2])
    with pytest.raises(ValueError):
        lca([0.1, 0.2], beta=5)
    assert lca([0.5] * 6) == 0.5


def test_flop_convention():
    dims = [(10, 8), (8, 3)]
    assert account_flops(dims, 4, "forward") == 2 * 4 * (80 + 24)
    assert account_flops(dims, 4, "backward") == 4 * 4 * (80 + 24)
    assert account_flops(dims, 4, "update") == 10 * (80 + 8 + 24 + 3)
    assert account_flops(dims, 0, "update") == 0
    with pytest.raises(ValueError):
        account_flops(dims, 4, "sideways")


def test_train_step_counts_only_trainable_backward():
    lib = ModuleLibrary(10, 8, 2)
    p = Path([lib.spawn_new_module(0, 0), lib.spawn_new_module(1, 1, 3)])
    lib[p[0]].freeze(0)
    fc = FlopCounter()
    fc.train_step(lib, p, 4)
    assert fc.total == 2 * 4 * (80 + 24) + 4 * 4 * 24 + 10 * (24 + 3)


class _Dummy:
    def __init__(self, lib):
        self.library = lib
        self.flops = FlopCounter()

    def auxiliary_floats(self):
        return 7


def test_memory_ledger():
    lib = ModuleLibrary(10, 8, 2)
    lib.spawn_new_module(0, 0)
    led = account_memory(_Dummy(lib))
    assert led.parameter_bytes == 8 * 88
    assert led.auxiliary_bytes == 56
    assert led.total_bytes == 8 * 88 + 56
