"""Minibatch training with early stopping and per-task grid search."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .graph import ModuleLibrary, backward_path, forward_path
from .metrics import FlopCounter
from .numeric import AdamState, adam_step, softmax_cross_entropy

# rng stream tags, appended to [seed, task, candidate]
TAG_BATCHES = 101
TAG_HALVES = 102
TAG_PRIOR = 103
TAG_REPLAY = 104
TAG_BUFFER = 105
TAG_PATHS = 106


@dataclass
class TrainBudget:
    batch_size: int = 32
    patience: int = 300
    max_iterations: int = 5000
    eval_every: int = 10
    lca_beta: int = 5
    curve_every: int = 100

    def __post_init__(self):
        if self.patience <= 0:
            raise ValueError("patience must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_every < 1 or self.max_iterations < 0:
            raise ValueError("eval_every must be >= 1 and max_iterations >= 0")


@dataclass
class HyperGrid:
    learning_rates: tuple = (1e-2, 1e-3)
    weight_decays: tuple = (0.0, 1e-5, 1e-4)
    gamma_learning_rates: tuple = (1e-2, 1e-3)
    entropy_weight: float = 1.0

    def __post_init__(self):
        self.learning_rates = tuple(float(v) for v in self.learning_rates)
        self.weight_decays = tuple(float(v) for v in self.weight_decays)
        self.gamma_learning_rates = tuple(float(v) for v in self.gamma_learning_rates)
        if not (self.learning_rates and self.weight_decays and self.gamma_learning_rates):
            raise ValueError("hyper-parameter grids must be non-empty")

    def cells(self) -> list:
        """(lr, wd) pairs, in tie-breaking order: lower lr first, then lower wd."""
        return list(itertools.product(sorted(self.learning_rates), sorted(self.weight_decays)))

    def gamma_cells(self) -> list:
        return list(itertools.product(sorted(self.learning_rates), sorted(self.weight_decays),
                                      sorted(self.gamma_learning_rates)))


@dataclass
class FitResult:
    val_accuracy: float
    best_iteration: int
    iterations: int
    learning_curve: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def rng_for(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    """Endless minibatches, reshuffled every epoch."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def trainable_ids(library: ModuleLibrary, paths) -> list:
    seen = []
    for path in paths:
        for mid in path:
            if not library[mid].frozen and mid not in seen:
                seen.append(mid)
    return seen


def snapshot(library: ModuleLibrary, ids) -> dict:
    return {mid: library[mid].get_params() for mid in ids}


def restore(library: ModuleLibrary, snap: dict):
    for mid, (w, b) in snap.items():
        library[mid].set_params(w, b)


def evaluate(library, path, x, y, flops: FlopCounter | None = None) -> float:
    if flops is not None:
        flops.forward(library, path, len(y))
    return library.accuracy(path, x, y)


def loss_and_grads(library: ModuleLibrary, groups, flops: FlopCounter | None = None):
    """Mean cross-entropy over all rows of ``groups`` (``(path, x, y)`` triples)
    and gradients for the trainable modules involved."""
    total = sum(len(y) for _, _, y in groups)
    loss = 0.0
    grads: dict = {}
    for path, x, y in groups:
        cache, logits = forward_path(library, path, x, train=True)
        lv = softmax_cross_entropy(logits, y)
        w = len(y) / total
        loss += w * lv.value
        for mid, (gw, gb) in backward_path(library, cache, lv.grad * w).items():
            if mid in grads:
                pw, pb = grads[mid]
                grads[mid] = (pw + gw, pb + gb)
            else:
                grads[mid] = (gw, gb)
        if flops is not None:
            flops.train_step(library, path, len(y), trained_params=0)
    return loss, grads


class FlatParams:
    """Trainable module parameters gathered into one contiguous vector.

    The modules' weight and bias arrays are rebound to views of the buffer,
    so one Adam update covers the whole trainable set.
    """

    def __init__(self, library: ModuleLibrary, ids):
        self.library = library
        self.ids = list(ids)
        self.layout = {}
        off = 0
        for mid in self.ids:
            w = library[mid].weight
            self.layout[mid] = (off, w.shape, off + w.size, w.shape[1])
            off += w.size + w.shape[1]
        self.data = np.empty(off)
        for mid in self.ids:
            mod = library[mid]
            s, shape, e, nb = self.layout[mid]
            self.data[s:e] = mod.weight.ravel()
            self.data[e:e + nb] = mod.bias
            mod._weight = self.data[s:e].reshape(shape)
            mod._bias = self.data[e:e + nb]

    def gradient(self, grads: dict) -> np.ndarray:
        g = np.zeros_like(self.data)
        for mid, (gw, gb) in grads.items():
            if mid in self.layout:
                s, _, e, nb = self.layout[mid]
                g[s:e] = gw.ravel()
                g[e:e + nb] = gb
        return g

    def as_dict(self, vec=None) -> dict:
        vec = self.data if vec is None else vec
        return {mid: (vec[s:e].reshape(shape).copy(), vec[e:e + nb].copy())
                for mid, (s, shape, e, nb) in self.layout.items()}


def fit_with_early_stopping(
    library: ModuleLibrary,
    path,
    train,
    val,
    lr: float,
    weight_decay: float,
    budget: TrainBudget,
    rng: np.random.Generator,
    test=None,
    penalty=None,
    replay=None,
    flops: FlopCounter | None = None,
) -> FitResult:
    """Adam on the path's trainable modules with validation early stopping.

    Validation accuracy is checked every ``budget.eval_every`` steps (and
    before the first step); when it has not strictly improved for
    ``budget.patience`` steps the trainable parameters are restored to the
    best checkpoint; among checkpoints tied at the best accuracy the latest
    is kept.  ``penalty(library) -> {mid: (gw, gb)}`` adds extra
    gradients; ``replay(rng, n) -> [(path, x, y), ...]`` adds rehearsal rows
    to every minibatch.  When ``test`` is given, test accuracy is recorded
    after 0..``lca_beta`` steps and then every ``curve_every`` steps.
    """
    tx, ty = train
    vx, vy = val
    if len(ty) == 0:
        raise ValueError("empty training set")
    extra_paths = list(replay.paths()) if replay is not None else []
    ids = trainable_ids(library, [path] + extra_paths)
    curve = []

    def record(step):
        if test is not None:
            curve.append((step, library.accuracy(path, *test)))

    best_acc = evaluate(library, path, vx, vy, flops)
    best_it = last_tie = 0
    best = snapshot(library, ids)
    record(0)
    if not ids:
        return FitResult(best_acc, 0, 0, curve, best, {"lr": lr, "weight_decay": weight_decay})

    flat = FlatParams(library, ids)
    state = AdamState.for_params([flat.data])
    best_vec = flat.data.copy()
    batches = batch_indices(len(ty), budget.batch_size, rng)
    n_params = flat.data.size
    it = 0
    while it < budget.max_iterations:
        idx = next(batches)
        groups = [(path, tx[idx], ty[idx])]
        if replay is not None:
            groups += replay(rng, len(idx))
        _, grads = loss_and_grads(library, groups, flops)
        g = flat.gradient(grads)
        if penalty is not None:
            g += flat.gradient(penalty(library))
        adam_step([flat.data], [g], state, lr, weight_decay)
        if flops is not None:
            flops.add(10 * n_params)
        it += 1
        if it <= budget.lca_beta or it % budget.curve_every == 0:
            record(it)
        if it % budget.eval_every == 0:
            acc = evaluate(library, path, vx, vy, flops)
            if acc > best_acc:
                best_acc, best_it = acc, it
                best_vec[:] = flat.data
            elif acc == best_acc:
                best_vec[:] = flat.data
                last_tie = it
            if it - best_it >= budget.patience:
                break
    flat.data[:] = best_vec
    best = flat.as_dict()
    return FitResult(best_acc, last_tie if last_tie > best_it else best_it, it, curve, best,
                     {"lr": lr, "weight_decay": weight_decay})


def grid_search_task(train_cell, grid, dataset=None):
    """Run ``train_cell(*cell)`` for every grid cell and keep the best by
    validation accuracy; ties keep the earlier cell (lower lr, then lower wd).

    ``grid`` is a :class:`HyperGrid` or an explicit list of cells.  Returns
    ``(best_cell, best_result, all_results)``.
    """
    cells = grid.cells() if isinstance(grid, HyperGrid) else list(grid)
    results = []
    best_cell, best_res = None, None
    for cell in cells:
        res = train_cell(*cell) if dataset is None else train_cell(*cell, dataset)
        results.append((cell, res))
        if best_res is None or res.val_accuracy > best_res.val_accuracy:
            best_cell, best_res = cell, res
    return best_cell, best_res, results


def fit_grid(library, path, data, grid, budget, rng_key, flops=None, penalty=None, replay=None,
             cells=None):
    """Grid search where every cell starts from the same trainable state.

    All cells share the minibatch order drawn from ``rng_key``.  On return
    the library holds the parameters of the winning cell.
    """
    extra = list(replay.paths()) if replay is not None else []
    ids = trainable_ids(library, [path] + extra)
    init = snapshot(library, ids)

    def cell(lr, wd):
        restore(library, init)
        if replay is not None and hasattr(replay, "reset"):
            replay.reset()
        return fit_with_early_stopping(
            library, path, data.train, data.val, lr, wd, budget, rng_for(*rng_key, TAG_BATCHES),
            test=data.test, penalty=penalty, replay=replay, flops=flops,
        )

    best_cell, best, results = grid_search_task(cell, cells if cells is not None else grid)
    restore(library, best.params)
    return best_cell, best, results
