"""Continual learners: MNTDP-D, MNTDP-S and the classical baselines.

Every learner owns a :class:`ModuleLibrary` and learns tasks one at a time
through :meth:`Learner.learn_task`.  Random streams are keyed on
``[seed, task_id, candidate, ...]`` so a task trained in isolation sees
exactly the same initialisation and minibatches as inside a stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import ModuleId, ModuleLibrary, Path, forward_path
from .metrics import FlopCounter
from .numeric import AdamState, adam_step, log_softmax, relu_backward, softmax_cross_entropy
from .prior import candidate_paths, closest_task, random_prior
from .training import (
    TAG_BUFFER,
    TAG_HALVES,
    TAG_PRIOR,
    TAG_REPLAY,
    HyperGrid,
    TrainBudget,
    batch_indices,
    evaluate,
    fit_grid,
    fit_with_early_stopping,
    loss_and_grads,
    restore,
    rng_for,
    snapshot,
)

EWC_LAMBDAS = (1, 5, 10, 50, 100, 500, 1e3, 5e3, 1e4)
REPLAY_PER_CLASS = 15
GAMMA_THRESHOLD = 0.99
BASELINE_DECAY = 0.9


@dataclass
class TaskOutcome:
    task_id: int
    chosen_path: Path
    val_accuracy: float
    test_accuracy: float
    learning_curve: list
    params_added: int
    modules_added: int
    flops_used: int
    hyper: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def curve_values(self) -> list:
        return [a for _, a in self.learning_curve]


def _source_for(library, task_id, data, prior, seed, flops, k=1):
    """Source path (and, for k='all', all ranked sources) for the new task."""
    if not library.task_paths:
        return None, None, []
    if prior == "random":
        task, path = random_prior(library, rng_for(seed, task_id, TAG_PRIOR))
        sources = [path]
        if k != 1:
            sources += [p for t, p in library.task_paths.items() if t != task]
        return task, path, sources
    if prior != "knn":
        raise ValueError(f"unknown prior {prior!r}")
    ranking = closest_task(library, tuple(data.train), tuple(data.val), flops=flops)
    sources = [library.task_paths[a.past_task] for a in ranking]
    best = ranking[0].past_task
    return best, library.task_paths[best], sources


def _finish(library, spec, path, best, before_params, before_modules, before_flops, flops,
            data, hyper, info) -> TaskOutcome:
    return TaskOutcome(
        task_id=spec.task_id,
        chosen_path=path,
        val_accuracy=best.val_accuracy,
        test_accuracy=library.accuracy(path, *data.test),
        learning_curve=best.learning_curve,
        params_added=library.n_params() - before_params,
        modules_added=library.n_modules() - before_modules,
        flops_used=flops.total - before_flops,
        hyper=hyper,
        info=info,
    )


def train_mntdp_d(library: ModuleLibrary, spec, data, prior="knn", grid=None, budget=None,
                  seed=0, k=1, flops=None) -> TaskOutcome:
    """Train every restricted candidate independently and commit the best.

    Candidates are ranked by validation accuracy; ties go to the candidate
    reusing the longest prefix (fewest new parameters).
    """
    grid = grid or HyperGrid()
    budget = budget or TrainBudget()
    flops = flops if flops is not None else FlopCounter()
    p0, m0, f0 = library.n_params(), library.n_modules(), flops.total
    src_task, src_path, sources = _source_for(library, spec.task_id, data, prior, seed, flops, k)
    cands = candidate_paths(library, src_path, spec.task_id, spec.n_classes, k=k, seed=seed,
                            share_fresh=False, sources=sources)
    results = []
    for c, path in enumerate(cands.candidates):
        cell, best, _ = fit_grid(library, path, data, grid, budget, (seed, spec.task_id, c), flops)
        results.append((c, path, cell, best))
    chosen = max(results, key=lambda r: (r[3].val_accuracy, cands.prefix_lengths[r[0]], -r[0]))
    c, path, cell, best = chosen
    library.commit_path(path, spec.task_id)
    info = {
        "source_task": src_task,
        "n_candidates": len(cands),
        "candidate": c,
        "reused_prefix": cands.prefix_lengths[c],
        "candidate_val": [r[3].val_accuracy for r in results],
    }
    return _finish(library, spec, path, best, p0, m0, f0, flops, data,
                   {"lr": cell[0], "weight_decay": cell[1]}, info)


def gamma_probs(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits.reshape(1, -1))[0])


def entropy_grad(probs: np.ndarray) -> np.ndarray:
    """d H / d logits for a softmax categorical."""
    logp = np.log(np.clip(probs, 1e-300, None))
    h = -(probs * logp).sum()
    return -probs * (logp + h)


def search_paths(library, cands, half1, half2, val, lr, wd, gamma_lr, entropy_weight, budget, rng,
                 flops=None, test=None):
    """Alternate parameter steps (half 1) and REINFORCE steps on the path
    distribution (half 2) until it concentrates and validation stalls.

    The score of a sampled path is its summed minibatch loss, i.e. the
    return of ``B`` per-example path draws, measured against an exponential
    moving-average baseline; the entropy bonus is subtracted from the path
    objective.  Once ``max(probs) > 0.99`` only parameter steps are taken.
    """
    n = len(cands)
    logits = np.zeros(n)
    gstate = AdamState.for_params([logits])
    ids = {mid for p in cands for mid in p if not library[mid].frozen}
    states = {mid: AdamState.for_params(library[mid].get_params()) for mid in sorted(ids)}
    b1 = batch_indices(len(half1[1]), budget.batch_size, rng)
    b2 = batch_indices(len(half2[1]), budget.batch_size, rng) if len(half2[1]) else None
    baseline = None
    best_acc, best_it = -1.0, 0
    max_prob = [float(gamma_probs(logits).max())]
    curve = []
    if test is not None:
        curve.append((0, library.accuracy(cands[int(np.argmax(logits))], *test)))
    it = 0
    while it < budget.max_iterations:
        it += 1
        probs = gamma_probs(logits)
        k = int(rng.choice(n, p=probs))
        path = cands[k]
        if it % 2 == 1 or probs.max() > GAMMA_THRESHOLD or b2 is None:
            idx = next(b1)
            _, grads = loss_and_grads(library, [(path, half1[0][idx], half1[1][idx])], flops)
            for mid, (gw, gb) in grads.items():
                mod = library[mid]
                adam_step([mod.weight, mod.bias], [gw, gb], states[mid], lr, wd)
                if flops is not None:
                    flops.add(10 * mod.n_params)
        else:
            idx = next(b2)
            _, out = forward_path(library, path, half2[0][idx])
            if flops is not None:
                flops.forward(library, path, len(idx))
            score = softmax_cross_entropy(out, half2[1][idx]).value * len(idx)
            if baseline is None:
                baseline = score
            onehot = np.zeros(n)
            onehot[k] = 1.0
            g = (score - baseline) * (onehot - probs) - entropy_weight * entropy_grad(probs)
            baseline = BASELINE_DECAY * baseline + (1.0 - BASELINE_DECAY) * score
            adam_step([logits], [g], gstate, gamma_lr, 0.0)
            if flops is not None:
                flops.add(10 * n)
        max_prob.append(float(gamma_probs(logits).max()))
        top = cands[int(np.argmax(logits))]
        if test is not None and it <= budget.lca_beta:
            curve.append((it, library.accuracy(top, *test)))
        if it % budget.eval_every == 0:
            acc = evaluate(library, top, *val, flops)
            if test is not None and it > budget.lca_beta:
                curve.append((it, library.accuracy(top, *test)))
            if acc > best_acc:
                best_acc, best_it = acc, it
            elif it - best_it >= budget.patience and max_prob[-1] > GAMMA_THRESHOLD:
                break
    return {
        "logits": logits,
        "choice": int(np.argmax(logits)),
        "max_prob": max_prob,
        "iterations": it,
        "curve": curve,
    }


def train_mntdp_s(library: ModuleLibrary, spec, data, prior="knn", grid=None, budget=None,
                  seed=0, k=1, flops=None, candidates=None) -> TaskOutcome:
    """Stochastic path search with shared fresh modules, then fine-tuning of
    the most probable path on the whole training set.

    ``candidates`` overrides the prior-generated candidate set.
    """
    grid = grid or HyperGrid()
    budget = budget or TrainBudget()
    flops = flops if flops is not None else FlopCounter()
    p0, m0, f0 = library.n_params(), library.n_modules(), flops.total
    if candidates is None:
        src_task, src_path, sources = _source_for(library, spec.task_id, data, prior, seed, flops, k)
        cands = candidate_paths(library, src_path, spec.task_id, spec.n_classes, k=k, seed=seed,
                                share_fresh=True, sources=sources).candidates
    else:
        src_task, cands = None, list(candidates)
    fresh = sorted({mid for p in cands for mid in p if not library[mid].frozen})
    init = snapshot(library, fresh)
    tx, ty = data.train
    order = rng_for(seed, spec.task_id, 0, TAG_HALVES).permutation(len(ty))
    half = (len(ty) + 1) // 2
    h1, h2 = order[:half], order[half:]
    half1, half2 = (tx[h1], ty[h1]), (tx[h2], ty[h2])

    best = None
    for cell in grid.gamma_cells():
        lr, wd, glr = cell
        restore(library, init)
        rng = rng_for(seed, spec.task_id, 0, 1, TAG_HALVES)
        search = search_paths(library, cands, half1, half2, tuple(data.val), lr, wd, glr,
                              grid.entropy_weight, budget, rng, flops, data.test)
        path = cands[search["choice"]]
        fit = fit_with_early_stopping(library, path, data.train, data.val, lr, wd, budget, rng,
                                      test=data.test, flops=flops)
        offset = search["iterations"]
        curve = search["curve"] + [(offset + b, a) for b, a in fit.learning_curve[1:]]
        params = snapshot(library, fresh)
        if best is None or fit.val_accuracy > best[1].val_accuracy:
            best = (cell, fit, search, path, params, curve)
    cell, fit, search, path, params, curve = best
    restore(library, params)
    library.commit_path(path, spec.task_id)
    fit.learning_curve = curve
    info = {
        "source_task": src_task,
        "n_candidates": len(cands),
        "candidate": search["choice"],
        "gamma_logits": search["logits"].tolist(),
        "gamma_max_prob": search["max_prob"][-1],
        "search_iterations": search["iterations"],
    }
    out = _finish(library, spec, path, fit, p0, m0, f0, flops, data,
                  {"lr": cell[0], "weight_decay": cell[1], "gamma_lr": cell[2]}, info)
    out.info["gamma_logits_array"] = search["logits"]
    return out


# -- learner objects --------------------------------------------------------------
class Learner:
    """Common state and evaluation for every continual learner."""

    name = "base"

    def __init__(self, input_dim: int, hidden_dim: int = 64, n_layers: int = 4, grid=None,
                 budget=None, seed: int = 0):
        self.library = ModuleLibrary(input_dim, hidden_dim, n_layers)
        self.grid = grid or HyperGrid()
        self.budget = budget or TrainBudget()
        self.seed = int(seed)
        self.flops = FlopCounter()
        self.outcomes: dict = {}

    def learn_task(self, spec, data) -> TaskOutcome:
        out = self._learn(spec, data)
        self.outcomes[spec.task_id] = out
        return out

    def _learn(self, spec, data) -> TaskOutcome:
        raise NotImplementedError

    def path_for(self, task_id) -> Path:
        return self.library.task_paths[task_id]

    def evaluate(self, task_id, x, y) -> float:
        return self.library.accuracy(self.path_for(task_id), x, y)

    def auxiliary_floats(self) -> int:
        return 0

    def extra_state(self) -> dict:
        return {}

    def _fresh_path(self, spec, layers_from=0, reuse=()):
        """``reuse`` modules for the first layers, fresh modules (candidate 0
        seeds) from ``layers_from`` on."""
        ids = list(reuse)
        for layer in range(len(ids), self.library.n_layers):
            ncls = spec.n_classes if layer == self.library.n_layers - 1 else None
            ids.append(self.library.spawn_new_module(layer, [self.seed, spec.task_id, 0, layer], ncls))
        return self.library.validate_path(Path(ids))

    def _train_commit(self, spec, data, path, freeze=True, penalty=None, replay=None):
        lib = self.library
        p0, m0, f0 = lib.n_params(), lib.n_modules(), self.flops.total
        cell, best, _ = fit_grid(lib, path, data, self.grid, self.budget, (self.seed, spec.task_id, 0),
                                 self.flops, penalty=penalty, replay=replay)
        if freeze:
            lib.commit_path(path, spec.task_id)
        else:
            lib.bind_path(path, spec.task_id)
        return _finish(lib, spec, path, best, p0, m0, f0, self.flops, data,
                       {"lr": cell[0], "weight_decay": cell[1]}, {})


class MNTDPD(Learner):
    name = "mntdp_d"

    def __init__(self, *args, prior="knn", k=1, **kw):
        super().__init__(*args, **kw)
        self.prior = prior
        self.k = k

    def _learn(self, spec, data):
        return train_mntdp_d(self.library, spec, data, self.prior, self.grid, self.budget,
                             self.seed, self.k, self.flops)


class MNTDPS(Learner):
    name = "mntdp_s"

    def __init__(self, *args, prior="knn", k=1, **kw):
        super().__init__(*args, **kw)
        self.prior = prior
        self.k = k
        self.gamma: dict = {}

    def _learn(self, spec, data):
        out = train_mntdp_s(self.library, spec, data, self.prior, self.grid, self.budget,
                            self.seed, self.k, self.flops)
        self.gamma[spec.task_id] = out.info.pop("gamma_logits_array")
        return out

    def auxiliary_floats(self) -> int:
        return sum(g.size for g in self.gamma.values())

    def extra_state(self) -> dict:
        return {f"gamma/{t}": g for t, g in self.gamma.items()}


class Independent(Learner):
    """A fresh predictor per task."""

    name = "independent"

    def _learn(self, spec, data):
        return self._train_commit(spec, data, self._fresh_path(spec))


class NewHead(Learner):
    """Trunk learned on the first task and frozen; one new head per task."""

    name = "new_head"

    def _learn(self, spec, data):
        if not self.library.task_paths:
            return self._train_commit(spec, data, self._fresh_path(spec))
        first = next(iter(self.library.task_paths.values()))
        return self._train_commit(spec, data, self._fresh_path(spec, reuse=first[:-1]))


class NewLeg(Learner):
    """Everything but the input layer learned on the first task and frozen;
    a new input layer per task (and a new head when the class count differs)."""

    name = "new_leg"

    def _learn(self, spec, data):
        lib = self.library
        if not lib.task_paths or lib.n_layers == 1:
            return self._train_commit(spec, data, self._fresh_path(spec))
        first = next(iter(lib.task_paths.values()))
        leg = lib.spawn_new_module(0, [self.seed, spec.task_id, 0, 0])
        head = first[-1]
        ids = [leg] + list(first[1:-1])
        if lib[head].shape[1] == spec.n_classes:
            ids.append(head)
        else:
            ids.append(lib.spawn_new_module(lib.n_layers - 1, [self.seed, spec.task_id, 0, lib.n_layers - 1],
                                            spec.n_classes))
        return self._train_commit(spec, data, lib.validate_path(Path(ids)))


class Finetune(Learner):
    """A single shared path trained on every task in turn.

    The head is shared too unless the class count changes, in which case a
    new head is spawned on the shared trunk.
    """

    name = "finetune"

    def _shared_path(self, spec):
        lib = self.library
        if not lib.task_paths:
            return self._fresh_path(spec)
        last = list(lib.task_paths.values())[-1]
        if lib[last[-1]].shape[1] == spec.n_classes:
            return last
        return self._fresh_path(spec, reuse=last[:-1])

    def _learn(self, spec, data):
        return self._train_commit(spec, data, self._shared_path(spec), freeze=False)


def fisher_diagonal(library: ModuleLibrary, path, x, y) -> dict:
    """Empirical Fisher diagonal: mean squared per-example gradient of the
    log-likelihood, for the trainable modules of ``path``."""
    cache, logits = forward_path(library, path, x, train=True)
    n = len(y)
    lv = softmax_cross_entropy(logits, y)
    delta = lv.grad * n  # per-example gradient of -log p(y|x)
    out = {}
    last = len(path) - 1
    if cache.lowest_trainable is None:
        return out
    for i in range(last, cache.lowest_trainable - 1, -1):
        mod = library[path[i]]
        if i != last:
            delta = relu_backward(cache.pre_activations[i], delta)
        a = cache.layer_inputs[i]
        if not mod.frozen:
            out[mod.id] = ((a * a).T @ (delta * delta) / n, (delta * delta).sum(axis=0) / n)
        delta = delta @ mod.weight.T
    return out


class EWCPenalty:
    def __init__(self, lam: float, fisher: dict, anchor: dict):
        self.lam = float(lam)
        self.fisher = fisher
        self.anchor = anchor

    def __call__(self, library):
        grads = {}
        for mid, (fw, fb) in self.fisher.items():
            if mid not in library:
                continue
            mod = library[mid]
            aw, ab = self.anchor[mid]
            grads[mid] = (self.lam * fw * (mod.weight - aw), self.lam * fb * (mod.bias - ab))
        return grads

    def value(self, library) -> float:
        total = 0.0
        for mid, (fw, fb) in self.fisher.items():
            mod = library[mid]
            aw, ab = self.anchor[mid]
            total += (fw * (mod.weight - aw) ** 2).sum() + (fb * (mod.bias - ab) ** 2).sum()
        return 0.5 * self.lam * total


class EWCOnline(Finetune):
    """Finetune plus a quadratic pull towards the previous parameters,
    weighted by a running sum of per-task Fisher diagonals."""

    name = "ewc_online"

    def __init__(self, *args, ewc_lambda: float = 100.0, **kw):
        super().__init__(*args, **kw)
        self.ewc_lambda = float(ewc_lambda)
        self.fisher: dict = {}
        self.anchor: dict = {}

    def _learn(self, spec, data):
        path = self._shared_path(spec)
        penalty = EWCPenalty(self.ewc_lambda, self.fisher, self.anchor) if self.fisher else None
        out = self._train_commit(spec, data, path, freeze=False, penalty=penalty)
        tx, ty = data.train
        for mid, (fw, fb) in fisher_diagonal(self.library, path, tx, ty).items():
            if mid in self.fisher:
                pw, pb = self.fisher[mid]
                fw, fb = pw + fw, pb + fb
            self.fisher[mid] = (fw, fb)
        self.flops.train_step(self.library, path, len(ty), trained_params=0)
        self.anchor = snapshot(self.library, list(self.fisher))
        return out

    def auxiliary_floats(self) -> int:
        return 2 * sum(fw.size + fb.size for fw, fb in self.fisher.values())

    def extra_state(self) -> dict:
        st = {}
        for mid, (fw, fb) in self.fisher.items():
            st[f"fisher/{mid}/w"], st[f"fisher/{mid}/b"] = fw, fb
            aw, ab = self.anchor[mid]
            st[f"anchor/{mid}/w"], st[f"anchor/{mid}/b"] = aw, ab
        return st


class ReplayBuffer:
    """Up to ``per_class`` stored training examples per (task, class)."""

    def __init__(self, per_class: int = REPLAY_PER_CLASS):
        self.per_class = per_class
        self.store: dict = {}  # task -> (x, y)

    def __len__(self):
        return sum(len(y) for _, y in self.store.values())

    def add_task(self, task, x, y, rng):
        keep = []
        for c in np.unique(y):
            idx = np.flatnonzero(y == c)
            take = min(self.per_class, len(idx))
            keep.append(np.sort(rng.choice(idx, size=take, replace=False)))
        keep = np.concatenate(keep)
        self.store[task] = (x[keep].copy(), y[keep].copy())

    def count(self, task, cls) -> int:
        return int((self.store[task][1] == cls).sum())

    def n_floats(self) -> int:
        return sum(x.size for x, _ in self.store.values())


class _Replay:
    """Minibatch rehearsal sampler handed to the trainer."""

    def __init__(self, buffer: ReplayBuffer, task_paths: dict, rng):
        self.tasks = list(buffer.store)
        self.paths_by_task = {t: task_paths[t] for t in self.tasks}
        self.x = np.concatenate([buffer.store[t][0] for t in self.tasks])
        self.y = np.concatenate([buffer.store[t][1] for t in self.tasks])
        self.owner = np.concatenate([np.full(len(buffer.store[t][1]), i) for i, t in enumerate(self.tasks)])
        self.rng = rng
        self._start = rng.bit_generator.state

    def reset(self):
        """Rewind so every grid cell replays the same sample sequence."""
        self.rng.bit_generator.state = self._start

    def paths(self):
        return list(self.paths_by_task.values())

    def __call__(self, _rng, n):
        take = self.rng.choice(len(self.y), size=min(n, len(self.y)), replace=False)
        groups = []
        for i, t in enumerate(self.tasks):
            sel = take[self.owner[take] == i]
            if len(sel):
                groups.append((self.paths_by_task[t], self.x[sel], self.y[sel]))
        return groups


class ExperienceReplay(Finetune):
    """Finetune where every minibatch is joined by an equal-size batch drawn
    uniformly from a buffer of past examples."""

    name = "er"

    def __init__(self, *args, per_class: int = REPLAY_PER_CLASS, **kw):
        super().__init__(*args, **kw)
        self.buffer = ReplayBuffer(per_class)

    def _learn(self, spec, data):
        path = self._shared_path(spec)
        replay = None
        if len(self.buffer):
            replay = _Replay(self.buffer, self.library.task_paths,
                             rng_for(self.seed, spec.task_id, 0, TAG_REPLAY))
        out = self._train_commit(spec, data, path, freeze=False, replay=replay)
        tx, ty = data.train
        self.buffer.add_task(spec.task_id, tx, ty, rng_for(self.seed, spec.task_id, 0, TAG_BUFFER))
        return out

    def auxiliary_floats(self) -> int:
        return self.buffer.n_floats()

    def extra_state(self) -> dict:
        st = {}
        for t, (x, y) in self.buffer.store.items():
            st[f"buffer/{t}/x"], st[f"buffer/{t}/y"] = x, y.astype(np.float64)
        return st


LEARNERS = {
    cls.name: cls
    for cls in (Independent, Finetune, NewHead, NewLeg, EWCOnline, ExperienceReplay, MNTDPD, MNTDPS)
}


def make_learner(name: str, input_dim: int, **kw) -> Learner:
    try:
        cls = LEARNERS[name]
    except KeyError:
        raise ValueError(f"unknown learner {name!r}; expected one of {sorted(LEARNERS)}") from None
    return cls(input_dim, **kw)
