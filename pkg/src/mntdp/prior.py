"""Task-driven prior: pick the most similar past task by k-NN accuracy on
penultimate features, then enumerate branch-right perturbations of its path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import ModuleLibrary, Path, forward_path


@dataclass(frozen=True)
class TaskAffinity:
    past_task: object
    knn_accuracy: float


@dataclass
class CandidateSet:
    candidates: list
    source_task: object = None
    k: object = 1
    prefix_lengths: list = None
    sources: list = None

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def fresh_modules(self, library: ModuleLibrary) -> set:
        return {m for p in self.candidates for m in p if not library[m].frozen}


def extract_features(library: ModuleLibrary, path, x) -> np.ndarray:
    """Activations feeding the classification head (raw inputs when L == 1)."""
    acts, _ = forward_path(library, path, x)
    if not acts:
        return np.asarray(x, dtype=np.float64)
    return acts[-1]


def knn_predict(train_x, train_y, query_x, n_neighbors: int = 5) -> np.ndarray:
    """Euclidean k-NN majority vote; vote ties go to the smallest label."""
    train_x = np.asarray(train_x, dtype=np.float64)
    query_x = np.asarray(query_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    k = min(n_neighbors, len(train_y))
    d2 = (
        (query_x**2).sum(axis=1, keepdims=True)
        - 2.0 * query_x @ train_x.T
        + (train_x**2).sum(axis=1)[None, :]
    )
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    votes = train_y[nn]
    n_labels = int(train_y.max()) + 1
    counts = np.zeros((len(query_x), n_labels), dtype=np.int64)
    for j in range(k):
        np.add.at(counts, (np.arange(len(query_x)), votes[:, j]), 1)
    return counts.argmax(axis=1)


def knn_accuracy(train_x, train_y, val_x, val_y, n_neighbors: int = 5) -> float:
    if len(val_y) == 0:
        return 0.0
    pred = knn_predict(train_x, train_y, val_x, n_neighbors)
    return float((pred == np.asarray(val_y)).mean())


def closest_task(library: ModuleLibrary, train, val, n_neighbors: int = 5, flops=None) -> list:
    """Rank committed tasks by k-NN validation accuracy of the current task
    in each task's feature space; ties favour the most recently committed.

    ``train`` and ``val`` are ``(x, y)`` pairs of the current task.
    """
    (tx, ty), (vx, vy) = train, val
    if len(ty) == 0:
        raise ValueError("current training set is empty")
    order = list(library.task_paths)
    scored = []
    for rank, task in enumerate(order):
        path = library.task_paths[task]
        ftr = extract_features(library, path, tx)
        fva = extract_features(library, path, vx)
        if flops is not None:
            flops.forward(library, path, len(tx) + len(vx), upto=library.n_layers - 1)
        scored.append((knn_accuracy(ftr, ty, fva, vy, n_neighbors), rank, task))
    scored.sort(key=lambda s: (-s[0], -s[1]))
    return [TaskAffinity(task, acc) for acc, _, task in scored]


def _branch_right_prefixes(source_path, n_layers: int):
    if source_path is None:
        return [()]
    return [tuple(source_path[:p]) for p in range(n_layers)]


def candidate_paths(
    library: ModuleLibrary,
    source_path,
    task,
    n_classes: int,
    k=1,
    seed=0,
    share_fresh: bool = False,
    sources=None,
) -> CandidateSet:
    """Spawn fresh modules and build the restricted candidate set.

    Candidate ``p`` reuses the first ``p`` modules of the source path and is
    all-new afterwards; the head is always fresh.  With ``k="all"`` the
    union over ``sources`` (one committed path per past task) is taken,
    deduplicated on the reused prefix.  ``share_fresh`` spawns one fresh
    module per layer shared by all candidates; otherwise each candidate owns
    its fresh modules.  Fresh module ``(candidate c, layer l)`` is seeded by
    ``[seed, task, c, l]`` (shared modules use ``c = 0``).
    """
    L = library.n_layers
    if k == 1 or k is None:
        path_sources = [] if source_path is None else [source_path]
    else:
        path_sources = list(sources or ([] if source_path is None else [source_path]))
    prefixes = []
    origins = []
    if not path_sources:
        prefixes.append(())
        origins.append(None)
    for src in path_sources:
        for pre in _branch_right_prefixes(src, L):
            if pre not in prefixes:
                prefixes.append(pre)
                origins.append(src)

    shared = {}
    candidates = []
    for c, pre in enumerate(prefixes):
        ids = list(pre)
        for layer in range(len(pre), L):
            ncls = n_classes if layer == L - 1 else None
            if share_fresh:
                if layer not in shared:
                    shared[layer] = library.spawn_new_module(layer, [seed, task, 0, layer], ncls)
                ids.append(shared[layer])
            else:
                ids.append(library.spawn_new_module(layer, [seed, task, c, layer], ncls))
        candidates.append(library.validate_path(Path(ids)))
    src_task = None
    if source_path is not None:
        src_task = next((t for t, p in library.task_paths.items() if p == tuple(source_path)), None)
    return CandidateSet(candidates, src_task, k, [len(p) for p in prefixes], origins)


def random_prior(library: ModuleLibrary, seed):
    """Uniformly chosen committed task and its path, deterministic in ``seed``."""
    tasks = list(library.task_paths)
    if not tasks:
        raise ValueError("library has no committed task")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    task = tasks[int(rng.integers(len(tasks)))]
    return task, library.task_paths[task]
