"""Continual-learning metrics and the memory / FLOPs accountants.

FLOPs convention: a dense ``m x n`` layer costs ``2*B*m*n`` forward and
``4*B*m*n`` backward on a batch of ``B`` rows; an Adam update costs 10
FLOPs per trained parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BYTES_PER_PARAM = 8
ADAM_FLOPS_PER_PARAM = 10


@dataclass
class AccuracyMatrix:
    just_learned: list
    final: list

    def __post_init__(self):
        self.just_learned = [float(a) for a in self.just_learned]
        self.final = [float(a) for a in self.final]
        if len(self.just_learned) != len(self.final):
            raise ValueError("just_learned and final must have one entry per task")
        for a in self.just_learned + self.final:
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"accuracy {a} outside [0, 1]")

    @property
    def T(self) -> int:
        return len(self.final)


def avg_accuracy(matrix: AccuracyMatrix) -> float:
    """Mean end-of-stream accuracy over all tasks."""
    if matrix.T == 0:
        raise ValueError("average accuracy of an empty stream is undefined")
    return float(np.mean(matrix.final))


def forgetting(matrix: AccuracyMatrix) -> float:
    """Mean of ``final - just_learned`` over all tasks but the last.

    Negative values mean the learner forgot, positive values mean backward
    transfer.
    """
    if matrix.T < 2:
        raise ValueError("forgetting needs at least two tasks")
    fin = np.asarray(matrix.final[:-1])
    jl = np.asarray(matrix.just_learned[:-1])
    return float(np.mean(fin - jl))


def transfer(stream_last_acc: float, isolated_last_acc: float) -> float:
    return float(stream_last_acc) - float(isolated_last_acc)


def lca(curves, beta: int = 5) -> float:
    """Area under the first ``beta + 1`` points of the learning curve(s).

    ``curves`` is either one curve (accuracies after 0, 1, ... batches) or a
    sequence of per-task curves, in which case the per-task values are
    averaged.
    """
    if len(curves) and np.ndim(curves[0]) == 0:
        curves = [curves]
    if not len(curves):
        raise ValueError("no learning curve given")
    vals = []
    for c in curves:
        if len(c) < beta + 1:
            raise ValueError(f"curve has {len(c)} points, need {beta + 1}")
        vals.append(float(np.mean(np.asarray(c[: beta + 1], dtype=np.float64))))
    return float(np.mean(vals))


def account_flops(layer_dims, batch: int, phase: str = "forward") -> int:
    """FLOPs for one pass over ``layer_dims`` (a list of ``(m, n)`` weight shapes).

    ``phase`` is ``"forward"``, ``"backward"``, ``"update"`` (Adam, counts
    weights and biases) or ``"train_step"`` (all three).
    """
    dims = [(int(m), int(n)) for m, n in layer_dims]
    fwd = sum(2 * batch * m * n for m, n in dims)
    bwd = sum(4 * batch * m * n for m, n in dims)
    upd = sum(ADAM_FLOPS_PER_PARAM * (m * n + n) for m, n in dims) if batch else 0
    if phase == "forward":
        return fwd
    if phase == "backward":
        return bwd
    if phase == "update":
        return upd
    if phase == "train_step":
        return fwd + bwd + upd
    raise ValueError(f"unknown phase {phase!r}")


class FlopCounter:
    """Running FLOPs total for a learner."""

    def __init__(self):
        self.total = 0

    def add(self, n: int):
        self.total += int(n)

    def forward(self, library, path, batch: int, upto: int | None = None):
        mods = [library[m] for m in path][:upto]
        self.total += account_flops([m.shape for m in mods], batch, "forward")

    def train_step(self, library, path, batch: int, trained_params: int | None = None):
        mods = [library[m] for m in path]
        self.total += account_flops([m.shape for m in mods], batch, "forward")
        lowest = next((i for i, m in enumerate(mods) if not m.frozen), None)
        if lowest is None:
            return
        self.total += account_flops([m.shape for m in mods[lowest:]], batch, "backward")
        if trained_params is None:
            trained_params = sum(m.n_params for m in mods if not m.frozen)
        self.total += ADAM_FLOPS_PER_PARAM * trained_params


@dataclass
class ResourceLedger:
    parameter_bytes: int = 0
    auxiliary_bytes: int = 0
    flops: int = 0

    @property
    def total_bytes(self) -> int:
        return self.parameter_bytes + self.auxiliary_bytes


def account_memory(learner) -> ResourceLedger:
    """Snapshot of what ``learner`` must keep: live parameters plus auxiliary
    state (EWC Fisher and anchors, replay samples, path logits)."""
    params = learner.library.n_params()
    aux = learner.auxiliary_floats()
    return ResourceLedger(BYTES_PER_PARAM * params, BYTES_PER_PARAM * aux, learner.flops.total)
