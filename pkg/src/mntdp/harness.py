"""Experiment runner: one learner over one stream, then the metric report.

A run walks the stream exactly once through :class:`StreamCursor`, records
the just-learned and end-of-stream test accuracies, trains the last task in
isolation (a fresh Independent learner with the same seed) for the transfer
score, and writes ``results.csv``, ``summary.json``, ``tasks.json`` and a
binary ``checkpoint.bin``.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path as FsPath

import numpy as np

from .graph import write_snapshot
from .learners import EWC_LAMBDAS, LEARNERS, make_learner
from .metrics import AccuracyMatrix, account_memory, avg_accuracy, forgetting, lca, transfer
from .streams import (
    INPUT_DIM,
    Stream,
    build_stream,
    canonical_kind,
    import_dataset_csv,
    materialize,
    read_manifest,
)
from .training import HyperGrid, TrainBudget

OUTPUT_DIR_ENV = "MNTDP_OUTPUT_DIR"
THREADS_ENV = "MNTDP_THREADS"

RESULT_COLUMNS = ["learner", "stream", "seed", "avg_accuracy", "forgetting", "transfer",
                  "memory_bytes", "flops", "lca5"]

LEARNER_OPTIONS = {
    "independent": set(),
    "finetune": set(),
    "new_head": set(),
    "new_leg": set(),
    "ewc_online": {"ewc_lambda"},
    "er": {"per_class"},
    "mntdp_d": {"prior", "k"},
    "mntdp_s": {"prior", "k"},
}
MODEL_OPTIONS = {"hidden_dim", "n_layers"}
GRID_KEYS = {"learning_rates", "weight_decays", "gamma_learning_rates", "entropy_weight"}
BUDGET_KEYS = {"batch_size", "patience", "max_iterations", "eval_every", "lca_beta", "curve_every"}
CONFIG_KEYS = {"stream", "learner", "options", "grid", "budget", "output_dir", "seed"}
STREAM_KEYS = {"kind", "scale", "seed", "manifest", "n_tasks"}


class ConfigError(ValueError):
    """All validation problems found in a config, reported together."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class StreamRevisitError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    learner: str
    stream: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    budget: dict = field(default_factory=dict)
    output_dir: str | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, raw) -> "ExperimentConfig":
        errors = validate_config(raw)
        if errors:
            raise ConfigError(errors)
        return cls(**raw)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(FsPath(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"]) from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved_output_dir(self) -> FsPath:
        env = os.environ.get(OUTPUT_DIR_ENV)
        return FsPath(env if env else (self.output_dir or "runs/default"))


def _is_int(x):
    return isinstance(x, (int, np.integer)) and not isinstance(x, bool)


def _is_num(x):
    return isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool)


def validate_config(raw) -> list:
    """Every problem with ``raw``, as a list of messages (empty when valid)."""
    if not isinstance(raw, dict):
        return ["config must be a mapping"]
    errors = []
    for k in sorted(set(raw) - CONFIG_KEYS):
        errors.append(f"unknown key {k!r}")
    name = raw.get("learner")
    if name is None:
        errors.append("missing key 'learner'")
    elif name not in LEARNERS:
        errors.append(f"learner {name!r} not one of {sorted(LEARNERS)}")

    stream = raw.get("stream", {})
    if not isinstance(stream, dict):
        errors.append("'stream' must be a mapping")
        stream = {}
    for k in sorted(set(stream) - STREAM_KEYS):
        errors.append(f"unknown stream key {k!r}")
    if "manifest" not in stream:
        if "kind" not in stream:
            errors.append("stream needs 'kind' or 'manifest'")
        else:
            try:
                canonical_kind(stream["kind"])
            except ValueError as exc:
                errors.append(str(exc))
        if stream.get("scale", "desk") not in ("desk", "paper"):
            errors.append(f"stream scale {stream.get('scale')!r} not 'desk' or 'paper'")
    elif not isinstance(stream["manifest"], str):
        errors.append("stream manifest must be a path string")
    for k in ("seed", "n_tasks"):
        if k in stream and stream[k] is not None and not _is_int(stream[k]):
            errors.append(f"stream {k} must be an integer")

    opts = raw.get("options", {})
    if not isinstance(opts, dict):
        errors.append("'options' must be a mapping")
        opts = {}
    allowed = LEARNER_OPTIONS.get(name, set()) | MODEL_OPTIONS
    for k in sorted(set(opts) - allowed):
        errors.append(f"option {k!r} not accepted by learner {name!r}")
    for k in ("hidden_dim", "n_layers", "k", "per_class"):
        if k in opts and not (_is_int(opts[k]) and opts[k] >= 1):
            errors.append(f"option {k} must be a positive integer")
    if "prior" in opts and opts["prior"] not in ("knn", "random"):
        errors.append("option prior must be 'knn' or 'random'")
    if "ewc_lambda" in opts and not (_is_num(opts["ewc_lambda"]) and opts["ewc_lambda"] >= 0):
        errors.append("option ewc_lambda must be a non-negative number")

    grid = raw.get("grid", {})
    if not isinstance(grid, dict):
        errors.append("'grid' must be a mapping")
        grid = {}
    for k in sorted(set(grid) - GRID_KEYS):
        errors.append(f"unknown grid key {k!r}")
    for k in sorted(set(grid) & (GRID_KEYS - {"entropy_weight"})):
        v = grid[k]
        if not (isinstance(v, list) and v and all(_is_num(x) and x >= 0 for x in v)):
            errors.append(f"grid {k} must be a non-empty list of non-negative numbers")
        elif k != "weight_decays" and any(x <= 0 for x in v):
            errors.append(f"grid {k} must be positive")
    if "entropy_weight" in grid and not _is_num(grid["entropy_weight"]):
        errors.append("grid entropy_weight must be a number")

    budget = raw.get("budget", {})
    if not isinstance(budget, dict):
        errors.append("'budget' must be a mapping")
        budget = {}
    for k in sorted(set(budget) - BUDGET_KEYS):
        errors.append(f"unknown budget key {k!r}")
    for k in sorted(set(budget) & BUDGET_KEYS):
        if not (_is_int(budget[k]) and budget[k] >= 1):
            errors.append(f"budget {k} must be a positive integer")

    if "output_dir" in raw and raw["output_dir"] is not None and not isinstance(raw["output_dir"], str):
        errors.append("output_dir must be a string")
    if "seed" in raw and not _is_int(raw["seed"]):
        errors.append("seed must be an integer")
    return errors


class StreamCursor:
    """Hands out tasks in order, each exactly once, and logs every access."""

    def __init__(self, stream: Stream, datasets):
        self.stream = stream
        self._datasets = list(datasets)
        self.access_log: list = []

    def __len__(self):
        return len(self._datasets)

    def __iter__(self):
        for spec, data in zip(self.stream.tasks, self._datasets):
            yield self.visit(spec.task_id), data

    def visit(self, task_id):
        if task_id in self.access_log:
            raise StreamRevisitError(f"task {task_id} was already observed")
        if task_id != len(self.access_log):
            raise StreamRevisitError(f"task {task_id} visited out of order")
        self.access_log.append(task_id)
        return self.stream.tasks[task_id]

    def test_split(self, task_id):
        """Held-out test data; evaluation does not count as a visit."""
        return self._datasets[task_id].test

    def complete(self) -> bool:
        return self.access_log == list(range(len(self._datasets)))


@dataclass
class ExperimentResult:
    learner: str
    stream: str
    seed: int
    matrix: AccuracyMatrix
    isolated_last: float
    metrics: dict
    outcomes: list
    access_log: list
    trained_learner: object = None
    info: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"learner": self.learner, "stream": self.stream, "seed": self.seed, **self.metrics}


def load_stream(stream_cfg: dict):
    """``(Stream, datasets)`` from a manifest (with its task CSVs when present)
    or generated from kind/scale/seed."""
    if "manifest" in stream_cfg:
        mpath = FsPath(stream_cfg["manifest"])
        stream = read_manifest(mpath)
        datasets = []
        for spec, generated in zip(stream.tasks, materialize(stream)):
            on_disk = (mpath.parent / f"task_{spec.task_id:03d}_train.csv").exists()
            datasets.append(import_dataset_csv(mpath.parent, spec) if on_disk else generated)
        return stream, datasets
    return build_stream(stream_cfg["kind"], stream_cfg.get("scale", "desk"),
                        int(stream_cfg.get("seed", 0)), n_tasks=stream_cfg.get("n_tasks"))


def _learner_kwargs(config: ExperimentConfig, options=None) -> dict:
    opts = dict(config.options if options is None else options)
    kw = {k: opts.pop(k) for k in list(opts) if k in MODEL_OPTIONS}
    kw.update(opts)
    kw["grid"] = HyperGrid(**config.grid) if config.grid else HyperGrid()
    kw["budget"] = TrainBudget(**config.budget) if config.budget else TrainBudget()
    kw["seed"] = int(config.seed)
    return kw


def _padded(curve, beta):
    vals = [a for _, a in curve]
    if not vals:
        raise ValueError("task produced no learning curve")
    return vals + [vals[-1]] * max(0, beta + 1 - len(vals))


def _traverse(config, stream, datasets, options=None):
    input_dim = stream.input_dim or INPUT_DIM
    learner = make_learner(config.learner, input_dim, **_learner_kwargs(config, options))
    cursor = StreamCursor(stream, datasets)
    just_learned, outcomes = [], []
    for spec, data in cursor:
        out = learner.learn_task(spec, data)
        just_learned.append(out.test_accuracy)
        outcomes.append(out)
    if not cursor.complete():
        raise StreamRevisitError(f"stream traversal incomplete: {cursor.access_log}")
    final = [learner.evaluate(s.task_id, *cursor.test_split(s.task_id)) for s in stream.tasks]
    return learner, cursor, AccuracyMatrix(just_learned, final), outcomes


def _sweep_ewc(config, stream, datasets):
    """Stream-level choice of the EWC strength: the lambda with the best mean
    end-of-stream validation accuracy (ties go to the smaller lambda)."""
    best = None
    for lam in EWC_LAMBDAS:
        opts = {**config.options, "ewc_lambda": float(lam)}
        learner, _, _, _ = _traverse(config, stream, datasets, opts)
        score = float(np.mean([learner.evaluate(s.task_id, *d.val) for s, d in zip(stream.tasks, datasets)]))
        if best is None or score > best[0]:
            best = (score, float(lam))
    return best[1]


def run_experiment(config: ExperimentConfig, stream=None, datasets=None) -> ExperimentResult:
    if stream is None:
        stream, datasets = load_stream(config.stream)
    elif datasets is None:
        datasets = materialize(stream)
    info = {}
    if config.learner == "ewc_online" and "ewc_lambda" not in config.options:
        lam = _sweep_ewc(config, stream, datasets)
        config = ExperimentConfig(**{**config.to_dict(), "options": {**config.options, "ewc_lambda": lam}})
        info["ewc_lambda"] = lam
    learner, cursor, matrix, outcomes = _traverse(config, stream, datasets)

    # the same task trained alone, with the same seed, for the transfer score
    last = stream.tasks[-1]
    iso_cfg = ExperimentConfig(**{**config.to_dict(), "learner": "independent",
                                  "options": {k: v for k, v in config.options.items() if k in MODEL_OPTIONS}})
    iso = make_learner("independent", stream.input_dim or INPUT_DIM, **_learner_kwargs(iso_cfg))
    isolated = iso.learn_task(last, datasets[-1]).test_accuracy

    beta = learner.budget.lca_beta
    ledger = account_memory(learner)
    metrics = {
        "avg_accuracy": avg_accuracy(matrix),
        "forgetting": forgetting(matrix) if matrix.T > 1 else 0.0,
        "transfer": transfer(matrix.just_learned[-1], isolated),
        "memory_bytes": ledger.total_bytes,
        "flops": ledger.flops,
        "lca5": lca([_padded(o.learning_curve, beta) for o in outcomes], beta),
    }
    return ExperimentResult(config.learner, stream.kind, int(config.seed), matrix, isolated, metrics,
                            outcomes, list(cursor.access_log), learner, info)


# -- outputs ---------------------------------------------------------------------
def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def results_csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in RESULT_COLUMNS])
    return buf.getvalue()


def read_results_csv(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for r in reader:
            rows.append({
                "learner": r["learner"],
                "stream": r["stream"],
                "seed": int(r["seed"]),
                "avg_accuracy": float(r["avg_accuracy"]),
                "forgetting": float(r["forgetting"]),
                "transfer": float(r["transfer"]),
                "memory_bytes": int(r["memory_bytes"]),
                "flops": int(r["flops"]),
                "lca5": float(r["lca5"]),
            })
    return rows


def _outcome_dict(o) -> dict:
    return {
        "task_id": o.task_id,
        "path": [list(m) for m in o.chosen_path],
        "val_accuracy": o.val_accuracy,
        "test_accuracy": o.test_accuracy,
        "params_added": o.params_added,
        "modules_added": o.modules_added,
        "flops_used": o.flops_used,
        "hyper": o.hyper,
        "info": {k: v for k, v in o.info.items() if isinstance(v, (int, float, str, list, type(None)))},
        "learning_curve": [[int(b), float(a)] for b, a in o.learning_curve],
    }


def summary_dict(result: ExperimentResult, config: ExperimentConfig) -> dict:
    return {
        "config": config.to_dict(),
        "table": {result.learner: {result.stream: result.metrics}},
        "accuracy_matrix": {"just_learned": result.matrix.just_learned, "final": result.matrix.final},
        "isolated_last_accuracy": result.isolated_last,
        "access_log": result.access_log,
        "info": result.info,
    }


def write_outputs(result: ExperimentResult, config: ExperimentConfig, out_dir=None) -> FsPath:
    out = FsPath(out_dir) if out_dir is not None else config.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(results_csv_text([result.row()]))
    (out / "summary.json").write_text(json.dumps(summary_dict(result, config), indent=2, sort_keys=True) + "\n")
    (out / "tasks.json").write_text(json.dumps([_outcome_dict(o) for o in result.outcomes], indent=2,
                                               sort_keys=True) + "\n")
    learner = result.trained_learner
    if learner is not None:
        with open(out / "checkpoint.bin", "wb") as fh:
            write_snapshot(fh, learner.library, learner.extra_state(),
                           {"learner": result.learner, "stream": result.stream, "seed": result.seed})
    return out


def apply_thread_limit():
    """Honour the thread-count override for the BLAS pool, if one is set."""
    n = os.environ.get(THREADS_ENV)
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))
