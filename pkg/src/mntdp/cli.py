"""Command line: ``mntdp gen-stream | run | report``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path as FsPath

from . import harness
from .streams import build_stream, canonical_kind, export_dataset_csv, write_manifest

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
CHART_METRICS = [("avg_accuracy", "<A>"), ("forgetting", "<F>"), ("memory_bytes", "Mem (bytes)"),
                 ("flops", "FLOPs")]


def cmd_gen_stream(kind, scale, seed, out, n_tasks=None) -> FsPath:
    """Write ``manifest.json`` and per-task CSV splits under ``out``."""
    out = FsPath(out)
    stream, datasets = build_stream(kind, scale, seed, n_tasks=n_tasks)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(stream, out / "manifest.json")
    for spec, ds in zip(stream.tasks, datasets):
        export_dataset_csv(ds, out, spec.task_id)
    return out / "manifest.json"


def cmd_run(config: harness.ExperimentConfig, out_dir=None) -> FsPath:
    limits = harness.apply_thread_limit()
    try:
        result = harness.run_experiment(config)
        return harness.write_outputs(result, config, out_dir)
    finally:
        if limits is not None:
            limits.unregister()


def merge_runs(run_dirs) -> list:
    rows = []
    for d in run_dirs:
        path = FsPath(d) / "results.csv"
        if not path.is_file():
            raise FileNotFoundError(f"{d}: no results.csv (not a completed run)")
        rows.extend(harness.read_results_csv(path))
    if not rows:
        raise ValueError("no result rows found")
    return rows


def bar_layout(rows) -> dict:
    """Metric -> list of ``(x, height, learner, stream)`` bars: one group per
    stream, one bar per learner (averaged over seeds)."""
    streams = sorted({r["stream"] for r in rows})
    learners = sorted({r["learner"] for r in rows})
    width = 0.8 / len(learners)
    layout = {}
    for key, _ in CHART_METRICS:
        bars = []
        for i, s in enumerate(streams):
            for j, name in enumerate(learners):
                vals = [r[key] for r in rows if r["stream"] == s and r["learner"] == name]
                if vals:
                    bars.append((i + (j - (len(learners) - 1) / 2) * width, sum(vals) / len(vals), name, s))
        layout[key] = bars
    return layout


def write_chart(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "mntdp"
    streams = sorted({r["stream"] for r in rows})
    learners = sorted({r["learner"] for r in rows})
    width = 0.8 / len(learners)
    layout = bar_layout(rows)
    fig, axes = plt.subplots(1, len(CHART_METRICS), figsize=(4 * len(CHART_METRICS), 3.5), squeeze=False)
    for ax, (key, label) in zip(axes[0], CHART_METRICS):
        for name in learners:
            bars = [b for b in layout[key] if b[2] == name]
            ax.bar([b[0] for b in bars], [b[1] for b in bars], width=width, label=name)
        ax.set_xticks(range(len(streams)))
        ax.set_xticklabels(streams)
        ax.set_title(label)
    axes[0][0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_report(run_dirs, out) -> FsPath:
    out = FsPath(out)
    rows = merge_runs(run_dirs)
    rows.sort(key=lambda r: (r["stream"], r["learner"], r["seed"]))
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(harness.results_csv_text(rows))
    write_chart(rows, out / "chart.svg")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mntdp", description="Modular continual learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-stream", help="write a stream manifest and its task data")
    g.add_argument("kind")
    g.add_argument("scale", choices=["desk", "paper"])
    g.add_argument("seed", type=int)
    g.add_argument("--out", default="stream")
    g.add_argument("--n-tasks", type=int, default=None)

    r = sub.add_parser("run", help="run one learner over one stream")
    r.add_argument("--config", help="JSON config file; flags below override its fields")
    r.add_argument("--learner")
    r.add_argument("--manifest")
    r.add_argument("--kind")
    r.add_argument("--scale")
    r.add_argument("--stream-seed", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--option", action="append", default=[], metavar="KEY=JSON",
                   help="learner option, e.g. --option prior='\"random\"'")
    r.add_argument("--grid", help="JSON object of grid overrides")
    r.add_argument("--budget", help="JSON object of budget overrides")
    r.add_argument("--out")

    rep = sub.add_parser("report", help="merge completed runs into a table and chart")
    rep.add_argument("runs", nargs="+")
    rep.add_argument("--out", default="report")
    return p


def _config_from_args(args) -> harness.ExperimentConfig:
    errors = []
    raw = {}
    if args.config:
        try:
            raw = json.loads(FsPath(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise harness.ConfigError([f"cannot read config {args.config}: {exc}"]) from None
        if not isinstance(raw, dict):
            raise harness.ConfigError(["config must be a JSON object"])
    stream = dict(raw.get("stream", {})) if isinstance(raw.get("stream", {}), dict) else raw.get("stream")
    if isinstance(stream, dict):
        for key, val in (("manifest", args.manifest), ("kind", args.kind), ("scale", args.scale),
                         ("seed", args.stream_seed)):
            if val is not None:
                stream[key] = val
        raw["stream"] = stream
    if args.learner is not None:
        raw["learner"] = args.learner
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["output_dir"] = args.out
    opts = dict(raw.get("options", {})) if isinstance(raw.get("options", {}), dict) else {}
    for item in args.option:
        key, sep, val = item.partition("=")
        if not sep:
            errors.append(f"option {item!r} is not KEY=VALUE")
            continue
        try:
            opts[key] = json.loads(val)
        except json.JSONDecodeError:
            opts[key] = val
    if args.option:
        raw["options"] = opts
    for key in ("grid", "budget"):
        text = getattr(args, key)
        if text is not None:
            try:
                raw[key] = json.loads(text)
            except json.JSONDecodeError as exc:
                errors.append(f"--{key} is not valid JSON: {exc}")
    errors += harness.validate_config(raw)
    if errors:
        raise harness.ConfigError(errors)
    return harness.ExperimentConfig(**raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-stream":
            try:
                canonical_kind(args.kind)
            except ValueError as exc:
                raise harness.ConfigError([str(exc)]) from None
            path = cmd_gen_stream(args.kind, args.scale, args.seed, args.out, args.n_tasks)
            print(path)
        elif args.command == "run":
            config = _config_from_args(args)
            if config.stream.get("manifest") and not FsPath(config.stream["manifest"]).is_file():
                raise harness.ConfigError([f"manifest {config.stream['manifest']} does not exist"])
            out = cmd_run(config)
            print(out)
        else:
            print(cmd_report(args.runs, args.out))
    except harness.ConfigError as exc:
        for msg in exc.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure after validation is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
