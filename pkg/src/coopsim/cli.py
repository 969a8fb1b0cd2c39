"""Command-line front end: traces, codec profiles, runs, and sweeps.

Outputs are machine-readable CSV/JSON only; plotting happens elsewhere.
Exit codes: 0 ok, 2 bad input, 3 incomplete profile, 4 internal failure.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import __version__
from .codec import default_profile_clouds, profile, surrogate_dataset
from .errors import CoopsimError, ConfigError, FrameError, ProfileIncompleteError
from .simpipe import (
    RunConfig,
    collect_metrics,
    generate_trace,
    load_trace,
    run_simulation,
    save_trace,
    write_frame_csv,
    write_summary,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PROFILE = 3
EXIT_INTERNAL = 4
WORKERS_ENV = "COOPSIM_WORKERS"

SWEEP_PARAMS = ("bandwidth", "H", "cavs")
SWEEP_COLUMNS = (
    "param", "value", "policy", "seed", "version", "mean_loss", "mean_rf",
    "latency_ms_p50", "latency_ms_p90", "latency_ms_p99", "frac_within_h",
    "selected_fraction", "bytes_per_frame", "reused_objects",
    "infeasible_cav_frames",
)


def version_string() -> str:
    """Package version, suffixed with the git commit when run from a checkout."""
    root = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             cwd=root, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except OSError:
        pass
    return __version__


@dataclass
class RunManifest:
    config: str
    trace: str
    policy: str
    out_dir: str
    seed: int
    version: str

    def write(self, path) -> None:
        rec = {"config": self.config, "trace": self.trace, "policy": self.policy,
               "out_dir": self.out_dir, "seed": self.seed, "version": self.version}
        with open(path, "w") as fh:
            json.dump(rec, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _require_fresh(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")


def _make_out_dir(path: str, force: bool) -> None:
    _require_fresh(path, force)
    os.makedirs(path, exist_ok=True)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if getattr(args, "policy", None):
        cfg = replace(cfg, policy=args.policy)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen_trace(args) -> int:
    _require_fresh(args.out, args.force)
    trace = generate_trace(args.cavs, args.frames, seed=args.seed)
    save_trace(args.out, trace)
    per_cav = [len(c.objects) for f in trace for c in f.cavs]
    hist = np.bincount(per_cav) if per_cav else np.zeros(1, dtype=np.int64)
    stats = {
        "seed": args.seed,
        "version": version_string(),
        "cavs": args.cavs,
        "frames": args.frames,
        "objects_per_frame": [sum(len(c.objects) for c in f.cavs) for f in trace],
        "visible_per_cav_hist": {str(i): int(n) for i, n in enumerate(hist) if n},
        "visible_per_cav_mean": float(np.mean(per_cav)) if per_cav else 0.0,
    }
    with open(args.out + ".stats.json", "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.out} ({args.cavs} cavs x {args.frames} frames, "
          f"mean visible {stats['visible_per_cav_mean']:.1f})")
    return EXIT_OK


def cmd_profile(args) -> int:
    _require_fresh(args.out, args.force)
    if args.mode == "surrogate":
        samples = args.samples if args.samples else 120
        ds = surrogate_dataset(samples_per_key=samples)
    else:
        samples = args.samples if args.samples else 30
        # collection itself is allowed to finish; validation reports shortfalls
        ds = profile(default_profile_clouds(seed=0, per_bucket=samples),
                     min_samples=30)
    ds.save(args.out)
    meta = {"mode": args.mode, "samples": samples, "seed": 0,
            "version": version_string()}
    with open(args.out + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.out} ({len(ds.keys())} keys, {samples} samples each)")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    trace = load_trace(args.trace)
    _make_out_dir(args.out, args.force)
    manifest = RunManifest(config=args.config or "<defaults>", trace=args.trace,
                           policy=cfg.policy, out_dir=args.out, seed=cfg.seed,
                           version=version_string())
    manifest.write(os.path.join(args.out, "manifest.json"))
    result = run_simulation(trace, cfg)
    summary = collect_metrics(result)
    summary["version"] = manifest.version
    write_frame_csv(os.path.join(args.out, "frames.csv"), result.rows)
    write_summary(os.path.join(args.out, "summary.json"), summary)
    infeasible = summary["infeasible_cav_frames"]
    if infeasible:
        print(f"note: {infeasible} CAV-frames had no feasible compression point",
              file=sys.stderr)
    print(f"{cfg.policy}: p99 {summary['latency_ms_p99']:.1f} ms, "
          f"mean loss {summary['mean_loss']:.4f}, "
          f"within-H {summary['frac_within_h']:.3f}")
    return EXIT_OK


def _sweep_worker(payload) -> dict:
    cfg, trace_spec, out_dir, param, value = payload
    if trace_spec[0] == "path":
        trace = load_trace(trace_spec[1])
        trace_name = trace_spec[1]
    else:
        _, cavs, frames, seed = trace_spec
        trace = generate_trace(cavs, frames, seed=seed)
        trace_name = f"<generated cavs={cavs} frames={frames} seed={seed}>"
    os.makedirs(out_dir, exist_ok=True)
    manifest = RunManifest(config="<sweep>", trace=trace_name, policy=cfg.policy,
                           out_dir=out_dir, seed=cfg.seed,
                           version=version_string())
    manifest.write(os.path.join(out_dir, "manifest.json"))
    result = run_simulation(trace, cfg)
    summary = collect_metrics(result)
    summary["version"] = manifest.version
    write_frame_csv(os.path.join(out_dir, "frames.csv"), result.rows)
    write_summary(os.path.join(out_dir, "summary.json"), summary)
    row = {"param": param, "value": value, "policy": cfg.policy,
           "seed": cfg.seed, "version": manifest.version}
    for key in SWEEP_COLUMNS[5:]:
        row[key] = summary[key]
    return row


def cmd_sweep(args) -> int:
    if len(args.values) < 2:
        raise ConfigError("sweep needs at least two --values")
    base = _load_config(args)
    if args.param == "cavs":
        values = []
        for v in args.values:
            if float(v) != int(float(v)):
                raise ConfigError(f"cavs values must be integers, got {v}")
            values.append(int(float(v)))
    else:
        values = [float(v) for v in args.values]

    _make_out_dir(args.out, args.force)
    if args.param == "cavs":
        trace_specs = [("gen", v, args.frames, base.seed) for v in values]
    else:
        if args.trace:
            spec = ("path", args.trace)
        else:
            path = os.path.join(args.out, "base_trace.jsonl")
            save_trace(path, generate_trace(args.cavs, args.frames, seed=base.seed))
            spec = ("path", path)
        trace_specs = [spec] * len(values)

    jobs = []
    for value, spec in zip(values, trace_specs):
        if args.param == "bandwidth":
            cfg = replace(base, bandwidth_hz=value)
        elif args.param == "H":
            cfg = replace(base, H_ms=value)
        else:
            cfg = base
        sub = os.path.join(args.out, f"{args.param}-{value:g}")
        jobs.append((cfg, spec, sub, args.param, value))

    workers = max(1, int(os.environ.get(WORKERS_ENV, "1")))
    if workers == 1:
        rows = [_sweep_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_worker, jobs))

    csv_path = os.path.join(args.out, "sweep.csv")
    with open(csv_path, "w") as fh:
        fh.write(",".join(SWEEP_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in SWEEP_COLUMNS) + "\n")
    for row in rows:
        print(f"{args.param}={row['value']:g}: mean loss {row['mean_loss']:.4f}, "
              f"p99 {row['latency_ms_p99']:.1f} ms")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coopsim",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="generate a synthetic mobility trace")
    p.add_argument("--cavs", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("profile", help="build a codec measurement dataset")
    p.add_argument("--mode", choices=("codec", "surrogate"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("run", help="run one policy over a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--policy", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a parameter sweep, one row per value")
    p.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--trace", default=None)
    p.add_argument("--cavs", type=int, default=150)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--config", default=None)
    p.add_argument("--policy", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ProfileIncompleteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROFILE
    except (ConfigError, FrameError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CoopsimError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - last-resort guard
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
