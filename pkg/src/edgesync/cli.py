"""Command-line entry points: ``edge``, ``cloud`` and ``harness``.

Log verbosity comes from the ``EDGESYNC_LOG`` environment variable
(``DEBUG``, ``INFO``, ``WARNING``; default ``WARNING``). Structured log
lines are single JSON objects on stderr.
"""

from __future__ import annotations

import argparse
import asyncio
import dataclasses
import json
import logging
import os
import signal
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .cloud import CloudServer, Coordinator, CostModel
from .core import FilterConfig, ModelParams
from .edge import EdgeAgent, run_edge
from .harness import (Manifest, RunReport, Strategy, default_manifest, dump_profile,
                      load_h0, profile_offline, rows_to_csv, run_experiment, sweep_edge_count,
                      sweep_filter_fraction)
from .modelkit import StudentModel, Teacher, WorkloadSpec, generate_stream, make_frozen_projection
from .trainer import TrainerConfig
from .urgency import UrgencyConfig

LOG_ENV = "EDGESYNC_LOG"


def setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s %(message)s", stream=sys.stderr)


def _read_json(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _split_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _load_manifest(path: str | None) -> Manifest:
    return Manifest.load(path) if path else default_manifest()


def shared_model(cfg: dict[str, Any]) -> StudentModel:
    """Zero-head student both services derive from the same ``model`` block."""
    feature_dim = int(cfg.get("feature_dim", 16))
    hidden_dim = int(cfg.get("hidden_dim", 32))
    num_classes = int(cfg.get("num_classes", 6))
    seed = int(cfg.get("seed", 0))
    frozen = make_frozen_projection(feature_dim, hidden_dim, seed)
    return StudentModel(ModelParams(frozen, np.zeros((num_classes, hidden_dim + 1)), 0),
                        rng_seed=seed)


def _workloads_from(cfg: dict[str, Any]) -> list[WorkloadSpec]:
    manifest = Manifest.from_dict(cfg["manifest"]) if isinstance(cfg.get("manifest"), dict) \
        else _load_manifest(cfg.get("manifest"))
    return manifest.build_workloads(int(cfg.get("seed", 0)))


# ---------------------------------------------------------------------------
# edge


def edge_main(argv: Sequence[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="edge", description="Run one edge agent against a cloud.")
    p.add_argument("--config", help="JSON edge config (filter, model, manifest, pacing)")
    p.add_argument("--connect", required=True, help="cloud address host:port")
    p.add_argument("--edge-id", required=True)
    args = p.parse_args(argv)
    setup_logging()
    cfg = _read_json(args.config)
    workloads = {w.edge_id: w for w in _workloads_from(cfg)}
    if args.edge_id not in workloads:
        p.error(f"edge id {args.edge_id!r} not in the manifest ({', '.join(workloads)})")
    spec = workloads[args.edge_id]
    teacher = Teacher(spec.num_classes, float(cfg.get("teacher_error", 0.0)),
                      int(cfg.get("seed", 0)))
    agent = EdgeAgent(args.edge_id, shared_model(cfg.get("model", {})),
                      FilterConfig.from_dict(cfg.get("filter", {})), label_fn=teacher.label)
    host, port = _split_addr(args.connect)
    asyncio.run(run_edge(agent, generate_stream(spec), host, port,
                         float(cfg.get("time_scale", 1.0)), cfg.get("window_timeout"),
                         float(cfg.get("linger", 1.0))))
    print(json.dumps({"edge_id": agent.edge_id, "accuracy": agent.accuracy,
                      "version": agent.current_version, "windows": len(agent.windows)}))
    return 0


# ---------------------------------------------------------------------------
# cloud


def build_coordinator(cfg: dict[str, Any], h0_path: str | None = None) -> Coordinator:
    workloads = _workloads_from(cfg)
    teacher = Teacher(workloads[0].num_classes, float(cfg.get("teacher_error", 0.0)),
                      int(cfg.get("seed", 0)))
    labels = {(s.edge_id, s.seq): teacher.label(s)
              for w in workloads for s in generate_stream(w)}

    def label(edge_id: str, seq: int, _features) -> int:
        return labels[(edge_id, seq)]

    trainer = TrainerConfig.from_dict(cfg.get("trainer", {}))
    if h0_path:
        trainer = dataclasses.replace(trainer, hyperparams=load_h0(h0_path))
    return Coordinator(shared_model(cfg.get("model", {})), trainer,
                       UrgencyConfig(**cfg.get("urgency", {})), label,
                       costs=CostModel.from_dict(cfg.get("costs", {})),
                       buffer_capacity=int(cfg.get("buffer_capacity", 2000)))


async def _serve(server: CloudServer, host: str, port: int, duration: float | None) -> None:
    await server.start(host, port)
    print(json.dumps({"event": "listening", "host": host, "port": server.port}), flush=True)
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError):
            pass
    try:
        await asyncio.wait_for(stop.wait(), timeout=duration)
    except asyncio.TimeoutError:
        pass
    await server.stop()


def cloud_main(argv: Sequence[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="cloud", description="Run the cloud coordinator service.")
    p.add_argument("--bind", default="127.0.0.1:7450", help="host:port (port 0 picks one)")
    p.add_argument("--profile", help="profile JSON carrying h0")
    p.add_argument("--config", help="JSON cloud config")
    p.add_argument("--metrics", help="metrics JSON written on shutdown")
    p.add_argument("--duration", type=float, help="stop after this many seconds")
    args = p.parse_args(argv)
    setup_logging()
    cfg = _read_json(args.config)
    server = CloudServer(build_coordinator(cfg, args.profile),
                         batch_wait=float(cfg.get("batch_wait", 0.2)),
                         metrics_path=args.metrics or cfg.get("metrics"))
    host, port = _split_addr(args.bind)
    try:
        asyncio.run(_serve(server, host, port, args.duration or cfg.get("duration")))
    except OSError as exc:
        print(f"cloud: cannot bind {args.bind}: {exc}", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# harness


def _cycles_csv(report: RunReport) -> str:
    keys = ["cycle", "start", "end", "selected", "epochs", "stop_reason", "label_seconds",
            "upload_seconds", "profiling_seconds", "train_seconds", "dispatch_seconds",
            "total_seconds"]
    return rows_to_csv([{k: c[k] for k in keys} for c in report.cycles]) or ",".join(keys) + "\n"


def harness_main(argv: Sequence[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="harness", description="Simulations, sweeps and profiling.")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="simulate one strategy")
    r.add_argument("--strategy", required=True, choices=[s.value for s in Strategy])
    r.add_argument("--manifest")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--profile", help="profile JSON whose h0 replaces the trainer hyperparams")
    r.add_argument("--out", required=True)

    f = sub.add_parser("sweep-filter", help="fixed-interval accuracy per keep fraction")
    f.add_argument("--manifest")
    f.add_argument("--fractions", default="0.05,0.2,0.5,0.6,0.7,0.8,0.9,1.0")
    f.add_argument("--seeds", default="0,1,2,3,4")
    f.add_argument("--interval", type=float, default=100.0)
    f.add_argument("--out", required=True)

    e = sub.add_parser("sweep-edges", help="accuracy per edge count")
    e.add_argument("--manifest")
    e.add_argument("--counts", default="1,2,4,7")
    e.add_argument("--seeds", default="0,1,2,3,4")
    e.add_argument("--out", required=True)

    pr = sub.add_parser("profile", help="offline BHO profiling to an h0 file")
    pr.add_argument("--manifest")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True)

    pl = sub.add_parser("plot", help="accuracy-vs-time series (values only) from a report")
    pl.add_argument("--report", required=True)
    pl.add_argument("--out", help="CSV path (default stdout)")

    args = p.parse_args(argv)
    setup_logging()

    if args.cmd == "run":
        manifest = _load_manifest(args.manifest)
        sim = manifest.sim
        if args.profile:
            sim = sim.replace(trainer=dataclasses.replace(sim.trainer,
                                                          hyperparams=load_h0(args.profile)))
        rep = run_experiment(args.strategy, manifest.build_workloads(args.seed), sim, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(rep.to_json())
        (out / "series.csv").write_text(rep.to_csv())
        (out / "cycles.csv").write_text(_cycles_csv(rep))
        print(json.dumps({"strategy": rep.strategy, "seed": rep.seed,
                          "overall_accuracy": rep.overall_accuracy,
                          "updates": rep.update_count}))
    elif args.cmd == "sweep-filter":
        manifest = _load_manifest(args.manifest)
        rows = sweep_filter_fraction(_floats(args.fractions), _ints(args.seeds),
                                     manifest.generator, manifest.edges, manifest.sim,
                                     args.interval)
        Path(args.out).write_text(rows_to_csv(rows))
    elif args.cmd == "sweep-edges":
        manifest = _load_manifest(args.manifest)
        rows = sweep_edge_count(_ints(args.counts), _ints(args.seeds), manifest.generator,
                                manifest.sim)
        Path(args.out).write_text(rows_to_csv(rows))
    elif args.cmd == "profile":
        manifest = _load_manifest(args.manifest)
        cfg = manifest.profile
        if args.seed != cfg.seed:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        prof = profile_offline(manifest.build_workloads(args.seed), cfg)
        Path(args.out).write_text(dump_profile(prof))
    elif args.cmd == "plot":
        rep = RunReport.from_dict(_read_json(args.report))
        text = rep.to_csv()
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
    return 0

