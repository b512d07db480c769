"""Experiment orchestration: TOML configs, subcommands, and on-disk artifacts.

Every run writes ``trace.csv`` (fixed column order, floats at 17 significant
digits so doubles round-trip), a flat ``summary.txt``, ``final_weights.bin``,
and one small self-contained SVG line chart per metric.  Re-running a config
with the same seed reproduces ``trace.csv`` byte for byte.

Exit codes: 0 ok, 2 config error, 3 divergence, 4 protocol error.
"""

from __future__ import annotations

import argparse
import math
import os
import struct
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import models, netproto, sim
from .client import ClientConfig
from .core import (
    ConfigError,
    GlobalState,
    Hyperparams,
    ParamVector,
    STREAM_CLIENT,
    STREAM_POLICY,
    derive_rng,
)
from .data import Dataset, generate_blobs, load_csv, partition_iid, split_train_eval
from .distill import DistillPlan, distill_chain
from .models import KINDS, ModelSpec
from .server import FixedIterations, IterationPolicy, TableIterations, UniformIterations
from .sim import DeviceProfile, ExperimentTrace, SimConfig, bundled_profile_path

__all__ = [
    "ExperimentConfig",
    "DataConfig",
    "DistillSettings",
    "load_config",
    "build_dataset",
    "build_sim_config",
    "save_weights",
    "load_weights",
    "write_trace_csv",
    "write_summary",
    "svg_line_chart",
    "run",
    "main",
]

MODES = ("simulate-async", "simulate-sync", "serve", "client", "distill", "gradcheck", "sweep")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_PROTOCOL = 4

WEIGHTS_MAGIC = b"FEDW0001"


# --------------------------------------------------------------------------
# weights persistence


def save_weights(path, w: ParamVector) -> None:
    """Write magic, little-endian uint64 dim, then dim little-endian float64s."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<Q", w.dim))
        fh.write(w.values.astype("<f8").tobytes())


def load_weights(path, expected_dim: Optional[int] = None) -> ParamVector:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != WEIGHTS_MAGIC:
        raise ConfigError(f"{path}: bad magic {blob[:8]!r}")
    if len(blob) < 16:
        raise ConfigError(f"{path}: truncated header")
    (dim,) = struct.unpack("<Q", blob[8:16])
    body = blob[16:]
    if len(body) != 8 * dim:
        raise ConfigError(f"{path}: expected {8 * dim} weight bytes, found {len(body)}")
    w = ParamVector(np.frombuffer(body, dtype="<f8"))
    if expected_dim is not None and w.dim != expected_dim:
        raise ConfigError(f"{path}: holds dim {w.dim}, model needs {expected_dim}")
    return w


# --------------------------------------------------------------------------
# artifact writers


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_trace_csv(path, trace: ExperimentTrace) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(sim.TRACE_COLUMNS) + "\n")
        for r in trace.rows:
            fh.write(
                ",".join([
                    str(r.t), _fmt(r.wall_clock_s), _fmt(r.global_loss),
                    _fmt(r.grad_norm_sq), _fmt(r.accuracy), str(r.staleness),
                    _fmt(r.beta_t), r.client_id,
                ]) + "\n"
            )


def write_summary(path, entries: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in entries.items():
            fh.write(f"{key}={_fmt(value)}\n")


def svg_line_chart(xs: Sequence[float], ys: Sequence[float], title: str,
                   width: int = 640, height: int = 360) -> str:
    """A dependency-free SVG polyline chart; NaN points are dropped."""
    pts = [(x, y) for x, y in zip(xs, ys) if not (math.isnan(x) or math.isnan(y))]
    margin = 45
    body_w, body_h = width - 2 * margin, height - 2 * margin
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
    ]
    if pts:
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
        xr = (x1 - x0) or 1.0
        yr = (y1 - y0) or 1.0
        coords = " ".join(
            f"{margin + (x - x0) / xr * body_w:.2f},{height - margin - (y - y0) / yr * body_h:.2f}"
            for x, y in pts
        )
        parts += [
            f'<polyline points="{coords}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>',
            f'<rect x="{margin}" y="{margin}" width="{body_w}" height="{body_h}" '
            'fill="none" stroke="#999"/>',
            f'<text x="{margin}" y="{height - 8}" font-size="11">{_fmt(float(x0))}</text>',
            f'<text x="{width - margin}" y="{height - 8}" text-anchor="end" font-size="11">'
            f"{_fmt(float(x1))}</text>",
            f'<text x="{margin - 5}" y="{height - margin}" text-anchor="end" font-size="11">'
            f"{y0:.4g}</text>",
            f'<text x="{margin - 5}" y="{margin + 4}" text-anchor="end" font-size="11">'
            f"{y1:.4g}</text>",
        ]
    else:
        parts.append(
            f'<text x="{width / 2}" y="{height / 2}" text-anchor="middle">no data</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def _write_metric_charts(out_dir: Path, trace: ExperimentTrace) -> None:
    ts = [float(r.t) for r in trace.rows]
    for name, ys in (
        ("global_loss", [r.global_loss for r in trace.rows]),
        ("accuracy", [r.accuracy for r in trace.rows]),
        ("grad_norm_sq", [r.grad_norm_sq for r in trace.rows]),
    ):
        (out_dir / f"{name}.svg").write_text(
            svg_line_chart(ts, ys, f"{name} vs aggregation"), encoding="utf-8"
        )


# --------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    source: str = "blobs"
    num_classes: int = 3
    dim: int = 10
    samples_per_class: int = 500
    cluster_spread: float = 1.0
    seed: int = 7
    eval_fraction: float = 0.2
    path: Optional[Path] = None


@dataclass
class DistillSettings:
    teacher_hidden: int = 64
    ta_hidden: tuple[int, ...] = (16,)
    student_hidden: int = 4
    epochs_per_stage: int = 3
    alpha: float = 0.5
    target_mode: str = "teacher-argmax"


@dataclass
class ExperimentConfig:
    mode: str
    spec: ModelSpec
    data: DataConfig
    hp: Hyperparams
    n_clients: int = 4
    eval_every: int = 1
    out_dir: Path = Path("runs/out")
    device_profiles: Optional[list[DeviceProfile]] = None
    initial_weights: Optional[Path] = None
    h_policy: str = "fixed"
    h_fixed: Optional[int] = None
    h_table: Optional[dict[str, int]] = None
    iterations_per_local_epoch: int = 1
    distill: Optional[DistillSettings] = None
    sweep_a: tuple[float, ...] = (0.0, 0.3, 0.5, 0.9)
    sweep_beta: tuple[float, ...] = (0.3, 0.5, 0.7, 0.9)
    host: str = "127.0.0.1"
    port: int = netproto.DEFAULT_PORT

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"[experiment] mode: unknown mode {self.mode!r}")
        if self.n_clients < 1:
            raise ConfigError("[experiment] n_clients must be >= 1")
        if self.h_policy not in ("fixed", "uniform", "table"):
            raise ConfigError("[experiment] h_policy must be fixed, uniform, or table")
        if self.h_policy == "fixed" and self.h_fixed is None:
            object.__setattr__(self, "h_fixed", self.hp.h_max)
        if self.h_policy == "table" and not self.h_table:
            raise ConfigError("[experiment] h_table required for the table policy")
        if self.distill is None:
            self.distill = DistillSettings()
        if self.initial_weights is not None and not Path(self.initial_weights).is_file():
            raise ConfigError(f"[experiment] initial_weights: no such file {self.initial_weights}")
        if self.data.source == "csv" and (self.data.path is None or not self.data.path.is_file()):
            raise ConfigError(f"[data] path: no such file {self.data.path}")


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def _get(sec: dict, section: str, key: str, kind, default):
    if key not in sec:
        return default
    value = sec[key]
    try:
        if kind is int and isinstance(value, bool):
            raise TypeError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"[{section}] {key}: cannot interpret {value!r}") from None


def load_config(path, mode_override: Optional[str] = None) -> ExperimentConfig:
    """Parse a TOML experiment file; relative paths resolve against the file."""
    cfg_path = Path(path)
    try:
        raw = tomllib.loads(cfg_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {cfg_path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{cfg_path}: {exc}") from None
    base = cfg_path.parent

    exp = _section(raw, "experiment")
    mode = mode_override or _get(exp, "experiment", "mode", str, None)
    if mode is None:
        raise ConfigError("[experiment] mode is required (or use a subcommand)")

    mdl = _section(raw, "model")
    kind = _get(mdl, "model", "kind", str, "softmax-classifier")
    if kind not in KINDS:
        raise ConfigError(f"[model] kind: unknown kind {kind!r}")
    dat = _section(raw, "data")
    data_cfg = DataConfig(
        source=_get(dat, "data", "source", str, "blobs"),
        num_classes=_get(dat, "data", "num_classes", int, 3),
        dim=_get(dat, "data", "dim", int, 10),
        samples_per_class=_get(dat, "data", "samples_per_class", int, 500),
        cluster_spread=_get(dat, "data", "cluster_spread", float, 1.0),
        seed=_get(dat, "data", "seed", int, 7),
        eval_fraction=_get(dat, "data", "eval_fraction", float, 0.2),
        path=(base / dat["path"]) if "path" in dat else None,
    )
    if data_cfg.source not in ("blobs", "csv"):
        raise ConfigError("[data] source must be 'blobs' or 'csv'")

    hyp = _section(raw, "hyperparams")
    hp_kwargs = {}
    for key, kind_ in (
        ("eta", float), ("beta", float), ("a", float), ("theta", float),
        ("h_min", int), ("h_max", int), ("e_total", int), ("k_bound", int),
        ("batch_size", int), ("momentum", float), ("alpha_kd", float), ("seed", int),
    ):
        if key in hyp:
            hp_kwargs[key] = _get(hyp, "hyperparams", key, kind_, None)
    try:
        hp = Hyperparams(**hp_kwargs)
    except ConfigError as exc:
        raise ConfigError(f"[hyperparams] {exc}") from None

    input_dim = _get(mdl, "model", "input_dim", int, data_cfg.dim)
    num_classes = _get(mdl, "model", "num_classes", int, data_cfg.num_classes)
    hidden = _get(mdl, "model", "hidden_dim", int, None)
    spec_kwargs = dict(
        kind=kind,
        input_dim=input_dim,
        l2_coeff=_get(mdl, "model", "l2_coeff", float, 0.0),
        hidden_dim=hidden,
    )
    if kind != "l2-linear-regression":
        spec_kwargs["num_classes"] = num_classes
    try:
        spec = ModelSpec(**spec_kwargs)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"[model] {exc}") from None
    if _get(mdl, "model", "freeze_all_but_last", bool, False):
        spec = _freeze_all_but_last(spec)

    profiles = None
    if "device_profiles" in exp:
        ref = str(exp["device_profiles"])
        prof_path = base / ref
        if not prof_path.is_file():
            try:
                prof_path = bundled_profile_path(ref)
            except ConfigError:
                raise ConfigError(
                    f"[experiment] device_profiles: no file or bundled profile {ref!r}"
                ) from None
        profiles = sim.load_device_profiles(prof_path)

    dist_sec = _section(raw, "distill")
    dist = DistillSettings(
        teacher_hidden=_get(dist_sec, "distill", "teacher_hidden", int, 64),
        ta_hidden=tuple(_get(dist_sec, "distill", "ta_hidden", list, [16])),
        student_hidden=_get(dist_sec, "distill", "student_hidden", int, 4),
        epochs_per_stage=_get(dist_sec, "distill", "epochs_per_stage", int, 3),
        alpha=_get(dist_sec, "distill", "alpha", float, hp.alpha_kd),
        target_mode=_get(dist_sec, "distill", "target_mode", str, "teacher-argmax"),
    )
    sweep_sec = _section(raw, "sweep")

    out_dir = Path(os.environ.get("FEDASYNC_OUT", "") or base / _get(exp, "experiment", "out_dir", str, "runs/out"))
    srv = _section(raw, "serve")
    return ExperimentConfig(
        mode=mode,
        spec=spec,
        data=data_cfg,
        hp=hp,
        n_clients=_get(exp, "experiment", "n_clients", int, 4),
        eval_every=_get(exp, "experiment", "eval_every", int, 1),
        out_dir=out_dir,
        device_profiles=profiles,
        initial_weights=(base / exp["initial_weights"]) if "initial_weights" in exp else None,
        h_policy=_get(exp, "experiment", "h_policy", str, "fixed"),
        h_fixed=_get(exp, "experiment", "h_fixed", int, None),
        h_table={str(k): int(v) for k, v in exp["h_table"].items()} if "h_table" in exp else None,
        iterations_per_local_epoch=_get(exp, "experiment", "iterations_per_local_epoch", int, 1),
        distill=dist,
        sweep_a=tuple(float(v) for v in sweep_sec.get("a", (0.0, 0.3, 0.5, 0.9))),
        sweep_beta=tuple(float(v) for v in sweep_sec.get("beta", (0.3, 0.5, 0.7, 0.9))),
        host=_get(srv, "serve", "host", str, "127.0.0.1"),
        port=_get(srv, "serve", "port", int, netproto.DEFAULT_PORT),
    )


def _freeze_all_but_last(spec: ModelSpec) -> ModelSpec:
    """Frozen mask covering everything except the output layer (fine-tune mode)."""
    dim = models.param_dim(spec)
    if spec.kind != "two-layer":
        raise ConfigError("[model] freeze_all_but_last applies to the two-layer model")
    head = spec.hidden_dim * spec.num_classes + spec.num_classes
    mask = [True] * (dim - head) + [False] * head
    return replace(spec, frozen_mask=tuple(mask))


# --------------------------------------------------------------------------
# builders


def build_dataset(dc: DataConfig) -> tuple[Dataset, Dataset]:
    if dc.source == "csv":
        full = load_csv(dc.path)
    else:
        full = generate_blobs(dc.num_classes, dc.dim, dc.samples_per_class,
                              dc.cluster_spread, dc.seed)
    return split_train_eval(full, dc.eval_fraction)


def make_policy(ec: ExperimentConfig) -> IterationPolicy:
    if ec.h_policy == "fixed":
        return FixedIterations(ec.h_fixed)
    if ec.h_policy == "uniform":
        return UniformIterations(derive_rng(ec.hp.seed, STREAM_POLICY))
    return TableIterations(ec.h_table)


def build_sim_config(
    ec: ExperimentConfig,
    record_params: bool = False,
    record_gradients: bool = False,
) -> SimConfig:
    train, eval_ds = build_dataset(ec.data)
    shards = partition_iid(train, ec.n_clients, ec.hp.seed)
    if ec.initial_weights is not None:
        w0 = load_weights(ec.initial_weights, expected_dim=models.param_dim(ec.spec))
    else:
        w0 = models.init_params(ec.spec, ec.hp.seed)
    return SimConfig(
        spec=ec.spec,
        train=train,
        shards=shards,
        hp=ec.hp,
        policy=make_policy(ec),
        w0=w0,
        eval_dataset=eval_ds,
        profiles=ec.device_profiles,
        eval_every=ec.eval_every,
        iterations_per_local_epoch=ec.iterations_per_local_epoch,
        record_params=record_params,
        record_gradients=record_gradients,
    )


# --------------------------------------------------------------------------
# mode runners


def _emit_run_artifacts(ec: ExperimentConfig, state, trace: ExperimentTrace) -> None:
    out = ec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_trace_csv(out / "trace.csv", trace)
    entries = {"mode": ec.mode, "n_clients": ec.n_clients, "e_total": ec.hp.e_total}
    entries.update(trace.summary())
    if trace.notes:
        entries["notes"] = "; ".join(trace.notes)
    write_summary(out / "summary.txt", entries)
    save_weights(out / "final_weights.bin", state.w)
    _write_metric_charts(out, trace)


def _run_simulate(ec: ExperimentConfig) -> int:
    cfg = build_sim_config(ec)
    runner = sim.run_async if ec.mode == "simulate-async" else sim.run_sync
    state, trace = runner(cfg)
    _emit_run_artifacts(ec, state, trace)
    print(f"{ec.mode}: {len(trace.rows)} aggregations, "
          f"simulated {trace.total_wall_clock_s:.1f}s, artifacts in {ec.out_dir}")
    if trace.diverged:
        print("run diverged:", "; ".join(trace.notes), file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _run_serve(ec: ExperimentConfig) -> int:
    cfg = build_sim_config(ec)
    weights, trace = netproto.serve((ec.host, ec.port), cfg)
    state = GlobalState(w=weights, t=len(trace.rows), max_staleness_seen=trace.max_staleness,
                        aggregations=len(trace.rows))
    _emit_run_artifacts(ec, state, trace)
    print(f"serve: completed {len(trace.rows)} aggregations, artifacts in {ec.out_dir}")
    return EXIT_OK


def _run_remote_client(ec: ExperimentConfig, index: int) -> int:
    if not 0 <= index < ec.n_clients:
        raise ConfigError(f"--client-index {index} outside [0, {ec.n_clients})")
    train, _ = build_dataset(ec.data)
    shards = partition_iid(train, ec.n_clients, ec.hp.seed)
    cfg = ClientConfig(
        client_id=shards[index].owner,
        dataset=train,
        shard=shards[index],
        spec=ec.spec,
        hp=ec.hp,
        rng=derive_rng(ec.hp.seed, STREAM_CLIENT, index),
    )
    status = netproto.run_client((ec.host, ec.port), cfg)
    return EXIT_OK if status == 0 else EXIT_PROTOCOL


def _two_layer_spec(ec: ExperimentConfig, hidden: int) -> ModelSpec:
    return ModelSpec(
        kind="two-layer",
        input_dim=ec.spec.input_dim,
        num_classes=ec.spec.num_classes or ec.data.num_classes,
        hidden_dim=hidden,
        l2_coeff=ec.spec.l2_coeff,
    )


def _run_distill(ec: ExperimentConfig) -> int:
    ds = ec.distill
    train, eval_ds = build_dataset(ec.data)
    plan = DistillPlan(
        teacher=_two_layer_spec(ec, ds.teacher_hidden),
        tas=tuple(_two_layer_spec(ec, h) for h in ds.ta_hidden),
        student=_two_layer_spec(ec, ds.student_hidden),
        alpha=ds.alpha,
        epochs_per_stage=ds.epochs_per_stage,
        target_mode=ds.target_mode,
    )
    result = distill_chain(plan, train, eval_ds, ec.hp)
    out = ec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trace.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("stage,name,hidden_dim,param_dim,train_loss,eval_accuracy\n")
        for i, st in enumerate(result.stages):
            fh.write(
                f"{i},{st.name},{st.spec.hidden_dim},{models.param_dim(st.spec)},"
                f"{_fmt(st.train_loss)},{_fmt(st.eval_accuracy)}\n"
            )
    entries = {"mode": "distill", "stages": len(result.stages)}
    for st in result.stages:
        entries[f"{st.name}_accuracy"] = st.eval_accuracy
        entries[f"{st.name}_wall_time_s"] = st.wall_time_s
    entries["total_wall_time_s"] = result.total_wall_time_s
    write_summary(out / "summary.txt", entries)
    save_weights(out / "final_weights.bin", result.student.weights)
    print(f"distill: {len(result.stages)} stages, student accuracy "
          f"{result.student.eval_accuracy:.3f}, artifacts in {ec.out_dir}")
    return EXIT_OK


def _run_gradcheck(seed: int = 0, draws: int = 100, tol: float = 1e-5) -> int:
    rng = np.random.default_rng(seed)
    specs = [
        ModelSpec("l2-linear-regression", input_dim=4, l2_coeff=0.01),
        ModelSpec("logistic-regression", input_dim=4, num_classes=2, l2_coeff=0.01),
        ModelSpec("softmax-classifier", input_dim=4, num_classes=3, l2_coeff=0.01),
        ModelSpec("two-layer", input_dim=3, num_classes=3, hidden_dim=5, l2_coeff=0.01),
    ]
    ok = True
    for spec in specs:
        worst = models.gradcheck(spec, rng, draws=draws)
        passed = worst < tol
        ok = ok and passed
        print(f"gradcheck {spec.kind}: max relative error {worst:.3e} "
              f"({'ok' if passed else 'FAIL'})")
    return EXIT_OK if ok else 1


def _run_sweep(ec: ExperimentConfig) -> int:
    out = ec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    base_cfg = build_sim_config(ec)
    init_loss, _, _ = sim.evaluate_global(base_cfg, base_cfg.w0)
    rows = []
    any_diverged = False
    for a in ec.sweep_a:
        for beta in ec.sweep_beta:
            hp_cell = replace(ec.hp, a=a, beta=beta)
            cfg = replace(base_cfg, hp=hp_cell, policy=make_policy(ec))
            state, trace = sim.run_async(cfg)
            write_trace_csv(out / f"trace_a{a:g}_beta{beta:g}.csv", trace)
            rows.append((a, beta, init_loss, trace.final_loss, trace.final_accuracy,
                         trace.min_grad_norm_sq, trace.max_staleness, trace.diverged))
            any_diverged = any_diverged or trace.diverged
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("a,beta,initial_loss,final_loss,final_accuracy,min_grad_norm_sq,"
                 "max_staleness,diverged\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    best = max(rows, key=lambda r: (not r[7], r[4]))
    write_summary(out / "summary.txt", {
        "mode": "sweep", "cells": len(rows),
        "best_a": best[0], "best_beta": best[1], "best_accuracy": best[4],
        "any_diverged": any_diverged,
    })
    print(f"sweep: {len(rows)} cells, best accuracy {best[4]:.3f} "
          f"at a={best[0]:g}, beta={best[1]:g}; artifacts in {out}")
    return EXIT_DIVERGED if any_diverged else EXIT_OK


def run(ec: ExperimentConfig, client_index: int = 0) -> int:
    """Execute a validated configuration; returns a process exit code."""
    if ec.mode in ("simulate-async", "simulate-sync"):
        return _run_simulate(ec)
    if ec.mode == "serve":
        return _run_serve(ec)
    if ec.mode == "client":
        return _run_remote_client(ec, client_index)
    if ec.mode == "distill":
        return _run_distill(ec)
    if ec.mode == "sweep":
        return _run_sweep(ec)
    if ec.mode == "gradcheck":
        return _run_gradcheck(seed=ec.hp.seed)
    raise ConfigError(f"unhandled mode {ec.mode!r}")


# --------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedasync",
        description="Asynchronous federated optimization experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for mode in MODES:
        p = sub.add_parser(mode, help=f"run in {mode} mode")
        if mode == "gradcheck":
            p.add_argument("--config", "-c", default=None, help="optional config (seed only)")
            p.add_argument("--seed", type=int, default=0)
        else:
            p.add_argument("--config", "-c", required=True, help="TOML experiment file")
        p.add_argument("--out", default=None, help="override output directory")
        if mode in ("serve", "client"):
            p.add_argument("--host", default=None)
            p.add_argument("--port", type=int, default=None)
        if mode == "client":
            p.add_argument("--client-index", type=int, default=0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck" and args.config is None:
            return _run_gradcheck(seed=args.seed)
        ec = load_config(args.config, mode_override=args.command)
        if args.out and not os.environ.get("FEDASYNC_OUT"):
            ec.out_dir = Path(args.out)
        if getattr(args, "host", None):
            ec.host = args.host
        if getattr(args, "port", None):
            ec.port = args.port
        return run(ec, client_index=getattr(args, "client_index", 0))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
