"""Command-line entry point: ``gen``, ``train``, ``eval`` and ``ablate``.

Exit codes: 0 success, 2 config or argument error, 3 data error (missing or
malformed scenarios, checkpoints that do not fit the data), 4 numeric
divergence during training or simulation.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .config import (
    ConfigError,
    build,
    canonical_json,
    config_hash,
    merge,
    read_config_file,
    resolve_train_config,
    run_id_for,
    set_path,
    to_dict,
)
from .evaluation import (
    DEFAULT_SEGMENTS,
    DEFAULT_T_SIM_S,
    EvalConfig,
    MetricsReport,
    NetPredictor,
    evaluate,
    fmt,
    per_timestep_csv,
    segments_csv,
    summary_csv,
)
from .generator import generate_intersection
from .losses import LossValidationError, NumericError
from .net import CheckpointError, load_checkpoint, save_checkpoint
from .rng import SeedStreams
from .scenario import ScenarioParseError, ScenarioValidationError, load_scenario, save_scenario
from .sim import ContractError, SimulationError
from .trainer import TrainConfig, TrainingError, train

log = logging.getLogger("clforecast")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
INDEX_FILE = "index.json"
SPLITS = ("train", "val", "test")
ABLATION_AXES = ("policy", "scene_source", "sim_mask_ratio", "t_sim_train", "detach", "rotate_sigma_out")


class DataError(RuntimeError):
    pass


def split_counts(n: int) -> tuple[int, int, int]:
    """70/15/15 with the train share rounded up and the remainder going to test."""
    n_train = (70 * n + 99) // 100
    n_val = (15 * n) // 100
    return n_train, n_val, n - n_train - n_val


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# gen


def cmd_gen(out_dir, n_scenarios: int, seed: int, n_agents: int, density: float) -> Path:
    if n_scenarios < 1:
        raise ConfigError("n_scenarios must be >= 1")
    if n_agents < 2 or not 0 < density <= 1:
        raise ConfigError("n_agents must be >= 2 and density in (0, 1]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    streams = SeedStreams(seed)
    ids = [f"scn-{i:05d}" for i in range(n_scenarios)]
    for i, sid in enumerate(ids):
        s = generate_intersection(streams.int_seed("scenario", i), n_agents, density, scenario_id=sid)
        save_scenario(s, out / f"{sid}.json")
    order = streams.rng("split").permutation(n_scenarios)
    n_tr, n_va, _ = split_counts(n_scenarios)
    split = {}
    for rank, i in enumerate(order):
        split[ids[i]] = "train" if rank < n_tr else "val" if rank < n_tr + n_va else "test"
    params = {"n_scenarios": n_scenarios, "seed": seed, "n_agents": n_agents, "density": density}
    digest = config_hash(params)
    _write_json(out / INDEX_FILE, {
        "run_id": run_id_for(digest, "gen"),
        "config_hash": digest,
        "params": params,
        "scenarios": [{"id": sid, "file": f"{sid}.json", "split": split[sid]} for sid in ids],
    })
    return out / INDEX_FILE


def load_split(data_dir, split: str):
    d = Path(data_dir)
    try:
        index = json.loads((d / INDEX_FILE).read_text(encoding="utf-8"))
        entries = [e for e in index["scenarios"] if e["split"] == split]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"cannot read scenario index in {d}: {e}") from e
    if not entries:
        raise DataError(f"no {split} scenarios in {d}")
    try:
        return [load_scenario(d / e["file"]) for e in entries]
    except OSError as e:
        raise DataError(str(e)) from e


# train


def seconds_to_steps(t_s: float, dt: float, what: str = "t_sim") -> int:
    k = round(t_s / dt)
    if k < 1 or abs(k * dt - t_s) > 1e-9:
        raise ConfigError(f"{what} {t_s} s is not a positive multiple of dt = {dt} s")
    return k


def train_run(cfg: TrainConfig, data_dir, out_dir) -> Path:
    """Train one config and write checkpoint, epoch log, resolved config and manifest."""
    resolved = to_dict(cfg)
    digest = config_hash(resolved)
    run_id = run_id_for(digest)
    rdir = Path(out_dir) / run_id
    rdir.mkdir(parents=True, exist_ok=True)
    train_set, val_set = load_split(data_dir, "train"), load_split(data_dir, "val")
    log_path = rdir / "epochs.jsonl"
    with log_path.open("w", encoding="utf-8") as fh:
        fh.write(canonical_json({"run_id": run_id, "config_hash": digest}) + "\n")

        def on_epoch(rec):
            fh.write(canonical_json(rec._asdict()) + "\n")
            fh.flush()

        result = train(train_set, val_set, cfg, on_epoch)
    meta = {"run_id": run_id, "config_hash": digest, "best_epoch": result.best_epoch}
    ckpt_sha = save_checkpoint(result.model, rdir / "checkpoint.json", meta)
    _write_json(rdir / "config.json", {"run_id": run_id, "config_hash": digest, "config": resolved})
    manifest = {
        "run_id": run_id,
        "config_hash": digest,
        "config": resolved,
        "artifacts": {"checkpoint": "checkpoint.json", "epoch_log": "epochs.jsonl", "config": "config.json"},
        "checkpoint_sha256": ckpt_sha,
        "seeds": {"run": cfg.seed, "streams": ["init", "shuffle", "mask", "goal"]},
        "data": {
            "train": [s.scenario_id for s in train_set],
            "val": [s.scenario_id for s in val_set],
        },
        "epochs_run": len(result.trace),
    }
    _write_json(rdir / "manifest.json", manifest)
    return rdir / "manifest.json"


def train_flags(args) -> dict:
    flags: dict = {}
    for name in ("seed", "epochs", "batch_size", "policy", "scene_source", "sim_mask_ratio", "learning_rate"):
        v = getattr(args, name, None)
        if v is not None:
            flags[name] = v
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        set_path(flags, key, value)
    return flags


def cmd_train(config_path, data_dir, out_dir, flags: dict | None = None, t_sim_s: float | None = None,
              environ=None) -> Path:
    cfg = resolve_train_config(config_path, flags, environ)
    if t_sim_s is not None:
        cfg = build(TrainConfig, merge(to_dict(cfg), {"t_sim_steps": seconds_to_steps(t_sim_s, cfg.net.dt)}))
    return train_run(cfg, data_dir, out_dir)


# eval


def parse_models(specs: Sequence[str]) -> dict[str, list[str]]:
    models: dict[str, list[str]] = {}
    for spec in specs:
        name, sep, paths = spec.partition("=")
        if not sep or not name or not paths:
            raise ConfigError(f"--model expects NAME=CKPT[,CKPT...], got {spec!r}")
        if name in models:
            raise ConfigError(f"duplicate model name {name!r}")
        models[name] = [p for p in paths.split(",") if p]
    if not models:
        raise ConfigError("at least one --model is required")
    return models


def parse_float_list(text: str, what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"{what}: {e}") from e
    if not vals:
        raise ConfigError(f"{what} must not be empty")
    return vals


def parse_segments(text: str) -> tuple[tuple[float, float], ...]:
    out = []
    for part in text.split(","):
        a, sep, b = part.partition("-")
        try:
            w = (float(a), float(b))
        except ValueError as e:
            raise ConfigError(f"bad segment {part!r}; expected START-END") from e
        if not 0 <= w[0] <= w[1]:
            raise ConfigError(f"segment {part!r} must satisfy 0 <= START <= END")
        out.append(w)
    return tuple(out)


def _report_files(rep: MetricsReport, rdir: Path, run_id: str, digest: str) -> dict[str, str]:
    files = {
        "per_timestep": ("per_timestep.csv", per_timestep_csv),
        "summary": ("summary.csv", summary_csv),
        "segments": ("segments.csv", segments_csv),
    }
    for fname, writer in files.values():
        (rdir / fname).write_text(writer(rep, run_id, digest), encoding="utf-8")
    return {k: v[0] for k, v in files.items()}


def cmd_eval(models: dict[str, list[str]], data_dir, out_dir, t_sim_s: Sequence[float] = DEFAULT_T_SIM_S,
             split: str = "test", segments=DEFAULT_SEGMENTS) -> Path:
    if not t_sim_s:
        raise ConfigError("t_sim list must not be empty")
    scenarios = load_split(data_dir, split)
    dt = scenarios[0].dt
    ecfg = EvalConfig(tuple(seconds_to_steps(t, dt) for t in t_sim_s), tuple(tuple(w) for w in segments))
    predictors = {}
    digests = {}
    for name, paths in models.items():
        preds = []
        for p in paths:
            try:
                model, _ = load_checkpoint(p)
            except OSError as e:
                raise DataError(f"cannot read checkpoint {p}: {e}") from e
            c = model.cfg
            s = scenarios[0]
            if (c.t_pred_steps, c.t_in_steps, c.dt) != (s.t_pred_steps, s.t_in_steps, s.dt):
                raise CheckpointError(f"checkpoint {p} horizons do not match scenarios in {data_dir}")
            model.eval()
            preds.append(NetPredictor(model))
        predictors[name] = preds
        digests[name] = [_sha256_file(p) for p in paths]
    params = {
        "models": digests,
        "t_sim_steps": list(ecfg.t_sim_steps_list),
        "segments": [list(w) for w in ecfg.segment_windows],
        "split": split,
        "scenarios": [s.scenario_id for s in scenarios],
    }
    digest = config_hash(params)
    run_id = run_id_for(digest, "eval")
    rdir = Path(out_dir) / run_id
    rdir.mkdir(parents=True, exist_ok=True)
    rep = evaluate(scenarios, predictors, ecfg)
    files = _report_files(rep, rdir, run_id, digest)
    _write_json(rdir / "manifest.json", {
        "run_id": run_id, "config_hash": digest, "config": params, "artifacts": files,
        "checkpoints": models,
    })
    return rdir / "manifest.json"


# ablate

_MATRIX_KEYS = {"base", "axes", "seeds", "eval"}
_EVAL_KEYS = {"t_sim_s", "split"}


def _apply_axis(d: dict, axis: str, value, dt: float) -> dict:
    if axis == "t_sim_train":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"axes.t_sim_train: expected seconds, got {value!r}")
        return set_path(d, "t_sim_steps", seconds_to_steps(float(value), dt, "axes.t_sim_train"))
    target = {"detach": "sim.detach_between_steps", "rotate_sigma_out": "net.rotate_sigma_out"}.get(axis, axis)
    return set_path(d, target, value)


def plan_matrix(matrix: dict) -> tuple[list[dict], list[int], list[tuple[str, ...]], list[tuple]]:
    """Expand the matrix into per-cell resolved config dicts (one seed each)."""
    unknown = set(matrix) - _MATRIX_KEYS
    if unknown:
        raise ConfigError(f"unknown matrix key {sorted(unknown)[0]!r}")
    axes = matrix.get("axes") or {}
    if not isinstance(axes, dict) or not axes:
        raise ConfigError("matrix.axes must be a non-empty object")
    for a, vals in axes.items():
        if a not in ABLATION_AXES:
            raise ConfigError(f"unknown ablation axis {a!r}; allowed: {', '.join(ABLATION_AXES)}")
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"axes.{a} must be a non-empty list")
    seeds = matrix.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("matrix.seeds must be a non-empty list of integers")
    base = build(TrainConfig, matrix.get("base") or {})
    names = tuple(axes)
    combos = list(itertools.product(*(axes[a] for a in names)))
    cells = []
    for combo in combos:
        d = to_dict(base)
        for a, v in zip(names, combo):
            _apply_axis(d, a, v, base.net.dt)
        cfg = build(TrainConfig, d)  # enum and range checks
        cells.append(to_dict(cfg))
    return cells, seeds, [names], combos


def cmd_ablate(matrix_path, data_dir, out_dir) -> Path:
    matrix = read_config_file(matrix_path)
    cells, seeds, (names,), combos = plan_matrix(matrix)
    ev = matrix.get("eval") or {}
    unknown = set(ev) - _EVAL_KEYS
    if unknown:
        raise ConfigError(f"unknown config key 'eval.{sorted(unknown)[0]}'")
    t_sim_s = ev.get("t_sim_s", [1.0, 0.5])
    split = ev.get("split", "test")
    if split not in SPLITS:
        raise ConfigError(f"eval.split must be one of {SPLITS}")
    digest = config_hash(matrix)
    run_id = run_id_for(digest, "ablate")
    adir = Path(out_dir) / run_id
    (adir / "cells").mkdir(parents=True, exist_ok=True)
    scenarios = load_split(data_dir, split)
    dt = scenarios[0].dt
    ecfg = EvalConfig(tuple(seconds_to_steps(t, dt) for t in t_sim_s))
    cell_rows, per_value = [], {}
    for ci, (cell, combo) in enumerate(zip(cells, combos)):
        preds, manifests = [], []
        for seed in seeds:
            cfg = build(TrainConfig, merge(cell, {"seed": seed}))
            mpath = train_run(cfg, data_dir, adir / "cells")
            man = json.loads(mpath.read_text(encoding="utf-8"))
            model, _ = load_checkpoint(mpath.parent / man["artifacts"]["checkpoint"])
            model.eval()
            preds.append(NetPredictor(model))
            manifests.append(man)
        rep = evaluate(scenarios, {"cell": preds}, ecfg)
        for k in ecfg.t_sim_steps_list:
            c = rep.runs[("cell", k, "collision")].mean(1)
            d = rep.runs[("cell", k, "l2")].mean(1)
            cell_rows.append([ci, *[json.dumps(v) for v in combo], k * dt, float(c.mean()) * 100, float(d.mean()),
                              ";".join(m["run_id"] for m in manifests)])
            for a, v in zip(names, combo):
                bucket = per_value.setdefault((a, json.dumps(v), k), ([], []))
                bucket[0].extend(c.tolist())
                bucket[1].extend(d.tolist())
    header = f"# run_id={run_id} config_hash={digest}\n"
    cols = ["cell", *names, "t_sim_s", "collision_mean", "l2_mean", "run_ids"]
    lines = [",".join(cols)] + [",".join(v if isinstance(v, str) else fmt(v) for v in r) for r in cell_rows]
    (adir / "cells.csv").write_text(header + "\n".join(lines) + "\n", encoding="utf-8")
    comp = ["axis,value,t_sim_s,collision_mean,collision_std,l2_mean,l2_std,n_runs"]
    for (a, v, k), (c, d) in per_value.items():
        c, d = np.asarray(c), np.asarray(d)
        comp.append(",".join([a, v.replace(",", ";"), fmt(k * dt), fmt(c.mean() * 100), fmt(c.std() * 100),
                              fmt(d.mean()), fmt(d.std()), str(c.size)]))
    (adir / "comparison.csv").write_text(header + "\n".join(comp) + "\n", encoding="utf-8")
    _write_json(adir / "manifest.json", {
        "run_id": run_id, "config_hash": digest, "matrix": matrix, "seeds": seeds,
        "artifacts": {"cells": "cells.csv", "comparison": "comparison.csv"},
        "cells": [r[-1] for r in cell_rows[::len(ecfg.t_sim_steps_list)]],
    })
    return adir / "manifest.json"


# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clforecast", description="Closed-loop training and evaluation of ego trajectory predictors.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic intersection scenarios")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--n-scenarios", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-agents", type=int, default=8)
    g.add_argument("--density", type=float, default=0.5)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", dest="config_path")
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--policy")
    t.add_argument("--scene-source")
    t.add_argument("--sim-mask-ratio", type=float)
    t.add_argument("--t-sim-s", type=float, help="training rollout length in seconds")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, e.g. net.hidden_dim=32")

    e = sub.add_parser("eval", help="closed-loop evaluation of checkpoints")
    e.add_argument("--model", action="append", default=[], metavar="NAME=CKPT[,CKPT...]")
    e.add_argument("--data-dir", required=True)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--t-sim-s", default=",".join(str(t) for t in DEFAULT_T_SIM_S))
    e.add_argument("--split", default="test", choices=SPLITS)
    e.add_argument("--segments", default="0.5-1.0,4.0-6.0", help="comma-separated START-END windows in seconds")

    a = sub.add_parser("ablate", help="train and evaluate an ablation matrix")
    a.add_argument("--matrix", required=True, dest="matrix_path")
    a.add_argument("--data-dir", required=True)
    a.add_argument("--out-dir", required=True)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    if args.command == "gen":
        out = cmd_gen(args.out_dir, args.n_scenarios, args.seed, args.n_agents, args.density)
    elif args.command == "train":
        out = cmd_train(args.config_path, args.data_dir, args.out_dir, train_flags(args), args.t_sim_s)
    elif args.command == "eval":
        out = cmd_eval(parse_models(args.model), args.data_dir, args.out_dir,
                       parse_float_list(args.t_sim_s, "--t-sim-s"), args.split, parse_segments(args.segments))
    else:
        out = cmd_ablate(args.matrix_path, args.data_dir, args.out_dir)
    print(out)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except SystemExit as e:  # argparse usage errors, --help, --version
        return e.code if isinstance(e.code, int) else EXIT_CONFIG
    except (TrainingError, NumericError, SimulationError) as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ScenarioParseError, ScenarioValidationError, CheckpointError, ContractError,
            LossValidationError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
