"""Run-directory commands: synth, pretrain, evaluate, pareto.

Each command writes a ``manifest.json`` before doing any work and finalises
it on exit, so an interrupted run still records what was attempted.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .data import DataError, SplitPlan, SynthConfig, generate, load_jsonl, minority_group, save_jsonl, split_subjects
from .encoders import config_hash, load_checkpoint, save_checkpoint
from .fairness import (
    MetricPreconditionError, fairness_report, pareto_mask, pareto_svg, read_fairness_csv,
    write_fairness_csv, write_pareto_csv, write_predictions_csv,
)
from .losses import write_loss_csv
from .training import ConfigError, TrainConfig, TrainingAborted, finetune, fit_probe, predict, pretrain

SEED_ENV = "FAIRWELL_SEED"


class RunLocked(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    input_paths: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    started: float = 0.0
    finished: float | None = None
    wall_clock_s: float | None = None
    status: str = "running"
    version: str = __version__

    def write(self, path: Path):
        doc = dict(self.__dict__, python=platform.python_version(), numpy=np.__version__)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def read_json(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def resolve_seed(cli_seed: int | None, config: Mapping) -> int:
    """--seed beats the config file, which beats FAIRWELL_SEED; default 0."""
    if cli_seed is not None:
        return int(cli_seed)
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return 0


@contextmanager
def run_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise RunLocked(f"{out_dir} is in use by another process (remove {lock} if stale)") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@contextmanager
def manifest(path: Path, command: str, config: dict, seed: int, inputs: Mapping[str, str]):
    m = RunManifest(command, config, seed, {k: file_sha256(v) for k, v in inputs.items()},
                    {k: str(v) for k, v in inputs.items()}, started=time.time())
    m.write(path)
    try:
        yield m
        m.status = "ok"
    except BaseException as exc:
        m.status = f"failed: {type(exc).__name__}: {exc}"
        raise
    finally:
        m.finished = time.time()
        m.wall_clock_s = m.finished - m.started
        m.write(path)


def _log(quiet: bool, msg: str):
    if not quiet:
        print(msg)


# ----------------------------------------------------------------------------


def cmd_synth(config_path: str | None, out_path: str, seed: int | None = None, quiet: bool = False) -> Path:
    raw = read_json(config_path)
    raw["seed"] = resolve_seed(seed, raw)
    try:
        config = SynthConfig.from_dict(raw)
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    inputs = {"config": config_path} if config_path else {}
    with run_lock(out.parent), manifest(out.with_suffix(".manifest.json"), "synth",
                                        config.to_dict(), config.seed, inputs) as m:
        records = generate(config)
        save_jsonl(records, out)
        m.artifacts["data"] = str(out)
    for g in sorted({r.group for r in records}):
        members = [r for r in records if r.group == g]
        _log(quiet, f"group {g}: n={len(members)} positive rate={np.mean([r.label for r in members]):.3f}")
    return out


def cmd_pretrain(config_path: str | None, data_path: str, out_dir: str, seed: int | None = None,
                 method: str | None = None, pooling: str | None = None, quiet: bool = False) -> Path:
    raw = read_json(config_path)
    raw["seed"] = resolve_seed(seed, raw)
    if method is not None:
        raw["method"] = method
    if pooling is not None:
        raw["pooling"] = pooling
    config = TrainConfig.from_dict(raw)
    records = load_jsonl(data_path)
    config = config.resolve(records)
    out = Path(out_dir)
    inputs = {"data": data_path, **({"config": config_path} if config_path else {})}
    with run_lock(out), manifest(out / "manifest.json", "pretrain", config.to_dict(), config.seed, inputs) as m:
        plan = split_subjects(records, config.split, config.seed)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "split.json").write_text(json.dumps(plan.to_json(), indent=2, sort_keys=True) + "\n")
        chash = config_hash(config.to_dict())
        try:
            result = pretrain(plan.select(records, "train"), config)
        except TrainingAborted as exc:
            write_loss_csv(out / "losses.csv", exc.log)
            save_checkpoint(exc.model, out / "checkpoint.json", chash)
            raise
        write_loss_csv(out / "losses.csv", result.log)
        save_checkpoint(result.model, out / "checkpoint.json", chash)
        m.artifacts.update({k: str(out / f) for k, f in [
            ("config", "config.json"), ("split", "split.json"),
            ("losses", "losses.csv"), ("checkpoint", "checkpoint.json")]})
    last = result.log[-1]
    _log(quiet, f"{config.method} epochs={config.epochs} steps={len(result.log)} final loss={last.total:.6g}")
    return out


def cmd_evaluate(run_dir: str, data_path: str | None = None, quiet: bool = False) -> Path:
    out = Path(run_dir)
    ckpt = out / "checkpoint.json"
    if not ckpt.exists():
        raise ConfigError(f"{run_dir}: no checkpoint.json; run pretrain first")
    config = TrainConfig.from_dict(read_json(out / "config.json"))
    if data_path is None:
        data_path = _pretrain_data_path(out)
    records = load_jsonl(data_path)
    plan = SplitPlan.from_json(read_json(out / "split.json"))
    train, val, test = (plan.select(records, s) for s in ("train", "val", "test"))
    present = {r.group for r in test}
    groups = sorted({r.group for r in records})
    if len(present) < 2:
        missing = sorted(set(groups) - present)
        raise MetricPreconditionError(f"test split lacks group(s) {missing}; fairness ratios need both groups")
    with run_lock(out), manifest(out / "evaluate.manifest.json", "evaluate", config.to_dict(), config.seed,
                                 {"data": data_path, "checkpoint": ckpt}) as m:
        model, _ = load_checkpoint(ckpt)
        if config.head == "finetune":
            model, probe = finetune(model, train, val, config)
            save_checkpoint(model, out / "checkpoint_finetuned.json", config_hash(config.to_dict()))
        else:
            probe = fit_probe(model, train, val, config.modality_order, config.probe_l2)
        (out / "probe.json").write_text(json.dumps(probe.to_json(), indent=2, sort_keys=True) + "\n")
        preds = predict(model, probe, test)
        write_predictions_csv(preds, out / "predictions.csv")
        numerator = config.numerator_group or minority_group(records)
        report = fairness_report(preds, numerator, out.name)
        write_fairness_csv([report], out / "fairness.csv")
        m.artifacts.update({k: str(out / f) for k, f in [
            ("probe", "probe.json"), ("predictions", "predictions.csv"), ("fairness", "fairness.csv")]})
    _log(quiet, f"acc={report.acc:.4f} f1={report.f1:.4f} sp={report.sp:.4f} eopp={report.eopp:.4f} "
                f"eodd={report.eodd:.4f} eacc={report.eacc:.4f} agg_f={report.agg_f:.4f}"
                + (f" flags={','.join(report.flags)}" if report.flags else ""))
    return out / "fairness.csv"


def _pretrain_data_path(run_dir: Path) -> str:
    try:
        return json.loads((run_dir / "manifest.json").read_text())["input_paths"]["data"]
    except (FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{run_dir}: cannot recover the data path; pass --data") from exc


def cmd_pareto(run_dirs: Sequence[str], out_dir: str, quiet: bool = False) -> Path:
    rows = []
    for d in run_dirs:
        path = Path(d) / "fairness.csv"
        if not path.exists():
            _log(quiet, f"skipping {d}: not evaluated")
            continue
        rows += [(r["run_id"] or Path(d).name, r["f1"], r["agg_f"]) for r in read_fairness_csv(path)]
    if not rows:
        raise ConfigError("no evaluated runs (fairness.csv) among the given directories")
    out = Path(out_dir)
    inputs = {f"run{i}": Path(d) / "fairness.csv" for i, d in enumerate(run_dirs)
              if (Path(d) / "fairness.csv").exists()}
    with run_lock(out), manifest(out / "pareto.manifest.json", "pareto", {"run_dirs": list(run_dirs)}, 0,
                                 inputs) as m:
        mask = pareto_mask([(f1, agg) for _, f1, agg in rows])
        write_pareto_csv(rows, mask, out / "pareto.csv")
        (out / "pareto.svg").write_text(pareto_svg(rows, mask))
        m.artifacts.update(pareto=str(out / "pareto.csv"), svg=str(out / "pareto.svg"))
    front = [r[0] for r, on in zip(rows, mask) if on]
    _log(quiet, f"{len(front)} of {len(rows)} runs on the front: {', '.join(front)}")
    return out / "pareto.csv"
