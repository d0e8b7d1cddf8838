"""Experiment configuration files, orchestration and CSV/checkpoint output.

A config is a TOML file::

    seed = 0

    [data]
    n_train = 2000
    n_test = 500

    [train]
    strategy = "FT_SINGLE"

    [regularizer]
    kind = "ALR"
    lambda = 0.5

    [[attacks]]
    name = "linf"
    kind = "linf"
    epsilon = 0.08
    introduced_at = 0

    [[attacks]]
    name = "flow"
    kind = "spatial_flow"
    epsilon = 0.5
    introduced_at = 1

Everything not given takes the documented defaults below.  The only
environment override is ``CRT_LAB_OUT`` for the output directory.

Wall time per time step always goes to ``timing.csv``.  The ``wall_time_s``
column of ``metrics.csv`` is written as 0 unless ``[output]
record_wall_time = true``, which keeps repeated runs byte-identical by
default.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import tomli

from . import data as D
from . import metrics as M
from .errors import ConfigError
from .model import save_checkpoint
from .regularizers import KINDS as REG_KINDS
from .regularizers import RegularizerConfig
from .threats import KINDS as THREAT_KINDS
from .threats import ThreatModel
from .trainer import STRATEGIES, KnowledgeSet, TrainConfig, run_timeline

CSV_VERSION = 1
OUT_ENV = "CRT_LAB_OUT"

DATA_DEFAULTS = {
    "kind": "shapes",
    "n_train": 2000,
    "n_test": 500,
    "H": 12,
    "W": 12,
    "k": 4,
    "noise_std": 0.1,
    "train_images": None,
    "train_labels": None,
    "test_images": None,
    "test_labels": None,
    "max_n": None,
}
TRAIN_DEFAULTS = {
    "epochs_initial": 30,
    "epochs_finetune": 10,
    "batch_size": 50,
    "base_lr_initial": 0.1,
    "lr_finetune": 0.001,
    "momentum": 0.9,
    "weight_decay": 0.0005,
    "strategy": "FT_SINGLE",
    "regularize_initial": True,
    "holdout_fraction": 0.1,
    "croce_window": 50,
}
REG_DEFAULTS = {"kind": "none", "lambda": 0.5, "sigma": 0.0, "inner_steps": 1, "target_layer": "logits"}
ATTACK_DEFAULTS = {"name": None, "kind": None, "epsilon": None, "introduced_at": None, "steps": 10, "step_size": None, "bins": 8}
MODEL_DEFAULTS = {"hidden": [64, 64]}
OUTPUT_DEFAULTS = {"dir": "runs/default", "record_wall_time": False}
EVAL_DEFAULTS = {"checkpoint": None, "attacks": None, "n": None}
DIAG_DEFAULTS = {"checkpoints": None, "attacks": None, "n": 200}
VERIFY_DEFAULTS = {"scale": 1.0}
CAR_KEYS = {"delta_known", "delta_unknown", "delta_t"}
TOP_KEYS = {"seed", "data", "model", "train", "regularizer", "attacks", "car", "output", "eval", "diag", "verify"}


@dataclass
class ExperimentConfig:
    seed: int
    data: dict
    hidden: tuple
    attacks: list
    train: TrainConfig
    car: M.CarCriteria | None
    out_dir: Path
    record_wall_time: bool
    eval: dict = field(default_factory=dict)
    diag: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)
    path: Path | None = None

    @property
    def knowledge(self):
        return KnowledgeSet(self.attacks)

    @property
    def image_shape(self):
        return (self.data["H"], self.data["W"])


def _section(raw, name, defaults, errors, required=False):
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        errors.append(f"[{name}]: expected a table")
        return dict(defaults)
    for key in sec:
        if key not in defaults:
            errors.append(f"[{name}].{key}: unknown field")
    merged = dict(defaults)
    merged.update({k: v for k, v in sec.items() if k in defaults})
    return merged


def _num(errors, where, value, lo=None, hi=None, integer=False, lo_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or (integer and not isinstance(value, int)):
        errors.append(f"{where}: expected {'an integer' if integer else 'a number'}, got {value!r}")
        return False
    if lo is not None and (value < lo or (lo_open and value == lo)):
        errors.append(f"{where}: {value} out of range (must be {'>' if lo_open else '>='} {lo})")
        return False
    if hi is not None and value > hi:
        errors.append(f"{where}: {value} out of range (must be <= {hi})")
        return False
    return True


def _validate_attacks(raw_attacks, errors):
    if not isinstance(raw_attacks, list) or not raw_attacks:
        errors.append("[[attacks]]: at least one attack is required")
        return []
    specs = []
    for i, entry in enumerate(raw_attacks):
        where = f"attacks[{i}]"
        if not isinstance(entry, dict):
            errors.append(f"{where}: expected a table")
            continue
        for key in entry:
            if key not in ATTACK_DEFAULTS:
                errors.append(f"{where}.{key}: unknown field")
        spec = dict(ATTACK_DEFAULTS)
        spec.update({k: v for k, v in entry.items() if k in ATTACK_DEFAULTS})
        for key in ("name", "kind", "epsilon", "introduced_at"):
            if spec[key] is None:
                errors.append(f"{where}.{key}: required")
        if spec["kind"] is not None and spec["kind"] not in THREAT_KINDS:
            errors.append(f"{where}.kind: {spec['kind']!r} not one of {list(THREAT_KINDS)}")
        if spec["name"] is not None and not isinstance(spec["name"], str):
            errors.append(f"{where}.name: expected a string")
        if spec["epsilon"] is not None:
            _num(errors, f"{where}.epsilon", spec["epsilon"], lo=0)
        if spec["introduced_at"] is not None:
            _num(errors, f"{where}.introduced_at", spec["introduced_at"], lo=0, integer=True)
        _num(errors, f"{where}.steps", spec["steps"], lo=0, integer=True)
        _num(errors, f"{where}.bins", spec["bins"], lo=1, integer=True)
        if spec["step_size"] is not None:
            _num(errors, f"{where}.step_size", spec["step_size"], lo=0, lo_open=True)
        specs.append(spec)
    names = [s["name"] for s in specs if isinstance(s["name"], str)]
    for dup in sorted({n for n in names if names.count(n) > 1}):
        errors.append(f"attacks: name {dup!r} used more than once")
    initial = [s["name"] for s in specs if s["introduced_at"] == 0]
    if len(initial) == 0:
        errors.append("attacks: exactly one attack must have introduced_at = 0, found none")
    elif len(initial) > 1:
        errors.append(f"attacks: exactly one attack must have introduced_at = 0, found {len(initial)}: {', '.join(map(str, initial))}")
    times = [s["introduced_at"] for s in specs if isinstance(s["introduced_at"], int)]
    if any(b < a for a, b in zip(times, times[1:])):
        errors.append(f"attacks: introduced_at must be non-decreasing in file order, got {times}")
    return specs


def validate_config(raw, path=None, out_override=None):
    """Build an :class:`ExperimentConfig`, collecting every violation before raising."""
    errors = []
    for key in raw:
        if key not in TOP_KEYS:
            errors.append(f"{key}: unknown top-level field")
    seed = raw.get("seed", 0)
    _num(errors, "seed", seed, lo=0, integer=True)
    dat = _section(raw, "data", DATA_DEFAULTS, errors)
    mdl = _section(raw, "model", MODEL_DEFAULTS, errors)
    trn = _section(raw, "train", TRAIN_DEFAULTS, errors)
    reg = _section(raw, "regularizer", REG_DEFAULTS, errors)
    out = _section(raw, "output", OUTPUT_DEFAULTS, errors)
    ev = _section(raw, "eval", EVAL_DEFAULTS, errors)
    dg = _section(raw, "diag", DIAG_DEFAULTS, errors)
    vf = _section(raw, "verify", VERIFY_DEFAULTS, errors)
    _num(errors, "[verify].scale", vf["scale"], lo=0, lo_open=True)
    for where, names in (("[eval].attacks", ev["attacks"]), ("[diag].attacks", dg["attacks"])):
        if names is not None and not (isinstance(names, list) and all(isinstance(n, str) for n in names)):
            errors.append(f"{where}: expected a list of attack names")
    if ev["n"] is not None:
        _num(errors, "[eval].n", ev["n"], lo=1, integer=True)
    _num(errors, "[diag].n", dg["n"], lo=1, integer=True)

    if dat["kind"] not in ("shapes", "idx"):
        errors.append(f"[data].kind: {dat['kind']!r} not one of ['shapes', 'idx']")
    if dat["kind"] == "shapes":
        _num(errors, "[data].n_train", dat["n_train"], lo=1, integer=True)
        _num(errors, "[data].n_test", dat["n_test"], lo=1, integer=True)
        _num(errors, "[data].H", dat["H"], lo=8, integer=True)
        _num(errors, "[data].W", dat["W"], lo=8, integer=True)
        if _num(errors, "[data].k", dat["k"], lo=2, integer=True):
            limit = D.num_templates(max(8, int(dat["H"])), max(8, int(dat["W"]))) if all(
                isinstance(dat[a], int) for a in ("H", "W")) else None
            if limit is not None and dat["k"] > limit:
                errors.append(f"[data].k: {dat['k']} out of range (at most {limit} glyph classes)")
        _num(errors, "[data].noise_std", dat["noise_std"], lo=0)
    else:
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not isinstance(dat[key], str):
                errors.append(f"[data].{key}: required path for kind = 'idx'")
    if not isinstance(mdl["hidden"], list) or not all(isinstance(h, int) and not isinstance(h, bool) and h >= 1 for h in mdl["hidden"]):
        errors.append(f"[model].hidden: expected a list of positive integers, got {mdl['hidden']!r}")

    _num(errors, "[train].epochs_initial", trn["epochs_initial"], lo=1, integer=True)
    _num(errors, "[train].epochs_finetune", trn["epochs_finetune"], lo=1, integer=True)
    _num(errors, "[train].batch_size", trn["batch_size"], lo=1, integer=True)
    _num(errors, "[train].base_lr_initial", trn["base_lr_initial"], lo=0, lo_open=True)
    _num(errors, "[train].lr_finetune", trn["lr_finetune"], lo=0, lo_open=True)
    if _num(errors, "[train].momentum", trn["momentum"], lo=0) and trn["momentum"] >= 1:
        errors.append(f"[train].momentum: {trn['momentum']} out of range (must be < 1)")
    _num(errors, "[train].weight_decay", trn["weight_decay"], lo=0)
    _num(errors, "[train].holdout_fraction", trn["holdout_fraction"], lo=0, hi=0.5, lo_open=True)
    _num(errors, "[train].croce_window", trn["croce_window"], lo=1, integer=True)
    if trn["strategy"] not in STRATEGIES:
        errors.append(f"[train].strategy: {trn['strategy']!r} not one of {list(STRATEGIES)}")
    if not isinstance(trn["regularize_initial"], bool):
        errors.append("[train].regularize_initial: expected true/false")

    if reg["kind"] not in REG_KINDS:
        errors.append(f"[regularizer].kind: {reg['kind']!r} not one of {list(REG_KINDS)}")
    _num(errors, "[regularizer].lambda", reg["lambda"], lo=0)
    _num(errors, "[regularizer].sigma", reg["sigma"], lo=0)
    _num(errors, "[regularizer].inner_steps", reg["inner_steps"], lo=1, integer=True)
    if reg["target_layer"] not in ("logits", "representation"):
        errors.append(f"[regularizer].target_layer: {reg['target_layer']!r} not 'logits' or 'representation'")

    car = None
    raw_car = raw.get("car")
    if raw_car is not None:
        if not isinstance(raw_car, dict) or set(raw_car) != CAR_KEYS:
            errors.append(f"[car]: expected exactly the fields {sorted(CAR_KEYS)}")
        else:
            ok = _num(errors, "[car].delta_known", raw_car["delta_known"], lo=0, lo_open=True)
            ok &= _num(errors, "[car].delta_unknown", raw_car["delta_unknown"], lo=0, lo_open=True)
            ok &= _num(errors, "[car].delta_t", raw_car["delta_t"], lo=0, integer=True)
            if ok and not raw_car["delta_known"] < raw_car["delta_unknown"]:
                errors.append("[car]: delta_known must be < delta_unknown")
            elif ok:
                car = M.CarCriteria(raw_car["delta_known"], raw_car["delta_unknown"], raw_car["delta_t"])

    if not isinstance(out["record_wall_time"], bool):
        errors.append("[output].record_wall_time: expected true/false")
    specs = _validate_attacks(raw.get("attacks"), errors)
    declared = {s["name"] for s in specs}
    for where, names in (("[eval].attacks", ev["attacks"]), ("[diag].attacks", dg["attacks"])):
        if isinstance(names, list):
            for n in names:
                if isinstance(n, str) and n not in declared:
                    errors.append(f"{where}: {n!r} is not a declared attack")
    if isinstance(dg["attacks"], list) and len(dg["attacks"]) != 2:
        errors.append(f"[diag].attacks: expected exactly two names, got {len(dg['attacks'])}")
    if errors:
        raise ConfigError(errors, path)

    attacks = [
        ThreatModel(s["kind"], float(s["epsilon"]), s["steps"], s["step_size"], s["name"], s["introduced_at"], s["bins"])
        for s in specs
    ]
    reg_cfg = RegularizerConfig(reg["kind"], float(reg["lambda"]), float(reg["sigma"]), reg["inner_steps"], reg["target_layer"])
    train_cfg = TrainConfig(
        epochs_initial=trn["epochs_initial"],
        epochs_finetune=trn["epochs_finetune"],
        batch_size=trn["batch_size"],
        base_lr_initial=float(trn["base_lr_initial"]),
        lr_finetune=float(trn["lr_finetune"]),
        momentum=float(trn["momentum"]),
        weight_decay=float(trn["weight_decay"]),
        strategy=trn["strategy"],
        regularizer=reg_cfg,
        regularize_initial=trn["regularize_initial"],
        hidden=tuple(mdl["hidden"]),
        holdout_fraction=float(trn["holdout_fraction"]),
        croce_window=trn["croce_window"],
        seed=seed,
    )
    out_dir = out_override or os.environ.get(OUT_ENV) or out["dir"]
    base = Path(path).parent if path is not None else Path.cwd()
    out_dir = Path(out_dir) if Path(out_dir).is_absolute() else base / out_dir
    return ExperimentConfig(seed, dat, tuple(mdl["hidden"]), attacks, train_cfg, car, out_dir,
                            out["record_wall_time"], ev, dg, vf, Path(path) if path else None)


def parse_config(path, out_override=None):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read config: {exc.strerror}"], path) from exc
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"syntax error: {exc}"], path) from exc
    return validate_config(raw, path, out_override)


def resolve_path(cfg, p):
    p = Path(p)
    if p.is_absolute() or cfg.path is None:
        return p
    return cfg.path.parent / p


def load_datasets(cfg):
    d = cfg.data
    if d["kind"] == "shapes":
        train = D.generate_shapes(cfg.seed, d["n_train"], d["H"], d["W"], d["k"], d["noise_std"], split="train")
        test = D.generate_shapes(cfg.seed, d["n_test"], d["H"], d["W"], d["k"], d["noise_std"], split="test")
        return train, test
    train = D.load_idx(resolve_path(cfg, d["train_images"]), resolve_path(cfg, d["train_labels"]), d["max_n"])
    test = D.load_idx(resolve_path(cfg, d["test_images"]), resolve_path(cfg, d["test_labels"]), d["max_n"], k=train.k)
    # downstream code reads the grid shape from the config
    d["H"], d["W"], d["k"] = train.H, train.W, train.k
    return train, test


def _cell(v):
    return f"{v:.6g}"


def metrics_csv(rows, attack_names, record_wall_time=True):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_step", "strategy", "clean", *attack_names, "avg_known", "union_known", "avg_all", "union_all", "wall_time_s"])
    for m in rows:
        w.writerow([
            m.time_step, m.strategy, _cell(m.clean_acc), *[_cell(m.attack_acc[n]) for n in attack_names],
            _cell(m.avg_known), _cell(m.union_known), _cell(m.avg_all), _cell(m.union_all),
            _cell(m.wall_time if record_wall_time else 0.0),
        ])
    return buf.getvalue()


def run_schedule(cfg, on_step=None, workers=1):
    """Train the full timeline in ``cfg`` and write checkpoints, CSV and JSON under ``cfg.out_dir``.

    Returns ``[(t, checkpoint_path, RunMetrics), ...]``.
    """
    train, test = load_datasets(cfg)
    knowledge = cfg.knowledge
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    histories = {}

    def step(t, model, metrics, history):
        ckpt = out / f"ckpt_t{t}.txt"
        save_checkpoint(model, ckpt)
        results.append((t, ckpt, metrics))
        histories[t] = history
        if on_step is not None:
            on_step(t, model, metrics, history)

    run_timeline(knowledge, train, test, cfg.train, cfg.image_shape, on_step=step, workers=workers)
    names = [tm.label for tm in knowledge.attacks]
    rows = [m for _, _, m in results]
    (out / "metrics.csv").write_text(metrics_csv(rows, names, cfg.record_wall_time))
    with open(out / "timing.csv", "w") as fh:
        fh.write("time_step,wall_time_s,epochs,best_epoch\n")
        for m in rows:
            fh.write(f"{m.time_step},{m.wall_time:.6g},{m.epochs},{m.best_epoch}\n")
    summary = {
        "csv_version": CSV_VERSION,
        "steps": [
            {**{k: v for k, v in asdict(m).items() if k != "wall_time" or cfg.record_wall_time}, "history": histories[m.time_step]}
            for m in rows
        ],
    }
    if cfg.car is not None:
        timeline = [(m.time_step, m.union_known_loss) for m in rows]
        verdicts = M.check_car(timeline, cfg.car, knowledge.times)
        summary["car"] = [{"time_step": t, "verdict": v, "threshold": th} for t, v, th in verdicts]
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return results
