"""``crt-lab {train|eval|verify|diag} --config <path> [--out <dir>] [--workers N]``.

Exit status: 0 success, 1 unexpected failure, 2 invalid config, 3 a
verification check failed, 4 unreadable dataset or checkpoint, 5 a
numerical failure (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import certify
from . import metrics as M
from .errors import CheckpointError, ConfigError, DatasetError, GradientError, NonFiniteError
from .experiment import load_datasets, parse_config, resolve_path, run_schedule
from .model import load_checkpoint
from .rng import name_key, substream

log = logging.getLogger("crtlab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_VERIFY, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5


def _attacks(cfg, names):
    if names is None:
        return list(cfg.attacks)
    by_name = {tm.label: tm for tm in cfg.attacks}
    return [by_name[n] for n in names]


def cmd_train(cfg, args):
    def report(t, model, m, history):
        accs = " ".join(f"{k}={v:.3f}" for k, v in m.attack_acc.items())
        print(f"t={t} {m.strategy}: clean={m.clean_acc:.3f} {accs} union_known={m.union_known:.3f} ({m.wall_time:.1f}s)")

    results = run_schedule(cfg, on_step=report, workers=args.workers)
    print(f"wrote {len(results)} checkpoints and metrics.csv to {cfg.out_dir}")
    return EXIT_OK


def cmd_eval(cfg, args):
    ckpt = cfg.eval.get("checkpoint")
    path = resolve_path(cfg, ckpt) if ckpt else _latest_checkpoint(cfg.out_dir)
    model = load_checkpoint(path)
    _, test = load_datasets(cfg)
    if cfg.eval.get("n"):
        test = test.subset(np.arange(min(cfg.eval["n"], len(test))))
    tms = _attacks(cfg, cfg.eval.get("attacks"))
    x, y = test.images, test.labels
    clean = float(np.mean(M.predict(model, x) == y))
    correct = []
    for tm in tms:
        rng = substream(cfg.seed, "eval", 0, name_key(tm.label))
        correct.append(M.attacked_outcomes(model, tm, x, y, rng, M.EVAL_STEPS, image_shape=cfg.image_shape)[0])
    accs = [float(c.mean()) for c in correct]
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.out_dir / "eval.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["checkpoint", "clean", *[tm.label for tm in tms], "avg", "union"])
        w.writerow([Path(path).name, f"{clean:.6g}", *[f"{a:.6g}" for a in accs],
                    f"{np.mean(accs):.6g}", f"{M.union_from_correct(correct):.6g}"])
    print(f"{Path(path).name}: clean={clean:.4f} " + " ".join(f"{tm.label}={a:.4f}" for tm, a in zip(tms, accs)))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_verify(cfg, args):
    results = certify.run_suite(cfg.seed, cfg.verify.get("scale", 1.0))
    for r in results:
        print(r.line())
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    report = [{"name": r.name, "passed": r.passed, "instances": r.instances, "candidates": r.candidates,
               "summary": r.summary} for r in results]
    (cfg.out_dir / "verify.json").write_text(json.dumps(report, indent=2) + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _checkpoint_sequence(out_dir):
    found = []
    for p in Path(out_dir).glob("ckpt_t*.txt"):
        m = re.fullmatch(r"ckpt_t(\d+)\.txt", p.name)
        if m:
            found.append((int(m.group(1)), p))
    return [p for _, p in sorted(found)]


def _latest_checkpoint(out_dir):
    seq = _checkpoint_sequence(out_dir)
    if not seq:
        raise CheckpointError(f"no ckpt_t*.txt files under {out_dir}; run `crt-lab train` first or set [eval].checkpoint")
    return seq[-1]


def cmd_diag(cfg, args):
    paths = cfg.diag.get("checkpoints")
    paths = [resolve_path(cfg, p) for p in paths] if paths else _checkpoint_sequence(cfg.out_dir)
    if not paths:
        raise CheckpointError(f"no checkpoints to diagnose under {cfg.out_dir}")
    names = cfg.diag.get("attacks") or [tm.label for tm in cfg.attacks[:2]]
    if len(names) < 2:
        raise ConfigError(["[diag].attacks: the loss-gap diagnostic needs two attacks"], cfg.path)
    tm1, tm2 = _attacks(cfg, names[:2])
    _, test = load_datasets(cfg)
    test = test.subset(np.arange(min(cfg.diag.get("n", 200), len(test))))
    rows = []
    for i, p in enumerate(paths):
        model = load_checkpoint(p)
        gap, dist = M.gap_history_point(model, test.images, test.labels, tm1, tm2,
                                        substream(cfg.seed, "diag", i), image_shape=cfg.image_shape)
        rows.append((Path(p).name, gap, dist))
        print(f"{Path(p).name}: loss_gap={gap:.6g} distance_sum={dist:.6g}")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.out_dir / "diag.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["checkpoint", "loss_gap", "distance_sum"])
        for name, gap, dist in rows:
            w.writerow([name, f"{gap:.6g}", f"{dist:.6g}"])
    if len(rows) >= 3:
        corr = M.correlation_diagnostic([r[1] for r in rows], [r[2] for r in rows])
        print(f"pearson r = {corr.r:.4f}" if corr.defined else "pearson r undefined (constant series)")
    else:
        print("fewer than 3 checkpoints: correlation not computed")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "verify": cmd_verify, "diag": cmd_diag}


def build_parser():
    parser = argparse.ArgumentParser(prog="crt-lab", description="Continual robust training experiments.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="experiment TOML file")
    parser.add_argument("--out", default=None, help="output directory (overrides the config and CRT_LAB_OUT)")
    parser.add_argument("--workers", type=int, default=1, help="threads for evaluation attacks (training is sequential)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(args.config, args.out)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, GradientError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
