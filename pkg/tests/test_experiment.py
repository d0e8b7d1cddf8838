import csv
import json
import re
import textwrap

import numpy as np
import pytest

from crtlab import cli
from crtlab.errors import ConfigError
from crtlab.experiment import TRAIN_DEFAULTS, metrics_csv, parse_config, run_schedule, validate_config
from crtlab.metrics import RunMetrics
from crtlab.model import load_checkpoint

ATTACKS = """
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
"""

SMALL = """
seed = 3
[data]
n_train = 200
n_test = 60
[model]
hidden = [16]
[train]
epochs_initial = 2
epochs_finetune = 1
batch_size = 25
lr_finetune = 0.01
[regularizer]
kind = "ALR"
[car]
delta_known = 1.5
delta_unknown = 4.0
delta_t = 1
""" + ATTACKS


def write(tmp_path, text, name="exp.toml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return p


def violations(text):
    import tomli

    with pytest.raises(ConfigError) as exc:
        validate_config(tomli.loads(textwrap.dedent(text)))
    return exc.value.violations


def test_minimal_config_takes_defaults(tmp_path, monkeypatch):
    monkeypatch.delenv("CRT_LAB_OUT", raising=False)
    cfg = parse_config(write(tmp_path, ATTACKS))
    assert cfg.seed == 0 and cfg.hidden == (64, 64)
    assert cfg.train.epochs_initial == TRAIN_DEFAULTS["epochs_initial"] == 30
    assert cfg.train.lr_finetune == 0.001
    assert cfg.train.regularizer.kind == "none"
    assert cfg.out_dir == tmp_path / "runs" / "default"
    assert cfg.car is None and cfg.record_wall_time is False
    assert [tm.label for tm in cfg.knowledge.at(0)] == ["linf"]


def test_two_initial_attacks_named_in_error():
    errs = violations(ATTACKS.replace("introduced_at = 1", "introduced_at = 0"))
    assert any("introduced_at = 0" in e and "linf" in e and "flow" in e for e in errs)


def test_no_initial_attack_is_rejected():
    errs = violations(ATTACKS.replace("introduced_at = 0", "introduced_at = 1"))
    assert any("found none" in e for e in errs)


def test_negative_lambda_is_a_range_error():
    errs = violations("[regularizer]\nkind = 'ALR'\nlambda = -1\n" + ATTACKS)
    assert errs == ["[regularizer].lambda: -1 out of range (must be >= 0)"]


def test_every_violation_is_listed():
    text = """
    colour = "red"
    [train]
    strategy = "FT_BEST"
    epochs_initial = 0
    momentum = 1.5
    [regularizer]
    lambda = -1
    [data]
    k = 99
    [[attacks]]
    name = "a"
    kind = "l3"
    epsilon = -0.1
    introduced_at = 0
    [[attacks]]
    name = "a"
    kind = "linf"
    epsilon = 0.1
    introduced_at = 0
    """
    errs = violations(text)
    for fragment in ("colour", "strategy", "epochs_initial", "momentum", "lambda", "[data].k",
                     "attacks[0].kind", "attacks[0].epsilon", "used more than once", "found 2"):
        assert any(fragment in e for e in errs), fragment
    assert len(errs) >= 10


def test_unknown_fields_and_bad_references():
    errs = violations(ATTACKS + "\n[eval]\nattacks = ['nope']\n[diag]\nattacks = ['linf']\n[train]\nepoch = 3\n")
    assert "[train].epoch: unknown field" in errs
    assert any("'nope' is not a declared attack" in e for e in errs)
    assert any("exactly two names" in e for e in errs)


def test_decreasing_introduction_times_rejected():
    text = ATTACKS + """
    [[attacks]]
    name = "late"
    kind = "l2"
    epsilon = 0.5
    introduced_at = 0
    """
    errs = violations(text)
    assert any("non-decreasing" in e for e in errs)


def test_car_requires_ordered_budgets():
    errs = violations(ATTACKS + "\n[car]\ndelta_known = 4.0\ndelta_unknown = 1.0\ndelta_t = 1\n")
    assert errs == ["[car]: delta_known must be < delta_unknown"]


def test_syntax_and_missing_file_are_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="syntax error"):
        parse_config(write(tmp_path, "seed = = 1"))
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "absent.toml")


def _row(t, **acc):
    return RunMetrics(t, "FT_SINGLE", 0.123456789, acc, union_known=0.25, avg_known=0.5, union_all=0.25,
                      avg_all=0.5, wall_time=12.3456789)


def test_metrics_csv_header_and_formatting():
    text = metrics_csv([_row(0, linf=2 / 3, flow=0.1)], ["linf", "flow"], record_wall_time=True)
    header, line = text.splitlines()
    assert header == "time_step,strategy,clean,linf,flow,avg_known,union_known,avg_all,union_all,wall_time_s"
    assert line == "0,FT_SINGLE,0.123457,0.666667,0.1,0.5,0.25,0.5,0.25,12.3457"
    assert metrics_csv([_row(0, linf=1.0, flow=1.0)], ["linf", "flow"], record_wall_time=False).splitlines()[1].endswith(",0")


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = parse_config(write(root, SMALL), out_override=str(root / "a"))
    results = run_schedule(cfg)
    return root, cfg, results


def test_schedule_writes_expected_files(small_run):
    root, cfg, results = small_run
    out = root / "a"
    assert sorted(p.name for p in out.iterdir()) == ["ckpt_t0.txt", "ckpt_t1.txt", "metrics.csv", "metrics.json", "timing.csv"]
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [r["time_step"] for r in rows] == ["0", "1"]
    assert [r["strategy"] for r in rows] == ["initial+ALR", "FT_SINGLE+ALR"]
    for r in rows:
        for key in ("clean", "linf", "flow", "avg_known", "union_known", "avg_all", "union_all"):
            assert 0.0 <= float(r[key]) <= 1.0
            assert len(re.sub(r"[^0-9]", "", r[key]).lstrip("0")) <= 6
    summary = json.loads((out / "metrics.json").read_text())
    assert [c["time_step"] for c in summary["car"]] == [0, 1]
    assert all("wall_time" not in s for s in summary["steps"])
    model = load_checkpoint(out / "ckpt_t1.txt")
    assert model.layer_dims == [144, 16, 4]


def test_rerun_is_byte_identical(small_run):
    root, _, _ = small_run
    cfg = parse_config(root / "exp.toml", out_override=str(root / "b"))
    run_schedule(cfg)
    for name in ("metrics.csv", "metrics.json", "ckpt_t0.txt", "ckpt_t1.txt"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes(), name


def test_cli_train_writes_to_env_override(tmp_path, monkeypatch):
    cfg_path = write(tmp_path, SMALL.replace("epochs_initial = 2", "epochs_initial = 1"))
    monkeypatch.setenv("CRT_LAB_OUT", str(tmp_path / "from_env"))
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "from_env" / "metrics.csv").exists()
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "metrics.csv").read_bytes() == (tmp_path / "from_env" / "metrics.csv").read_bytes()


def test_cli_eval_with_zero_budgets_reports_clean(small_run, tmp_path, capsys):
    root, _, _ = small_run
    text = SMALL.replace("epsilon = 0.08", "epsilon = 0.0").replace("epsilon = 0.5", "epsilon = 0.0")
    text += f'\n[eval]\ncheckpoint = "{(root / "a" / "ckpt_t1.txt").as_posix()}"\n'
    cfg_path = write(tmp_path, text)
    assert cli.main(["eval", "--config", str(cfg_path), "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ev" / "eval.csv")))
    assert len(rows) == 1
    r = rows[0]
    assert r["checkpoint"] == "ckpt_t1.txt"
    assert r["linf"] == r["flow"] == r["avg"] == r["union"] == r["clean"]


def test_cli_eval_defaults_to_latest_checkpoint(small_run, capsys):
    root, _, _ = small_run
    assert cli.main(["eval", "--config", str(root / "exp.toml"), "--out", str(root / "a")]) == 0
    assert "ckpt_t1.txt" in capsys.readouterr().out


def test_cli_diag_correlation_needs_three_points(small_run, capsys):
    root, _, _ = small_run
    assert cli.main(["diag", "--config", str(root / "exp.toml"), "--out", str(root / "a")]) == 0
    out = capsys.readouterr().out
    assert "fewer than 3 checkpoints" in out
    rows = list(csv.DictReader(open(root / "a" / "diag.csv")))
    assert [r["checkpoint"] for r in rows] == ["ckpt_t0.txt", "ckpt_t1.txt"]
    assert all(float(r["loss_gap"]) >= 0 for r in rows)


def test_cli_verify_reports_each_check(tmp_path, capsys):
    cfg_path = write(tmp_path, ATTACKS + "\n[verify]\nscale = 0.05\n")
    code = cli.main(["verify", "--config", str(cfg_path), "--out", str(tmp_path / "v")])
    report = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert code == (0 if all(r["passed"] for r in report) else 3)
    names = {r["name"] for r in report}
    assert {"gradients", "sandwich", "union", "croce"} <= {n.split("[")[0] for n in names}
    out = capsys.readouterr().out
    assert out.count("\n") == len(report)


@pytest.mark.parametrize(
    "setup,code",
    [
        (lambda d: write(d, "seed = -1\n" + ATTACKS), 2),
        (lambda d: d / "missing.toml", 2),
        (lambda d: write(d, ATTACKS + '\n[eval]\ncheckpoint = "nope.txt"\n'), 4),
        (lambda d: write(d, ATTACKS + '\n[data]\nkind = "idx"\ntrain_images = "a"\ntrain_labels = "b"\n'
                                       'test_images = "c"\ntest_labels = "d"\n'), 4),
    ],
)
def test_cli_exit_codes(setup, code, tmp_path, capsys):
    cmd = "eval" if code == 4 else "train"
    assert cli.main([cmd, "--config", str(setup(tmp_path)), "--out", str(tmp_path / "o")]) == code
    assert capsys.readouterr().err


def test_cli_numerical_failure_exit_code(tmp_path, capsys):
    text = SMALL.replace("lr_finetune = 0.01", "lr_finetune = 0.01\nbase_lr_initial = 1e150\nweight_decay = 0.0")
    with np.errstate(all="ignore"):
        code = cli.main(["train", "--config", str(write(tmp_path, text)), "--out", str(tmp_path / "o")])
    assert code == 5
    assert "t=0 epoch=" in capsys.readouterr().err


def test_cli_rejects_bad_workers(tmp_path):
    assert cli.main(["train", "--config", str(write(tmp_path, ATTACKS)), "--workers", "0"]) == 2
