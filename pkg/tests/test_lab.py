import json
import re
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from comatch import cli, lab
from comatch.errors import ConfigurationError, NumericalError
from comatch.plots import render_curves

TINY = """
run_id = tiny
synth_classes = 3
synth_train_per_class = 20
synth_test_per_class = 10
synth_side = 8
noise_rate = 0.4
epochs = 3
lr_decay_start = 1
t_k = 2
batch_size = 32
mlp_hidden = 16
checkpoint = false
"""


@pytest.fixture
def tiny(tmp_path):
    return replace(lab.parse_config(TINY), output_dir=str(tmp_path / "runs"))


def test_config_round_trip(tiny):
    again = lab.parse_config(lab.format_config(tiny))
    assert again == tiny
    assert lab.parse_config("lambda = 0.95").lam == 0.95


@pytest.mark.parametrize("text", ["epochs = many", "flavour = 3", "no equals sign", "checkpoint = maybe",
                                  "algorithm = decoupling", "lambda = 1.5", "aug_transforms = Fog",
                                  "model = cnn7", "tau_scale = 0"])
def test_config_errors(text):
    with pytest.raises(ConfigurationError):
        lab.parse_config(text).validate()


def test_effective_tau_defaults_to_noise_rate(tiny):
    assert tiny.effective_tau == 0.4
    assert replace(tiny, tau_scale=0.5).effective_tau == 0.2
    assert replace(tiny, tau=0.1).effective_tau == 0.1


def test_run_writes_a_complete_directory(tiny):
    run_dir = lab.run_experiment(replace(tiny, checkpoint=True))
    for name in ("config.snapshot", "metrics.csv", "curves.svg", "summary.json", "timing.json",
                 "checkpoints/final.ckpt"):
        assert (run_dir / name).exists(), name
    lines = (run_dir / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,test_acc,test_acc_f,test_acc_g,label_precision,mean_total_loss," \
                       "mean_selected_loss,rate,lr,wall_ms"
    assert len(lines) == 3 + 1
    assert (run_dir / "status.txt").read_text() == "completed\n"
    rows = lab.read_metrics(run_dir / "metrics.csv")
    for r in rows:
        assert 0 <= r["test_acc"] <= 1 and 0 <= r["label_precision"] <= 1
        assert r["test_acc"] == pytest.approx((r["test_acc_f"] + r["test_acc_g"]) / 2, abs=1e-6)
        assert r["wall_ms"] is None
    assert lab.parse_config((run_dir / "config.snapshot").read_text()) == replace(tiny, checkpoint=True)


def test_identical_configs_give_identical_bytes(tiny, tmp_path):
    a = lab.run_experiment(tiny)
    b = lab.run_experiment(replace(tiny, output_dir=str(tmp_path / "other")))
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "curves.svg").read_bytes() == (b / "curves.svg").read_bytes()


def test_eval_cadence_leaves_blank_cells(tiny):
    run_dir = lab.run_experiment(replace(tiny, eval_every=2, algorithm="standard"))
    rows = lab.read_metrics(run_dir / "metrics.csv")
    assert [r["test_acc"] is None for r in rows] == [True, False, False]


def test_clean_standard_learns_synthetic_data(tiny):
    cfg = replace(tiny, noise_model="none", algorithm="standard", synth_train_per_class=200, epochs=15,
                      lr_decay_start=10, mlp_hidden="64")
    rows = lab.read_metrics(lab.run_experiment(cfg) / "metrics.csv")
    assert rows[-1]["test_acc"] >= 0.95


def test_nan_run_keeps_partial_log_and_marks_failure(tiny):
    cfg = replace(tiny, lr=1e30, algorithm="standard", epochs=5)
    with np.errstate(all="ignore"), pytest.raises(NumericalError):
        lab.run_experiment(cfg)
    run_dir = lab.output_root(cfg) / "tiny"
    assert (run_dir / "status.txt").read_text().startswith("failed: numerical")
    assert (run_dir / "metrics.csv").read_text().startswith("epoch,")


def test_output_root_from_environment(tiny, monkeypatch, tmp_path):
    monkeypatch.setenv(lab.OUTPUT_ROOT_ENV, str(tmp_path / "env"))
    assert lab.output_root(replace(tiny, output_dir="")) == tmp_path / "env"


# ------------------------------------------------------------------ sweeps


def test_lambda_sweep_gives_four_runs(tiny):
    res = lab.sweep(replace(tiny, epochs=1), "lambda", [0.95, 0.05, 0.35, 0.65])
    assert [r.value for r in res] == [0.05, 0.35, 0.65, 0.95]
    assert all(r.status == "completed" for r in res)
    root = lab.output_root(tiny)
    assert len({r.run_dir for r in res}) == 4
    assert len((root / "tiny-sweep-lambda.csv").read_text().splitlines()) == 1 + 4
    assert (root / "tiny-sweep-lambda.svg").read_text().count("<polyline") + \
        (root / "tiny-sweep-lambda.svg").read_text().count("<circle") == 4


def test_tau_sweep_gives_five_runs(tiny):
    values = [f * tiny.noise_rate for f in (0.2, 0.4, 0.6, 0.8, 1.0)]
    res = lab.sweep(replace(tiny, epochs=1), "tau", values)
    assert len(res) == 5 and all(r.status == "completed" for r in res)
    assert [r.summary["epochs"] for r in res] == [1] * 5


def test_sweep_order_does_not_change_members(tiny, tmp_path):
    a = lab.sweep(replace(tiny, epochs=1), "lambda", [0.05, 0.95])
    other = replace(tiny, epochs=1, output_dir=str(tmp_path / "b"))
    b = lab.sweep(other, "lambda", [0.95, 0.05])
    for ra, rb in zip(a, b):
        assert (Path(ra.run_dir) / "metrics.csv").read_bytes() == (Path(rb.run_dir) / "metrics.csv").read_bytes()


def test_empty_sweep_is_rejected(tiny):
    with pytest.raises(ConfigurationError):
        lab.sweep(tiny, "lambda", [])


def test_failing_member_does_not_stop_the_others(tiny):
    with np.errstate(all="ignore"):
        res = lab.sweep(replace(tiny, epochs=1, algorithm="standard"), "lr", [1e-3, 1e30])
    assert [r.status == "completed" for r in res] == [True, False]


# ------------------------------------------------------------------- plots


def test_single_point_plot_has_one_marker():
    svg = render_curves([{"epoch": 1, "acc": 0.5}], [("acc", "acc")])
    assert svg.startswith("<svg") and svg.count("<circle") == 1 and "<polyline" not in svg


def test_plot_bytes_are_deterministic():
    rows = [{"epoch": i, "acc": 0.1 * i} for i in range(1, 6)]
    assert render_curves(rows, [("acc", "acc")]) == render_curves(list(rows), [("acc", "acc")])


@pytest.mark.parametrize("sign", [1, -1])
def test_monotone_series_gives_monotone_polyline(sign):
    rows = [{"epoch": i, "v": sign * i ** 1.5} for i in range(1, 12)]
    svg = render_curves(rows, [("v", "v")])
    pts = re.search(r'points="([^"]+)"', svg).group(1).split()
    ys = [float(p.split(",")[1]) for p in pts]
    diffs = np.diff(ys)
    # SVG y grows downwards, so an increasing series moves up the page
    assert np.all(diffs < 0) if sign > 0 else np.all(diffs > 0)


# --------------------------------------------------------------------- CLI


def test_cli_run(tiny, tmp_path, capsys):
    path = tmp_path / "tiny.cfg"
    path.write_text(lab.format_config(tiny))
    assert cli.main(["run", "--config", str(path), "--set", "epochs=2", "--quiet"]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["epochs"] == 2


def test_cli_sweep_relative_tau(tiny, tmp_path, capsys):
    path = tmp_path / "tiny.cfg"
    path.write_text(lab.format_config(replace(tiny, epochs=1)))
    assert cli.main(["sweep", "--config", str(path), "--param", "tau", "--values", "0.5,1", "--relative"]) == 0
    lines = [json.loads(s) for s in capsys.readouterr().out.splitlines()]
    assert [round(x["tau"], 9) for x in lines] == [0.2, 0.4]


def test_cli_audit_noise(tiny, tmp_path, capsys):
    path = tmp_path / "tiny.cfg"
    path.write_text(lab.format_config(tiny))
    assert cli.main(["audit-noise", "--config", str(path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["samples"] == 60 and len(out["target_q"]) == 3


def test_cli_grad_check_mlp(capsys):
    assert cli.main(["grad-check", "--model", "mlp", "--max-per-layer", "5"]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("PASS")


@pytest.mark.parametrize("argv,code,category", [
    (["run", "--config", "/nonexistent/x.cfg"], 4, "io"),
    (["run", "--config", "{cfg}", "--set", "epochs=zero"], 2, "configuration"),
    (["run", "--config", "{cfg}", "--set", "nonsense"], 2, "configuration"),
    (["sweep", "--config", "{cfg}", "--param", "lambda", "--values", "a,b"], 2, "configuration"),
])
def test_cli_errors(tiny, tmp_path, capsys, argv, code, category):
    path = tmp_path / "tiny.cfg"
    path.write_text(lab.format_config(tiny))
    assert cli.main([a.format(cfg=path) for a in argv]) == code
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == category and err["message"]
