import csv
import json
from pathlib import Path

import pytest

from selfdistill.analysis import MetricsLog
from selfdistill.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, ConfigError, main, parse_config_text

BASE = """\
[dataset]
name = synthetic-gaussian-10
n_train = 256
n_test = 128
image_size = 16

[model]
name = tiny-resnet-3block
tap = 2

[method]
name = {method}
alpha = {alpha}
beta = 1.0

[schedule]
epochs = 2
batch_size = 64
lr = 0.05

[run]
seed = 0
"""


def write_config(tmp_path: Path, name="run.ini", method="combined", alpha="0.2", extra="") -> Path:
    path = tmp_path / name
    path.write_text(BASE.format(method=method, alpha=alpha) + extra)
    return path


def train(tmp_path, config, out="runs", *flags) -> Path:
    code = main(["train", "--config", str(config), "--out", str(tmp_path / out), *flags])
    assert code == EXIT_OK
    runs = sorted(p for p in (tmp_path / out).iterdir() if p.name.startswith("run-"))
    return runs[-1]


# ---------------------------------------------------------------------------
# parsing


def test_defaults_are_expanded(tmp_path):
    cfg = parse_config_text("[method]\nname = drg\n")
    assert cfg.training.alpha == 0.2 and cfg.training.tau_drg == 1.0
    ini = cfg.to_ini()
    assert "tau_dsr = 4.0" in ini and "teacher_detach = false" in ini
    assert parse_config_text(ini).resolved() == cfg.resolved()


def test_negative_alpha_rejected_with_line(tmp_path, capsys):
    path = write_config(tmp_path, alpha="-1")
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "runs")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert f"{path}:13:" in err and "alpha" in err
    assert not (tmp_path / "runs").exists()


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match=r"<config>:3: unknown key 'gamma'"):
        parse_config_text("[method]\nname = drg\ngamma = 3\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config_text("[optimizer]\nlr = 1\n")
    with pytest.raises(ConfigError, match=":2:"):
        parse_config_text("[schedule]\nepochs = ten\n")
    with pytest.raises(ConfigError, match="unknown model"):
        parse_config_text("[model]\nname = vgg\n")


def test_missing_dataset_is_io_error(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SELFDISTILL_DATA", str(tmp_path / "nowhere"))
    path = tmp_path / "c.ini"
    path.write_text("[dataset]\nname = cifar10-subset-5k\n")
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "runs")]) == EXIT_IO
    assert "cifar-10-batches-py" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train


def test_train_combined_writes_artifacts(tmp_path):
    run = train(tmp_path, write_config(tmp_path))
    metrics = MetricsLog.from_csv(run / "metrics.csv")
    assert len(metrics.split("train")) == 2 and len(metrics.split("test")) == 2
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "completed" and manifest["end"]
    for key in ("config_hash", "code_version", "dataset", "seeds", "start", "artifacts"):
        assert key in manifest
    assert manifest["dataset"]["num_classes"] == 10
    resolved = (run / "config.ini").read_text()
    assert "alpha = 0.2" in resolved and "tau_dsr = 4.0" in resolved
    assert (run / "checkpoint.pt").exists() and (run / "checkpoint.txt").exists()


def test_vanilla_twice_gives_identical_metrics(tmp_path):
    config = write_config(tmp_path, method="vanilla")
    a = train(tmp_path, config, "a")
    b = train(tmp_path, config, "b")
    assert a.name == b.name
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_duplicate_run_is_detected(tmp_path, caplog):
    config = write_config(tmp_path, method="vanilla")
    run = train(tmp_path, config)
    stamp = (run / "metrics.csv").stat().st_mtime_ns
    train(tmp_path, config)
    assert (run / "metrics.csv").stat().st_mtime_ns == stamp
    assert "already completed" in caplog.text


def test_seed_flag_changes_run(tmp_path):
    config = write_config(tmp_path, method="vanilla")
    a = train(tmp_path, config)
    main(["train", "--config", str(config), "--out", str(tmp_path / "runs"), "--seed", "7"])
    runs = [p for p in (tmp_path / "runs").iterdir()]
    assert len(runs) == 2
    other = next(p for p in runs if p != a)
    assert "seed = 7" in (other / "config.ini").read_text()


# ---------------------------------------------------------------------------
# eval


def test_eval_is_repeatable(tmp_path, capsys):
    run = train(tmp_path, write_config(tmp_path, method="drg"))
    capsys.readouterr()
    outputs = []
    for _ in range(2):
        assert main(["eval", "--checkpoint", str(run / "checkpoint.pt")]) == EXIT_OK
        outputs.append(capsys.readouterr().out)
    assert outputs[0] == outputs[1] and "top-1 accuracy (test)" in outputs[0]
    rows = MetricsLog.from_csv(run / "metrics.csv").split("eval-test")
    assert len(rows) == 1


def test_eval_fresh_model_near_chance(tmp_path, capsys):
    config = write_config(tmp_path, method="vanilla", extra="")
    config.write_text(config.read_text().replace("lr = 0.05", "lr = 0.0").replace("epochs = 2", "epochs = 1"))
    run = train(tmp_path, config)
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run / "checkpoint.pt")]) == EXIT_OK
    acc = float(capsys.readouterr().out.rsplit(":", 1)[1])
    assert 0.0 <= acc <= 0.3


def test_eval_missing_checkpoint(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.pt")]) == EXIT_IO
    assert "checkpoint not found" in capsys.readouterr().err


def test_eval_rejects_class_mismatch(tmp_path, capsys):
    run = train(tmp_path, write_config(tmp_path, method="vanilla"))
    other = tmp_path / "k5.ini"
    other.write_text("[dataset]\nname = synthetic-gaussian-5\nn_train = 50\nn_test = 20\nimage_size = 16\n")
    assert main(["eval", "--checkpoint", str(run / "checkpoint.pt"), "--config", str(other)]) == EXIT_CONFIG
    assert "10 classes" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# sweep


def _summary(out: Path) -> list[dict]:
    (sweep,) = [p for p in out.iterdir() if p.name.startswith("sweep-")]
    with open(sweep / "summary.csv") as fh:
        return list(csv.DictReader(fh))


def test_sweep_over_tap_records_failure(tmp_path):
    config = write_config(tmp_path, method="drg")
    code = main(["sweep", "--config", str(config), "--axis", "tap=1,2,3", "--out", str(tmp_path / "s")])
    assert code == EXIT_OK
    rows = _summary(tmp_path / "s")
    assert [r["tap"] for r in rows] == ["1", "2", "3"]
    assert rows[0]["status"] == rows[1]["status"] == "completed"
    assert rows[2]["status"].startswith("failed") and "tap" in rows[2]["status"]
    assert all(r["final_test_accuracy"] for r in rows[:2])
    assert len([p for p in (tmp_path / "s").iterdir() if p.name.startswith("run-")]) == 2


@pytest.mark.slow
def test_sweep_over_temperature(tmp_path):
    config = write_config(tmp_path, method="dsr")
    config.write_text(config.read_text().replace("epochs = 2", "epochs = 1"))
    code = main(["sweep", "--config", str(config), "--axis", "tau_dsr=1,2,3,4,5", "--out", str(tmp_path / "s")])
    assert code == EXIT_OK
    rows = _summary(tmp_path / "s")
    assert [r["tau_dsr"] for r in rows] == ["1", "2", "3", "4", "5"]
    assert all(r["status"] == "completed" for r in rows)
    (sweep,) = [p for p in (tmp_path / "s").iterdir() if p.name.startswith("sweep-")]
    assert (sweep / "best.txt").read_text().startswith("best: tau_dsr=")


def test_sweep_rejects_empty_axis(tmp_path, capsys):
    config = write_config(tmp_path)
    assert main(["sweep", "--config", str(config), "--axis", "tap=", "--out", str(tmp_path / "s")]) == EXIT_CONFIG
    assert "no values" in capsys.readouterr().err
    assert main(["sweep", "--config", str(config), "--out", str(tmp_path / "s")]) == EXIT_CONFIG


# ---------------------------------------------------------------------------
# report


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("report")
    runs = {}
    for method in ("vanilla", "combined"):
        train(root, write_config(root, f"{method}.ini", method=method), "runs")
        # run directories are named by hash, so find each one by its resolved config
        runs[method] = next(
            p for p in (root / "runs").iterdir() if f"name = {method}" in (p / "config.ini").read_text()
        )
    return root, runs


def test_report_delta(two_runs):
    root, runs = two_runs
    out = root / "rep1"
    assert main(["report", str(runs["vanilla"]), str(runs["combined"]), "--out", str(out)]) == EXIT_OK
    md = (out / "report.md").read_text()
    accs = {m: MetricsLog.from_csv(r / "metrics.csv").split("test")[-1]["top1_accuracy"] for m, r in runs.items()}
    delta = 100 * (accs["combined"] - accs["vanilla"])
    line = next(l for l in md.splitlines() if l.startswith("| DRG+DSR"))
    assert f"({delta:+.2f}%)" in line
    assert f"{100 * accs['combined']:.2f}%" in line
    for name in ("report.csv", "variance_vs_epoch.csv", "variance_vs_epoch.png", "time_cost.csv", "time_cost.png"):
        assert (out / name).exists(), name
    with open(out / "time_cost.csv") as fh:
        assert all(float(r["seconds_per_iteration"]) > 0 for r in csv.DictReader(fh))


def test_report_single_run_has_no_delta(two_runs):
    root, runs = two_runs
    out = root / "rep2"
    assert main(["report", str(runs["combined"]), "--out", str(out)]) == EXIT_OK
    table = [l for l in (out / "report.md").read_text().splitlines() if l.startswith("| DRG") or l.startswith("| Van")]
    assert len(table) == 1 and "(" not in table[0]


def test_report_flags_incomplete_runs(two_runs):
    root, runs = two_runs
    broken = root / "broken"
    broken.mkdir(exist_ok=True)
    (broken / "config.ini").write_text((runs["vanilla"] / "config.ini").read_text())
    (broken / "manifest.json").write_text(json.dumps({"status": "running"}))
    out = root / "rep3"
    assert main(["report", str(runs["combined"]), str(broken), "--out", str(out)]) == EXIT_OK
    md = (out / "report.md").read_text()
    assert "Incomplete runs" in md and "broken (running)" in md


def test_report_series_regenerate_identically(two_runs):
    root, runs = two_runs
    dirs = [str(runs["vanilla"]), str(runs["combined"])]
    main(["report", *dirs, "--out", str(root / "ra")])
    main(["report", *dirs, "--out", str(root / "rb")])
    for name in ("report.md", "report.csv", "variance_vs_epoch.csv", "time_cost.csv"):
        assert (root / "ra" / name).read_bytes() == (root / "rb" / name).read_bytes(), name


def test_inline_comments_allowed():
    cfg = parse_config_text("[method]\nname = dsr   ; shape term only\nbeta = 2.0  # stronger\n")
    assert cfg.training.method == "dsr" and cfg.training.beta == 2.0
