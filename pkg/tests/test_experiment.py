import copy
import json

import pytest
import yaml

from debicl.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from debicl.config import parse_config
from debicl.errors import ConfigError
from debicl.experiment import compare_runs, read_csv, run_experiment

TINY = {
    "schema_version": 1,
    "dataset": {
        "kind": "synthetic",
        "num_classes": 4,
        "per_class_train": 30,
        "per_class_test": 10,
        "image_size": 16,
    },
    "protocol": {"T": 1},
    "seeds": [3],
    "mode": "standard",
    "loss": {"lambda_base": 4.0},
    "schedule": {
        "base_epochs": 4,
        "inc_epochs": 4,
        "lr": 0.1,
        "inc_lr": 0.05,
        "momentum": 0.5,
        "batch_size": 16,
        "replay_batch": 16,
        "decoder_steps": 60,
    },
    "model": {"widths": [8, 16, 32]},
    "memory": {"budget_per_class": 10},
    "eval": {"landscape_directions": 3},
    "output_dir": "",
}


def tiny_config(out_dir, **over):
    data = copy.deepcopy(TINY)
    data.update(over)
    data["output_dir"] = str(out_dir)
    return data


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = parse_config(tiny_config(out))
    report = run_experiment(cfg)
    return cfg, report


def test_artifacts_written(finished_run):
    cfg, report = finished_run
    seed_dir = cfg.output_dir / "standard" / "seed3"
    for name in (
        "config.json", "metrics.csv", "train_log.csv", "rc_cells.csv",
        "landscape.csv", "landscape.png", "accuracy.png", "report.json",
        "sequence.json", "ckpt_step0.pt", "ckpt_step1.pt",
    ):
        assert (seed_dir / name).exists(), name
    assert (cfg.output_dir / "standard" / "report.json").exists()
    assert report["mode"] == "standard"
    assert sorted(report["per_seed"]) == ["3"]


def test_report_numbers_recomputable_from_csv(finished_run):
    cfg, report = finished_run
    seed_dir = cfg.output_dir / "standard" / "seed3"
    r = report["per_seed"]["3"]

    rows = read_csv(seed_dir / "metrics.csv")
    assert len(rows) == cfg.T + 1
    accs = [float(x["acc_seen"]) for x in rows]
    assert r["avg_inc_acc"] == pytest.approx(sum(accs) / len(accs), abs=1e-5)
    base = [float(x["base_task_acc"]) for x in rows]
    assert r["forgetting"] == pytest.approx(base[0] - base[-1], abs=1e-5)
    assert r["final_acc"] == pytest.approx(accs[-1], abs=1e-5)

    cells = read_csv(seed_dir / "rc_cells.csv")
    assert len(cells) == 6 * 5
    errs = [float(c["error"]) for c in cells]
    assert r["mce"] == pytest.approx(sum(errs) / len(errs), abs=1e-5)


def test_landscape_csv_shape_and_center(finished_run):
    cfg, _ = finished_run
    rows = read_csv(cfg.output_dir / "standard" / "seed3" / "landscape.csv")
    dirs = {int(r["direction_id"]) for r in rows}
    assert dirs == {0, 1, 2}
    alphas = sorted({float(r["alpha"]) for r in rows})
    assert 0.0 in alphas
    assert len(rows) == len(dirs) * len(alphas)
    center = {float(r["loss"]) for r in rows if float(r["alpha"]) == 0.0}
    assert len(center) == 1  # unperturbed loss is direction-independent


def test_rerun_reproduces_identical_csvs(finished_run):
    cfg, _ = finished_run
    seed_dir = cfg.output_dir / "standard" / "seed3"
    before = {n: (seed_dir / n).read_bytes() for n in ("metrics.csv", "rc_cells.csv", "landscape.csv", "train_log.csv")}
    run_experiment(cfg)
    for name, blob in before.items():
        assert (seed_dir / name).read_bytes() == blob, name


def test_resume_from_partial_checkpoints(finished_run):
    cfg, _ = finished_run
    seed_dir = cfg.output_dir / "standard" / "seed3"
    metrics_before = (seed_dir / "metrics.csv").read_bytes()
    (seed_dir / "ckpt_step1.pt").unlink()
    run_experiment(cfg, resume=True)
    assert (seed_dir / "ckpt_step1.pt").exists()
    assert (seed_dir / "metrics.csv").read_bytes() == metrics_before


def test_degenerate_single_task_run(tmp_path):
    cfg = parse_config(tiny_config(
        tmp_path, protocol={"T": 0},
        eval={"corruptions": False, "landscape": False},
    ))
    report = run_experiment(cfg)
    rows = read_csv(tmp_path / "standard" / "seed3" / "metrics.csv")
    assert len(rows) == 1
    assert report["per_seed"]["3"]["forgetting"] == 0.0
    assert "mce" not in report["per_seed"]["3"]


def test_compare_identical_reports_all_zero(finished_run):
    _, report = finished_run
    cmp = compare_runs(report, report)
    for row in cmp["per_seed"]:
        assert all(v == 0.0 for k, v in row.items() if k.startswith("delta_"))
    assert all(v == 0.0 for v in cmp["mean_delta"].values())


def test_compare_hand_built_deltas_exact():
    proto = {"num_classes": 4, "T": 1}
    mk = lambda mode, acc, f, mce: {
        "mode": mode,
        "protocol": proto,
        "per_seed": {"0": {"avg_inc_acc": acc, "forgetting": f, "final_acc": acc, "mce": mce}},
    }
    cmp = compare_runs(mk("standard", 60.0, 20.0, 40.0), mk("debiased", 62.5, 15.0, 35.0))
    row = cmp["per_seed"][0]
    assert row["delta_avg_inc_acc"] == pytest.approx(2.5)
    assert row["delta_forgetting"] == pytest.approx(-5.0)
    assert row["delta_mce"] == pytest.approx(-5.0)


def test_compare_protocol_mismatch_errors(finished_run):
    _, report = finished_run
    other = json.loads(json.dumps(report))
    other["protocol"]["T"] = 5
    with pytest.raises(ConfigError, match="protocol"):
        compare_runs(report, other)


# ---------------------------------------------------------------------------
# CLI surface


def test_cli_run_and_compare(tmp_path, capsys):
    conf = tmp_path / "exp.yaml"
    conf.write_text(yaml.safe_dump(tiny_config(
        tmp_path / "out", protocol={"T": 0},
        schedule={"base_epochs": 2, "lr": 0.1, "momentum": 0.5, "batch_size": 16},
        eval={"corruptions": False, "landscape": False},
    )))
    assert main(["run", "--config", str(conf)]) == EXIT_OK
    report = tmp_path / "out" / "standard" / "report.json"
    assert report.exists()
    assert main(["compare", str(report), str(report), "--out", str(tmp_path / "cmp")]) == EXIT_OK
    assert (tmp_path / "cmp" / "comparison.csv").exists()
    assert (tmp_path / "cmp" / "comparison.png").exists()
    out = capsys.readouterr().out
    assert '"avg_inc_acc": 0.0' in out


def test_cli_mode_and_seed_overrides(tmp_path):
    conf = tmp_path / "exp.yaml"
    conf.write_text(yaml.safe_dump(tiny_config(
        tmp_path / "out", protocol={"T": 0}, seeds=[3, 4],
        schedule={"base_epochs": 2, "lr": 0.1, "momentum": 0.5, "batch_size": 16, "decoder_steps": 40},
        eval={"corruptions": False, "landscape": False},
    )))
    assert main(["run", "--config", str(conf), "--mode", "b1_augment", "--seed", "4"]) == EXIT_OK
    assert (tmp_path / "out" / "b1_augment" / "seed4" / "report.json").exists()
    assert not (tmp_path / "out" / "b1_augment" / "seed3").exists()


def test_cli_exit_codes(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert main(["run", "--config", str(missing)]) == EXIT_CONFIG

    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"schema_version": 1}))
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG

    conf = tmp_path / "exp.yaml"
    conf.write_text(yaml.safe_dump(tiny_config(tmp_path / "never_ran")))
    assert main(["eval", "--config", str(conf)]) == EXIT_RUNTIME
    capsys.readouterr()
