"""End-to-end experiment runner.

One run = one mode, several seeds. Each seed gets its own artifact directory
with everything needed to recompute the report numbers: per-step accuracy
rows, per-cell corruption errors, per-direction landscape losses, and the
full iteration log. report.json aggregates over seeds; compare_runs diffs
two aggregates that share a protocol.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import torch
import torch.nn.functional as F

from .config import ExperimentConfig, dump_resolved
from .data import (
    ExemplarMemory,
    ImageDataset,
    build_task_sequence,
    load_folder_dataset,
    remap_to_head_space,
    save_sequence_sidecar,
    synthetic_dataset,
)
from .errors import ConfigError
from .evaluate import corruption_cells, evaluate_step_accuracy, loss_landscape, mce_from_cells
from .losses import adaptive_lambda
from .models import build_model
from .plotting import accuracy_curve, compare_plot, landscape_plot
from .seeding import seed_for, torch_gen
from .style import StyleTransferModel, load_style_model, save_style_model, train_decoder
from .trainer import (
    TrainerState,
    _CONFLICT_MODES,
    load_checkpoint,
    save_checkpoint,
    train_base_task,
    train_incremental_step,
)

METRIC_FIELDS = ("step", "acc_seen", "base_task_acc", "seen_classes", "lambda_t")


def _write_csv(path, rows, fields):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fields))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _build_data(cfg: ExperimentConfig, seed: int):
    """Train/test datasets in head-label space plus the remapped sequence."""
    ds_cfg = cfg.dataset
    C = cfg.num_classes
    if ds_cfg["kind"] == "synthetic":
        train = synthetic_dataset(
            C, ds_cfg["per_class_train"], image_size=ds_cfg["image_size"],
            seed=seed_for(seed, "data:train") % 2**31, class_hue=ds_cfg["class_hue"],
        )
        test = synthetic_dataset(
            C, ds_cfg["per_class_test"], image_size=ds_cfg["image_size"],
            seed=seed_for(seed, "data:test") % 2**31, class_hue=ds_cfg["class_hue"],
        )
    else:
        root = Path(ds_cfg["root"])
        train = load_folder_dataset(root / "train", image_size=ds_cfg["image_size"])
        test = load_folder_dataset(root / "test", image_size=ds_cfg["image_size"])
        if int(train.labels.max()) + 1 != C:
            raise ConfigError(
                f"dataset.num_classes={C} but {root / 'train'} holds {int(train.labels.max()) + 1} classes"
            )
    train, sequence, order = remap_to_head_space(train, build_task_sequence(C, cfg.T, seed))
    lut = torch.full((C,), -1, dtype=torch.int64)
    for head, g in enumerate(order):
        lut[g] = head
    test = ImageDataset(images=test.images, labels=lut[test.labels], synthetic_flags=test.synthetic_flags)
    return train, test, sequence


def _test_through(test: ImageDataset, sequence, t: int) -> ImageDataset:
    seen = sequence.classes_through(t)
    return test.subset(test.indices_for_classes(seen))


def _eval_step_row(state: TrainerState, test: ImageDataset, t: int) -> dict:
    seq = state.sequence
    acc_seen = evaluate_step_accuracy(state.model, _test_through(test, seq, t))
    base_acc = evaluate_step_accuracy(state.model, _test_through(test, seq, 0))
    lam = 0.0 if t == 0 else adaptive_lambda(seq.seen_classes(t), seq.tasks[t].m_t, state.weights.lambda_base)
    return {
        "step": t,
        "acc_seen": round(acc_seen, 6),
        "base_task_acc": round(base_acc, 6),
        "seen_classes": len(seq.classes_through(t)),
        "lambda_t": round(lam, 6),
    }


def _task_zero_loss_eval(state: TrainerState):
    data0 = state.dataset.subset(state.dataset.indices_for_classes(state.sequence.tasks[0].class_ids))

    def loss_eval(model):
        with torch.no_grad():
            return F.cross_entropy(model(data0.images), data0.labels).item()

    return loss_eval


def _fresh_state(cfg: ExperimentConfig, seed: int, train, sequence) -> TrainerState:
    model = build_model(
        sequence.tasks[0].m_t,
        widths=tuple(cfg.model["widths"]),
        blocks_per_stage=cfg.model["blocks_per_stage"],
        scale_init=cfg.model["scale_init"],
        seed=seed,
    )
    style_model = StyleTransferModel(seed=seed) if cfg.mode in _CONFLICT_MODES else None
    return TrainerState(
        model=model,
        memory=ExemplarMemory(budget_per_class=cfg.memory["budget_per_class"]),
        weights=cfg.loss_weights(),
        schedule=cfg.train_schedule(),
        mode=cfg.mode,
        sequence=sequence,
        dataset=train,
        root_seed=seed,
        style_model=style_model,
        replay_enabled=cfg.trainer["replay_enabled"],
        debias_replay=cfg.trainer["debias_replay"],
        style_source=cfg.trainer["style_source"],
        std_detach=cfg.trainer["std_detach"],
    )


def run_seed(cfg: ExperimentConfig, seed: int, resume: bool = False) -> dict:
    """Train one seed end to end and write its artifact directory."""
    out = cfg.output_dir / cfg.mode / f"seed{seed}"
    out.mkdir(parents=True, exist_ok=True)
    dump_resolved(cfg, out / "config.json")

    train, test, sequence = _build_data(cfg, seed)
    state = _fresh_state(cfg, seed, train, sequence)
    model_factory = lambda n: build_model(
        n, widths=tuple(cfg.model["widths"]), blocks_per_stage=cfg.model["blocks_per_stage"],
        scale_init=cfg.model["scale_init"], seed=seed,
    )

    style_path = out / "style.pt"
    per_step = []
    start_t = 0
    if resume:
        done = [t for t in range(cfg.T + 1) if (out / f"ckpt_step{t}.pt").exists()]
        if done:
            last = max(done)
            if done != list(range(last + 1)):
                raise RuntimeError(f"checkpoint gap under {out}: found steps {done}")
            for t in range(last):  # re-derive earlier rows from their own checkpoints
                helper = _fresh_state(cfg, seed, train, sequence)
                load_checkpoint(out / f"ckpt_step{t}.pt", helper, model_factory)
                per_step.append(_eval_step_row(helper, test, t))
            load_checkpoint(out / f"ckpt_step{last}.pt", state, model_factory)
            per_step.append(_eval_step_row(state, test, last))
            if state.style_model is not None:
                if style_path.exists():
                    state.style_model = load_style_model(style_path)
                else:  # decoder training is deterministic, so rebuilding matches
                    data0 = train.subset(train.indices_for_classes(sequence.tasks[0].class_ids))
                    train_decoder(state.style_model, data0.images,
                                  steps=state.schedule.decoder_steps, gen=torch_gen(seed, "decoder"))
            start_t = last + 1

    for t in range(start_t, cfg.T + 1):
        data_t = train.subset(train.indices_for_classes(sequence.tasks[t].class_ids))
        if t == 0:
            train_base_task(state, data_t)
            if state.style_model is not None:
                save_style_model(state.style_model, style_path)
        else:
            train_incremental_step(state, data_t)
        per_step.append(_eval_step_row(state, test, t))
        save_checkpoint(state, out / f"ckpt_step{t}.pt")

    _write_csv(out / "metrics.csv", per_step, METRIC_FIELDS)
    save_sequence_sidecar(out / "sequence.json", sequence, state.memory)
    log_fields = ("step", "epoch", "lambda_t", "lr", "ce_current", "ce_replay",
                  "kd_current", "kd_replay", "std", "total")
    _write_csv(out / "train_log.csv", state.train_log, log_fields)
    if state.style_class_log:
        _write_csv(out / "style_log.csv", state.style_class_log,
                   ("step", "epoch", "distinct_style_classes"))
    accuracy_curve(per_step, out / "accuracy.png")

    report = {
        "schema_version": 1,
        "mode": cfg.mode,
        "seed": seed,
        "protocol": protocol_dict(cfg),
        "per_step": per_step,
        "avg_inc_acc": round(sum(r["acc_seen"] for r in per_step) / len(per_step), 6),
        "forgetting": round(per_step[0]["base_task_acc"] - per_step[-1]["base_task_acc"], 6),
        "final_acc": per_step[-1]["acc_seen"],
        "memory_access_count": state.memory.access_count,
        "counters": dict(state.counters),
        "style_classes_per_epoch": [r["distinct_style_classes"] for r in state.style_class_log],
    }

    if cfg.eval["corruptions"]:
        cells = corruption_cells(state.model, _test_through(test, sequence, cfg.T), seed=seed)
        _write_csv(out / "rc_cells.csv", cells, ("kind", "severity", "error"))
        report["mce"] = round(mce_from_cells(cells), 6)

    if cfg.eval["landscape"]:
        profile = loss_landscape(
            state.model,
            _task_zero_loss_eval(state),
            alphas=cfg.eval["landscape_alphas"],
            num_directions=cfg.eval["landscape_directions"],
            rng=torch_gen(seed, "landscape"),
        )
        rows = [
            {"direction_id": d, "alpha": alpha, "loss": profile.per_direction_loss[d][i]}
            for d in range(profile.num_directions)
            for i, alpha in enumerate(profile.alphas)
        ]
        _write_csv(out / "landscape.csv", rows, ("direction_id", "alpha", "loss"))
        landscape_plot(rows, out / "landscape.png")
        report["landscape_mean"] = dict(zip(map(str, profile.alphas), profile.mean_loss))

    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def protocol_dict(cfg: ExperimentConfig) -> dict:
    return {
        "num_classes": cfg.num_classes,
        "T": cfg.T,
        "image_size": cfg.dataset["image_size"],
        "per_class_train": cfg.dataset["per_class_train"],
        "per_class_test": cfg.dataset["per_class_test"],
        "class_hue": cfg.dataset["class_hue"],
        "seeds": list(cfg.seeds),
    }


def run_experiment(cfg: ExperimentConfig, resume: bool = False) -> dict:
    """Run every seed in the config; write and return the aggregate report."""
    reports = {seed: run_seed(cfg, seed, resume=resume) for seed in cfg.seeds}
    agg = {
        "schema_version": 1,
        "mode": cfg.mode,
        "protocol": protocol_dict(cfg),
        "per_seed": {str(s): r for s, r in reports.items()},
        "mean": _mean_block(reports.values()),
    }
    out = cfg.output_dir / cfg.mode
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    return agg


def _mean_block(reports) -> dict:
    reports = list(reports)
    keys = ["avg_inc_acc", "forgetting", "final_acc"]
    if all("mce" in r for r in reports):
        keys.append("mce")
    return {k: round(sum(r[k] for r in reports) / len(reports), 6) for k in keys}


def evaluate_run(cfg: ExperimentConfig) -> dict:
    """Recompute robustness cells and reports from existing final checkpoints."""
    reports = {}
    for seed in cfg.seeds:
        out = cfg.output_dir / cfg.mode / f"seed{seed}"
        ckpt = out / f"ckpt_step{cfg.T}.pt"
        report_path = out / "report.json"
        if not ckpt.exists() or not report_path.exists():
            raise RuntimeError(f"no completed run to evaluate under {out}")
        train, test, sequence = _build_data(cfg, seed)
        state = _fresh_state(cfg, seed, train, sequence)
        load_checkpoint(ckpt, state, lambda n: build_model(
            n, widths=tuple(cfg.model["widths"]), blocks_per_stage=cfg.model["blocks_per_stage"],
            scale_init=cfg.model["scale_init"], seed=seed))
        report = json.loads(report_path.read_text())
        cells = corruption_cells(state.model, _test_through(test, sequence, cfg.T), seed=seed)
        _write_csv(out / "rc_cells.csv", cells, ("kind", "severity", "error"))
        report["mce"] = round(mce_from_cells(cells), 6)
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        reports[seed] = report
    return {str(s): r for s, r in reports.items()}


def landscape_run(cfg: ExperimentConfig) -> dict:
    """Recompute the task-0 landscape profile from existing final checkpoints."""
    outputs = {}
    for seed in cfg.seeds:
        out = cfg.output_dir / cfg.mode / f"seed{seed}"
        ckpt = out / f"ckpt_step{cfg.T}.pt"
        if not ckpt.exists():
            raise RuntimeError(f"no final checkpoint under {out}")
        train, test, sequence = _build_data(cfg, seed)
        state = _fresh_state(cfg, seed, train, sequence)
        load_checkpoint(ckpt, state, lambda n: build_model(
            n, widths=tuple(cfg.model["widths"]), blocks_per_stage=cfg.model["blocks_per_stage"],
            scale_init=cfg.model["scale_init"], seed=seed))
        profile = loss_landscape(
            state.model, _task_zero_loss_eval(state),
            alphas=cfg.eval["landscape_alphas"],
            num_directions=cfg.eval["landscape_directions"],
            rng=torch_gen(seed, "landscape"),
        )
        rows = [
            {"direction_id": d, "alpha": alpha, "loss": profile.per_direction_loss[d][i]}
            for d in range(profile.num_directions)
            for i, alpha in enumerate(profile.alphas)
        ]
        _write_csv(out / "landscape.csv", rows, ("direction_id", "alpha", "loss"))
        landscape_plot(rows, out / "landscape.png")
        outputs[str(seed)] = {"alphas": profile.alphas, "mean_loss": profile.mean_loss}
    return outputs


def compare_runs(report_a: dict, report_b: dict) -> dict:
    """Per-seed and mean metric deltas (B minus A) for two aggregate reports."""
    if report_a["protocol"] != report_b["protocol"]:
        raise ConfigError(
            f"protocol mismatch: {report_a['protocol']} vs {report_b['protocol']}"
        )
    seeds = sorted(report_a["per_seed"])
    if seeds != sorted(report_b["per_seed"]):
        raise ConfigError("reports cover different seed sets")
    metrics = ["avg_inc_acc", "forgetting", "final_acc"]
    if all("mce" in report_a["per_seed"][s] and "mce" in report_b["per_seed"][s] for s in seeds):
        metrics.append("mce")
    per_seed = []
    for s in seeds:
        ra, rb = report_a["per_seed"][s], report_b["per_seed"][s]
        row = {"seed": int(s)}
        for m in metrics:
            row[f"delta_{m}"] = round(rb[m] - ra[m], 6)
        per_seed.append(row)
    return {
        "mode_a": report_a["mode"],
        "mode_b": report_b["mode"],
        "protocol": report_a["protocol"],
        "per_seed": per_seed,
        "mean_delta": {
            m: round(sum(r[f"delta_{m}"] for r in per_seed) / len(per_seed), 6) for m in metrics
        },
    }


def write_comparison(comparison: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.json").write_text(json.dumps(comparison, indent=2, sort_keys=True) + "\n")
    fields = ["seed"] + [k for k in comparison["per_seed"][0] if k != "seed"]
    _write_csv(out / "comparison.csv", comparison["per_seed"], fields)
    compare_plot(comparison, out / "comparison.png")
