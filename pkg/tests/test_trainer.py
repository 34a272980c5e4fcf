import pytest
import torch

from debicl.data import (
    ExemplarMemory,
    build_task_sequence,
    remap_to_head_space,
    sample_exemplar_batch,
    synthetic_dataset,
)
from debicl.evaluate import evaluate_step_accuracy
from debicl.losses import LossWeights
from debicl.models import build_model, extend_classifier, parameter_checksum
from debicl.seeding import torch_gen
from debicl.style import DistortionConfig, StyleTransferModel
from debicl.trainer import (
    TrainSchedule,
    TrainerState,
    compute_iteration_loss,
    load_checkpoint,
    run_mode_b1,
    save_checkpoint,
    train_base_task,
    train_incremental_step,
)

WIDTHS = (8, 16, 32)


def make_state(mode, seed=0, num_classes=4, T=1, per_class=30, budget=10, **kw):
    raw = synthetic_dataset(num_classes, per_class, image_size=16, seed=seed)
    seq_raw = build_task_sequence(num_classes, T, seed)
    ds, seq, _ = remap_to_head_space(raw, seq_raw)
    model = build_model(seq.tasks[0].m_t, widths=WIDTHS, seed=seed)
    if "style_model" in kw:
        style_model = kw.pop("style_model")
    elif mode in ("debiased", "exemplar_free_debiased"):
        style_model = StyleTransferModel(seed=seed)
    else:
        style_model = None
    schedule = kw.pop(
        "schedule",
        TrainSchedule(
            base_epochs=8, inc_epochs=6, lr=0.1, inc_lr=0.05, momentum=0.5,
            batch_size=16, replay_batch=16, decoder_steps=120,
        ),
    )
    state = TrainerState(
        model=model,
        memory=ExemplarMemory(budget_per_class=budget),
        weights=kw.pop("weights", LossWeights(lambda_base=4.0)),
        schedule=schedule,
        mode=mode,
        sequence=seq,
        dataset=ds,
        root_seed=seed,
        style_model=style_model,
        **kw,
    )
    return state


def task_data(state, t):
    cls = state.sequence.tasks[t].class_ids
    return state.dataset.subset(state.dataset.indices_for_classes(cls))


def run_all(state):
    train_base_task(state, task_data(state, 0))
    for t in range(1, len(state.sequence)):
        train_incremental_step(state, task_data(state, t))
    return state


# ---------------------------------------------------------------------------
# base task


def test_base_task_beats_chance_and_fills_memory():
    state = make_state("standard", seed=1)
    train_base_task(state, task_data(state, 0))
    test_ds = synthetic_dataset(4, 12, image_size=16, seed=99)
    test_ds, _, _ = remap_to_head_space(test_ds, build_task_sequence(4, 1, 1))
    base_test = test_ds.subset(test_ds.indices_for_classes(state.sequence.tasks[0].class_ids))
    acc = evaluate_step_accuracy(state.model, base_test)
    assert acc > 100.0 / state.sequence.tasks[0].m_t + 10.0, f"base acc {acc:.1f}"
    for c in state.sequence.tasks[0].class_ids:
        assert len(state.memory.entries[c]) == min(10, 30)
    assert state.old_model is not None
    probe = state.dataset.images[:8]
    state.model.eval()
    assert torch.equal(state.old_model(probe), state.model(probe))


def test_base_task_preconditions():
    state = make_state("standard")
    with pytest.raises(ValueError):
        train_base_task(state, state.dataset.subset([]))
    train_base_task(state, task_data(state, 0))
    with pytest.raises(RuntimeError):
        train_base_task(state, task_data(state, 0))


def test_incremental_requires_snapshot():
    state = make_state("standard")
    with pytest.raises(RuntimeError, match="base"):
        train_incremental_step(state, task_data(state, 1))


# ---------------------------------------------------------------------------
# incremental step


def test_incremental_bookkeeping_and_loss_decrease():
    state = make_state("standard", seed=2)
    run_all(state)
    assert state.step == 1
    assert state.model.num_classes == 4
    assert sorted(state.memory.classes) == [0, 1, 2, 3]
    rows = [r for r in state.train_log if r["step"] == 1]
    assert rows[-1]["total"] < rows[0]["total"], "loss did not drop across the step"
    assert rows[0]["lambda_t"] == pytest.approx(
        state.weights.lambda_base * (4 / 2) ** (2 / 3)
    )


def test_old_model_frozen_during_step():
    state = make_state("standard", seed=3)
    train_base_task(state, task_data(state, 0))
    checksum = parameter_checksum(state.old_model)
    old_ref = state.old_model
    train_incremental_step(state, task_data(state, 1))
    assert parameter_checksum(old_ref) == checksum


def test_sequence_exhaustion():
    state = make_state("standard", seed=4)
    run_all(state)
    with pytest.raises(RuntimeError, match="exhausted"):
        train_incremental_step(state, task_data(state, 1))


def test_empty_memory_error_directs_to_exemplar_free():
    state = make_state("standard", seed=5, budget=0)
    train_base_task(state, task_data(state, 0))
    assert len(state.memory) == 0
    with pytest.raises(RuntimeError, match="exemplar_free"):
        train_incremental_step(state, task_data(state, 1))


# ---------------------------------------------------------------------------
# debiased specifics


def test_debiased_run_replay_purity_and_style_log():
    state = make_state("debiased", seed=6)
    run_all(state)
    assert state.counters["replay_conflict_images"] == 0
    logs = [r for r in state.style_class_log if r["step"] == 1]
    assert len(logs) == state.schedule.inc_epochs
    assert all(1 <= r["distinct_style_classes"] <= 2 for r in logs)  # styles from 2 base classes


def test_debias_replay_knob_counts_conflict_images():
    state = make_state("debiased", seed=7, debias_replay=True)
    run_all(state)
    assert state.counters["replay_conflict_images"] > 0


def test_current_style_source_stays_in_task():
    state = make_state("debiased", seed=8, style_source="current")
    run_all(state)
    assert state.memory.access_count > 0  # replay still uses memory
    logs = [r for r in state.style_class_log if r["step"] == 1]
    assert all(r["distinct_style_classes"] <= 2 for r in logs)


def test_exemplar_free_never_touches_memory():
    state = make_state("exemplar_free_debiased", seed=9)
    assert state.replay_enabled is False
    run_all(state)
    assert state.memory.access_count == 0
    assert len(state.memory) == 0
    assert state.counters["replay_conflict_images"] == 0
    assert state.model.num_classes == 4


def test_conflict_mode_requires_style_model():
    with pytest.raises(ValueError, match="style"):
        make_state("debiased", style_model=None)


# ---------------------------------------------------------------------------
# mode equivalence


def test_debiased_iteration_equals_standard_on_doubled_batch():
    state = make_state("standard", seed=10)
    train_base_task(state, task_data(state, 0))
    model, old = state.model, state.old_model
    extend_classifier(model, 2, torch_gen(1, "extend"))
    model.train()
    data1 = task_data(state, 1)
    X, Y = data1.images[:16], data1.labels[:16]
    Xr, Yr, _ = sample_exemplar_batch(state.memory, state.dataset, 16, torch_gen(0, "r"))
    weights = LossWeights(gamma=0.0)

    total_deb, parts_deb = compute_iteration_loss(
        model, old, X, Y, weights, lambda_t=3.0, mode="debiased",
        conflict_images=X.clone(), replay=(Xr, Yr),
    )
    X2, Y2 = torch.cat([X, X]), torch.cat([Y, Y])
    total_std, parts_std = compute_iteration_loss(
        model, old, X2, Y2, weights, lambda_t=3.0, mode="standard", replay=(Xr, Yr)
    )
    assert abs(total_deb.item() - total_std.item()) < 1e-5
    assert abs(parts_deb["ce_current"] - parts_std["ce_current"]) < 1e-6
    assert abs(parts_deb["kd_current"] - parts_std["kd_current"]) < 1e-6


def test_conflict_mode_requires_conflict_batch():
    model = build_model(4, widths=WIDTHS, seed=0)
    X = torch.rand(4, 3, 16, 16)
    Y = torch.tensor([0, 1, 2, 3])
    with pytest.raises(ValueError, match="conflict"):
        compute_iteration_loss(model, None, X, Y, LossWeights(), 0.0, "debiased")


# ---------------------------------------------------------------------------
# b1 baseline


def test_b1_zero_probability_matches_standard():
    sched = TrainSchedule(base_epochs=2, inc_epochs=2, lr=0.05, batch_size=32, replay_batch=32)
    a = make_state("b1_augment", seed=11, distortion=DistortionConfig.disabled(), schedule=sched)
    run_mode_b1(a, task_data(a, 0))
    run_mode_b1(a, task_data(a, 1))
    b = make_state("standard", seed=11, schedule=sched)
    run_all(b)
    assert parameter_checksum(a.model) == parameter_checksum(b.model)
    assert [r["total"] for r in a.train_log] == [r["total"] for r in b.train_log]


def test_b1_reproducible_and_guarded():
    sched = TrainSchedule(base_epochs=2, inc_epochs=2, lr=0.05, batch_size=32, replay_batch=32)
    a = make_state("b1_augment", seed=12, schedule=sched)
    run_mode_b1(a, task_data(a, 0))
    b = make_state("b1_augment", seed=12, schedule=sched)
    run_mode_b1(b, task_data(b, 0))
    assert parameter_checksum(a.model) == parameter_checksum(b.model)
    c = make_state("standard", seed=12, schedule=sched)
    with pytest.raises(ValueError):
        run_mode_b1(c, task_data(c, 0))


def test_b1_default_distortion_parameters():
    state = make_state("b1_augment", seed=13)
    d = state.distortion
    assert d.jitter_prob == 0.8
    assert d.gray_prob == 0.2
    assert d.blur_prob == 0.5
    assert d.noise_prob == 0.5
    assert d.noise_std == 0.025
    assert d.blur_kernel_frac == 0.1


# ---------------------------------------------------------------------------
# checkpointing


def test_checkpoint_roundtrip(tmp_path):
    state = make_state("standard", seed=14)
    run_all(state)
    path = tmp_path / "ckpt.pt"
    save_checkpoint(state, path)

    fresh = make_state("standard", seed=14)
    load_checkpoint(path, fresh, lambda n: build_model(n, widths=WIDTHS, seed=14))
    assert fresh.step == state.step
    assert parameter_checksum(fresh.model) == parameter_checksum(state.model)
    assert parameter_checksum(fresh.old_model) == parameter_checksum(state.old_model)
    assert fresh.memory.entries == state.memory.entries
    assert fresh.train_log == state.train_log

    wrong = make_state("debiased", seed=14)
    with pytest.raises(ValueError, match="mode"):
        load_checkpoint(path, wrong, lambda n: build_model(n, widths=WIDTHS, seed=14))


def test_trainer_state_validation():
    with pytest.raises(ValueError, match="mode"):
        make_state("nonsense")
    with pytest.raises(ValueError, match="style_source"):
        make_state("standard", style_source="bogus")
