"""Incremental training loop.

One run walks a task sequence: a large base task, then increments. Each
increment extends the cosine head, trains against the frozen previous model
with adaptive-weight distillation and exemplar replay, and (in debiased
modes) pairs every natural batch with a texture-transplanted twin tied
together by the paired self-distillation loss. Replay batches stay natural:
conflict images never enter replay losses, and a counter proves it.

Modes
  standard               CE + KD with exemplar replay
  debiased               standard plus conflict twins and the paired loss
  exemplar_free_debiased debiased without any exemplar memory; styles come
                         from the current task itself
  b1_augment             standard loop with the distortion stack applied to
                         the training images themselves (no twins, no
                         paired loss)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .data import ExemplarMemory, ImageDataset, TaskSequence, sample_exemplar_batch, update_memory
from .losses import LogitPair, LossTerms, LossWeights, adaptive_lambda, kd_loss, std_loss, total_loss_debiased, total_loss_standard
from .models import IncrementalModel, extend_classifier, snapshot
from .seeding import torch_gen
from .style import DistortionConfig, StyleTransferModel, distort_style, generate_conflict_batch, train_decoder

MODES = ("standard", "debiased", "exemplar_free_debiased", "b1_augment")
_CONFLICT_MODES = ("debiased", "exemplar_free_debiased")


@dataclass
class TrainSchedule:
    base_epochs: int = 8
    inc_epochs: int = 6
    lr: float = 0.05
    inc_lr: float | None = None  # incremental-step lr; defaults to lr
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    replay_batch: int | None = None
    milestones: tuple = (0.6, 0.85)  # fractions of the epoch budget
    lr_decay: float = 0.1
    decoder_steps: int = 400

    def __post_init__(self):
        if self.base_epochs < 1 or self.inc_epochs < 1:
            raise ValueError("epoch budgets must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def replay_k(self):
        return self.replay_batch or self.batch_size


@dataclass
class TrainerState:
    model: IncrementalModel
    memory: ExemplarMemory
    weights: LossWeights
    schedule: TrainSchedule
    mode: str
    sequence: TaskSequence
    dataset: ImageDataset  # full training set in head-label space
    root_seed: int
    step: int = 0
    old_model: IncrementalModel | None = None
    style_model: StyleTransferModel | None = None
    distortion: DistortionConfig = field(default_factory=DistortionConfig)
    replay_enabled: bool = True
    debias_replay: bool = False
    style_source: str = "exemplar"  # or "current"
    std_detach: bool = False
    counters: dict = field(default_factory=lambda: {"replay_conflict_images": 0})
    train_log: list = field(default_factory=list)
    style_class_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.style_source not in ("exemplar", "current"):
            raise ValueError(f"style_source must be 'exemplar' or 'current', got {self.style_source!r}")
        if self.mode == "exemplar_free_debiased":
            self.replay_enabled = False
        if self.mode in _CONFLICT_MODES and self.style_model is None:
            raise ValueError(f"mode {self.mode!r} needs a style model")


def compute_iteration_loss(
    model,
    old_model,
    X_t,
    Y_t,
    weights: LossWeights,
    lambda_t: float,
    mode: str,
    conflict_images=None,
    replay=None,
    std_detach: bool = False,
):
    """Assemble one optimization step's loss.

    All rows of an iteration (natural, conflict twins, replay) go through the
    model in a single forward pass, so batch-norm statistics always come from
    the mixed batch; a separate replay forward would skew them toward
    whichever classes the replay draw happened to hit. In conflict modes the
    current-task CE/KD run on the natural rows concatenated with their twins,
    so a disabled pairing term (gamma 0, twins = copies) reproduces the
    standard loss on the doubled batch. Returns (total, parts) with parts as
    plain floats for logging.
    """
    exemplar_free = replay is None
    k = X_t.shape[0]
    chunks = [X_t]
    if mode in _CONFLICT_MODES:
        if conflict_images is None:
            raise ValueError(f"mode {mode!r} requires a conflict batch")
        chunks.append(conflict_images)
    if replay is not None:
        X_hat, Y_hat = replay
        chunks.append(X_hat)
    cur_rows = 2 * k if mode in _CONFLICT_MODES else k
    logits_all = model(torch.cat(chunks, dim=0))
    logits_cur = logits_all[:cur_rows]
    logits_r = logits_all[cur_rows:]
    old_cur = old_r = None
    if old_model is not None:
        with torch.no_grad():
            old_all = old_model(torch.cat(chunks, dim=0))
        old_cur, old_r = old_all[:cur_rows], old_all[cur_rows:]

    std = None
    if mode in _CONFLICT_MODES:
        ce_current = F.cross_entropy(logits_cur, torch.cat([Y_t, Y_t], dim=0))
        pair = LogitPair(logits_cur[:k], logits_cur[k:])
        std = std_loss(pair, weights.tau_std, detach_ensemble=std_detach)
    else:
        ce_current = F.cross_entropy(logits_cur, Y_t)
    kd_current = kd_loss(logits_cur, old_cur, weights.tau_kd) if old_model is not None else None

    ce_replay = kd_replay = None
    if replay is not None:
        ce_replay = F.cross_entropy(logits_r, Y_hat)
        if old_model is not None:
            kd_replay = kd_loss(logits_r, old_r, weights.tau_kd)

    terms = LossTerms(ce_current=ce_current, ce_replay=ce_replay, kd_current=kd_current, kd_replay=kd_replay, std=std)
    if mode in _CONFLICT_MODES:
        total = total_loss_debiased(terms, lambda_t, weights.gamma, exemplar_free=exemplar_free)
    else:
        total = total_loss_standard(terms, lambda_t, exemplar_free=exemplar_free)

    parts = {
        "ce_current": float(ce_current.item()),
        "ce_replay": float(ce_replay.item()) if ce_replay is not None else 0.0,
        "kd_current": float(kd_current.item()) if kd_current is not None else 0.0,
        "kd_replay": float(kd_replay.item()) if kd_replay is not None else 0.0,
        "std": float(std.item()) if std is not None else 0.0,
        "total": float(total.item()),
    }
    return total, parts


def _draw_style_batch(state: TrainerState, data_t: ImageDataset, k: int, style_stream):
    """Style images for conflict twins: herded exemplars when available, the
    current task pool otherwise (base task, exemplar-free, or by request)."""
    use_memory = (
        state.mode == "debiased"
        and state.style_source == "exemplar"
        and state.step >= 1
        and state.replay_enabled
    )
    if use_memory:
        imgs, labels, _ = sample_exemplar_batch(state.memory, state.dataset, k, style_stream)
        return imgs, labels
    idx = torch.randint(len(data_t), (k,), generator=style_stream)
    return data_t.images[idx], data_t.labels[idx]


def _b1_augment(images: torch.Tensor, config: DistortionConfig, rng) -> torch.Tensor:
    return torch.stack([distort_style(images[i], config, rng) for i in range(images.shape[0])])


def _maybe_error_on_empty_memory(state):
    if state.replay_enabled and len(state.memory) == 0:
        raise RuntimeError(
            "exemplar memory is empty in a replay mode; "
            "use mode=exemplar_free_debiased or disable replay in the config"
        )


def _run_epochs(state: TrainerState, data_t: ImageDataset, epochs: int) -> None:
    sched = state.schedule
    lr = sched.lr if state.step == 0 else (sched.inc_lr or sched.lr)
    opt = torch.optim.SGD(
        state.model.parameters(), lr=lr, momentum=sched.momentum, weight_decay=sched.weight_decay
    )
    milestones = sorted({max(1, int(f * epochs)) for f in sched.milestones})
    lr_sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones, gamma=sched.lr_decay)

    t = state.step
    shuffle_stream = torch_gen(state.root_seed, f"shuffle:step{t}")
    style_stream = torch_gen(state.root_seed, f"styles:step{t}")
    distort_stream = torch_gen(state.root_seed, f"distort:step{t}")
    replay_stream = torch_gen(state.root_seed, f"replay:step{t}")

    if state.old_model is not None:
        lambda_t = adaptive_lambda(
            state.sequence.seen_classes(t), state.sequence.tasks[t].m_t, state.weights.lambda_base
        )
    else:
        lambda_t = 0.0

    state.model.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(data_t), generator=shuffle_stream)
        epoch_style_classes: set = set()
        for lo in range(0, len(perm), sched.batch_size):
            idx = perm[lo : lo + sched.batch_size]
            X_t, Y_t = data_t.images[idx], data_t.labels[idx]

            conflict_images = None
            if state.mode in _CONFLICT_MODES:
                style_imgs, style_labels = _draw_style_batch(state, data_t, X_t.shape[0], style_stream)
                batch = generate_conflict_batch(
                    X_t, style_imgs, state.style_model, state.distortion, distort_stream,
                    style_labels=style_labels,
                )
                conflict_images = batch.images
                epoch_style_classes.update(int(c) for c in style_labels.tolist())
            elif state.mode == "b1_augment":
                X_t = _b1_augment(X_t, state.distortion, distort_stream)

            replay = None
            if state.replay_enabled and state.step >= 1:
                X_hat, Y_hat, mem_idx = sample_exemplar_batch(
                    state.memory, state.dataset, sched.replay_k, replay_stream
                )
                flags = state.dataset.synthetic_flags[mem_idx]
                state.counters["replay_conflict_images"] += int(flags.sum().item())
                if state.debias_replay:
                    style_imgs, style_labels, _ = sample_exemplar_batch(
                        state.memory, state.dataset, X_hat.shape[0], replay_stream
                    )
                    twin = generate_conflict_batch(
                        X_hat, style_imgs, state.style_model, state.distortion, distort_stream
                    )
                    state.counters["replay_conflict_images"] += int(twin.provenance.sum().item())
                    X_hat = torch.cat([X_hat, twin.images], dim=0)
                    Y_hat = torch.cat([Y_hat, Y_hat], dim=0)
                replay = (X_hat, Y_hat)

            total, parts = compute_iteration_loss(
                state.model,
                state.old_model,
                X_t,
                Y_t,
                state.weights,
                lambda_t,
                state.mode,
                conflict_images=conflict_images,
                replay=replay,
                std_detach=state.std_detach,
            )
            opt.zero_grad()
            total.backward()
            opt.step()

            row = {"step": t, "epoch": epoch, "lambda_t": lambda_t, "lr": opt.param_groups[0]["lr"]}
            row.update(parts)
            state.train_log.append(row)
        lr_sched.step()
        if state.mode in _CONFLICT_MODES:
            state.style_class_log.append(
                {"step": t, "epoch": epoch, "distinct_style_classes": len(epoch_style_classes)}
            )
    state.model.eval()


def _finish_step(state: TrainerState) -> None:
    if state.replay_enabled:
        update_memory(state.memory, state.sequence.tasks[state.step], state.model, state.dataset)
    state.old_model = snapshot(state.model)


def train_base_task(state: TrainerState, data_0: ImageDataset) -> TrainerState:
    """Train step 0 on the base classes; populate memory and snapshot."""
    if state.step != 0 or state.old_model is not None:
        raise RuntimeError("base task already trained; use train_incremental_step")
    if len(data_0) == 0:
        raise ValueError("empty base task data")
    if state.mode in _CONFLICT_MODES and not state.style_model.trained_flag:
        train_decoder(
            state.style_model,
            data_0.images,
            steps=state.schedule.decoder_steps,
            gen=torch_gen(state.root_seed, "decoder"),
        )
    _run_epochs(state, data_0, state.schedule.base_epochs)
    _finish_step(state)
    return state


def train_incremental_step(state: TrainerState, data_t: ImageDataset) -> TrainerState:
    """Train the next task: extend the head, run the loop, update memory, snapshot."""
    if state.old_model is None:
        raise RuntimeError("no snapshot present; train the base task first")
    if state.step + 1 >= len(state.sequence):
        raise RuntimeError(f"task sequence exhausted at step {state.step}")
    if len(data_t) == 0:
        raise ValueError("empty task data")
    _maybe_error_on_empty_memory(state)

    state.step += 1
    m_t = state.sequence.tasks[state.step].m_t
    extend_classifier(state.model, m_t, torch_gen(state.root_seed, f"extend:step{state.step}"))
    _run_epochs(state, data_t, state.schedule.inc_epochs)
    _finish_step(state)
    return state


def run_mode_b1(state: TrainerState, data_t: ImageDataset) -> TrainerState:
    """Plain-augmentation baseline: the standard loop over distorted inputs."""
    if state.mode != "b1_augment":
        raise ValueError(f"run_mode_b1 requires mode 'b1_augment', got {state.mode!r}")
    if state.old_model is None:
        return train_base_task(state, data_t)
    return train_incremental_step(state, data_t)


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(state: TrainerState, path) -> None:
    payload = {
        "step": state.step,
        "mode": state.mode,
        "num_classes": state.model.num_classes,
        "model": state.model.state_dict(),
        "old_model": state.old_model.state_dict() if state.old_model is not None else None,
        "old_num_classes": state.old_model.num_classes if state.old_model is not None else None,
        "memory": state.memory.to_json(),
        "counters": state.counters,
        "train_log": state.train_log,
        "style_class_log": state.style_class_log,
        "root_seed": state.root_seed,
        "scale": float(state.model.classifier.scale.item()),
    }
    torch.save(payload, path)


def load_checkpoint(path, state: TrainerState, model_factory) -> TrainerState:
    """Restore step/model/memory/logs into a freshly constructed state.

    model_factory(num_classes) must rebuild the run's architecture at the
    requested head width; the snapshot is narrower than the live model.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload["mode"] != state.mode:
        raise ValueError(f"checkpoint mode {payload['mode']!r} != configured mode {state.mode!r}")
    model = model_factory(payload["num_classes"])
    model.load_state_dict(payload["model"])
    state.model = model
    if payload["old_model"] is not None:
        old = model_factory(payload["old_num_classes"])
        old.load_state_dict(payload["old_model"])
        state.old_model = snapshot(old)
    state.memory = ExemplarMemory.from_json(payload["memory"])
    state.counters = payload["counters"]
    state.train_log = payload["train_log"]
    state.style_class_log = payload["style_class_log"]
    state.step = payload["step"]
    return state
