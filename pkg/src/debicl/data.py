"""Incremental task streams and dataset ingestion.

Two ingestion paths: a directory-of-class-folders loader for real image
datasets (`root/<class_name>/<image files>`), and an in-memory synthetic
generator that draws desk-scale images carrying two class-predictive cues:
a global outline (lobed blob geometry) and a fine-grained surface pattern
(oriented color grating). Corruptions destroy the surface cue long before
the outline, which is what makes the robustness comparisons in the
evaluation suite meaningful at desk scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .seeding import torch_gen

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")


# ---------------------------------------------------------------------------
# datasets


class ImageDataset:
    """In-memory image classification dataset.

    images: float32 tensor (N, 3, H, W) in [0, 1]; labels: int64 tensor (N,).
    `synthetic_flags` marks samples produced by the style engine; natural
    data always carries all-False flags and the exemplar memory refuses
    flagged samples.
    """

    def __init__(self, images, labels, class_names=None, paths=None, synthetic_flags=None):
        if images.ndim != 4 or images.shape[0] != labels.shape[0]:
            raise ValueError(f"images {tuple(images.shape)} / labels {tuple(labels.shape)} mismatch")
        self.images = images.float()
        self.labels = labels.long()
        self.class_names = class_names
        self.paths = paths
        if synthetic_flags is None:
            synthetic_flags = torch.zeros(len(labels), dtype=torch.bool)
        self.synthetic_flags = synthetic_flags

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_size(self):
        return self.images.shape[-1]

    @property
    def num_classes(self):
        return int(self.labels.max().item()) + 1 if len(self) else 0

    def indices_for_classes(self, class_ids) -> torch.Tensor:
        mask = torch.isin(self.labels, torch.as_tensor(list(class_ids), dtype=torch.long))
        return torch.nonzero(mask, as_tuple=False).flatten()

    def subset(self, indices) -> "ImageDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        paths = [self.paths[i] for i in idx.tolist()] if self.paths is not None else None
        return ImageDataset(
            self.images[idx],
            self.labels[idx],
            class_names=self.class_names,
            paths=paths,
            synthetic_flags=self.synthetic_flags[idx],
        )


def load_folder_dataset(root, image_size=32) -> ImageDataset:
    """Load `root/<class_name>/<image files>`; class ids follow sorted names."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ConfigError(f"dataset root {root} contains no class folders")
    images, labels, paths = [], [], []
    for class_id, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        for p in files:
            with Image.open(p) as img:
                img = img.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
            images.append(torch.from_numpy(arr).permute(2, 0, 1))
            labels.append(class_id)
            paths.append(str(p))
    if not images:
        raise ConfigError(f"no images found under {root}")
    return ImageDataset(
        torch.stack(images),
        torch.tensor(labels),
        class_names=[d.name for d in class_dirs],
        paths=paths,
    )


def _class_shape_params(c: int):
    # lobe count, aspect and base rotation jointly identify the outline
    lobes = 3 + c % 5
    aspect = 0.55 + 0.45 * ((c * 0.6180339887) % 1.0)
    rotation = math.radians((c * 47.0) % 180.0)
    return lobes, aspect, rotation

def _class_texture_params(c: int):
    freq = 4.0 + 2.0 * (c % 6)
    theta = math.radians((c * 61.8) % 180.0)
    hue = (c * 0.37) % 1.0
    return freq, theta, hue


def _hue_to_rgb(hue: float) -> torch.Tensor:
    # saturated HSV color wheel, V=1
    h = (hue % 1.0) * 6.0
    x = 1.0 - abs(h % 2.0 - 1.0)
    sector = int(h) % 6
    r, g, b = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)][sector]
    return torch.tensor([r, g, b], dtype=torch.float32)


def _grating(size, freq, theta, phase, device=None):
    coords = torch.linspace(-0.5, 0.5, size, device=device)
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    proj = xx * math.cos(theta) + yy * math.sin(theta)
    return torch.sin(2.0 * math.pi * freq * proj + phase)


def _blob_mask(size, lobes, aspect, rotation, center, scale, wobble=0.25):
    """Filled star-convex blob: radius r(phi) = scale * (1 + wobble*cos(lobes*phi + rot))."""
    coords = torch.arange(size, dtype=torch.float32)
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    dx = (xx - center[0]) / aspect
    dy = yy - center[1]
    rho = torch.sqrt(dx * dx + dy * dy)
    phi = torch.atan2(dy, dx)
    radius = scale * (1.0 + wobble * torch.cos(lobes * phi + rotation))
    return (rho <= radius).float()


def synthesize_image(class_id, size, gen, texture_amp=0.45, background=0.45, class_hue=True):
    """One sample: class blob outline filled with the class grating/color.

    With class_hue=False the hue is drawn per image instead, so color carries
    no label signal and the grating is the only texture cue.
    """
    lobes, aspect, rotation = _class_shape_params(class_id)
    freq, theta, hue = _class_texture_params(class_id)
    if not class_hue:
        hue = torch.rand(1, generator=gen).item()

    jitter = (torch.rand(2, generator=gen) - 0.5) * (0.22 * size)
    center = (size / 2.0 + jitter[0].item(), size / 2.0 + jitter[1].item())
    scale = size * (0.22 + 0.10 * torch.rand(1, generator=gen).item())
    rot = rotation + (torch.rand(1, generator=gen).item() - 0.5) * 0.5
    mask = _blob_mask(size, lobes, aspect, rot, center, scale)

    phase = torch.rand(1, generator=gen).item() * 2.0 * math.pi
    grating = _grating(size, freq, theta, phase)
    color = _hue_to_rgb(hue + (torch.rand(1, generator=gen).item() - 0.5) * 0.04)
    foreground = color.view(3, 1, 1) * (0.55 + texture_amp * grating).unsqueeze(0)

    bg_noise = torch.randn(1, size, size, generator=gen) * 0.03
    backdrop = (background + bg_noise).expand(3, -1, -1)

    img = mask.unsqueeze(0) * foreground + (1.0 - mask.unsqueeze(0)) * backdrop
    img = img + torch.randn(3, size, size, generator=gen) * 0.01
    return img.clamp(0.0, 1.0)


def synthetic_dataset(num_classes, per_class, image_size, seed, texture_amp=0.45, class_hue=True) -> ImageDataset:
    """Seed-deterministic desk-scale dataset with shape and texture cues."""
    gen = torch_gen(seed, "synthetic_dataset")
    images, labels = [], []
    for c in range(num_classes):
        for _ in range(per_class):
            images.append(synthesize_image(c, image_size, gen, texture_amp=texture_amp, class_hue=class_hue))
            labels.append(c)
    return ImageDataset(torch.stack(images), torch.tensor(labels))


def synthetic_style_pool(num_images, image_size, seed, hue_offset=0.5, freq_offset=1.37) -> ImageDataset:
    """Full-frame texture canvases disjoint from every class' surface pattern.

    Used to build the domain-shift proxy test set; hue/frequency offsets keep
    these styles outside the parameter families any class uses.
    """
    gen = torch_gen(seed, "style_pool")
    images = []
    for i in range(num_images):
        freq = 3.0 + freq_offset * (i % 7) + 0.5
        theta = math.radians((i * 23.7 + 11.0) % 180.0)
        hue = (hue_offset + i * 0.173) % 1.0
        phase = torch.rand(1, generator=gen).item() * 2.0 * math.pi
        grating = _grating(image_size, freq, theta, phase)
        color = _hue_to_rgb(hue)
        img = color.view(3, 1, 1) * (0.5 + 0.45 * grating).unsqueeze(0)
        img = img + torch.randn(3, image_size, image_size, generator=gen) * 0.02
        images.append(img.clamp(0.0, 1.0))
    labels = torch.zeros(num_images, dtype=torch.long)
    return ImageDataset(torch.stack(images), labels)


# ---------------------------------------------------------------------------
# task sequences


@dataclass(frozen=True)
class TaskSpec:
    """One incremental step: an ordered, disjoint set of global class ids."""

    index: int
    class_ids: tuple

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"task index must be >= 0, got {self.index}")
        if len(self.class_ids) == 0:
            raise ValueError("task must hold at least one class")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("duplicate class ids within a task")

    @property
    def m_t(self) -> int:
        return len(self.class_ids)


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple

    def __post_init__(self):
        seen = set()
        for task in self.tasks:
            overlap = seen & set(task.class_ids)
            if overlap:
                raise ValueError(f"classes {sorted(overlap)} appear in more than one task")
            seen |= set(task.class_ids)

    def __len__(self):
        return len(self.tasks)

    def seen_classes(self, t: int) -> int:
        """Cumulative class count through step t."""
        return sum(task.m_t for task in self.tasks[: t + 1])

    def classes_through(self, t: int) -> list:
        out = []
        for task in self.tasks[: t + 1]:
            out.extend(task.class_ids)
        return out

    def to_json(self) -> dict:
        return {"tasks": [{"index": t.index, "class_ids": list(t.class_ids)} for t in self.tasks]}

    @classmethod
    def from_json(cls, payload: dict) -> "TaskSequence":
        tasks = tuple(TaskSpec(t["index"], tuple(t["class_ids"])) for t in payload["tasks"])
        return cls(tasks)


def build_task_sequence(num_classes: int, T: int, seed: int) -> TaskSequence:
    """Split a seed-shuffled class order into one large base task plus T equal increments.

    The base task takes ceil(num_classes/2) classes (all of them when T=0);
    the remainder must divide evenly across the T increments.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if T < 0:
        raise ConfigError(f"number of increments must be >= 0, got {T}")

    gen = torch_gen(seed, "class_order")
    order = torch.randperm(num_classes, generator=gen).tolist()

    if T == 0:
        return TaskSequence((TaskSpec(0, tuple(order)),))

    base = math.ceil(num_classes / 2)
    remaining = num_classes - base
    if remaining % T != 0:
        raise ConfigError(
            f"cannot split {remaining} post-base classes evenly over {T} increments "
            f"({num_classes} classes, base {base})"
        )
    per_step = remaining // T
    tasks = [TaskSpec(0, tuple(order[:base]))]
    for t in range(1, T + 1):
        lo = base + (t - 1) * per_step
        tasks.append(TaskSpec(t, tuple(order[lo : lo + per_step])))
    return TaskSequence(tuple(tasks))


def remap_to_head_space(dataset: ImageDataset, sequence: TaskSequence):
    """Relabel a dataset so class ids follow the task order.

    The classifier head grows contiguously, so training wants labels where
    task 0 owns columns [0, m_0), task 1 the next m_1, and so on. Returns
    (remapped dataset, contiguous sequence, order) with order[head_id] =
    original class id for reporting.
    """
    order = [c for t in sequence.tasks for c in t.class_ids]
    lut = torch.full((max(order) + 1,), -1, dtype=torch.long)
    for head, c in enumerate(order):
        lut[c] = head
    if int(dataset.labels.max()) >= lut.shape[0] or bool((lut[dataset.labels] < 0).any()):
        raise ValueError("dataset contains classes outside the task sequence")
    remapped = ImageDataset(
        dataset.images,
        lut[dataset.labels],
        class_names=None,
        paths=dataset.paths,
        synthetic_flags=dataset.synthetic_flags,
    )
    tasks, lo = [], 0
    for t in sequence.tasks:
        tasks.append(TaskSpec(t.index, tuple(range(lo, lo + t.m_t))))
        lo += t.m_t
    return remapped, TaskSequence(tuple(tasks)), order


# ---------------------------------------------------------------------------
# exemplar memory


def herding_select(features, m: int) -> list:
    """Greedy exemplar order: each pick keeps the running mean of selected
    features closest (L2) to the class mean. Ties break to the lowest index.
    """
    feats = torch.as_tensor(features, dtype=torch.float64)
    if feats.ndim != 2:
        raise ValueError(f"expected (n, d) feature matrix, got shape {tuple(feats.shape)}")
    n = feats.shape[0]
    if n == 0:
        raise ValueError("cannot select exemplars from an empty feature set")
    if m > n:
        raise ValueError(f"requested {m} exemplars from {n} samples")

    target = feats.mean(dim=0)
    selected: list = []
    running_sum = torch.zeros_like(target)
    remaining = list(range(n))
    for k in range(m):
        candidate_means = (running_sum.unsqueeze(0) + feats[remaining]) / (k + 1)
        dists = torch.linalg.norm(candidate_means - target.unsqueeze(0), dim=1)
        best = int(torch.argmin(dists).item())  # argmin returns first minimum: lowest index wins ties
        choice = remaining.pop(best)
        selected.append(choice)
        running_sum = running_sum + feats[choice]
    return selected


@dataclass
class ExemplarMemory:
    """Fixed per-class budget of natural samples, stored in herding order.

    Entries are indices into the run's source dataset; the dual role (replay
    source and style source) means purity matters: synthetic samples are
    rejected at insertion. `access_count` instruments sampling so
    exemplar-free runs can assert the memory was never touched.
    """

    budget_per_class: int = 20
    entries: dict = field(default_factory=dict)
    access_count: int = 0

    def __post_init__(self):
        if self.budget_per_class < 0:
            raise ValueError("budget must be >= 0")

    def __len__(self):
        return sum(len(v) for v in self.entries.values())

    @property
    def classes(self):
        return sorted(self.entries)

    def all_indices(self) -> list:
        out = []
        for c in self.classes:
            out.extend(self.entries[c])
        return out

    def to_json(self, dataset: ImageDataset | None = None) -> dict:
        payload = {
            "budget_per_class": self.budget_per_class,
            "entries": {str(c): list(v) for c, v in self.entries.items()},
        }
        if dataset is not None and dataset.paths is not None:
            payload["paths"] = {str(c): [dataset.paths[i] for i in v] for c, v in self.entries.items()}
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "ExemplarMemory":
        mem = cls(budget_per_class=payload["budget_per_class"])
        mem.entries = {int(c): list(v) for c, v in payload["entries"].items()}
        return mem


def extract_features(model, images, batch_size=256):
    """Penultimate-layer embeddings, eval mode, no grad."""
    was_training = model.training
    model.eval()
    chunks = []
    with torch.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            chunks.append(model.features(images[lo : lo + batch_size]))
    if was_training:
        model.train()
    return torch.cat(chunks, dim=0)


def update_memory(memory: ExemplarMemory, new_task: TaskSpec, model, dataset: ImageDataset) -> ExemplarMemory:
    """Store herding-selected exemplars for each class of `new_task`.

    Uses the current model's embeddings; existing entries are untouched.
    """
    for c in new_task.class_ids:
        if c in memory.entries:
            raise ValueError(f"class {c} already present in memory")
    for c in new_task.class_ids:
        idx = dataset.indices_for_classes([c])
        if idx.numel() == 0:
            raise ValueError(f"no samples available for class {c}")
        if bool(dataset.synthetic_flags[idx].any()):
            raise ValueError(f"refusing to store synthetic samples for class {c}")
        feats = extract_features(model, dataset.images[idx])
        m = min(memory.budget_per_class, idx.numel())
        order = herding_select(feats, m)
        memory.entries[int(c)] = [int(idx[i].item()) for i in order]
    return memory


def sample_exemplar_batch(memory: ExemplarMemory, dataset: ImageDataset, k: int, gen: torch.Generator):
    """Uniform draw of k exemplars over the whole memory.

    Without replacement while k fits in the memory, with replacement beyond.
    Returns (images, labels, dataset_indices).
    """
    pool = memory.all_indices()
    if not pool:
        raise RuntimeError("exemplar memory is empty; run in an exemplar-free mode instead")
    memory.access_count += 1
    pool_t = torch.tensor(pool, dtype=torch.long)
    if k <= len(pool):
        pick = torch.randperm(len(pool), generator=gen)[:k]
    else:
        pick = torch.randint(len(pool), (k,), generator=gen)
    idx = pool_t[pick]
    return dataset.images[idx], dataset.labels[idx], idx


def save_sequence_sidecar(path, sequence: TaskSequence, memory: ExemplarMemory, dataset=None):
    """JSON sidecar with class ids, exemplar references, and herding order."""
    payload = {"sequence": sequence.to_json(), "memory": memory.to_json(dataset)}
    Path(path).write_text(json.dumps(payload, indent=2))


def load_sequence_sidecar(path):
    payload = json.loads(Path(path).read_text())
    return TaskSequence.from_json(payload["sequence"]), ExemplarMemory.from_json(payload["memory"])
