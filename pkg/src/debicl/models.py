"""Backbone, cosine-normalized classifier, and model lifecycle helpers."""

from __future__ import annotations

import copy
import hashlib

import torch
import torch.nn as nn
import torch.nn.functional as F


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class CompactResNet(nn.Module):
    """Small 3-stage residual feature extractor for desk-scale experiments."""

    def __init__(self, widths=(16, 32, 64), blocks_per_stage=1, in_channels=3):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = widths[0]
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(in_ch, w, stride=stride)]
            blocks += [BasicBlock(w, w) for _ in range(blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = w
        self.stages = nn.Sequential(*stages)
        self.feature_dim = widths[-1]

    def forward(self, x):
        h = self.stages(self.stem(x))
        return F.adaptive_avg_pool2d(h, 1).flatten(1)


class CosineClassifier(nn.Module):
    """logit_c = eta * cos(feature, w_c) with a learnable scale eta.

    Normalizing both sides bounds every logit to [-eta, eta] and makes the
    head insensitive to feature magnitude, which keeps old and new class
    logits on a comparable footing as the head grows.
    """

    def __init__(self, feature_dim, num_classes, scale_init=8.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(num_classes, feature_dim) * 0.01)
        self.scale = nn.Parameter(torch.tensor(float(scale_init)))

    @property
    def num_classes(self):
        return self.weight.shape[0]

    def forward(self, feat):
        f = F.normalize(feat, dim=1, eps=1e-8)
        w = F.normalize(self.weight, dim=1, eps=1e-8)
        return self.scale * (f @ w.t())


class IncrementalModel(nn.Module):
    def __init__(self, num_classes, widths=(16, 32, 64), blocks_per_stage=1, scale_init=8.0):
        super().__init__()
        self.backbone = CompactResNet(widths=widths, blocks_per_stage=blocks_per_stage)
        self.classifier = CosineClassifier(self.backbone.feature_dim, num_classes, scale_init)

    @property
    def num_classes(self):
        return self.classifier.num_classes

    @property
    def feature_dim(self):
        return self.backbone.feature_dim

    def features(self, x):
        return self.backbone(x)

    def forward(self, x):
        return self.classifier(self.backbone(x))


def build_model(num_classes, widths=(16, 32, 64), blocks_per_stage=1, scale_init=8.0, seed=None):
    if seed is not None:
        # deterministic init without touching global RNG afterwards
        state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        model = IncrementalModel(num_classes, widths, blocks_per_stage, scale_init)
        torch.random.set_rng_state(state)
        return model
    return IncrementalModel(num_classes, widths, blocks_per_stage, scale_init)


def extend_classifier(model: IncrementalModel, m_t: int, rng: torch.Generator) -> IncrementalModel:
    """Append m_t new class vectors; existing rows and eta stay bit-identical."""
    if m_t <= 0:
        raise ValueError(f"m_t must be >= 1, got {m_t}")
    old = model.classifier
    new_rows = torch.randn(m_t, old.weight.shape[1], generator=rng) * 0.01
    head = CosineClassifier(old.weight.shape[1], old.num_classes + m_t)
    with torch.no_grad():
        head.weight[: old.num_classes] = old.weight
        head.weight[old.num_classes :] = new_rows
        head.scale.copy_(old.scale)
    head = head.to(old.weight.device)
    model.classifier = head
    return model


def snapshot(model: IncrementalModel) -> IncrementalModel:
    """Frozen eval-mode deep copy; later training of `model` cannot leak in."""
    frozen = copy.deepcopy(model)
    for p in frozen.parameters():
        p.requires_grad_(False)
    frozen.eval()
    return frozen


def parameter_checksum(model: nn.Module) -> str:
    """sha256 over all parameters and buffers, in state-dict order."""
    h = hashlib.sha256()
    for key, tensor in model.state_dict().items():
        h.update(key.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
