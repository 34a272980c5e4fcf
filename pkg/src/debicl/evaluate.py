"""Evaluation suite: incremental accuracy, forgetting, corruption robustness,
stylized-domain-shift accuracy, and loss-landscape flatness profiling.

Corruption robustness is the unnormalized mean top-1 error over a fixed grid
of (kind, severity) cells; the rendition-style metric is proxied by a
stylized hold-out set whose styles are disjoint from anything seen in
training, and is flagged as a proxy wherever it is reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .seeding import torch_gen
from .style import gaussian_blur

# ---------------------------------------------------------------------------
# accuracy metrics


@torch.no_grad()
def _predictions(model, images, batch=256):
    was_training = model.training
    model.eval()
    preds = []
    for lo in range(0, images.shape[0], batch):
        preds.append(model(images[lo : lo + batch]).argmax(dim=1))
    if was_training:
        model.train()
    return torch.cat(preds)


def evaluate_step_accuracy(model, data, batch=256) -> float:
    """Top-1 accuracy in percent on a test set restricted to seen classes."""
    if len(data) == 0:
        raise ValueError("empty test set")
    preds = _predictions(model, data.images, batch=batch)
    return float((preds == data.labels).float().mean().item() * 100.0)


def forgetting_rate(acc_T0_at_step0: float, acc_T0_at_stepT: float) -> float:
    """Accuracy drop on the base task between the first and final model."""
    for v in (acc_T0_at_step0, acc_T0_at_stepT):
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"accuracy {v} outside [0, 100]")
    return acc_T0_at_step0 - acc_T0_at_stepT


def domain_shift_accuracy(model, shifted_test, batch=256) -> float:
    """Accuracy on the stylized hold-out proxy; same contract as step accuracy."""
    return evaluate_step_accuracy(model, shifted_test, batch=batch)


@dataclass
class MetricsReport:
    per_step_accuracy: list
    avg_inc_acc: float
    final_acc: float
    forgetting: float
    mce: float
    domain_shift_acc: float | None = None
    domain_shift_is_proxy: bool = True

    def __post_init__(self):
        accs = list(self.per_step_accuracy) + [self.final_acc]
        if self.domain_shift_acc is not None:
            accs.append(self.domain_shift_acc)
        for v in accs:
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"accuracy {v} outside [0, 100]")
        expect = sum(self.per_step_accuracy) / len(self.per_step_accuracy)
        if abs(expect - self.avg_inc_acc) > 1e-6:
            raise ValueError(f"avg_inc_acc {self.avg_inc_acc} != mean {expect}")

    @classmethod
    def from_steps(cls, per_step_accuracy, forgetting, mce, domain_shift_acc=None):
        per_step_accuracy = [float(a) for a in per_step_accuracy]
        return cls(
            per_step_accuracy=per_step_accuracy,
            avg_inc_acc=sum(per_step_accuracy) / len(per_step_accuracy),
            final_acc=per_step_accuracy[-1],
            forgetting=float(forgetting),
            mce=float(mce),
            domain_shift_acc=domain_shift_acc,
        )

    def to_dict(self):
        return {
            "per_step_accuracy": self.per_step_accuracy,
            "avg_inc_acc": self.avg_inc_acc,
            "final_acc": self.final_acc,
            "forgetting": self.forgetting,
            "mce": self.mce,
            "domain_shift_acc": self.domain_shift_acc,
            "domain_shift_is_proxy": self.domain_shift_is_proxy,
        }


# ---------------------------------------------------------------------------
# corruptions

# severity-indexed driving parameters, strictly monotone per kind
CORRUPTION_TABLES = {
    "gaussian_noise": [0.04, 0.08, 0.13, 0.19, 0.26],  # additive std
    "shot_noise": [60.0, 25.0, 12.0, 6.0, 3.0],  # photons per unit intensity
    "defocus_blur": [0.6, 1.0, 1.5, 2.2, 3.0],  # blur sigma, px
    "brightness": [0.08, 0.16, 0.24, 0.32, 0.42],  # additive shift
    "contrast": [0.70, 0.55, 0.40, 0.28, 0.15],  # scale toward the mean
    "pixelate": [0.7, 0.55, 0.45, 0.35, 0.25],  # side-length fraction kept
}

CORRUPTION_KINDS = tuple(CORRUPTION_TABLES)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CORRUPTION_TABLES:
            raise ValueError(f"unknown corruption kind {self.kind!r}; choose from {CORRUPTION_KINDS}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be 1..5, got {self.severity}")

    @property
    def param(self) -> float:
        table = self.parameters.get(self.kind) or CORRUPTION_TABLES[self.kind]
        return table[self.severity - 1]


def corrupt_dataset(images: torch.Tensor, spec: CorruptionSpec, rng: torch.Generator) -> torch.Tensor:
    """Apply one corruption cell to a (N,3,H,W) batch in [0,1]; never in place."""
    p = spec.param
    x = images
    if spec.kind == "gaussian_noise":
        out = x + torch.randn(x.shape, generator=rng) * p
    elif spec.kind == "shot_noise":
        out = torch.poisson(x * p, generator=rng) / p
    elif spec.kind == "defocus_blur":
        k = int(2 * math.ceil(3.0 * p) + 1)
        k = min(k, x.shape[-1] - (1 - x.shape[-1] % 2))
        out = gaussian_blur(x, k, p)
    elif spec.kind == "brightness":
        out = x + p
    elif spec.kind == "contrast":
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        out = (x - mean) * p + mean
    elif spec.kind == "pixelate":
        h, w = x.shape[-2:]
        small = (max(1, int(round(h * p))), max(1, int(round(w * p))))
        down = torch.nn.functional.interpolate(x, size=small, mode="nearest")
        out = torch.nn.functional.interpolate(down, size=(h, w), mode="nearest")
    else:  # pragma: no cover - guarded by CorruptionSpec
        raise ValueError(f"unknown corruption kind {spec.kind!r}")
    return out.clamp(0.0, 1.0)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = ((a - b) ** 2).mean().item()
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def corruption_cells(model, clean_test, kinds=CORRUPTION_KINDS, severities=(1, 2, 3, 4, 5), seed=0, batch=256):
    """Top-1 error percent per (kind, severity) cell.

    Each cell derives its own RNG stream from (seed, kind, severity), so the
    grid is reproducible cell-by-cell and independent of evaluation order.
    """
    if len(kinds) < 1 or len(severities) < 1:
        raise ValueError("need at least one kind and one severity")
    rows = []
    for kind in kinds:
        for sev in severities:
            spec = CorruptionSpec(kind, sev)
            rng = torch_gen(seed, f"corrupt:{kind}:{sev}")
            corrupted = corrupt_dataset(clean_test.images, spec, rng)
            preds = _predictions(model, corrupted, batch=batch)
            err = float((preds != clean_test.labels).float().mean().item() * 100.0)
            rows.append({"kind": kind, "severity": sev, "error": err})
    return rows


def mce_from_cells(cells) -> float:
    """Plain mean over cell errors; the grid is fixed, so no reweighting."""
    errors = [c["error"] for c in cells]
    if not errors:
        raise ValueError("no cells")
    return float(sum(errors) / len(errors))


def mean_corruption_error(
    model, clean_test, kinds=CORRUPTION_KINDS, severities=(1, 2, 3, 4, 5), seed=0, batch=256
) -> float:
    """Unnormalized mean top-1 error over all (kind, severity) cells, percent."""
    return mce_from_cells(corruption_cells(model, clean_test, kinds, severities, seed=seed, batch=batch))


# ---------------------------------------------------------------------------
# loss landscape


@dataclass
class LandscapeProfile:
    alphas: list
    mean_loss: list
    num_directions: int
    per_direction_loss: list  # [direction][alpha]
    directions: list | None = None

    def __post_init__(self):
        if len(self.mean_loss) != len(self.alphas):
            raise ValueError("mean_loss length must match alphas")
        if len(self.per_direction_loss) != self.num_directions:
            raise ValueError("per-direction rows must match num_directions")


def _filter_normalized_direction(model, rng):
    """Gaussian direction with each filter rescaled to its parameter's filter
    norm; vectors and scalars (biases, norms) get a zero direction so the
    probe moves only through the filter space, as in the visualization method
    this follows.
    """
    direction = {}
    for name, p in model.named_parameters():
        if p.ndim >= 2:
            d = torch.randn(p.shape, generator=rng, dtype=p.dtype)
            flat_d = d.view(d.shape[0], -1)
            flat_p = p.detach().view(p.shape[0], -1)
            norm_d = flat_d.norm(dim=1, keepdim=True).clamp_min(1e-12)
            norm_p = flat_p.norm(dim=1, keepdim=True)
            direction[name] = (flat_d / norm_d * norm_p).view_as(p)
        else:
            direction[name] = torch.zeros_like(p)
    return direction


def loss_landscape(
    model,
    loss_eval,
    alphas,
    num_directions: int = 5,
    rng: torch.Generator | None = None,
    paired: bool = False,
    keep_directions: bool = False,
) -> LandscapeProfile:
    """Profile loss_eval(model) along filter-normalized random directions.

    For each direction d and magnitude alpha, parameters are set to
    theta + alpha * d and the loss recorded; theta is restored bit-exactly
    afterwards. `paired` samples directions in (d, -d) pairs, which makes the
    averaged profile exactly symmetric in alpha. Non-finite losses are
    recorded as-is rather than raised.
    """
    alphas = [float(a) for a in alphas]
    if 0.0 not in alphas:
        raise ValueError("alphas must include 0")
    if num_directions < 1:
        raise ValueError("num_directions must be >= 1")
    if paired and num_directions % 2 != 0:
        raise ValueError("paired sampling needs an even num_directions")
    rng = rng or torch.Generator().manual_seed(0)

    was_training = model.training
    model.eval()  # keep normalization buffers frozen while probing
    originals = {name: p.detach().clone() for name, p in model.named_parameters()}
    buffers = {name: b.detach().clone() for name, b in model.named_buffers()}
    directions = []
    while len(directions) < num_directions:
        d = _filter_normalized_direction(model, rng)
        directions.append(d)
        if paired and len(directions) < num_directions:
            directions.append({k: -v for k, v in d.items()})

    per_direction = []
    try:
        with torch.no_grad():
            for d in directions:
                row = []
                for alpha in alphas:
                    for name, p in model.named_parameters():
                        p.copy_(originals[name] + alpha * d[name])
                    row.append(float(loss_eval(model)))
                per_direction.append(row)
    finally:
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(originals[name])
            for name, b in model.named_buffers():
                b.copy_(buffers[name])
        if was_training:
            model.train()

    mean_loss = [
        sum(per_direction[i][j] for i in range(num_directions)) / num_directions
        for j in range(len(alphas))
    ]
    return LandscapeProfile(
        alphas=alphas,
        mean_loss=mean_loss,
        num_directions=num_directions,
        per_direction_loss=per_direction,
        directions=directions if keep_directions else None,
    )
