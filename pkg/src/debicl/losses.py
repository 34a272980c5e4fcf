"""Training objectives.

Cross-entropy, temperature-softened knowledge distillation over old-class
logit columns, the paired self-distillation loss that ties a natural batch
to its stylized twin, the adaptive distillation weight schedule, and the two
composed totals used by the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    """lambda_base: distillation strength before the adaptive ramp;
    gamma: weight on the paired self-distillation term (0 disables it);
    tau_std / tau_kd: softmax temperatures.
    """

    lambda_base: float = 20.0
    gamma: float = 0.01
    tau_std: float = 2.0
    tau_kd: float = 2.0

    def __post_init__(self):
        if self.lambda_base <= 0:
            raise ValueError(f"lambda_base must be > 0, got {self.lambda_base}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.tau_std <= 0 or self.tau_kd <= 0:
            raise ValueError("temperatures must be > 0")


@dataclass
class LogitPair:
    """Logits of a natural batch and of its stylized counterpart, row-aligned."""

    Z: torch.Tensor
    Z_tilde: torch.Tensor

    def __post_init__(self):
        if self.Z.shape != self.Z_tilde.shape:
            raise ValueError(f"logit shapes differ: {tuple(self.Z.shape)} vs {tuple(self.Z_tilde.shape)}")
        if not (torch.isfinite(self.Z).all() and torch.isfinite(self.Z_tilde).all()):
            raise ValueError("non-finite logits")


def std_loss(pair: LogitPair, tau: float, detach_ensemble: bool = False) -> torch.Tensor:
    """KL(p || q) + KL(p_tilde || q) with q the softened ensemble distribution.

    p = softmax(Z/tau), p_tilde = softmax(Z_tilde/tau), q = softmax((Z+Z_tilde)/2tau),
    each KL summed over classes and averaged over rows. By default the ensemble
    target stays in the graph so both branches pull toward each other online;
    detach_ensemble treats q as a constant instead.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    ens = (pair.Z + pair.Z_tilde) / (2.0 * tau)
    if detach_ensemble:
        ens = ens.detach()
    log_q = F.log_softmax(ens, dim=1)
    log_p = F.log_softmax(pair.Z / tau, dim=1)
    log_pt = F.log_softmax(pair.Z_tilde / tau, dim=1)
    kl_p = (log_p.exp() * (log_p - log_q)).sum(dim=1).mean()
    kl_pt = (log_pt.exp() * (log_pt - log_q)).sum(dim=1).mean()
    return kl_p + kl_pt


def kd_loss(new_logits: torch.Tensor, old_logits: torch.Tensor, tau_kd: float = 2.0) -> torch.Tensor:
    """Distill the old model's class distribution into the new model.

    The new logits are restricted to the old-class columns (the leading ones,
    since the classifier only ever grows), both sides are softened by tau_kd,
    and the KL from old to new is batch-averaged and scaled by tau_kd**2.
    """
    if tau_kd <= 0:
        raise ValueError(f"tau_kd must be > 0, got {tau_kd}")
    c_old = old_logits.shape[1]
    if c_old > new_logits.shape[1] or new_logits.shape[0] != old_logits.shape[0]:
        raise ValueError(
            f"old logits {tuple(old_logits.shape)} do not fit new logits {tuple(new_logits.shape)}"
        )
    log_new = F.log_softmax(new_logits[:, :c_old] / tau_kd, dim=1)
    old = F.softmax(old_logits / tau_kd, dim=1)
    return F.kl_div(log_new, old, reduction="batchmean") * tau_kd**2


def adaptive_lambda(seen_classes: int, m_t: int, lambda_base: float) -> float:
    """lambda_t = lambda_base * (seen / m_t)^(2/3).

    The distillation weight grows as the seen-to-new class ratio grows, so late
    steps protect accumulated knowledge harder.
    """
    if m_t < 1 or seen_classes < m_t:
        raise ValueError(f"need seen_classes >= m_t >= 1, got seen={seen_classes} m_t={m_t}")
    return float(lambda_base) * (seen_classes / m_t) ** (2.0 / 3.0)


@dataclass
class LossTerms:
    """Mean-reduced component losses for one optimization step.

    ce_current / kd_current cover the current-task rows (natural rows, plus
    the stylized rows in debiased modes); ce_replay / kd_replay cover the
    exemplar rows and stay None in exemplar-free runs; std is the paired
    self-distillation value, present only when a conflict batch exists.
    """

    ce_current: torch.Tensor
    ce_replay: torch.Tensor | None = None
    kd_current: torch.Tensor | None = None
    kd_replay: torch.Tensor | None = None
    std: torch.Tensor | None = None


def _zero_like(ref: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=ref.dtype, device=ref.device)


def total_loss_standard(terms: LossTerms, lambda_t: float, exemplar_free: bool = False) -> torch.Tensor:
    """CE(current) + CE(replay) + lambda_t * (KD(current) + KD(replay))."""
    if terms.ce_replay is None and not exemplar_free:
        raise ValueError("replay CE term missing outside exemplar-free mode")
    zero = _zero_like(terms.ce_current)
    ce_replay = terms.ce_replay if terms.ce_replay is not None else zero
    kd_cur = terms.kd_current if terms.kd_current is not None else zero
    kd_rep = terms.kd_replay if terms.kd_replay is not None else zero
    return terms.ce_current + ce_replay + lambda_t * (kd_cur + kd_rep)


def total_loss_debiased(
    terms: LossTerms, lambda_t: float, gamma: float, exemplar_free: bool = False
) -> torch.Tensor:
    """Standard total plus gamma times the paired self-distillation term."""
    if terms.std is None:
        raise ValueError("debiased total requires the paired self-distillation term")
    base = total_loss_standard(terms, lambda_t, exemplar_free=exemplar_free)
    return base + gamma * terms.std
