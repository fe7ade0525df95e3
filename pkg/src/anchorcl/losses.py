"""Loss terms on labeled and queried-unlabeled data, and the l-inf PGD attack.

The forgetting regularizers tie the live model to a frozen snapshot on
unlabeled data, either through temperature-softened output distillation
(kd) or an l1 feature-matching penalty (ft). Their robust variants wrap an
inner PGD maximization around the same objectives; the consistency loss is
a TRADES-style KL term between the current model's adversarial and clean
predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .models import PRIMARY, DualHeadModel


class AttackError(RuntimeError):
    """Non-finite gradients or other failures inside the inner maximization."""


@dataclass(frozen=True)
class AttackConfig:
    """l-inf PGD settings; epsilon and alpha are in pixel units ([0,1] scale)."""

    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    random_start: bool = True

    def __post_init__(self):
        if not (0.0 <= self.epsilon <= 1.0):
            raise ValueError("epsilon must lie in [0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


# evaluation attacks run twice as many steps and start at the clean point
DEFAULT_EVAL_STEPS = 20


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError(
            f"labels must lie in [0, {logits.shape[-1]}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return F.cross_entropy(logits, labels)


def kd_loss(current_logits: torch.Tensor, snapshot_logits: torch.Tensor,
            temperature: float) -> torch.Tensor:
    """Soft cross-entropy between temperature-softened distributions.

    Targets come from the snapshot and are constants; both logit blocks must
    cover the same (previously seen) classes.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if current_logits.shape != snapshot_logits.shape:
        raise ValueError(
            f"class blocks differ: {tuple(current_logits.shape)} vs "
            f"{tuple(snapshot_logits.shape)}"
        )
    target = torch.softmax(snapshot_logits.detach() / temperature, dim=-1)
    log_p = F.log_softmax(current_logits / temperature, dim=-1)
    return -(target * log_p).sum(dim=-1).mean()


def ft_loss(current_features: torch.Tensor, snapshot_features: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the per-example l1 feature distance."""
    if current_features.shape != snapshot_features.shape:
        raise ValueError(
            f"feature shapes differ: {tuple(current_features.shape)} vs "
            f"{tuple(snapshot_features.shape)}"
        )
    return (current_features - snapshot_features.detach()).abs().sum(dim=-1).mean()


def kl_divergence(p_logits: torch.Tensor, q_log_probs: torch.Tensor,
                  prob_floor: float = 1e-12) -> torch.Tensor:
    """KL(p || q) with p given as logits and q as log-probabilities.

    Both log terms are floored at log(prob_floor) so degenerate
    distributions stay finite; identical logits give exactly zero.
    """
    log_floor = math.log(prob_floor)
    p_log = F.log_softmax(p_logits, dim=-1)
    q_log = q_log_probs.clamp_min(log_floor)
    return (p_log.exp() * (p_log.clamp_min(log_floor) - q_log)).sum(dim=-1).mean()


def pgd_attack(loss_closure, images: torch.Tensor, cfg: AttackConfig,
               seed: int | None = None) -> torch.Tensor:
    """Maximize `loss_closure(x + delta)` over the epsilon l-inf ball.

    Signed-gradient ascent with step size alpha, projecting onto the ball
    and the [0,1] pixel box after every step. With epsilon == 0 the input
    is returned unchanged. The closure must return a scalar; callers are
    responsible for putting stateful-normalization models in eval mode
    (the built-in backbone is GroupNorm and has no such state).
    """
    x0 = images.detach()
    if cfg.epsilon == 0.0:
        return x0.clone()
    x_adv = x0.clone()
    if cfg.random_start:
        gen = torch.Generator(device=x0.device)
        gen.manual_seed(0 if seed is None else int(seed))
        noise = torch.empty_like(x0).uniform_(-cfg.epsilon, cfg.epsilon, generator=gen)
        x_adv = (x0 + noise).clamp(0.0, 1.0)
    for step in range(cfg.steps):
        x_adv = x_adv.detach().requires_grad_(True)
        loss = loss_closure(x_adv)
        if loss.numel() != 1:
            raise AttackError("loss_closure must return a scalar")
        if not torch.isfinite(loss.detach()):
            raise AttackError(f"non-finite attack loss at step {step}")
        (grad,) = torch.autograd.grad(loss, x_adv)
        if not torch.isfinite(grad).all():
            raise AttackError(
                f"non-finite attack gradient at step {step} "
                f"(loss={float(loss.detach()):.6g})"
            )
        stepped = x_adv.detach() + cfg.alpha * grad.sign()
        delta = (stepped - x0).clamp(-cfg.epsilon, cfg.epsilon)
        x_adv = (x0 + delta).clamp(0.0, 1.0)
    adv = x_adv.detach()
    if adv.numel():
        # box projection runs last, so the pixel range holds exactly; the
        # l-inf bound holds up to rounding of the final x0 + delta addition
        eps_t = torch.as_tensor(cfg.epsilon, dtype=adv.dtype)
        slack = 4 * torch.finfo(adv.dtype).eps
        assert bool(((adv - x0).abs() <= eps_t + slack).all())
        assert float(adv.min()) >= 0.0 and float(adv.max()) <= 1.0
    return adv


def _sliced_logits(model: DualHeadModel, images: torch.Tensor, head: str,
                   num_classes: int) -> torch.Tensor:
    return model.forward(images, head)[:, :num_classes]


def robust_kd_loss(model: DualHeadModel, snapshot: DualHeadModel,
                   images: torch.Tensor, cfg: AttackConfig, temperature: float,
                   head: str = PRIMARY, seed: int | None = None) -> torch.Tensor:
    """Distillation toward the snapshot's clean predictions, evaluated at the
    worst-case perturbation of the current model's input."""
    if images.shape[0] == 0:
        raise ValueError("unlabeled batch is empty")
    k_prev = snapshot.seen_classes
    with torch.no_grad():
        snap_logits = snapshot.forward(images, head)

    def closure(x_adv):
        return kd_loss(_sliced_logits(model, x_adv, head, k_prev), snap_logits, temperature)

    adv = pgd_attack(closure, images, cfg, seed=seed)
    return kd_loss(_sliced_logits(model, adv, head, k_prev), snap_logits, temperature)


def robust_ft_loss(model: DualHeadModel, snapshot: DualHeadModel,
                   images: torch.Tensor, cfg: AttackConfig,
                   seed: int | None = None) -> torch.Tensor:
    """Feature matching between perturbed current features and clean snapshot
    features; head-independent."""
    if images.shape[0] == 0:
        raise ValueError("unlabeled batch is empty")
    with torch.no_grad():
        snap_feats = snapshot.features(images)

    def closure(x_adv):
        return ft_loss(model.features(x_adv), snap_feats)

    adv = pgd_attack(closure, images, cfg, seed=seed)
    return ft_loss(model.features(adv), snap_feats)


def consistency_loss(model: DualHeadModel, images: torch.Tensor, cfg: AttackConfig,
                     head: str = PRIMARY, seed: int | None = None,
                     prob_floor: float = 1e-12) -> torch.Tensor:
    """Worst-case KL between the current model's adversarial and clean
    predictions (both from the same parameters; the clean branch is a
    constant for the outer minimization).

    The KL gradient vanishes at delta = 0, so a meaningful inner
    maximization needs random_start=True.
    """
    if images.shape[0] == 0:
        raise ValueError("unlabeled batch is empty")
    with torch.no_grad():
        clean_log = F.log_softmax(model.forward(images, head), dim=-1)

    def closure(x_adv):
        return kl_divergence(model.forward(x_adv, head), clean_log, prob_floor)

    adv = pgd_attack(closure, images, cfg, seed=seed)
    return kl_divergence(model.forward(adv, head), clean_log, prob_floor)
