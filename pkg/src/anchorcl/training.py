"""One incremental training session.

A session minimizes the supervised terms on the class-balanced and random
batches (through the primary and auxiliary heads respectively) plus the
forgetting regularizers on the queried-unlabeled batch; the robust variant
wraps PGD maximization around the supervised terms and uses the robustified
regularizers. Model selection picks the epoch checkpoint with the highest
primary-head accuracy on holdout validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from . import seeding
from .data import LabeledExample, Task
from .losses import (
    AttackConfig,
    consistency_loss,
    cross_entropy,
    ft_loss,
    kd_loss,
    pgd_attack,
    robust_ft_loss,
    robust_kd_loss,
)
from .models import AUXILIARY, PRIMARY, DualHeadModel, Hyperparameters
from .query import QueriedPool
from .sampling import (
    AugmentConfig,
    MemoryBank,
    build_class_balanced_batch,
    build_random_batch,
    build_unlabeled_batch,
)


class SessionError(RuntimeError):
    pass


@dataclass
class SessionConfig:
    """Schedule, batch composition, loss weights, and attack for one session.

    The optimizer is SGD with the configured momentum (0.9 by default). If
    lr_schedule is not given it is derived from base_lr with step decays at
    the milestone fractions of the epoch budget.
    """

    epochs: int = 20
    base_lr: float = 0.01
    lr_schedule: tuple[tuple[int, float], ...] | None = None
    lr_milestones: tuple[float, ...] = (0.6, 0.8)
    lr_decay: float = 0.1
    momentum: float = 0.9
    batch_cb: int = 64
    batch_rs: int = 64
    batch_ud: int = 128
    steps_per_epoch: int | None = None
    augment: AugmentConfig | None = None
    hyperparameters: Hyperparameters = field(default_factory=Hyperparameters)
    attack: AttackConfig | None = None
    seed: int = 0
    session_index: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for _, lr in self.resolved_schedule():
            if lr <= 0:
                raise ValueError("learning rates must be positive")

    def resolved_schedule(self) -> list[tuple[int, float]]:
        if self.lr_schedule is not None:
            return sorted((int(e), float(lr)) for e, lr in self.lr_schedule)
        schedule = [(0, self.base_lr)]
        lr = self.base_lr
        for frac in self.lr_milestones:
            lr *= self.lr_decay
            schedule.append((int(math.floor(self.epochs * frac)), lr))
        return schedule

    def lr_at(self, epoch: int) -> float:
        lr = None
        for start, value in self.resolved_schedule():
            if epoch >= start:
                lr = value
        if lr is None:
            raise ValueError(f"lr schedule does not cover epoch {epoch}")
        return lr


@dataclass
class StepLog:
    """Per-step loss components; `total` is what was backpropagated."""

    session: int
    epoch: int
    step: int
    ce_cb: float
    ce_rs: float
    lwf_primary: float
    lwf_auxiliary: float
    consistency: float
    total: float

    def component_sum(self, hp: Hyperparameters, robust: bool) -> float:
        w_lwf = hp.robust_lwf_weight if robust else hp.lwf_weight
        return (self.ce_cb + self.ce_rs
                + w_lwf * (self.lwf_primary + self.lwf_auxiliary)
                + hp.consistency_weight * self.consistency)


@dataclass
class SessionResult:
    model: DualHeadModel
    selected_epoch: int
    selected_val_sa: float
    step_logs: list[StepLog] = field(default_factory=list)


def _state_copy(model: DualHeadModel) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _item(t: torch.Tensor) -> float:
    return float(t.detach())


def _validation_sa(model: DualHeadModel, validation: list[LabeledExample],
                   batch_size: int = 512) -> float:
    from .inference import evaluate_sa

    return evaluate_sa(model, {1: validation}, PRIMARY, batch_size=batch_size).average


def select_model(model: DualHeadModel, epoch_checkpoints: list[tuple[int, dict]],
                 validation: list[LabeledExample]) -> tuple[int, float]:
    """Load the checkpoint with the highest primary-head validation accuracy
    into `model`; ties go to the later epoch. Returns (epoch, accuracy)."""
    if not epoch_checkpoints:
        raise SessionError("no checkpoints to select from")
    if not validation:
        raise SessionError("validation set is empty")
    best_epoch, best_sa, best_state = -1, -1.0, None
    for epoch, state in sorted(epoch_checkpoints, key=lambda c: c[0]):
        model.load_state_dict(state)
        sa = _validation_sa(model, validation)
        if sa >= best_sa:
            best_epoch, best_sa, best_state = epoch, sa, state
    model.load_state_dict(best_state)
    return best_epoch, best_sa


def _snapshot_usable(snapshot: DualHeadModel | None) -> bool:
    return snapshot is not None and snapshot.seen_classes > 0


def _clean_lwf_terms(model, snapshot, ud, kind: str, temperature: float):
    """Forgetting terms on clean unlabeled inputs, one per head.

    The feature-transfer kind has no head dependence, so both entries are
    the same tensor and the two-term objective contributes it twice.
    """
    k_prev = snapshot.seen_classes
    if kind == "kd":
        feats = model.features(ud)
        with torch.no_grad():
            snap_feats = snapshot.features(ud)
            snap_p = snapshot.head_logits(snap_feats, PRIMARY)
            snap_a = snapshot.head_logits(snap_feats, AUXILIARY)
        lwf_p = kd_loss(model.head_logits(feats, PRIMARY)[:, :k_prev], snap_p, temperature)
        lwf_a = kd_loss(model.head_logits(feats, AUXILIARY)[:, :k_prev], snap_a, temperature)
        return lwf_p, lwf_a
    if kind == "ft":
        with torch.no_grad():
            snap_feats = snapshot.features(ud)
        term = ft_loss(model.features(ud), snap_feats)
        return term, term
    raise SessionError(f"unknown clean regularizer kind {kind!r}")


def _robust_lwf_terms(model, snapshot, ud, kind: str, temperature: float,
                      attack: AttackConfig, seed_primary: int, seed_auxiliary: int):
    if kind in ("kd", "ft"):
        return _clean_lwf_terms(model, snapshot, ud, kind, temperature)
    if kind == "rkd":
        lwf_p = robust_kd_loss(model, snapshot, ud, attack, temperature,
                               PRIMARY, seed=seed_primary)
        lwf_a = robust_kd_loss(model, snapshot, ud, attack, temperature,
                               AUXILIARY, seed=seed_auxiliary)
        return lwf_p, lwf_a
    if kind == "rft":
        term = robust_ft_loss(model, snapshot, ud, attack, seed=seed_primary)
        return term, term
    raise SessionError(f"unknown robust regularizer kind {kind!r}")


def _run_session(model: DualHeadModel, snapshot: DualHeadModel | None,
                 bank: MemoryBank, queried_pool: QueriedPool | None, task: Task,
                 cfg: SessionConfig, validation: list[LabeledExample],
                 robust: bool, vanilla: bool = False) -> SessionResult:
    hp = cfg.hyperparameters
    lwf_weight = hp.robust_lwf_weight if robust else hp.lwf_weight
    use_lwf = _snapshot_usable(snapshot) and lwf_weight > 0
    use_consistency = (robust and not vanilla and hp.use_consistency
                       and hp.consistency_weight > 0
                       and queried_pool is not None and queried_pool.size > 0)
    if use_lwf and not vanilla and (queried_pool is None or queried_pool.size == 0):
        raise SessionError(
            "forgetting regularizer is active but no queried unlabeled pool was given"
        )
    if vanilla and use_lwf and bank.size == 0:
        raise SessionError("stored-only training needs a non-empty memory bank")
    pool_items = queried_pool.all_items() if (queried_pool is not None) else []

    model.train()
    model.begin_session()
    checkpoints: list[tuple[int, dict]] = []
    step_logs: list[StepLog] = []
    try:
        optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr_at(0),
                                    momentum=cfg.momentum)
        steps = cfg.steps_per_epoch or max(1, math.ceil(len(task.train) / cfg.batch_rs))
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            for step in range(steps):
                if vanilla:
                    log = _vanilla_step(model, snapshot, bank, task, cfg, robust,
                                        use_lwf, epoch, step, optimizer)
                else:
                    log = _dual_step(model, snapshot, bank, pool_items, task, cfg,
                                     robust, use_lwf, use_consistency,
                                     epoch, step, optimizer)
                step_logs.append(log)
            checkpoints.append((epoch, _state_copy(model)))
    finally:
        model.end_session()

    selected_epoch, selected_sa = select_model(model, checkpoints, validation)
    return SessionResult(model=model, selected_epoch=selected_epoch,
                         selected_val_sa=selected_sa, step_logs=step_logs)


def _dual_step(model, snapshot, bank, pool_items, task, cfg: SessionConfig,
               robust, use_lwf, use_consistency, epoch, step, optimizer) -> StepLog:
    hp = cfg.hyperparameters
    s = cfg.seed
    cb_x, cb_y = build_class_balanced_batch(
        bank, task.train, cfg.batch_cb,
        seeding.derive_seed(s, seeding.BATCH_CB, epoch, step), cfg.augment)
    rs_x, rs_y = build_random_batch(
        bank, task.train, cfg.batch_rs,
        seeding.derive_seed(s, seeding.BATCH_RS, epoch, step), cfg.augment)
    ud = None
    if use_lwf or use_consistency:
        ud = build_unlabeled_batch(
            pool_items, cfg.batch_ud,
            seeding.derive_seed(s, seeding.BATCH_UD, epoch, step), cfg.augment)

    if robust:
        cb_x = pgd_attack(lambda xa: cross_entropy(model.forward(xa, PRIMARY), cb_y),
                          cb_x, cfg.attack,
                          seed=seeding.derive_seed(s, seeding.ATTACK_CB, epoch, step))
        rs_x = pgd_attack(lambda xa: cross_entropy(model.forward(xa, AUXILIARY), rs_y),
                          rs_x, cfg.attack,
                          seed=seeding.derive_seed(s, seeding.ATTACK_RS, epoch, step))
    ce_cb = cross_entropy(model.forward(cb_x, PRIMARY), cb_y)
    ce_rs = cross_entropy(model.forward(rs_x, AUXILIARY), rs_y)

    # summed in float64 so the logged decomposition is exact; the extra casts
    # do not change the float32 gradients
    total = ce_cb.double() + ce_rs.double()
    lwf_p_val = lwf_a_val = cons_val = 0.0
    if use_lwf:
        weight = hp.robust_lwf_weight if robust else hp.lwf_weight
        if robust:
            lwf_p, lwf_a = _robust_lwf_terms(
                model, snapshot, ud, hp.robust_lwf_kind, hp.kd_temperature, cfg.attack,
                seeding.derive_seed(s, seeding.ATTACK_LWF_PRIMARY, epoch, step),
                seeding.derive_seed(s, seeding.ATTACK_LWF_AUXILIARY, epoch, step))
        else:
            lwf_p, lwf_a = _clean_lwf_terms(model, snapshot, ud, hp.lwf_kind,
                                            hp.kd_temperature)
        total = total + weight * (lwf_p.double() + lwf_a.double())
        lwf_p_val, lwf_a_val = _item(lwf_p), _item(lwf_a)
    if use_consistency:
        cons = consistency_loss(
            model, ud, cfg.attack, PRIMARY,
            seed=seeding.derive_seed(s, seeding.ATTACK_CONSISTENCY, epoch, step))
        total = total + hp.consistency_weight * cons.double()
        cons_val = _item(cons)

    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return StepLog(session=cfg.session_index, epoch=epoch, step=step,
                   ce_cb=_item(ce_cb), ce_rs=_item(ce_rs),
                   lwf_primary=lwf_p_val, lwf_auxiliary=lwf_a_val,
                   consistency=cons_val, total=_item(total))


def _vanilla_step(model, snapshot, bank, task, cfg: SessionConfig, robust,
                  use_lwf, epoch, step, optimizer) -> StepLog:
    """Stored-only baseline: one random labeled batch through the primary
    head, forgetting term computed on memory-bank images instead of a
    queried pool, auxiliary head untrained."""
    hp = cfg.hyperparameters
    s = cfg.seed
    size = cfg.batch_cb + cfg.batch_rs
    x, y = build_random_batch(bank, task.train, size,
                              seeding.derive_seed(s, seeding.BATCH_RS, epoch, step),
                              cfg.augment)
    if robust:
        x = pgd_attack(lambda xa: cross_entropy(model.forward(xa, PRIMARY), y),
                       x, cfg.attack,
                       seed=seeding.derive_seed(s, seeding.ATTACK_CB, epoch, step))
    ce = cross_entropy(model.forward(x, PRIMARY), y)
    total = ce.double()
    lwf_val = 0.0
    if use_lwf:
        stored_x, _ = build_random_batch(
            bank, [], cfg.batch_ud,
            seeding.derive_seed(s, seeding.BATCH_UD, epoch, step), cfg.augment)
        weight = hp.robust_lwf_weight if robust else hp.lwf_weight
        kind = hp.robust_lwf_kind if robust else hp.lwf_kind
        k_prev = snapshot.seen_classes
        if kind == "kd":
            with torch.no_grad():
                snap_logits = snapshot.forward(stored_x, PRIMARY)
            lwf = kd_loss(model.forward(stored_x, PRIMARY)[:, :k_prev],
                          snap_logits, hp.kd_temperature)
        elif kind == "ft":
            with torch.no_grad():
                snap_feats = snapshot.features(stored_x)
            lwf = ft_loss(model.features(stored_x), snap_feats)
        elif kind == "rkd":
            lwf = robust_kd_loss(
                model, snapshot, stored_x, cfg.attack, hp.kd_temperature, PRIMARY,
                seed=seeding.derive_seed(s, seeding.ATTACK_LWF_PRIMARY, epoch, step))
        else:
            lwf = robust_ft_loss(
                model, snapshot, stored_x, cfg.attack,
                seed=seeding.derive_seed(s, seeding.ATTACK_LWF_PRIMARY, epoch, step))
        total = total + weight * lwf.double()
        lwf_val = _item(lwf)

    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return StepLog(session=cfg.session_index, epoch=epoch, step=step,
                   ce_cb=_item(ce), ce_rs=0.0, lwf_primary=lwf_val,
                   lwf_auxiliary=0.0, consistency=0.0, total=_item(total))


def train_session_standard(model: DualHeadModel, snapshot: DualHeadModel | None,
                           bank: MemoryBank, queried_pool: QueriedPool | None,
                           task: Task, cfg: SessionConfig,
                           validation: list[LabeledExample]) -> SessionResult:
    return _run_session(model, snapshot, bank, queried_pool, task, cfg,
                        validation, robust=False)


def train_session_robust(model: DualHeadModel, snapshot: DualHeadModel | None,
                         bank: MemoryBank, queried_pool: QueriedPool | None,
                         task: Task, cfg: SessionConfig,
                         validation: list[LabeledExample]) -> SessionResult:
    if cfg.attack is None:
        raise SessionError("robust training requires an attack config")
    return _run_session(model, snapshot, bank, queried_pool, task, cfg,
                        validation, robust=True)


def train_session_vanilla(model: DualHeadModel, snapshot: DualHeadModel | None,
                          bank: MemoryBank, task: Task, cfg: SessionConfig,
                          validation: list[LabeledExample],
                          robust: bool = False) -> SessionResult:
    if robust and cfg.attack is None:
        raise SessionError("robust training requires an attack config")
    return _run_session(model, snapshot, bank, None, task, cfg, validation,
                        robust=robust, vanilla=True)
