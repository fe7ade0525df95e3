"""Memory bank and per-step batch construction.

Every training step consumes three batches: a class-balanced labeled batch
for the primary head, a random labeled batch for the auxiliary head, and an
unlabeled batch for the forgetting regularizers. All builders are pure
functions of (inputs, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import LabeledExample, Task

DEFAULT_CB_SIZE = 64
DEFAULT_RS_SIZE = 64
DEFAULT_UD_SIZE = 128


class SamplingError(ValueError):
    pass


@dataclass
class MemoryBank:
    """Per-class exemplar store with a fixed budget per class."""

    budget_per_class: int
    per_class: dict[int, list[LabeledExample]] = field(default_factory=dict)

    def __post_init__(self):
        if self.budget_per_class < 0:
            raise SamplingError("budget_per_class must be >= 0")

    @property
    def classes(self) -> list[int]:
        return sorted(self.per_class)

    @property
    def size(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def all_examples(self) -> list[LabeledExample]:
        return [ex for cls in self.classes for ex in self.per_class[cls]]


def update_memory_bank(bank: MemoryBank, finished_task: Task, seed: int) -> MemoryBank:
    """Add min(budget, available) i.i.d. exemplars per new class.

    Returns a new bank; existing class entries are shared, not copied.
    """
    rng = np.random.default_rng(seed)
    per_class = dict(bank.per_class)
    by_class: dict[int, list[LabeledExample]] = {}
    for ex in finished_task.train:
        by_class.setdefault(ex.label, []).append(ex)
    for cls in sorted(finished_task.class_labels):
        if cls in per_class:
            raise SamplingError(f"class {cls} already stored in the memory bank")
        available = by_class.get(cls, [])
        take = min(bank.budget_per_class, len(available))
        idx = rng.choice(len(available), size=take, replace=False) if take else []
        per_class[cls] = [available[i] for i in sorted(idx)]
    return MemoryBank(budget_per_class=bank.budget_per_class, per_class=per_class)


@dataclass(frozen=True)
class AugmentConfig:
    """Crop/flip augmentation, applied identically to all three batches."""

    random_crop: bool = False
    random_flip: bool = False
    crop_pad: int = 2


def _augment_stack(images: np.ndarray, cfg: AugmentConfig | None,
                   rng: np.random.Generator) -> np.ndarray:
    if cfg is None or not (cfg.random_crop or cfg.random_flip):
        return images
    n, h, w, _ = images.shape
    out = images
    if cfg.random_crop:
        pad = cfg.crop_pad
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
        cropped = np.empty_like(out)
        for i in range(n):
            oy, ox = offsets[i]
            cropped[i] = padded[i, oy:oy + h, ox:ox + w]
        out = cropped
    if cfg.random_flip:
        flips = rng.random(n) < 0.5
        out = out.copy()
        out[flips] = out[flips, :, ::-1]
    return out


def _to_batch(examples: list[LabeledExample], cfg: AugmentConfig | None,
              rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    images = np.stack([ex.image for ex in examples]) if examples else \
        np.zeros((0, 1, 1, 1), dtype=np.float32)
    images = _augment_stack(images, cfg, rng)
    x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
    y = torch.tensor([ex.label for ex in examples], dtype=torch.long)
    return x, y


def build_class_balanced_batch(bank: MemoryBank, current_task_data: list[LabeledExample],
                               size: int, seed: int,
                               augment: AugmentConfig | None = None
                               ) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-class counts differ by at most one across all seen classes.

    Remainder slots go to a seeded random subset of classes. Classes whose
    pool is smaller than their quota are sampled with replacement.
    """
    pools: dict[int, list[LabeledExample]] = {c: list(v) for c, v in bank.per_class.items()}
    for ex in current_task_data:
        pools.setdefault(ex.label, []).append(ex)
    if not pools:
        raise SamplingError("no data: memory bank and current task are both empty")
    classes = sorted(pools)
    if size < len(classes):
        raise SamplingError(f"batch size {size} < {len(classes)} distinct classes")
    rng = np.random.default_rng(seed)
    base, extra = divmod(size, len(classes))
    quotas = {c: base for c in classes}
    for c in rng.choice(classes, size=extra, replace=False):
        quotas[int(c)] += 1
    chosen: list[LabeledExample] = []
    for c in classes:
        pool = pools[c]
        q = quotas[c]
        replace = len(pool) < q
        idx = rng.choice(len(pool), size=q, replace=replace)
        chosen.extend(pool[i] for i in idx)
    return _to_batch(chosen, augment, rng)


def build_random_batch(bank: MemoryBank, current_task_data: list[LabeledExample],
                       size: int, seed: int,
                       augment: AugmentConfig | None = None
                       ) -> tuple[torch.Tensor, torch.Tensor]:
    """Uniform i.i.d. sample over stored exemplars plus new task data."""
    union = bank.all_examples() + list(current_task_data)
    if not union:
        raise SamplingError("no data: memory bank and current task are both empty")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(union), size=size)
    return _to_batch([union[i] for i in idx], augment, rng)


def build_unlabeled_batch(pool_items, size: int, seed: int,
                          augment: AugmentConfig | None = None) -> torch.Tensor:
    """Uniform sample of `size` pool items, with replacement only when the
    pool is smaller than the batch."""
    items = list(pool_items)
    if not items and size > 0:
        raise SamplingError("unlabeled pool is empty")
    rng = np.random.default_rng(seed)
    if size == 0:
        idx = np.zeros(0, dtype=int)
    elif len(items) >= size:
        idx = rng.choice(len(items), size=size, replace=False)
    else:
        idx = rng.choice(len(items), size=size, replace=True)
    images = np.stack([items[i].image for i in idx]) if len(idx) else \
        np.zeros((0, 1, 1, 1), dtype=np.float32)
    images = _augment_stack(images, augment, rng)
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


@dataclass
class BatchTriple:
    """The three per-step batches; defaults total 256."""

    cb: tuple[torch.Tensor, torch.Tensor]
    rs: tuple[torch.Tensor, torch.Tensor]
    ud: torch.Tensor

    CB_SIZE = DEFAULT_CB_SIZE
    RS_SIZE = DEFAULT_RS_SIZE
    UD_SIZE = DEFAULT_UD_SIZE


def build_batch_triple(bank: MemoryBank, current_task_data: list[LabeledExample],
                       pool_items, seeds: tuple[int, int, int],
                       sizes: tuple[int, int, int] = (DEFAULT_CB_SIZE, DEFAULT_RS_SIZE, DEFAULT_UD_SIZE),
                       augment: AugmentConfig | None = None) -> BatchTriple:
    cb = build_class_balanced_batch(bank, current_task_data, sizes[0], seeds[0], augment)
    rs = build_random_batch(bank, current_task_data, sizes[1], seeds[1], augment)
    ud = build_unlabeled_batch(pool_items, sizes[2], seeds[2], augment)
    return BatchTriple(cb=cb, rs=rs, ud=ud)
