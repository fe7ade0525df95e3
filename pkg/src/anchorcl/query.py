"""Selecting relevant unlabeled examples from an external pool.

The default method embeds stored anchors and pool items with a feature
extractor and ranks pool items per class by their distance to the nearest
anchor of that class. Alternatives: ranking by classifier logit, and plain
random sampling. All methods deduplicate globally, so no source_id ever
appears under two classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import UnlabeledExample
from .models import DualHeadModel
from .sampling import MemoryBank

# pseudo-class bucket used by random query; carries no class information
RANDOM_BUCKET = -1

AGGREGATE_MODES = ("min_distance", "per_anchor")


class QueryError(ValueError):
    pass


@dataclass
class QueriedPool:
    """Unlabeled items grouped by the class whose anchors retrieved them."""

    budget_per_class: int
    per_class: dict[int, list[UnlabeledExample]] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for cls, items in self.per_class.items():
            if cls != RANDOM_BUCKET and len(items) > self.budget_per_class:
                raise QueryError(f"class {cls} exceeds budget {self.budget_per_class}")
            for item in items:
                if item.source_id in seen:
                    raise QueryError(f"duplicate source_id {item.source_id!r} in pool")
                seen.add(item.source_id)

    @property
    def size(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def all_items(self) -> list[UnlabeledExample]:
        return [it for cls in sorted(self.per_class) for it in self.per_class[cls]]

    def source_ids(self) -> set[str]:
        return {it.source_id for it in self.all_items()}


def _stack_images(items) -> torch.Tensor:
    arr = np.stack([it.image for it in items]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr))


def embed_images(model: DualHeadModel, items, batch_size: int = 512) -> np.ndarray:
    """Feature embeddings in evaluation mode, one row per item."""
    if not items:
        raise QueryError("cannot embed an empty collection")
    model.eval()
    chunks = []
    with torch.no_grad():
        for lo in range(0, len(items), batch_size):
            x = _stack_images(items[lo:lo + batch_size])
            chunks.append(model.features(x).cpu().numpy())
    return np.concatenate(chunks, axis=0)


def embed_pool(model: DualHeadModel, pool: list[UnlabeledExample],
               batch_size: int = 512) -> list[tuple[str, np.ndarray]]:
    emb = embed_images(model, pool, batch_size)
    return [(item.source_id, emb[i]) for i, item in enumerate(pool)]


def _squared_distances(pool_emb: np.ndarray, anchor_emb: np.ndarray) -> np.ndarray:
    """(n_pool, n_anchors) squared Euclidean distances; order-equivalent to
    Euclidean for all rankings here."""
    d2 = (
        (pool_emb ** 2).sum(axis=1)[:, None]
        + (anchor_emb ** 2).sum(axis=1)[None, :]
        - 2.0 * pool_emb @ anchor_emb.T
    )
    return np.maximum(d2, 0.0)


def _ranked_by(keys: np.ndarray, source_ids: np.ndarray) -> np.ndarray:
    """Indices sorted by key ascending, ties by source_id ascending."""
    return np.lexsort((source_ids, keys))


def query_feature_knn(model: DualHeadModel, bank: MemoryBank,
                      pool: list[UnlabeledExample], budget_per_class: int,
                      seed: int | None = None, normalize: bool = False,
                      aggregate: str = "min_distance") -> QueriedPool:
    """Nearest-anchor retrieval per previous class with global dedup.

    Classes are processed in ascending id order; an item claimed by an
    earlier class is no longer a candidate for later ones. Fully
    deterministic; `seed` is accepted for interface parity only.
    """
    del seed
    if not bank.per_class:
        raise QueryError("memory bank is empty; nothing to anchor the query on")
    if aggregate not in AGGREGATE_MODES:
        raise QueryError(f"aggregate must be one of {AGGREGATE_MODES}")
    if budget_per_class == 0 or not pool:
        return QueriedPool(budget_per_class=budget_per_class)

    pool_emb = embed_images(model, pool)
    source_ids = np.array([it.source_id for it in pool])
    if normalize:
        pool_emb = pool_emb / np.maximum(np.linalg.norm(pool_emb, axis=1, keepdims=True), 1e-12)

    claimed = np.zeros(len(pool), dtype=bool)
    per_class: dict[int, list[UnlabeledExample]] = {}
    total_claimed = 0
    for cls in sorted(bank.per_class):
        anchors = bank.per_class[cls]
        anchor_emb = embed_images(model, anchors)
        if normalize:
            anchor_emb = anchor_emb / np.maximum(
                np.linalg.norm(anchor_emb, axis=1, keepdims=True), 1e-12)
        d2 = _squared_distances(pool_emb, anchor_emb)
        min_d = d2.min(axis=1)
        if aggregate == "min_distance":
            candidates = _ranked_by(min_d, source_ids)
        else:
            # per-anchor top-k, merged and re-ranked by nearest-anchor
            # distance; depth grows with prior claims so the merged list can
            # never run short of what the full ranking would have offered
            depth = min(len(pool), budget_per_class + total_claimed)
            cand_set = np.zeros(len(pool), dtype=bool)
            for a in range(anchor_emb.shape[0]):
                order = _ranked_by(d2[:, a], source_ids)
                cand_set[order[:depth]] = True
            idx = np.nonzero(cand_set)[0]
            candidates = idx[_ranked_by(min_d[idx], source_ids[idx])]
        picked = []
        for i in candidates:
            if len(picked) == budget_per_class:
                break
            if not claimed[i]:
                claimed[i] = True
                picked.append(pool[i])
        total_claimed += len(picked)
        per_class[cls] = picked
    return QueriedPool(budget_per_class=budget_per_class, per_class=per_class)


def query_largest_logit(model: DualHeadModel, pool: list[UnlabeledExample],
                        budget_per_class: int,
                        previous_classes: list[int]) -> QueriedPool:
    """Rank pool items by primary-head class logits.

    Assignment walks all (class, item) pairs from largest logit down,
    claiming each item once while the class has budget left; with budgets
    exceeding the pool this partitions the pool by best class. Ties fall
    back to ascending class id, then ascending source_id.
    """
    if not previous_classes:
        raise QueryError("previous_classes is empty")
    if budget_per_class == 0 or not pool:
        return QueriedPool(budget_per_class=budget_per_class)
    classes = sorted(previous_classes)
    if max(classes) >= model.seen_classes:
        raise QueryError(
            f"head covers {model.seen_classes} classes; cannot rank class {max(classes)}"
        )
    emb = embed_images(model, pool)
    with torch.no_grad():
        logits = model.head_logits(torch.from_numpy(emb)).numpy()

    n = len(pool)
    pair_logits = np.concatenate([-logits[:, c] for c in classes])
    pair_class_pos = np.repeat(np.arange(len(classes)), n)
    pair_item = np.tile(np.arange(n), len(classes))
    source_ids = np.array([it.source_id for it in pool])
    order = np.lexsort((source_ids[pair_item], pair_class_pos, pair_logits))

    counts = {c: 0 for c in classes}
    picked: dict[int, list[UnlabeledExample]] = {c: [] for c in classes}
    claimed = np.zeros(n, dtype=bool)
    remaining = min(len(classes) * budget_per_class, n)
    for k in order:
        if remaining == 0:
            break
        item = pair_item[k]
        cls = classes[pair_class_pos[k]]
        if claimed[item] or counts[cls] == budget_per_class:
            continue
        claimed[item] = True
        counts[cls] += 1
        picked[cls].append(pool[item])
        remaining -= 1
    return QueriedPool(budget_per_class=budget_per_class, per_class=picked)


def query_random(pool: list[UnlabeledExample], total_budget: int,
                 seed: int) -> QueriedPool:
    """Uniform sample without replacement into a single pseudo-class bucket."""
    if not pool:
        raise QueryError("pool is empty")
    take = min(total_budget, len(pool))
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=take, replace=False)
    items = [pool[i] for i in sorted(idx)]
    return QueriedPool(budget_per_class=total_budget,
                       per_class={RANDOM_BUCKET: items})
