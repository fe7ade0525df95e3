"""Prediction, clean/robust accuracy evaluation, and ensemble routing.

The ensemble mechanism votes a task id from the K nearest stored/queried
reference embeddings, then answers with the auxiliary head on the newest
task's class block and the primary head on any earlier task's block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import LabeledExample, TaskStream
from .losses import AttackConfig, cross_entropy, pgd_attack
from .models import AUXILIARY, PRIMARY, DualHeadModel
from .query import RANDOM_BUCKET, QueriedPool, embed_images
from .sampling import MemoryBank
from .seeding import EVAL_ATTACK, derive_seed

ENSEMBLE = "ensemble"


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleConfig:
    """K for the nearest-reference task vote (Euclidean in feature space)."""

    k_neighbors: int = 50

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")


@dataclass
class EnsembleContext:
    """Reference table built once per evaluation; read-only afterwards."""

    embeddings: np.ndarray  # (R, d)
    task_ids: np.ndarray  # (R,)
    ref_keys: np.ndarray  # (R,) permutation-invariant tie-break key
    task_blocks: dict[int, tuple[int, int]]
    newest_task: int
    config: EnsembleConfig = field(default_factory=EnsembleConfig)


def build_ensemble_context(model: DualHeadModel, bank: MemoryBank,
                           queried_pool: QueriedPool | None, stream: TaskStream,
                           newest_task: int,
                           config: EnsembleConfig | None = None) -> EnsembleContext:
    """Embed every stored exemplar and queried item, tagged with its task id.

    Random-query buckets carry no class information and are skipped.
    """
    items = []
    tasks = []
    keys = []
    for cls in bank.classes:
        t = stream.task_of_class(cls)
        for ex in bank.per_class[cls]:
            items.append(ex)
            tasks.append(t)
            keys.append(ex.source_id)
    if queried_pool is not None:
        for cls in sorted(queried_pool.per_class):
            if cls == RANDOM_BUCKET:
                continue
            t = stream.task_of_class(cls)
            for it in queried_pool.per_class[cls]:
                items.append(it)
                tasks.append(t)
                keys.append(it.source_id)
    if not items:
        raise EvaluationError("ensemble routing needs a non-empty reference set")
    emb = embed_images(model, items)
    blocks = {t: stream.class_block(t) for t in range(1, newest_task + 1)}
    return EnsembleContext(
        embeddings=emb,
        task_ids=np.asarray(tasks, dtype=np.int64),
        ref_keys=np.asarray(keys),
        task_blocks=blocks,
        newest_task=newest_task,
        config=config or EnsembleConfig(),
    )


def vote_tasks(distances: np.ndarray, task_ids: np.ndarray, ref_keys: np.ndarray,
               k: int) -> np.ndarray:
    """Majority task id among the k nearest references per row.

    Distance ties break by (task id, reference key) so the outcome is
    invariant to reference ordering; vote ties break toward the smaller
    task id.
    """
    n_refs = distances.shape[1]
    k = min(k, n_refs)
    out = np.empty(distances.shape[0], dtype=np.int64)
    for i in range(distances.shape[0]):
        order = np.lexsort((ref_keys, task_ids, distances[i]))[:k]
        counts = np.bincount(task_ids[order])
        out[i] = counts.argmax()
    return out


def predict(model: DualHeadModel, images: torch.Tensor,
            which: str = PRIMARY) -> np.ndarray:
    """Argmax class ids; exact ties resolve to the lower class id."""
    model.eval()
    with torch.no_grad():
        logits = model.forward(images, which)
    return logits.argmax(dim=-1).numpy()


def ensemble_predict(model: DualHeadModel, images: torch.Tensor,
                     ctx: EnsembleContext) -> np.ndarray:
    """Vote a task id per image, then argmax inside that task's class block
    using the auxiliary head for the newest task and the primary otherwise."""
    model.eval()
    with torch.no_grad():
        feats = model.features(images)
        logits_p = model.head_logits(feats, PRIMARY).numpy()
        logits_a = model.head_logits(feats, AUXILIARY).numpy()
    emb = feats.numpy()
    d2 = (
        (emb ** 2).sum(axis=1)[:, None]
        + (ctx.embeddings ** 2).sum(axis=1)[None, :]
        - 2.0 * emb @ ctx.embeddings.T
    )
    voted = vote_tasks(np.maximum(d2, 0.0), ctx.task_ids, ctx.ref_keys,
                       ctx.config.k_neighbors)
    preds = np.empty(images.shape[0], dtype=np.int64)
    for i, t in enumerate(voted):
        lo, hi = ctx.task_blocks[int(t)]
        block = logits_a[i, lo:hi] if int(t) == ctx.newest_task else logits_p[i, lo:hi]
        preds[i] = lo + int(block.argmax())
    return preds


def _batches(examples: list[LabeledExample], batch_size: int):
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        arr = np.stack([ex.image for ex in chunk]).transpose(0, 3, 1, 2)
        x = torch.from_numpy(np.ascontiguousarray(arr))
        y = torch.tensor([ex.label for ex in chunk], dtype=torch.long)
        yield x, y


@dataclass
class TaskMetrics:
    per_task: dict[int, float]
    average: float


def _aggregate(per_task: dict[int, float]) -> TaskMetrics:
    avg = float(np.mean([per_task[t] for t in sorted(per_task)]))
    return TaskMetrics(per_task=per_task, average=avg)


def evaluate_sa(model: DualHeadModel, test_sets: dict[int, list[LabeledExample]],
                head: str = PRIMARY, ensemble_ctx: EnsembleContext | None = None,
                batch_size: int = 256) -> TaskMetrics:
    """Clean accuracy per task plus the unweighted across-task average."""
    if not test_sets:
        raise EvaluationError("no test sets given")
    per_task: dict[int, float] = {}
    for t in sorted(test_sets):
        examples = test_sets[t]
        if not examples:
            raise EvaluationError(f"test set for task {t} is empty")
        correct = 0
        for x, y in _batches(examples, batch_size):
            if head == ENSEMBLE:
                if ensemble_ctx is None:
                    raise EvaluationError("ensemble evaluation needs an EnsembleContext")
                preds = ensemble_predict(model, x, ensemble_ctx)
            else:
                preds = predict(model, x, head)
            correct += int((preds == y.numpy()).sum())
        per_task[t] = 100.0 * correct / len(examples)
    return _aggregate(per_task)


def evaluate_ra(model: DualHeadModel, test_sets: dict[int, list[LabeledExample]],
                attack: AttackConfig, head: str = PRIMARY,
                ensemble_ctx: EnsembleContext | None = None,
                ensemble_attack: str = "transfer", seed: int = 0,
                batch_size: int = 256) -> TaskMetrics:
    """Accuracy under the PGD evaluation attack.

    Head evaluation attacks that head's full logits. For the ensemble,
    "transfer" crafts perturbations against the primary head and routes the
    result; "adaptive" first routes the clean image, attacks the head it
    routed to, then re-routes the perturbed image.
    """
    if not test_sets:
        raise EvaluationError("no test sets given")
    if head == ENSEMBLE and ensemble_ctx is None:
        raise EvaluationError("ensemble evaluation needs an EnsembleContext")
    model.eval()
    per_task: dict[int, float] = {}
    for t in sorted(test_sets):
        examples = test_sets[t]
        if not examples:
            raise EvaluationError(f"test set for task {t} is empty")
        correct = 0
        for b, (x, y) in enumerate(_batches(examples, batch_size)):
            batch_seed = derive_seed(seed, EVAL_ATTACK, t, b)
            if head != ENSEMBLE:
                adv = pgd_attack(lambda xa: cross_entropy(model.forward(xa, head), y),
                                 x, attack, seed=batch_seed)
                preds = predict(model, adv, head)
            elif ensemble_attack == "transfer":
                adv = pgd_attack(lambda xa: cross_entropy(model.forward(xa, PRIMARY), y),
                                 x, attack, seed=batch_seed)
                preds = ensemble_predict(model, adv, ensemble_ctx)
            elif ensemble_attack == "adaptive":
                routed = vote_on_images(model, x, ensemble_ctx)
                adv = x.clone()
                for which, mask in _route_masks(routed, ensemble_ctx):
                    if not mask.any():
                        continue
                    idx = torch.from_numpy(np.nonzero(mask)[0])
                    sub_adv = pgd_attack(
                        lambda xa, w=which, yy=y[idx]: cross_entropy(model.forward(xa, w), yy),
                        x[idx], attack, seed=batch_seed)
                    adv[idx] = sub_adv
                preds = ensemble_predict(model, adv, ensemble_ctx)
            else:
                raise EvaluationError(f"unknown ensemble_attack {ensemble_attack!r}")
            correct += int((preds == y.numpy()).sum())
        per_task[t] = 100.0 * correct / len(examples)
    return _aggregate(per_task)


def vote_on_images(model: DualHeadModel, images: torch.Tensor,
                   ctx: EnsembleContext) -> np.ndarray:
    """Task ids the ensemble would route each image to."""
    model.eval()
    with torch.no_grad():
        emb = model.features(images).numpy()
    d2 = (
        (emb ** 2).sum(axis=1)[:, None]
        + (ctx.embeddings ** 2).sum(axis=1)[None, :]
        - 2.0 * emb @ ctx.embeddings.T
    )
    return vote_tasks(np.maximum(d2, 0.0), ctx.task_ids, ctx.ref_keys,
                      ctx.config.k_neighbors)


def _route_masks(routed: np.ndarray, ctx: EnsembleContext):
    newest = routed == ctx.newest_task
    yield AUXILIARY, newest
    yield PRIMARY, ~newest
