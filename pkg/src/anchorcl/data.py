"""Datasets, task streams, and the on-disk manifest format.

A labeled dataset is a flat list of examples; the stream builder permutes
its classes, reindexes them to contiguous global ids, and partitions them
into equally sized incremental tasks. Synthetic template datasets give a
fast, fully reproducible stand-in for small-image benchmarks.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter


class DataError(ValueError):
    """Raised for malformed examples, manifests, or split requests."""


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise DataError(f"image must be HxWxC, got shape {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise DataError(
            f"pixel values must lie in [0,1], got [{image.min():.4f}, {image.max():.4f}]"
        )
    return image


@dataclass
class LabeledExample:
    """One training/eval image with its global class id."""

    image: np.ndarray  # H x W x C, float32 in [0,1]
    label: int
    source_id: str

    def __post_init__(self):
        self.image = _check_image(self.image)
        self.label = int(self.label)


@dataclass
class UnlabeledExample:
    image: np.ndarray
    source_id: str

    def __post_init__(self):
        self.image = _check_image(self.image)


@dataclass
class Task:
    """One incremental task: a contiguous block of new global class ids."""

    task_id: int  # 1-based position in the stream
    class_labels: tuple[int, ...]
    train: list[LabeledExample]
    val: list[LabeledExample]
    test: list[LabeledExample]


@dataclass
class TaskStream:
    tasks: list[Task]
    class_map: dict[int, int] = field(default_factory=dict)  # original -> global id

    def __post_init__(self):
        seen: set[int] = set()
        expected_start = 0
        for task in self.tasks:
            labels = set(task.class_labels)
            if labels & seen:
                raise DataError(f"task {task.task_id} reuses class ids {labels & seen}")
            if sorted(labels) != list(range(expected_start, expected_start + len(labels))):
                raise DataError(
                    f"task {task.task_id} classes {sorted(labels)} are not the "
                    f"contiguous block starting at {expected_start}"
                )
            seen |= labels
            expected_start += len(labels)

    @property
    def num_classes(self) -> int:
        return sum(len(t.class_labels) for t in self.tasks)

    def classes_through(self, session: int) -> int:
        """Number of classes seen after `session` tasks (1-based)."""
        return sum(len(t.class_labels) for t in self.tasks[:session])

    def task_of_class(self, class_id: int) -> int:
        for task in self.tasks:
            if class_id in task.class_labels:
                return task.task_id
        raise DataError(f"class {class_id} not in stream")

    def class_block(self, task_id: int) -> tuple[int, int]:
        """Half-open [lo, hi) global-id range of one task."""
        task = self.tasks[task_id - 1]
        labels = sorted(task.class_labels)
        return labels[0], labels[-1] + 1


# ---------------------------------------------------------------------------
# synthetic template datasets
# ---------------------------------------------------------------------------

def make_templates(n: int, image_size: int, channels: int, seed: int,
                   smooth_sigma: float | None = None) -> np.ndarray:
    """Smooth random fields on a torus; one per class/pattern.

    Returned array is (n, H, W, C) centered at 0.5 with ~0.22 amplitude, so
    that shifted/scaled variants stay inside [0,1] after clipping.
    """
    if smooth_sigma is None:
        smooth_sigma = image_size / 6.0
    rng = np.random.default_rng(seed)
    templates = np.empty((n, image_size, image_size, channels), dtype=np.float32)
    for i in range(n):
        for c in range(channels):
            fld = rng.normal(0.0, 1.0, size=(image_size, image_size))
            # wrap mode keeps the field periodic, so circular shifts below are
            # exact symmetries of the generative process
            fld = gaussian_filter(fld, sigma=smooth_sigma, mode="wrap")
            fld = (fld - fld.mean()) / (fld.std() + 1e-12)
            templates[i, :, :, c] = 0.5 + 0.22 * fld
    return templates


def _render_variant(template: np.ndarray, rng: np.random.Generator,
                    max_shift: int, noise: float) -> np.ndarray:
    shift = rng.integers(-max_shift, max_shift + 1, size=2)
    img = np.roll(template, shift=tuple(shift), axis=(0, 1))
    amp = rng.uniform(0.75, 1.25)
    brightness = rng.uniform(-0.08, 0.08)
    img = 0.5 + amp * (img - 0.5) + brightness
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass
class SyntheticSpec:
    """Knobs for the template dataset generator."""

    classes: int = 10
    image_size: int = 16
    channels: int = 1
    train_per_class: int = 200
    test_per_class: int = 100
    noise: float = 0.08
    max_shift: int = 3
    seed: int = 0


def make_synthetic_dataset(spec: SyntheticSpec) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """Labeled train/test sets drawn from per-class templates."""
    templates = make_templates(spec.classes, spec.image_size, spec.channels, spec.seed)
    rng = np.random.default_rng(spec.seed + 1)
    train: list[LabeledExample] = []
    test: list[LabeledExample] = []
    for cls in range(spec.classes):
        for i in range(spec.train_per_class):
            img = _render_variant(templates[cls], rng, spec.max_shift, spec.noise)
            train.append(LabeledExample(img, cls, f"syn-train-{cls}-{i}"))
        for i in range(spec.test_per_class):
            img = _render_variant(templates[cls], rng, spec.max_shift, spec.noise)
            test.append(LabeledExample(img, cls, f"syn-test-{cls}-{i}"))
    return train, test


def make_synthetic_pool(spec: SyntheticSpec, items: int,
                        template_factor: float = 2.0,
                        seed: int | None = None,
                        distractor_smooth: float | None = 1.0) -> list[UnlabeledExample]:
    """Unlabeled pool from a wider template family than the labeled set.

    The first `spec.classes` templates coincide with the labeled classes;
    the rest are distractor patterns. With `distractor_smooth` set, the
    distractors come from a differently smoothed (by default much
    higher-frequency) field family, so retrieval quality actually matters.
    """
    n_templates = max(spec.classes, int(round(spec.classes * template_factor)))
    templates = make_templates(spec.classes, spec.image_size, spec.channels, spec.seed)
    n_extra = n_templates - spec.classes
    if n_extra > 0:
        if distractor_smooth == 0.0:
            # structureless distractors: flat gray, so only the per-variant
            # brightness/noise remains
            extra = np.full((n_extra, spec.image_size, spec.image_size,
                             spec.channels), 0.5, dtype=np.float32)
        else:
            extra = make_templates(n_extra, spec.image_size, spec.channels,
                                   spec.seed + 100_003, smooth_sigma=distractor_smooth)
        templates = np.concatenate([templates, extra], axis=0)
    rng = np.random.default_rng(spec.seed + 2 if seed is None else seed)
    pool: list[UnlabeledExample] = []
    for i in range(items):
        t = i % n_templates
        img = _render_variant(templates[t], rng, spec.max_shift, spec.noise)
        pool.append(UnlabeledExample(img, f"syn-pool-{i:06d}"))
    return pool


# ---------------------------------------------------------------------------
# manifest directories (source_id, relative path, label-or-null per line)
# ---------------------------------------------------------------------------

_SPLIT_FILES = {"train": "train.jsonl", "test": "test.jsonl", "pool": "pool.jsonl"}


def _image_to_png(image: np.ndarray, path: str) -> None:
    from PIL import Image

    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    elif arr.shape[2] == 3:
        Image.fromarray(arr, mode="RGB").save(path)
    else:
        raise DataError(f"unsupported channel count {arr.shape[2]}")


def _png_to_image(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return (arr.astype(np.float32) / 255.0).astype(np.float32)


def write_manifest_split(root: str, split: str, examples, *, labeled: bool) -> None:
    """Write one split: PNG files under images/ plus a jsonl manifest."""
    os.makedirs(os.path.join(root, "images", split), exist_ok=True)
    manifest_path = os.path.join(root, _SPLIT_FILES[split])
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rel = os.path.join("images", split, f"{ex.source_id}.png")
            _image_to_png(ex.image, os.path.join(root, rel))
            record = {
                "source_id": ex.source_id,
                "path": rel,
                "label": int(ex.label) if labeled else None,
            }
            fh.write(json.dumps(record) + "\n")


def read_manifest_split(root: str, split: str):
    """Load one split back; returns Labeled- or UnlabeledExample objects."""
    manifest_path = os.path.join(root, _SPLIT_FILES[split])
    if not os.path.isfile(manifest_path):
        raise DataError(f"manifest not found: {manifest_path}")
    out = []
    seen_ids: set[str] = set()
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            sid = rec["source_id"]
            if sid in seen_ids:
                raise DataError(f"{manifest_path}:{lineno}: duplicate source_id {sid!r}")
            seen_ids.add(sid)
            img = _png_to_image(os.path.join(root, rec["path"]))
            if rec.get("label") is None:
                out.append(UnlabeledExample(img, sid))
            else:
                out.append(LabeledExample(img, int(rec["label"]), sid))
    if not out:
        raise DataError(f"manifest {manifest_path} is empty")
    return out


# ---------------------------------------------------------------------------
# stream construction
# ---------------------------------------------------------------------------

def build_stream(train: list[LabeledExample], test: list[LabeledExample],
                 classes_per_task: int, task_count: int,
                 class_order_seed: int, split_seed: int,
                 val_fraction: float = 0.1) -> TaskStream:
    """Permute classes, reindex to contiguous global ids, split into tasks.

    Each task's train pool is further split (1 - val_fraction) : val_fraction
    into train/val under `split_seed`.
    """
    by_class: dict[int, list[LabeledExample]] = {}
    for ex in train:
        by_class.setdefault(ex.label, []).append(ex)
    test_by_class: dict[int, list[LabeledExample]] = {}
    for ex in test:
        test_by_class.setdefault(ex.label, []).append(ex)

    present = sorted(by_class)
    needed = classes_per_task * task_count
    if needed > len(present):
        raise DataError(
            f"need {needed} classes ({classes_per_task} x {task_count}) "
            f"but dataset has {len(present)}"
        )
    for cls in present:
        if not by_class.get(cls):
            raise DataError(f"class {cls} has no training examples")

    order_rng = np.random.default_rng(class_order_seed)
    order = [present[i] for i in order_rng.permutation(len(present))[:needed]]
    class_map = {orig: new for new, orig in enumerate(order)}

    split_rng = np.random.default_rng(split_seed)
    tasks: list[Task] = []
    for t in range(task_count):
        originals = order[t * classes_per_task:(t + 1) * classes_per_task]
        tr: list[LabeledExample] = []
        va: list[LabeledExample] = []
        te: list[LabeledExample] = []
        for orig in originals:
            new_label = class_map[orig]
            pool = [LabeledExample(ex.image, new_label, ex.source_id)
                    for ex in by_class[orig]]
            perm = split_rng.permutation(len(pool))
            n_val = int(round(len(pool) * val_fraction))
            val_idx = set(perm[:n_val].tolist())
            for i, ex in enumerate(pool):
                (va if i in val_idx else tr).append(ex)
            for ex in test_by_class.get(orig, []):
                te.append(LabeledExample(ex.image, new_label, ex.source_id))
        tasks.append(Task(
            task_id=t + 1,
            class_labels=tuple(class_map[o] for o in originals),
            train=tr, val=va, test=te,
        ))
    return TaskStream(tasks=tasks, class_map=class_map)
