"""Hand-controllable stand-ins and tiny data builders shared across tests."""

from __future__ import annotations

import numpy as np
import torch

from anchorcl.data import (
    LabeledExample,
    SyntheticSpec,
    UnlabeledExample,
    build_stream,
    make_synthetic_dataset,
)


class FlattenEmbedder:
    """Duck-typed model whose feature embedding is the flattened image.

    Lets tests place items at exact coordinates in feature space.
    """

    def __init__(self):
        self.seen_classes = 0

    def eval(self):
        return self

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return images.flatten(1)


class LinearHeadStub:
    """Flatten features plus fixed linear heads with hand-set weights."""

    def __init__(self, primary_weight: np.ndarray, auxiliary_weight: np.ndarray | None = None):
        self.w_p = torch.as_tensor(primary_weight, dtype=torch.float32)
        self.w_a = torch.as_tensor(
            auxiliary_weight if auxiliary_weight is not None else primary_weight,
            dtype=torch.float32)
        self.seen_classes = self.w_p.shape[0]

    def eval(self):
        return self

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return images.flatten(1)

    def head_logits(self, feats: torch.Tensor, which: str = "primary") -> torch.Tensor:
        w = self.w_p if which == "primary" else self.w_a
        return feats.to(w.dtype) @ w.T

    def forward(self, images: torch.Tensor, which: str = "primary") -> torch.Tensor:
        return self.head_logits(self.features(images), which)


def vector_item(values, source_id: str) -> UnlabeledExample:
    """Unlabeled item whose flattened image equals `values` exactly."""
    arr = np.asarray(values, dtype=np.float32).reshape(1, -1, 1)
    return UnlabeledExample(arr, source_id)


def vector_example(values, label: int, source_id: str) -> LabeledExample:
    arr = np.asarray(values, dtype=np.float32).reshape(1, -1, 1)
    return LabeledExample(arr, label, source_id)


def tiny_examples(label: int, count: int, pixel: float = 0.5,
                  side: int = 2, prefix: str = "ex") -> list[LabeledExample]:
    img = np.full((side, side, 1), pixel, dtype=np.float32)
    return [LabeledExample(img, label, f"{prefix}-{label}-{i}") for i in range(count)]


def small_stream(classes=4, per_task=2, train_per_class=40, test_per_class=10,
                 image_size=16, seed=0, noise=0.08):
    spec = SyntheticSpec(classes=classes, image_size=image_size,
                         train_per_class=train_per_class,
                         test_per_class=test_per_class, noise=noise, seed=seed)
    train, test = make_synthetic_dataset(spec)
    return build_stream(train, test, classes_per_task=per_task,
                        task_count=classes // per_task,
                        class_order_seed=seed + 1, split_seed=seed + 2), spec
