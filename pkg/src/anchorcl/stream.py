"""Full task-stream orchestration: grow, query, train, bank, snapshot, eval.

One call to `run_stream` runs every incremental session of an experiment
and returns the per-session metric records. Any session failure aborts the
stream and surfaces the partial report through StreamAborted.
"""

from __future__ import annotations

import time

import torch

from . import seeding
from .config import ExperimentConfig
from .data import (
    SyntheticSpec,
    TaskStream,
    build_stream,
    make_synthetic_dataset,
    make_synthetic_pool,
    read_manifest_split,
)
from .inference import (
    ENSEMBLE,
    EnsembleConfig,
    build_ensemble_context,
    evaluate_ra,
    evaluate_sa,
)
from .models import (
    AUXILIARY,
    PRIMARY,
    BackboneConfig,
    DualHeadModel,
    take_snapshot,
)
from .query import (
    QueriedPool,
    query_feature_knn,
    query_largest_logit,
    query_random,
)
from .reporting import MetricRecord, StreamAborted, StreamReport
from .sampling import AugmentConfig, MemoryBank, update_memory_bank
from .training import (
    SessionConfig,
    train_session_robust,
    train_session_standard,
    train_session_vanilla,
)


def materialize_dataset(config: ExperimentConfig, master_seed: int):
    ds = config.dataset
    if ds.kind == "manifest":
        return (read_manifest_split(ds.path, "train"),
                read_manifest_split(ds.path, "test"))
    seed = ds.seed if ds.seed is not None else \
        seeding.derive_seed(master_seed, seeding.DATASET)
    spec = SyntheticSpec(classes=ds.classes, image_size=ds.image_size,
                         channels=ds.channels, train_per_class=ds.train_per_class,
                         test_per_class=ds.test_per_class, noise=ds.noise,
                         max_shift=ds.max_shift, seed=seed)
    return make_synthetic_dataset(spec)


def materialize_pool(config: ExperimentConfig, master_seed: int):
    pl = config.pool
    if pl.kind == "none":
        return []
    if pl.kind == "manifest":
        return read_manifest_split(pl.path, "pool")
    ds = config.dataset
    ds_seed = ds.seed if ds.seed is not None else \
        seeding.derive_seed(master_seed, seeding.DATASET)
    pool_seed = pl.seed if pl.seed is not None else \
        seeding.derive_seed(master_seed, seeding.POOL)
    spec = SyntheticSpec(classes=ds.classes, image_size=ds.image_size,
                         channels=ds.channels, noise=ds.noise,
                         max_shift=ds.max_shift, seed=ds_seed)
    return make_synthetic_pool(spec, items=pl.items,
                               template_factor=pl.template_factor, seed=pool_seed,
                               distractor_smooth=pl.distractor_smooth)


def build_stream_from_config(config: ExperimentConfig, master_seed: int) -> TaskStream:
    train, test = materialize_dataset(config, master_seed)
    return build_stream(
        train, test,
        classes_per_task=config.split.classes_per_task,
        task_count=config.split.task_count,
        class_order_seed=seeding.derive_seed(master_seed, seeding.CLASS_ORDER),
        split_seed=seeding.derive_seed(master_seed, seeding.SPLIT),
        val_fraction=config.split.val_fraction,
    )


def _image_channels(config: ExperimentConfig, stream: TaskStream) -> tuple[int, int]:
    sample = stream.tasks[0].train[0].image
    return sample.shape[2], sample.shape[0]


def new_model(config: ExperimentConfig, stream: TaskStream, master_seed: int) -> DualHeadModel:
    channels, image_size = _image_channels(config, stream)
    backbone = BackboneConfig(in_channels=channels, image_size=image_size,
                              conv_channels=config.backbone.conv_channels,
                              feature_dim=config.backbone.feature_dim,
                              norm_groups=config.backbone.norm_groups)
    torch.manual_seed(seeding.derive_seed(master_seed, seeding.MODEL_INIT))
    return DualHeadModel(backbone)


def run_query(embed_model: DualHeadModel, config: ExperimentConfig,
              bank: MemoryBank, pool, previous_classes: list[int],
              seed: int) -> QueriedPool | None:
    q = config.query
    if q.method == "none" or q.budget_per_class == 0 or not pool:
        return None
    if q.method == "feature_knn":
        return query_feature_knn(embed_model, bank, pool, q.budget_per_class,
                                 seed=seed, normalize=q.normalize_features,
                                 aggregate=q.aggregate)
    if q.method == "largest_logit":
        return query_largest_logit(embed_model, pool, q.budget_per_class,
                                   previous_classes)
    if q.method == "random":
        return query_random(pool, q.budget_per_class * len(previous_classes), seed)
    raise ValueError(f"unknown query method {q.method!r}")


def session_config(config: ExperimentConfig, session_index: int,
                   master_seed: int) -> SessionConfig:
    tr = config.training
    augment = AugmentConfig(random_crop=tr.random_crop, random_flip=tr.random_flip,
                            crop_pad=tr.crop_pad)
    attack = config.attack.train_config() if config.mode == "robust" else None
    return SessionConfig(
        epochs=tr.epochs, base_lr=tr.base_lr, lr_milestones=tr.lr_milestones,
        lr_decay=tr.lr_decay, momentum=tr.momentum, batch_cb=tr.batch_cb,
        batch_rs=tr.batch_rs, batch_ud=tr.batch_ud,
        steps_per_epoch=tr.steps_per_epoch, augment=augment,
        hyperparameters=config.hyperparameters, attack=attack,
        seed=seeding.derive_seed(master_seed, seeding.SESSION, session_index),
        session_index=session_index,
    )


def evaluate_session(model: DualHeadModel, stream: TaskStream, session: int,
                     config: ExperimentConfig, bank: MemoryBank,
                     queried_pool: QueriedPool | None,
                     master_seed: int) -> list[MetricRecord]:
    test_sets = {t.task_id: t.test for t in stream.tasks[:session]}
    records: list[MetricRecord] = []

    def add(metric, head, per_task):
        for task_id in sorted(per_task):
            records.append(MetricRecord(session=session, task=task_id,
                                        metric=metric, head=head,
                                        value=per_task[task_id], seed=master_seed))

    add("SA", PRIMARY, evaluate_sa(model, test_sets, PRIMARY).per_task)
    if config.eval_auxiliary:
        add("SA", AUXILIARY, evaluate_sa(model, test_sets, AUXILIARY).per_task)
    ctx = None
    if config.ensemble.enabled:
        ctx = build_ensemble_context(model, bank, queried_pool, stream, session,
                                     EnsembleConfig(config.ensemble.k_neighbors))
        add("SA", ENSEMBLE, evaluate_sa(model, test_sets, ENSEMBLE,
                                        ensemble_ctx=ctx).per_task)
    if config.mode == "robust":
        attack = config.attack.eval_config()
        eval_seed = seeding.derive_seed(master_seed, seeding.EVAL_ATTACK, session)
        add("RA", PRIMARY, evaluate_ra(model, test_sets, attack, PRIMARY,
                                       seed=eval_seed).per_task)
        if ctx is not None:
            add("RA", ENSEMBLE, evaluate_ra(
                model, test_sets, attack, ENSEMBLE, ensemble_ctx=ctx,
                ensemble_attack=config.ensemble.attack_mode,
                seed=eval_seed).per_task)
    return records


def run_stream(config: ExperimentConfig, master_seed: int) -> StreamReport:
    """Run every session of the configured experiment.

    Raises StreamAborted (carrying the partial report) if a session fails.
    """
    t0 = time.time()
    stream = build_stream_from_config(config, master_seed)
    pool = materialize_pool(config, master_seed)
    model = new_model(config, stream, master_seed)
    bank = MemoryBank(budget_per_class=config.memory_budget_per_class)
    snapshot = None
    queried: QueriedPool | None = None
    validation = []
    report = StreamReport(config_echo=config.to_dict(), master_seed=master_seed)
    robust = config.mode == "robust"

    for task in stream.tasks:
        i = task.task_id
        try:
            model.grow_heads(len(task.class_labels),
                             seed=seeding.derive_seed(master_seed, seeding.HEAD_GROWTH, i))
            validation = validation + task.val
            cfg = session_config(config, i, master_seed)
            # `queried` was retrieved at the end of the previous session with
            # that session's snapshot, so it covers exactly the classes the
            # forgetting regularizers need here
            if config.method == "stored_only":
                train_session_vanilla(model, snapshot, bank, task, cfg,
                                      validation, robust=robust)
            elif robust:
                train_session_robust(model, snapshot, bank, queried, task, cfg,
                                     validation)
            else:
                train_session_standard(model, snapshot, bank, queried, task, cfg,
                                       validation)
            bank = update_memory_bank(bank, task,
                                      seeding.derive_seed(master_seed, seeding.BANK, i))
            snapshot = take_snapshot(model)
            if config.method == "anchor_query":
                queried = run_query(snapshot, config, bank, pool,
                                    previous_classes=list(range(stream.classes_through(i))),
                                    seed=seeding.derive_seed(master_seed, seeding.QUERY, i))
            report.records.extend(
                evaluate_session(model, stream, i, config, bank, queried, master_seed))
            report.sessions = i
        except Exception as err:
            report.partial = True
            report.error = f"session {i}: {err}"
            report.wall_clock_sec = time.time() - t0
            raise StreamAborted(report, str(err)) from err

    report.wall_clock_sec = time.time() - t0
    return report
