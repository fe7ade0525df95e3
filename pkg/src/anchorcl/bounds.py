"""Non-incremental reference baselines bracketing achievable performance.

The lower bounds train jointly on memory-bank-sized data only; the upper
bounds train jointly on everything. The adversarial upper bound adds the
consistency regularizer on a randomly drawn unlabeled pool of the same
total size a final incremental session would have queried.
"""

from __future__ import annotations

import dataclasses
import time

from . import seeding
from .config import ExperimentConfig
from .data import Task
from .query import query_random
from .reporting import StreamReport
from .sampling import MemoryBank, update_memory_bank
from .stream import (
    build_stream_from_config,
    evaluate_session,
    materialize_pool,
    new_model,
    session_config,
)
from .training import train_session_robust, train_session_standard

BOUND_MODES = ("mt_lower", "mt_upper", "mtat_lower", "mtat_upper")


def run_baseline_bounds(config: ExperimentConfig, mode: str,
                        master_seed: int) -> StreamReport:
    """Train one joint multi-task session and evaluate it per task."""
    if mode not in BOUND_MODES:
        raise ValueError(f"mode must be one of {BOUND_MODES}, got {mode!r}")
    t0 = time.time()
    robust = mode.startswith("mtat")
    lower = mode.endswith("lower")

    stream = build_stream_from_config(config, master_seed)
    if lower:
        bank = MemoryBank(budget_per_class=config.memory_budget_per_class)
        for task in stream.tasks:
            bank = update_memory_bank(
                bank, task, seeding.derive_seed(master_seed, seeding.BANK, task.task_id))
        train_data = bank.all_examples()
    else:
        train_data = [ex for task in stream.tasks for ex in task.train]
    validation = [ex for task in stream.tasks for ex in task.val]
    all_classes = tuple(range(stream.num_classes))
    joint_task = Task(task_id=1, class_labels=all_classes, train=train_data,
                      val=validation, test=[])

    queried = None
    hp = config.hyperparameters
    bound_config = dataclasses.replace(
        config,
        mode="robust" if robust else "standard",
        hyperparameters=dataclasses.replace(
            hp, lwf_weight=0.0, robust_lwf_weight=0.0,
            use_consistency=(mode == "mtat_upper")),
    )
    if mode == "mtat_upper":
        pool = materialize_pool(config, master_seed)
        if pool:
            queried_classes = max(stream.num_classes - config.split.classes_per_task, 1)
            total_budget = config.query.budget_per_class * queried_classes
            queried = query_random(pool, total_budget,
                                   seeding.derive_seed(master_seed, seeding.QUERY, 1))

    model = new_model(bound_config, stream, master_seed)
    model.grow_heads(stream.num_classes,
                     seed=seeding.derive_seed(master_seed, seeding.HEAD_GROWTH, 1))
    cfg = session_config(bound_config, 1, master_seed)
    if robust:
        train_session_robust(model, None, MemoryBank(0), queried, joint_task,
                             cfg, validation)
    else:
        train_session_standard(model, None, MemoryBank(0), queried, joint_task,
                               cfg, validation)

    # evaluate against the original per-task test splits; session index is
    # the stream length so every task is covered
    final_bank = MemoryBank(budget_per_class=config.memory_budget_per_class)
    for task in stream.tasks:
        final_bank = update_memory_bank(
            final_bank, task, seeding.derive_seed(master_seed, seeding.BANK, task.task_id))
    records = evaluate_session(model, stream, len(stream.tasks), bound_config,
                               final_bank, queried, master_seed)
    echo = config.to_dict()
    echo["bound_mode"] = mode
    return StreamReport(records=records, sessions=len(stream.tasks),
                        config_echo=echo, master_seed=master_seed,
                        wall_clock_sec=time.time() - t0)
