"""Deterministic seed derivation.

Every random decision in a run is keyed off one master seed through a
(purpose, *indices) path, so that any component can be reproduced in
isolation and two runs sharing a master seed share every stream of
randomness.
"""

from __future__ import annotations

import numpy as np

# purpose codes; keep stable, they are part of the reproducibility contract
DATASET = 0
CLASS_ORDER = 1
SPLIT = 2
MODEL_INIT = 3
HEAD_GROWTH = 4
BANK = 5
QUERY = 6
SESSION = 7
BATCH_CB = 8
BATCH_RS = 9
BATCH_UD = 10
ATTACK_CB = 11
ATTACK_RS = 12
ATTACK_LWF_PRIMARY = 13
ATTACK_LWF_AUXILIARY = 14
ATTACK_CONSISTENCY = 15
EVAL_ATTACK = 16
POOL = 17


def derive_seed(master: int, purpose: int, *path: int) -> int:
    """Stable 63-bit seed for (master, purpose, *path)."""
    ss = np.random.SeedSequence([int(master), int(purpose), *[int(p) for p in path]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)
