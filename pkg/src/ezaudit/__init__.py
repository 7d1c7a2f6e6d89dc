"""Membership-inference auditing engine built around the Error Zone score."""

__version__ = "0.1.0"

from .attacks import (  # noqa: F401
    ATTACK_NAMES,
    AttackScore,
    EzDecomposition,
    ScoreParams,
    error_positions,
    ez_score,
    ez_variant,
    loss_attack,
    minkpp_attack,
    refl_attack,
    score_traces,
    success_zone_score,
    zlib_attack,
)
from .kernels import BACKEND  # noqa: F401
from .metrics import auc, bootstrap_ci, evaluate, roc, tpr_at_fpr  # noqa: F401
from .synth import SynthConfig, generate, oracle_expected_ez  # noqa: F401
from .trace import (  # noqa: F401
    SequenceTrace,
    TokenRecord,
    read_traces,
    validate_traces,
    write_traces,
)
