import numpy as np
import pytest

from ezaudit.trace import SequenceTrace


def trace_from_delta(seq_id, label, deltas, ranks=None, **kwargs):
    """Build a trace whose decoded delta equals ``deltas`` bit-exactly.

    Positive d is encoded as (tl=0, rl=-d), negative as (tl=d, rl=0);
    negation is exact in IEEE754, so tl - rl reproduces d without rounding.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    tl = np.where(deltas >= 0, 0.0, deltas)
    rl = np.where(deltas >= 0, -deltas, 0.0)
    if ranks is None:
        ranks = np.full(deltas.size, 2, dtype=np.int64)
    return SequenceTrace(
        id=seq_id,
        label=label,
        target_logprob=tl,
        ref_logprob=rl,
        gt_rank=np.asarray(ranks, dtype=np.int64),
        **kwargs,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20260811)


def random_trace(rng, seq_id, label, n_tokens=None, with_stats=False, with_zlib=False):
    n = n_tokens or int(rng.integers(1, 40))
    tl = -rng.exponential(2.0, n)
    rl = -rng.exponential(2.0, n)
    ranks = rng.integers(1, 8, n).astype(np.int64)
    mu = sigma = None
    if with_stats:
        mu = -rng.exponential(5.0, n)
        sigma = rng.uniform(0.5, 3.0, n)
    comp = int(rng.integers(10, 400)) if with_zlib else None
    return SequenceTrace(seq_id, label, tl, rl, ranks, mu, sigma, comp)
