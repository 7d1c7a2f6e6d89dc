"""Synthetic trace generation from the additive memorization model.

Per token, the log-prob shift is delta = M + G where G ~ Normal(0, g_sigma)
is the generalization effect (both labels) and M >= 0 is the memorization
effect: M ~ Exponential(mean=mem_mean) for members, identically 0 for
nonmembers. mem_mean = 0 therefore makes the two generation laws identical.

Success positions (rank 1) draw M attenuated by ``success_mem_scale``,
reflecting that correctly-predicted tokens carry weaker membership signal;
error positions carry rank 2.

delta is encoded as ref_logprob = -1 - max(delta, 0), target_logprob =
ref_logprob + delta (both always <= -1); the trace's effective delta is the
re-decoded difference, so decode(encode(delta)) is bit-exact.

Generation derives one RNG substream per sequence from
(seed, sequence index), so it is deterministic under any parallel split.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .trace import SequenceTrace

_ORACLE_MEMBER_KEY = 101
_ORACLE_NONMEMBER_KEY = 102


@dataclass(frozen=True)
class SynthConfig:
    n_members: int
    n_nonmembers: int
    errors_per_seq: int
    g_sigma: float
    mem_mean: float
    seed: int
    success_fraction: float = 0.0
    success_mem_scale: float = 0.25
    emit_vocab_stats: bool = True
    emit_compressed_len: bool = True

    def validated(self):
        if self.n_members < 1 or self.n_nonmembers < 1:
            raise ValueError("n_members and n_nonmembers must be >= 1")
        if self.errors_per_seq < 1:
            raise ValueError("errors_per_seq must be >= 1")
        if not (self.g_sigma > 0):
            raise ValueError("g_sigma must be > 0")
        if self.mem_mean < 0:
            raise ValueError("mem_mean must be >= 0")
        if not (0.0 <= self.success_fraction < 1.0):
            raise ValueError("success_fraction must be in [0, 1)")
        if not (0.0 <= self.success_mem_scale <= 1.0):
            raise ValueError("success_mem_scale must be in [0, 1]")
        return self

    @property
    def n_success_per_seq(self) -> int:
        sf = self.success_fraction
        if sf == 0.0:
            return 0
        return int(round(self.errors_per_seq * sf / (1.0 - sf)))


def _sequence_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
    )


def _draw_delta(rng: np.random.Generator, cfg: SynthConfig, member: bool):
    """Ranks and raw delta for one sequence; identical draw structure for
    both labels so mem_mean = 0 yields identical laws."""
    n_err = cfg.errors_per_seq
    n_succ = cfg.n_success_per_seq
    t = n_err + n_succ
    ranks = np.concatenate(
        [np.full(n_err, 2, dtype=np.int64), np.ones(n_succ, dtype=np.int64)]
    )
    ranks = ranks[rng.permutation(t)]
    g = rng.normal(0.0, cfg.g_sigma, t)
    m = rng.exponential(cfg.mem_mean if member else 0.0, t)
    m[ranks == 1] *= cfg.success_mem_scale
    return ranks, m + g


def _encode(delta: np.ndarray):
    rl = -1.0 - np.maximum(delta, 0.0)
    tl = rl + delta
    return tl, rl


def generate(config: SynthConfig) -> Iterator[SequenceTrace]:
    """Yield members then nonmembers; byte-identical per (config, seed)."""
    cfg = config.validated()
    for idx in range(cfg.n_members + cfg.n_nonmembers):
        member = idx < cfg.n_members
        rng = _sequence_rng(cfg.seed, idx)
        ranks, delta = _draw_delta(rng, cfg, member)
        tl, rl = _encode(delta)
        t = ranks.size
        mu = sigma = None
        if cfg.emit_vocab_stats:
            mu = rng.normal(-5.0, 1.0, t)
            sigma = rng.uniform(0.5, 2.0, t)
        comp = None
        if cfg.emit_compressed_len:
            comp = max(1, int(round(t * rng.uniform(2.5, 3.5))))
        seq_id = f"mem-{idx:06d}" if member else f"non-{idx - cfg.n_members:06d}"
        yield SequenceTrace(
            id=seq_id,
            label="member" if member else "nonmember",
            target_logprob=tl,
            ref_logprob=rl,
            gt_rank=ranks,
            vocab_mean=mu,
            vocab_std=sigma,
            compressed_len=comp,
        )


def write_sidecar(config: SynthConfig, trace_path) -> str:
    """Echo the generating configuration next to the trace file."""
    meta_path = f"{trace_path}.meta.json"
    payload = {
        "config": asdict(config),
        "model": {
            "generalization": "normal(0, g_sigma)",
            "memorization": "exponential(mean=mem_mean), members only",
            "success_positions": "rank 1, memorization scaled by success_mem_scale",
            "rng": "pcg64-seedsequence(seed, sequence_index)",
        },
    }
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return meta_path


@dataclass(frozen=True)
class OracleGroup:
    mean_ez: float
    std_error: float
    n_sequences: int
    n_infinite: int


@dataclass(frozen=True)
class OracleEzResult:
    member: OracleGroup
    nonmember: OracleGroup


def _oracle_group(cfg: SynthConfig, member: bool, n_sequences: int) -> OracleGroup:
    # independent of the attacks/kernels stack on purpose: plain formulas
    group_key = _ORACLE_MEMBER_KEY if member else _ORACLE_NONMEMBER_KEY
    ez = np.empty(n_sequences)
    for i in range(n_sequences):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(group_key, i)))
        )
        ranks, delta = _draw_delta(rng, cfg, member)
        d = delta[ranks > 1]
        p = d[d > 0].sum()
        n = -d[d < 0].sum()
        if d.size == 0 or (n == 0 and p > 0):
            ez[i] = math.inf
        elif p == 0 and n == 0:
            ez[i] = 1.0
        else:
            ez[i] = p / n
    inf_mask = np.isinf(ez)
    n_inf = int(inf_mask.sum())
    if n_inf:
        return OracleGroup(math.inf, math.nan, n_sequences, n_inf)
    mean = float(np.mean(ez))
    se = float(np.std(ez, ddof=1) / math.sqrt(n_sequences)) if n_sequences > 1 else 0.0
    return OracleGroup(mean, se, n_sequences, 0)


def oracle_expected_ez(config: SynthConfig, n_sequences: int = 10_000) -> OracleEzResult:
    """Monte-Carlo estimate of mean EZ per group with standard errors."""
    cfg = config.validated()
    return OracleEzResult(
        member=_oracle_group(cfg, True, n_sequences),
        nonmember=_oracle_group(cfg, False, n_sequences),
    )
