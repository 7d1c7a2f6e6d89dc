"""Membership attack scores computed from sequence traces.

Every attack is normalized to "higher score = more member-like", so the
metrics layer never branches on attack identity. All functions are pure;
scoring is deterministic under any parallel partitioning of sequences.

Score conventions for the error-zone family (P = upward log-prob mass at
error positions, N = downward mass):

* N > 0            -> ez = P/N
* N = 0, P > 0     -> ez = +inf (strongest possible member signal)
* P = N = 0        -> ez = 1 (neutral; no movement at the error positions)
* empty error set  -> +inf (zero-error sequences are classified members)

``pos_fraction`` is the fraction form P/(P+N) = ez/(1+ez); the same cases
map to 1.0, 0.5 and 1.0 respectively.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import kernels
from .trace import SequenceTrace

VARIANT_KINDS = ("pos_fraction", "median_delta", "p_minus_n", "log_ratio", "mean_delta")

ATTACK_NAMES = (
    "ez",
    "pos_fraction",
    "p_minus_n",
    "log_ratio",
    "median_delta",
    "mean_delta",
    "success_zone",
    "loss",
    "zlib",
    "minkpp",
    "refl",
)

_EZ_FAMILY = frozenset(("ez", "pos_fraction", "p_minus_n", "log_ratio"))
DEFAULT_ATTACKS = ("ez", "loss", "refl")
DEFAULT_K_PERCENT = 20.0
DEFAULT_TOP_K = 1


class UnsupportedAttackError(Exception):
    """Requested attack needs trace fields this sequence does not carry."""

    def __init__(self, sequence_id: str, attack: str, message: str):
        super().__init__(f"sequence {sequence_id!r}: {attack}: {message}")
        self.sequence_id = sequence_id
        self.attack = attack


@dataclass(frozen=True)
class EzDecomposition:
    """Directional decomposition of log-prob movement at error positions."""

    p: float
    n: float
    ez: float
    n_error: int


@dataclass(frozen=True)
class AttackScore:
    sequence_id: str
    attack: str
    score: float


@dataclass(frozen=True)
class ScoreError:
    sequence_id: str
    attack: str
    message: str


@dataclass(frozen=True)
class ScoreParams:
    k_percent: float = DEFAULT_K_PERCENT
    top_k: int = DEFAULT_TOP_K

    def validated(self):
        if not (0.0 < self.k_percent <= 100.0):
            raise ValueError(f"k_percent must be in (0, 100], got {self.k_percent}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        return self


def _single_offsets(trace: SequenceTrace) -> np.ndarray:
    return np.array([0, len(trace)], dtype=np.int64)


def error_positions(trace: SequenceTrace, k: int = DEFAULT_TOP_K) -> np.ndarray:
    """0-based positions where the ground-truth token falls outside the
    target model's top-k predictions."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return np.flatnonzero(trace.gt_rank > k)


def ez_values(p: np.ndarray, n: np.ndarray, cnt: np.ndarray) -> np.ndarray:
    """Vectorized odds P/N with the edge-case conventions applied."""
    out = np.empty_like(p)
    has_n = n > 0
    with np.errstate(over="ignore"):  # huge P over denormal N saturates to +inf
        np.divide(p, n, out=out, where=has_n)
    out[~has_n & (p > 0)] = np.inf
    out[~has_n & (p == 0)] = 1.0
    out[cnt == 0] = np.inf
    return out


def pos_fraction_values(p, n, cnt):
    out = np.empty_like(p)
    tot = p + n
    moved = tot > 0
    np.divide(p, tot, out=out, where=moved)
    out[~moved] = 0.5
    out[cnt == 0] = 1.0
    return out


def _log_ratio_values(ez):
    with np.errstate(divide="ignore"):
        return np.log(ez)


def _apply_empty_inf(values, cnt):
    out = np.where(np.asarray(cnt) == 0, np.inf, values)
    return out


def ez_score(trace: SequenceTrace, k: int = DEFAULT_TOP_K) -> EzDecomposition:
    """Error Zone decomposition: upward mass P, downward mass N, odds P/N."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    p, n, cnt = kernels.ez_components_batch(
        trace.delta, trace.gt_rank, _single_offsets(trace), k, False
    )
    ez = ez_values(p, n, cnt)
    return EzDecomposition(float(p[0]), float(n[0]), float(ez[0]), int(cnt[0]))


def success_zone_score(trace: SequenceTrace, k: int = DEFAULT_TOP_K) -> AttackScore:
    """Same odds statistic computed at success positions (rank <= k)."""
    p, n, cnt = kernels.ez_components_batch(
        trace.delta, trace.gt_rank, _single_offsets(trace), k, True
    )
    ez = ez_values(p, n, cnt)
    return AttackScore(trace.id, "success_zone", float(ez[0]))


def ez_variant(trace: SequenceTrace, kind: str, k: int = DEFAULT_TOP_K) -> AttackScore:
    """Alternative aggregations of delta at error positions."""
    if kind not in VARIANT_KINDS:
        raise ValueError(f"unknown variant {kind!r}, expected one of {VARIANT_KINDS}")
    offsets = _single_offsets(trace)
    if kind in ("median_delta", "mean_delta"):
        means, medians = kernels.masked_delta_stats(trace.delta, trace.gt_rank, offsets, k)
        val = means[0] if kind == "mean_delta" else medians[0]
        score = math.inf if math.isnan(val) else float(val)
        return AttackScore(trace.id, kind, score)
    p, n, cnt = kernels.ez_components_batch(trace.delta, trace.gt_rank, offsets, k, False)
    if kind == "pos_fraction":
        score = pos_fraction_values(p, n, cnt)[0]
    elif kind == "p_minus_n":
        score = _apply_empty_inf(p - n, cnt)[0]
    else:  # log_ratio
        score = _log_ratio_values(ez_values(p, n, cnt))[0]
    return AttackScore(trace.id, kind, float(score))


def loss_attack(trace: SequenceTrace) -> AttackScore:
    """Negated mean NLL under the target model, i.e. mean target log-prob."""
    s = kernels.segment_sums(trace.target_logprob, _single_offsets(trace))
    return AttackScore(trace.id, "loss", float(s[0]) / len(trace))


def refl_attack(trace: SequenceTrace) -> AttackScore:
    """Reference-calibrated loss: mean delta over all positions."""
    s = kernels.segment_sums(trace.delta, _single_offsets(trace))
    return AttackScore(trace.id, "refl", float(s[0]) / len(trace))


def zlib_attack(trace: SequenceTrace) -> AttackScore:
    """Negated NLL sum per byte of DEFLATE-compressed text."""
    if trace.compressed_len is None:
        raise UnsupportedAttackError(trace.id, "zlib", "requires compressed_len")
    s = kernels.segment_sums(trace.target_logprob, _single_offsets(trace))
    return AttackScore(trace.id, "zlib", float(s[0]) / trace.compressed_len)


def _minkpp_count(k_percent: float, n_tokens: int) -> int:
    return max(1, int(math.floor(k_percent / 100.0 * n_tokens)))


def minkpp_attack(trace: SequenceTrace, k_percent: float = DEFAULT_K_PERCENT) -> AttackScore:
    """Mean of the lowest k% z-scored target log-probs (Min-K%++ style)."""
    if not (0.0 < k_percent <= 100.0):
        raise ValueError(f"k_percent must be in (0, 100], got {k_percent}")
    if not trace.has_vocab_stats():
        raise UnsupportedAttackError(
            trace.id, "minkpp", "requires vocab_mean/vocab_std on every token"
        )
    z = (trace.target_logprob - trace.vocab_mean) / trace.vocab_std
    k = np.array([_minkpp_count(k_percent, len(trace))], dtype=np.int64)
    out = kernels.bottom_k_mean_batch(z, _single_offsets(trace), k)
    return AttackScore(trace.id, "minkpp", float(out[0]))


# ---------------------------------------------------------------------------
# batch scoring


def _score_chunk(
    traces: Sequence[SequenceTrace], attacks: Sequence[str], params: ScoreParams
):
    """Score one chunk; returns (list[(AttackScore, label)], list[ScoreError]).

    Output order is (sequence order) x (requested attack order), so any
    chunking/threading of the input reproduces identical output.
    """
    n_seq = len(traces)
    lengths = np.array([len(t) for t in traces], dtype=np.int64)
    offsets = np.concatenate(([0], np.cumsum(lengths)))
    tl = np.concatenate([t.target_logprob for t in traces]) if n_seq else np.zeros(0)
    delta = np.concatenate([t.delta for t in traces]) if n_seq else np.zeros(0)
    ranks = np.concatenate([t.gt_rank for t in traces]) if n_seq else np.zeros(0, np.int64)

    by_attack: dict[str, np.ndarray] = {}
    need_ez = [a for a in attacks if a in _EZ_FAMILY]
    if need_ez:
        p, n, cnt = kernels.ez_components_batch(delta, ranks, offsets, params.top_k, False)
        if "ez" in attacks:
            by_attack["ez"] = ez_values(p, n, cnt)
        if "pos_fraction" in attacks:
            by_attack["pos_fraction"] = pos_fraction_values(p, n, cnt)
        if "p_minus_n" in attacks:
            by_attack["p_minus_n"] = _apply_empty_inf(p - n, cnt)
        if "log_ratio" in attacks:
            by_attack["log_ratio"] = _log_ratio_values(ez_values(p, n, cnt))
    if "median_delta" in attacks or "mean_delta" in attacks:
        means, medians = kernels.masked_delta_stats(delta, ranks, offsets, params.top_k)
        if "mean_delta" in attacks:
            by_attack["mean_delta"] = np.where(np.isnan(means), np.inf, means)
        if "median_delta" in attacks:
            by_attack["median_delta"] = np.where(np.isnan(medians), np.inf, medians)
    if "success_zone" in attacks:
        p, n, cnt = kernels.ez_components_batch(delta, ranks, offsets, params.top_k, True)
        by_attack["success_zone"] = ez_values(p, n, cnt)
    if "loss" in attacks:
        by_attack["loss"] = kernels.segment_sums(tl, offsets) / lengths
    if "refl" in attacks:
        by_attack["refl"] = kernels.segment_sums(delta, offsets) / lengths

    errors: list[ScoreError] = []
    if "zlib" in attacks:
        sums = kernels.segment_sums(tl, offsets)
        vals = np.full(n_seq, np.nan)
        for i, t in enumerate(traces):
            if t.compressed_len is None:
                errors.append(ScoreError(t.id, "zlib", "requires compressed_len"))
            else:
                vals[i] = sums[i] / t.compressed_len
        by_attack["zlib"] = vals
    if "minkpp" in attacks:
        vals = np.full(n_seq, np.nan)
        ok = [i for i, t in enumerate(traces) if t.has_vocab_stats()]
        for i, t in enumerate(traces):
            if not t.has_vocab_stats():
                errors.append(
                    ScoreError(t.id, "minkpp", "requires vocab_mean/vocab_std on every token")
                )
        if ok:
            z = np.concatenate(
                [
                    (traces[i].target_logprob - traces[i].vocab_mean) / traces[i].vocab_std
                    for i in ok
                ]
            )
            k_off = np.concatenate(([0], np.cumsum(lengths[ok])))
            ks = np.array(
                [_minkpp_count(params.k_percent, lengths[i]) for i in ok], dtype=np.int64
            )
            vals[ok] = kernels.bottom_k_mean_batch(z, k_off, ks)
        by_attack["minkpp"] = vals

    rows: list[tuple[AttackScore, str]] = []
    err_keys = {(e.sequence_id, e.attack) for e in errors}
    for i, t in enumerate(traces):
        for a in attacks:
            if (t.id, a) in err_keys:
                continue
            rows.append((AttackScore(t.id, a, float(by_attack[a][i])), t.label))
    return rows, errors


def score_traces(
    traces: Iterable[SequenceTrace],
    attacks: Sequence[str] = DEFAULT_ATTACKS,
    params: ScoreParams | None = None,
    *,
    threads: int = 1,
    chunk_size: int = 1024,
    on_error: Callable[[ScoreError], None] | None = None,
) -> Iterator[tuple[AttackScore, str]]:
    """Stream (AttackScore, label) pairs for every (sequence, attack).

    Per-sequence attack failures (missing optional fields) are reported via
    ``on_error``; all other scores for the sequence are still emitted.
    Output is byte-identical for any ``threads``/``chunk_size``.
    """
    params = (params or ScoreParams()).validated()
    for a in attacks:
        if a not in ATTACK_NAMES:
            raise ValueError(f"unknown attack {a!r}, expected one of {ATTACK_NAMES}")

    def chunks():
        buf = []
        for t in traces:
            buf.append(t)
            if len(buf) >= chunk_size:
                yield buf
                buf = []
        if buf:
            yield buf

    def work(chunk):
        return _score_chunk(chunk, attacks, params)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = pool.map(work, chunks())
            for rows, errors in results:
                for e in errors:
                    if on_error is not None:
                        on_error(e)
                yield from rows
    else:
        for chunk in chunks():
            rows, errors = work(chunk)
            for e in errors:
                if on_error is not None:
                    on_error(e)
            yield from rows


# ---------------------------------------------------------------------------
# score CSV (external interface: header `id,attack,score,label`)

SCORES_CSV_FIELDS = ("id", "attack", "score", "label")


@dataclass(frozen=True)
class LabeledScore:
    sequence_id: str
    attack: str
    score: float
    label: str


def format_score(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def write_scores_csv(path, rows: Iterable[tuple[AttackScore, str]]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORES_CSV_FIELDS)
        for score, label in rows:
            writer.writerow([score.sequence_id, score.attack, format_score(score.score), label])
            n += 1
    return n


def read_scores_csv(path) -> list[LabeledScore]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(SCORES_CSV_FIELDS):
            raise ValueError(
                f"{path}: expected header {','.join(SCORES_CSV_FIELDS)}, got {header}"
            )
        for row in reader:
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}: malformed row {row!r}")
            out.append(LabeledScore(row[0], row[1], float(row[2]), row[3]))
    return out
