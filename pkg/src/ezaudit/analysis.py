"""Diagnostic analyses over labeled traces and attack scores.

All analyses are pure functions over in-memory pools built in one pass.
Sequence difficulty is reference perplexity exp(mean reference NLL).
Unknown-labeled traces are excluded (reported in the output counts).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special, stats

from .attacks import error_positions
from .metrics import json_float, roc, tpr_at_fpr
from .trace import SequenceTrace

QUANTILE_LEVELS = (0.10, 0.25, 0.50, 0.75, 0.90)
QUANTILE_ESTIMATOR = "type-1 inverted empirical CDF"
MEAN_DELTA_NOTE = "mean delta is the group mean of per-sequence mean delta over all positions"
SMALL_POOL = 50


def reference_perplexity(trace: SequenceTrace) -> float:
    """exp of mean reference NLL; the difficulty proxy."""
    with np.errstate(over="ignore"):
        return float(np.exp(-np.mean(trace.ref_logprob)))


def _labeled(traces: Sequence[SequenceTrace]):
    kept = [t for t in traces if t.label in ("member", "nonmember")]
    return kept, len(traces) - len(kept)


# ---------------------------------------------------------------------------
# difficulty-binned performance


@dataclass
class DifficultyBin:
    index: int
    perplexity_lo: float
    perplexity_hi: float
    n_members: int
    n_nonmembers: int
    auc: float | None = None
    mean_member_delta: float | None = None
    mean_nonmember_delta: float | None = None
    p_value: float | None = None
    flag: str | None = None

    def to_dict(self):
        d = {
            "bin": self.index,
            "perplexity_lo": json_float(self.perplexity_lo),
            "perplexity_hi": json_float(self.perplexity_hi),
            "n_members": self.n_members,
            "n_nonmembers": self.n_nonmembers,
        }
        if self.auc is not None:
            d["auc"] = self.auc
        if self.mean_member_delta is not None:
            d["mean_member_delta"] = self.mean_member_delta
            d["mean_nonmember_delta"] = self.mean_nonmember_delta
            d["p_value"] = self.p_value
        if self.flag:
            d["flag"] = self.flag
        return d


@dataclass
class DifficultyBinReport:
    mode: str
    n_bins: int
    bins: list[DifficultyBin]
    n_excluded_unknown: int
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "mode": self.mode,
            "n_bins": self.n_bins,
            "bins": [b.to_dict() for b in self.bins],
            "excluded_unknown": self.n_excluded_unknown,
            "notes": self.notes,
        }


def assign_difficulty_bins(traces: Sequence[SequenceTrace], n_bins: int):
    """Equal-population rank binning, ties broken by (perplexity, id)."""
    order = sorted(range(len(traces)), key=lambda i: (reference_perplexity(traces[i]), traces[i].id))
    n = len(order)
    bins = []
    for b in range(n_bins):
        lo, hi = b * n // n_bins, (b + 1) * n // n_bins
        bins.append([order[i] for i in range(lo, hi)])
    return bins


def difficulty_bins(
    traces: Sequence[SequenceTrace],
    scores: dict[str, float] | None = None,
    n_bins: int = 4,
    mode: str = "auc",
    top_k: int = 1,
) -> DifficultyBinReport:
    """Per-bin attack AUC (mode="auc") or per-bin member/nonmember mean
    delta at error positions with Welch p-value (mode="delta_means")."""
    if mode not in ("auc", "delta_means"):
        raise ValueError(f"mode must be 'auc' or 'delta_means', got {mode!r}")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if mode == "auc" and scores is None:
        raise ValueError("mode='auc' requires per-sequence scores")
    kept, excluded = _labeled(traces)
    if not kept:
        raise ValueError("no member/nonmember traces to bin")
    report = DifficultyBinReport(mode, n_bins, [], excluded)
    report.notes["tie_rule"] = "stable sort by (perplexity, id); equal-population rank bins"
    if mode == "delta_means":
        report.notes["welch"] = "two-sided Welch t-test on pooled error-position delta"
    for b, idxs in enumerate(assign_difficulty_bins(kept, n_bins)):
        members = [kept[i] for i in idxs if kept[i].label == "member"]
        nonmembers = [kept[i] for i in idxs if kept[i].label == "nonmember"]
        perps = sorted(reference_perplexity(kept[i]) for i in idxs)
        entry = DifficultyBin(
            index=b,
            perplexity_lo=perps[0] if perps else math.nan,
            perplexity_hi=perps[-1] if perps else math.nan,
            n_members=len(members),
            n_nonmembers=len(nonmembers),
        )
        if not members or not nonmembers:
            entry.flag = "single-label"
            report.bins.append(entry)
            continue
        if mode == "auc":
            from .metrics import auc as _auc

            try:
                ms = [scores[t.id] for t in members]
                ns = [scores[t.id] for t in nonmembers]
            except KeyError as e:
                raise ValueError(f"no score for sequence id {e.args[0]!r}") from None
            entry.auc = _auc(ms, ns)
        else:
            m_pool = np.concatenate(
                [t.delta[error_positions(t, top_k)] for t in members]
            )
            n_pool = np.concatenate(
                [t.delta[error_positions(t, top_k)] for t in nonmembers]
            )
            if m_pool.size < 2 or n_pool.size < 2:
                entry.flag = "insufficient-error-positions"
                report.bins.append(entry)
                continue
            entry.mean_member_delta = float(np.mean(m_pool))
            entry.mean_nonmember_delta = float(np.mean(n_pool))
            t_res = stats.ttest_ind(m_pool, n_pool, equal_var=False)
            p = float(t_res.pvalue)
            entry.p_value = p
            if math.isnan(p):
                entry.flag = "degenerate-variance"
        report.bins.append(entry)
    return report


# ---------------------------------------------------------------------------
# failure-mode characterization


@dataclass
class GroupStats:
    name: str
    n: int
    avg_tokens: float | None
    avg_errors: float | None
    mean_delta: float | None

    def to_dict(self):
        return {
            "group": self.name,
            "n": self.n,
            "avg_tokens": self.avg_tokens,
            "avg_errors": self.avg_errors,
            "mean_delta": self.mean_delta,
        }


@dataclass
class FailureReport:
    fpr_level: float
    threshold: float
    groups: list[GroupStats]
    n_excluded_unknown: int
    notes: dict = field(default_factory=dict)

    def group(self, name: str) -> GroupStats:
        return next(g for g in self.groups if g.name == name)

    def to_dict(self):
        return {
            "fpr_level": self.fpr_level,
            "threshold": json_float(self.threshold),
            "groups": [g.to_dict() for g in self.groups],
            "excluded_unknown": self.n_excluded_unknown,
            "notes": self.notes,
        }


def _group_stats(name: str, traces: list[SequenceTrace], top_k: int) -> GroupStats:
    if not traces:
        return GroupStats(name, 0, None, None, None)
    tokens = [len(t) for t in traces]
    errors = [int(error_positions(t, top_k).size) for t in traces]
    deltas = [float(np.mean(t.delta)) for t in traces]
    return GroupStats(
        name,
        len(traces),
        float(np.mean(tokens)),
        float(np.mean(errors)),
        float(np.mean(deltas)),
    )


def failure_modes(
    traces: Sequence[SequenceTrace],
    scores: dict[str, float],
    fpr_level: float,
    top_k: int = 1,
) -> FailureReport:
    """Characterize false negatives/positives at the operating threshold
    reaching ``fpr_level`` (classification rule: score >= threshold)."""
    kept, excluded = _labeled(traces)
    members = [t for t in kept if t.label == "member"]
    nonmembers = [t for t in kept if t.label == "nonmember"]
    if not members or not nonmembers:
        raise ValueError("failure_modes needs both member and nonmember traces")
    try:
        m_scores = [scores[t.id] for t in members]
        n_scores = [scores[t.id] for t in nonmembers]
    except KeyError as e:
        raise ValueError(f"no score for sequence id {e.args[0]!r}") from None
    _, threshold = tpr_at_fpr(roc(m_scores, n_scores), fpr_level)
    fn = [t for t, s in zip(members, m_scores) if s < threshold]
    fp = [t for t, s in zip(nonmembers, n_scores) if s >= threshold]
    report = FailureReport(
        fpr_level,
        threshold,
        [
            _group_stats("all_members", members, top_k),
            _group_stats("false_negatives", fn, top_k),
            _group_stats("all_nonmembers", nonmembers, top_k),
            _group_stats("false_positives", fp, top_k),
        ],
        excluded,
    )
    report.notes["mean_delta"] = MEAN_DELTA_NOTE
    return report


# ---------------------------------------------------------------------------
# error-count statistics


@dataclass
class ErrorCountStats:
    member_mean: float
    member_std: float
    nonmember_mean: float
    nonmember_std: float
    r: float
    p_value: float
    degenerate: bool
    n_excluded_unknown: int

    def to_dict(self):
        return {
            "members": {"mean_errors": self.member_mean, "std_errors": self.member_std},
            "nonmembers": {
                "mean_errors": self.nonmember_mean,
                "std_errors": self.nonmember_std,
            },
            "point_biserial_r": self.r,
            "p_value": self.p_value,
            "degenerate": self.degenerate,
            "excluded_unknown": self.n_excluded_unknown,
        }


def _std(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if values.size > 1 else 0.0


def error_count_stats(traces: Sequence[SequenceTrace], top_k: int = 1) -> ErrorCountStats:
    """Per-label error-count moments and point-biserial correlation between
    error count and membership (member = 1)."""
    kept, excluded = _labeled(traces)
    counts = np.array([error_positions(t, top_k).size for t in kept], dtype=np.float64)
    labels = np.array([1.0 if t.label == "member" else 0.0 for t in kept])
    if not (labels == 1.0).any() or not (labels == 0.0).any():
        raise ValueError("error_count_stats needs both member and nonmember traces")
    m_counts = counts[labels == 1.0]
    n_counts = counts[labels == 0.0]
    if np.var(counts) == 0.0:
        r, p, degenerate = 0.0, 1.0, True
    else:
        res = stats.pointbiserialr(labels, counts)
        r, p, degenerate = float(res.statistic), float(res.pvalue), False
    return ErrorCountStats(
        member_mean=float(np.mean(m_counts)),
        member_std=_std(m_counts),
        nonmember_mean=float(np.mean(n_counts)),
        nonmember_std=_std(n_counts),
        r=r,
        p_value=p,
        degenerate=degenerate,
        n_excluded_unknown=excluded,
    )


# ---------------------------------------------------------------------------
# shift-removed distribution comparison


def ks_statistic(x, y) -> float:
    """Two-sample KS statistic: sup over the pooled sample of the absolute
    empirical-CDF difference."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    y = np.sort(np.asarray(y, dtype=np.float64))
    grid = np.concatenate([x, y])
    cdf_x = np.searchsorted(x, grid, side="right") / x.size
    cdf_y = np.searchsorted(y, grid, side="right") / y.size
    return float(np.max(np.abs(cdf_x - cdf_y)))


@dataclass
class KsReport:
    statistic: float
    p_value: float
    shift: float
    n_member: int
    n_nonmember: int
    quantiles: list[dict]
    small_sample: bool

    def to_dict(self):
        return {
            "ks_statistic": self.statistic,
            "p_value": self.p_value,
            "removed_shift": self.shift,
            "n_member_values": self.n_member,
            "n_nonmember_values": self.n_nonmember,
            "quantiles": self.quantiles,
            "small_sample": self.small_sample,
            "notes": {
                "quantile_estimator": QUANTILE_ESTIMATOR,
                "p_value": "asymptotic two-sample Kolmogorov distribution",
            },
        }


def shift_removed_ks(traces: Sequence[SequenceTrace], top_k: int = 1) -> KsReport:
    """Compare member vs nonmember error-position delta distributions after
    removing the mean shift; reports where the divergence sits via quantiles."""
    kept, _ = _labeled(traces)
    m_parts = [t.delta[error_positions(t, top_k)] for t in kept if t.label == "member"]
    n_parts = [t.delta[error_positions(t, top_k)] for t in kept if t.label == "nonmember"]
    m_pool = np.concatenate(m_parts) if m_parts else np.zeros(0)
    n_pool = np.concatenate(n_parts) if n_parts else np.zeros(0)
    if m_pool.size < 2 or n_pool.size < 2:
        raise ValueError("shift_removed_ks needs >= 2 error-position values per label")
    shift = float(np.mean(m_pool) - np.mean(n_pool))
    shifted = m_pool - shift
    d = ks_statistic(shifted, n_pool)
    en = math.sqrt(m_pool.size * n_pool.size / (m_pool.size + n_pool.size))
    p = float(special.kolmogorov(en * d))
    quantiles = []
    for q in QUANTILE_LEVELS:
        qm = float(np.quantile(shifted, q, method="inverted_cdf"))
        qn = float(np.quantile(n_pool, q, method="inverted_cdf"))
        quantiles.append(
            {"quantile": q, "shifted_member": qm, "nonmember": qn, "diff": qm - qn}
        )
    return KsReport(
        statistic=d,
        p_value=p,
        shift=shift,
        n_member=int(m_pool.size),
        n_nonmember=int(n_pool.size),
        quantiles=quantiles,
        small_sample=min(m_pool.size, n_pool.size) < SMALL_POOL,
    )


# ---------------------------------------------------------------------------
# per-sequence intermediates CSV


def write_intermediates_csv(
    path,
    traces: Sequence[SequenceTrace],
    scores: dict[str, float] | None = None,
    groups: dict[str, str] | None = None,
    top_k: int = 1,
) -> None:
    """Optional per-sequence dump: id, perplexity, error count, mean delta,
    score, group."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", "perplexity", "error_count", "mean_delta", "score", "group"])
        for t in traces:
            score = scores.get(t.id) if scores else None
            writer.writerow(
                [
                    t.id,
                    t.label,
                    repr(reference_perplexity(t)),
                    int(error_positions(t, top_k).size),
                    repr(float(np.mean(t.delta))),
                    "" if score is None else repr(float(score)),
                    groups.get(t.id, "") if groups else "",
                ]
            )
