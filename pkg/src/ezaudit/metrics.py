"""Exact, deterministic evaluation of attack scores.

Conventions (these are contracts, not implementation details):

* classification rule is ``score >= threshold``, so +inf scores are a real
  operating point; the leading ROC point (threshold recorded as +inf) is
  the classify-nothing point (0, 0)
* AUC is Mann-Whitney with 0.5 credit for ties
* TPR@alpha is the maximum empirical TPR among ROC points with
  fpr <= alpha — no interpolation, which keeps low-FPR claims conservative
* bootstrap resamples members and nonmembers independently with
  replacement, preserving group sizes; resample i draws from
  PCG64(SeedSequence(entropy=seed, spawn_key=(i,))), so parallel and
  serial runs agree bit for bit
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .attacks import LabeledScore

RNG_DESCRIPTION = "pcg64-seedsequence(seed, resample_index)"
CI_PERCENTILES = (2.5, 97.5)  # 95% percentile interval, linear interpolation
DEFAULT_LEVELS = (0.01, 0.001)
DEFAULT_RESAMPLES = 1000


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fpr: float
    tpr: float


@dataclass
class RocCurve:
    """Empirical ROC from strictest to loosest threshold."""

    points: list[RocPoint]

    def arrays(self):
        thr = np.array([p.threshold for p in self.points])
        fpr = np.array([p.fpr for p in self.points])
        tpr = np.array([p.tpr for p in self.points])
        return thr, fpr, tpr


def _as_scores(scores, name) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ValueError(f"{name} scores must be nonempty")
    if np.isnan(arr).any():
        raise ValueError(f"{name} scores contain NaN")
    return arr


def _slot_counts(member: np.ndarray, nonmember: np.ndarray):
    slots = np.unique(np.concatenate([member, nonmember]))
    a = np.bincount(np.searchsorted(slots, member), minlength=slots.size)
    b = np.bincount(np.searchsorted(slots, nonmember), minlength=slots.size)
    return slots, a.astype(np.int64), b.astype(np.int64)


def auc(member_scores, nonmember_scores) -> float:
    """Tie-adjusted probability that a random member outscores a random
    nonmember; equals the trapezoidal area under the empirical ROC."""
    member = _as_scores(member_scores, "member")
    nonmember = _as_scores(nonmember_scores, "nonmember")
    _, a, b = _slot_counts(member, nonmember)
    return float(kernels.auc_from_counts(a, b))


def roc(member_scores, nonmember_scores) -> RocCurve:
    """One point per distinct score value plus the classify-nothing point."""
    member = _as_scores(member_scores, "member")
    nonmember = _as_scores(nonmember_scores, "nonmember")
    slots, a, b = _slot_counts(member, nonmember)
    m = member.size
    n = nonmember.size
    # cumulative counts of scores >= threshold, thresholds descending
    cm = np.cumsum(a[::-1])
    cn = np.cumsum(b[::-1])
    points = [RocPoint(math.inf, 0.0, 0.0)]
    for thr, fp, tp in zip(slots[::-1], cn, cm):
        points.append(RocPoint(float(thr), float(fp) / n, float(tp) / m))
    return RocCurve(points)


def tpr_at_fpr(curve: RocCurve, alpha: float) -> tuple[float, float]:
    """Max TPR among points with fpr <= alpha, plus an operating threshold.

    The returned threshold is the strictest point attaining that TPR (so it
    carries the fewest false positives among qualifying operating points);
    the (0,0) point always qualifies, making this total.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    _, fpr, tpr = curve.arrays()
    idx = int(np.searchsorted(fpr, alpha, side="right")) - 1
    best = tpr[idx]
    first = int(np.searchsorted(tpr, best, side="left"))
    return float(best), curve.points[first].threshold


def allowed_fp(alpha: float, n_nonmembers: int) -> int:
    """Largest false-positive count whose rate passes ``count/n <= alpha``
    under float comparison (matches the ROC-point rule exactly)."""
    f = int(math.floor(alpha * n_nonmembers))
    while f + 1 <= n_nonmembers and (f + 1) / n_nonmembers <= alpha:
        f += 1
    while f > 0 and f / n_nonmembers > alpha:
        f -= 1
    return f


@dataclass(frozen=True)
class BootstrapCI:
    auc_ci: tuple[float, float]
    tpr_ci: dict[float, tuple[float, float]]
    resamples: int
    seed: int
    rng: str = RNG_DESCRIPTION


def _resample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
    )


def bootstrap_ci(
    member_scores,
    nonmember_scores,
    alpha_levels: Sequence[float] = DEFAULT_LEVELS,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    *,
    threads: int = 1,
) -> BootstrapCI:
    """95% percentile CIs for AUC and each TPR@level."""
    if resamples < 1:
        raise ValueError(f"resamples must be >= 1, got {resamples}")
    # sorting makes the resamples (hence the CIs) invariant to input order
    member = np.sort(_as_scores(member_scores, "member"))
    nonmember = np.sort(_as_scores(nonmember_scores, "nonmember"))
    slots, _, _ = _slot_counts(member, nonmember)
    m_ids = np.searchsorted(slots, member)
    n_ids = np.searchsorted(slots, nonmember)
    m, n, n_slots = member.size, nonmember.size, slots.size
    f_maxes = [allowed_fp(level, n) for level in alpha_levels]

    auc_stats = np.empty(resamples)
    tpr_stats = np.empty((resamples, len(alpha_levels)))

    def run_range(lo: int, hi: int):
        for i in range(lo, hi):
            rng = _resample_rng(seed, i)
            a = np.bincount(m_ids[rng.integers(0, m, m)], minlength=n_slots).astype(np.int64)
            b = np.bincount(n_ids[rng.integers(0, n, n)], minlength=n_slots).astype(np.int64)
            auc_stats[i] = kernels.auc_from_counts(a, b)
            for j, f_max in enumerate(f_maxes):
                above, _ = kernels.tpr_count_from_counts(a, b, f_max)
                tpr_stats[i, j] = above / m

    if threads > 1 and resamples > 1:
        step = math.ceil(resamples / threads)
        bounds = [(lo, min(lo + step, resamples)) for lo in range(0, resamples, step)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda se: run_range(*se), bounds))
    else:
        run_range(0, resamples)

    lo, hi = np.percentile(auc_stats, CI_PERCENTILES)
    tpr_ci = {}
    for j, level in enumerate(alpha_levels):
        tlo, thi = np.percentile(tpr_stats[:, j], CI_PERCENTILES)
        tpr_ci[level] = (float(tlo), float(thi))
    return BootstrapCI((float(lo), float(hi)), tpr_ci, resamples, seed)


# ---------------------------------------------------------------------------
# per-attack evaluation reports


@dataclass
class TprAtLevel:
    level: float
    tpr: float
    ci_low: float
    ci_high: float
    threshold: float


@dataclass
class EvalReport:
    attack: str
    auc: float
    auc_ci: tuple[float, float]
    tpr_at: list[TprAtLevel]
    n_members: int
    n_nonmembers: int
    bootstrap: BootstrapCI

    def to_dict(self) -> dict:
        return {
            "attack": self.attack,
            "auc": self.auc,
            "auc_ci": [self.auc_ci[0], self.auc_ci[1]],
            "tpr_at": [
                {
                    "level": t.level,
                    "tpr": t.tpr,
                    "ci_low": t.ci_low,
                    "ci_high": t.ci_high,
                    "threshold": json_float(t.threshold),
                }
                for t in self.tpr_at
            ],
            "counts": {"members": self.n_members, "nonmembers": self.n_nonmembers},
            "bootstrap": {
                "resamples": self.bootstrap.resamples,
                "seed": self.bootstrap.seed,
                "rng": self.bootstrap.rng,
            },
        }


@dataclass
class AttackEvalError:
    attack: str
    error: str

    def to_dict(self) -> dict:
        return {"attack": self.attack, "error": self.error}


@dataclass
class EvalResult:
    reports: list[EvalReport | AttackEvalError]
    unknown_label_rows: int = 0
    levels: tuple[float, ...] = DEFAULT_LEVELS

    @property
    def all_failed(self) -> bool:
        return all(isinstance(r, AttackEvalError) for r in self.reports)

    def to_dict(self) -> dict:
        return {
            "levels": list(self.levels),
            "warnings": {"unknown_label_rows": self.unknown_label_rows},
            "attacks": [r.to_dict() for r in self.reports],
        }


def json_float(x: float):
    """JSON-safe float: +/-inf become strings, finite values pass through."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def group_scores(scores: Iterable[LabeledScore]):
    """Split labeled scores into per-attack member/nonmember lists.

    Returns (groups, unknown_count); groups preserves first-seen attack
    order as {attack: (member_scores, nonmember_scores)}.
    """
    groups: dict[str, tuple[list[float], list[float]]] = {}
    unknown = 0
    for s in scores:
        if s.attack not in groups:
            groups[s.attack] = ([], [])
        if s.label == "member":
            groups[s.attack][0].append(s.score)
        elif s.label == "nonmember":
            groups[s.attack][1].append(s.score)
        else:
            unknown += 1
    return groups, unknown


def evaluate(
    scores: Iterable[LabeledScore],
    levels: Sequence[float] = DEFAULT_LEVELS,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    *,
    threads: int = 1,
) -> EvalResult:
    """One report per attack; attacks lacking a label group become error
    entries without blocking the rest."""
    for level in levels:
        if not (0.0 < level < 1.0):
            raise ValueError(f"fpr level must be in (0, 1), got {level}")
    groups, unknown = group_scores(scores)
    reports: list[EvalReport | AttackEvalError] = []
    for attack, (members, nonmembers) in groups.items():
        if not members or not nonmembers:
            missing = "member" if not members else "nonmember"
            reports.append(
                AttackEvalError(attack, f"no {missing}-labeled scores for this attack")
            )
            continue
        curve = roc(members, nonmembers)
        ci = bootstrap_ci(members, nonmembers, levels, resamples, seed, threads=threads)
        tpr_entries = []
        for level in levels:
            tpr, thr = tpr_at_fpr(curve, level)
            lo, hi = ci.tpr_ci[level]
            tpr_entries.append(TprAtLevel(level, tpr, lo, hi, thr))
        reports.append(
            EvalReport(
                attack=attack,
                auc=auc(members, nonmembers),
                auc_ci=ci.auc_ci,
                tpr_at=tpr_entries,
                n_members=len(members),
                n_nonmembers=len(nonmembers),
                bootstrap=ci,
            )
        )
    return EvalResult(reports, unknown, tuple(levels))


def write_roc_csv(path, curve: RocCurve) -> None:
    """Plot-ready ROC dump: threshold,fpr,tpr with the abstain point first."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold,fpr,tpr\n")
        for p in curve.points:
            thr = "inf" if math.isinf(p.threshold) and p.threshold > 0 else (
                "-inf" if math.isinf(p.threshold) else repr(p.threshold)
            )
            fh.write(f"{thr},{p.fpr!r},{p.tpr!r}\n")
