"""Hot numeric kernels, in two flavors: numba-jitted and pure numpy.

The public names at the bottom of this module are bound at import time
according to the ``EZ_AUDIT_BACKEND`` environment variable:

* ``auto`` (default) — numba when importable, numpy otherwise
* ``numba``          — require numba, fail loudly if missing
* ``numpy``          — force the pure-numpy fallback

Ragged per-sequence data is passed as flat arrays plus an ``offsets`` array
of length S+1 (sequence i occupies ``flat[offsets[i]:offsets[i+1]]``).

Counting kernels (`auc_from_counts`, `tpr_count_from_counts`) do integer
arithmetic only and give bit-identical results on both backends. Float-mass
kernels (segment sums, bottom-k means) may differ between backends in the
last ulp because numpy reductions are pairwise-summed; see
tests/test_kernels.py for the pinned tolerance.

``benchmarks/bench_kernels.py`` compares the two backends.
"""

from __future__ import annotations

import os

import numpy as np

BACKEND_ENV = "EZ_AUDIT_BACKEND"


# ---------------------------------------------------------------------------
# numpy reference implementations


def _ez_components_batch_np(delta, ranks, offsets, top_k, invert):
    """Per-sequence positive mass P, negative mass N and position count
    over the selected zone (error zone rank > top_k, success zone when
    ``invert``)."""
    starts = offsets[:-1]
    if starts.size == 0:
        z = np.zeros(0)
        return z, z.copy(), np.zeros(0, dtype=np.int64)
    sel = (ranks <= top_k) if invert else (ranks > top_k)
    pos = np.where(sel & (delta > 0.0), delta, 0.0)
    neg = np.where(sel & (delta < 0.0), delta, 0.0)
    p = np.add.reduceat(pos, starts)
    n = np.abs(np.add.reduceat(neg, starts))
    cnt = np.add.reduceat(sel.astype(np.int64), starts)
    return p, n, cnt


def _segment_sums_np(values, offsets):
    """Per-sequence sums of ``values``."""
    starts = offsets[:-1]
    if starts.size == 0:
        return np.zeros(0)
    return np.add.reduceat(values, starts)


def _masked_delta_stats_np(delta, ranks, offsets, top_k):
    """Per-sequence mean and median of delta at error positions.

    Sequences with an empty error set get NaN for both (the caller applies
    the zero-error convention).
    """
    n_seq = offsets.size - 1
    means = np.full(n_seq, np.nan)
    medians = np.full(n_seq, np.nan)
    sel = ranks > top_k
    for i in range(n_seq):
        seg = delta[offsets[i] : offsets[i + 1]]
        vals = seg[sel[offsets[i] : offsets[i + 1]]]
        if vals.size:
            means[i] = np.add.reduceat(vals, [0])[0] / vals.size
            medians[i] = np.median(vals)
    return means, medians


def _bottom_k_mean_batch_np(values, offsets, k_counts):
    """Per-sequence mean of the k smallest values (min-k aggregation)."""
    n_seq = offsets.size - 1
    out = np.empty(n_seq)
    for i in range(n_seq):
        seg = np.sort(values[offsets[i] : offsets[i + 1]])
        k = k_counts[i]
        out[i] = np.add.reduceat(seg[:k], [0])[0] / k
    return out


def _auc_from_counts_np(a_counts, b_counts):
    """Mann-Whitney AUC with 0.5 tie credit from per-slot counts.

    ``a_counts[v]`` / ``b_counts[v]`` are the member / nonmember score
    multiplicities at the v-th distinct value (ascending). Integer math
    until the final division, so the result is exact for m*n < 2**52.
    """
    m = int(a_counts.sum())
    n = int(b_counts.sum())
    b_below = np.concatenate(([0], np.cumsum(b_counts)[:-1]))
    wins = int(np.dot(a_counts, b_below))
    ties = int(np.dot(a_counts, b_counts))
    return (wins + 0.5 * ties) / (m * n)


def _tpr_count_from_counts_np(a_counts, b_counts, max_fp):
    """Members strictly above the (max_fp+1)-th largest nonmember score.

    Returns (tpr_numerator, slot_index). slot_index is the ascending slot
    of that nonmember score, or -1 when max_fp admits every threshold
    (tpr_numerator is then the full member count).
    """
    total_a = int(a_counts.sum())
    total_b = int(b_counts.sum())
    if total_b <= max_fp:
        return total_a, -1
    acc = 0
    s = a_counts.shape[0] - 1
    while s >= 0:
        acc += int(b_counts[s])
        if acc >= max_fp + 1:
            break
        s -= 1
    above = int(a_counts[s + 1 :].sum())
    return above, s


_NUMPY_IMPL = {
    "ez_components_batch": _ez_components_batch_np,
    "segment_sums": _segment_sums_np,
    "masked_delta_stats": _masked_delta_stats_np,
    "bottom_k_mean_batch": _bottom_k_mean_batch_np,
    "auc_from_counts": _auc_from_counts_np,
    "tpr_count_from_counts": _tpr_count_from_counts_np,
}


# ---------------------------------------------------------------------------
# numba twins


def _build_numba_impl():
    from numba import njit

    jit = njit(cache=True, nogil=True)

    @jit
    def ez_components_batch(delta, ranks, offsets, top_k, invert):
        n_seq = offsets.size - 1
        p = np.zeros(n_seq)
        n = np.zeros(n_seq)
        cnt = np.zeros(n_seq, dtype=np.int64)
        for i in range(n_seq):
            for t in range(offsets[i], offsets[i + 1]):
                in_zone = (ranks[t] <= top_k) if invert else (ranks[t] > top_k)
                if in_zone:
                    cnt[i] += 1
                    d = delta[t]
                    if d > 0.0:
                        p[i] += d
                    elif d < 0.0:
                        n[i] -= d
        return p, n, cnt

    @jit
    def segment_sums(values, offsets):
        n_seq = offsets.size - 1
        out = np.zeros(n_seq)
        for i in range(n_seq):
            s = 0.0
            for t in range(offsets[i], offsets[i + 1]):
                s += values[t]
            out[i] = s
        return out

    @jit
    def masked_delta_stats(delta, ranks, offsets, top_k):
        n_seq = offsets.size - 1
        means = np.full(n_seq, np.nan)
        medians = np.full(n_seq, np.nan)
        for i in range(n_seq):
            lo, hi = offsets[i], offsets[i + 1]
            k = 0
            for t in range(lo, hi):
                if ranks[t] > top_k:
                    k += 1
            if k == 0:
                continue
            vals = np.empty(k)
            j = 0
            s = 0.0
            for t in range(lo, hi):
                if ranks[t] > top_k:
                    vals[j] = delta[t]
                    s += delta[t]
                    j += 1
            means[i] = s / k
            medians[i] = np.median(vals)
        return means, medians

    @jit
    def bottom_k_mean_batch(values, offsets, k_counts):
        n_seq = offsets.size - 1
        out = np.empty(n_seq)
        for i in range(n_seq):
            seg = np.sort(values[offsets[i] : offsets[i + 1]].copy())
            k = k_counts[i]
            s = 0.0
            for j in range(k):
                s += seg[j]
            out[i] = s / k
        return out

    @jit
    def auc_from_counts(a_counts, b_counts):
        m = 0
        n = 0
        wins = 0
        ties = 0
        b_below = 0
        for v in range(a_counts.shape[0]):
            a = a_counts[v]
            b = b_counts[v]
            wins += a * b_below
            ties += a * b
            m += a
            n += b
            b_below += b
        return (wins + 0.5 * ties) / (m * n)

    @jit
    def tpr_count_from_counts(a_counts, b_counts, max_fp):
        total_a = 0
        total_b = 0
        for v in range(a_counts.shape[0]):
            total_a += a_counts[v]
            total_b += b_counts[v]
        if total_b <= max_fp:
            return total_a, -1
        acc = 0
        s = a_counts.shape[0] - 1
        while s >= 0:
            acc += b_counts[s]
            if acc >= max_fp + 1:
                break
            s -= 1
        above = 0
        for v in range(s + 1, a_counts.shape[0]):
            above += a_counts[v]
        return above, s

    return {
        "ez_components_batch": ez_components_batch,
        "segment_sums": segment_sums,
        "masked_delta_stats": masked_delta_stats,
        "bottom_k_mean_batch": bottom_k_mean_batch,
        "auc_from_counts": auc_from_counts,
        "tpr_count_from_counts": tpr_count_from_counts,
    }


def available_backends():
    names = ["numpy"]
    try:
        import numba  # noqa: F401

        names.insert(0, "numba")
    except ImportError:
        pass
    return names


def get_impl(backend):
    """Return the kernel table for an explicit backend name."""
    if backend == "numpy":
        return _NUMPY_IMPL
    if backend == "numba":
        return _build_numba_impl()
    raise ValueError(f"unknown kernel backend {backend!r}")


def _select_backend():
    requested = os.environ.get(BACKEND_ENV, "auto").strip().lower() or "auto"
    if requested == "numpy":
        return "numpy", _NUMPY_IMPL
    if requested == "numba":
        return "numba", _build_numba_impl()
    if requested == "auto":
        try:
            return "numba", _build_numba_impl()
        except ImportError:
            return "numpy", _NUMPY_IMPL
    raise ValueError(
        f"{BACKEND_ENV} must be 'auto', 'numba' or 'numpy', got {requested!r}"
    )


BACKEND, _IMPL = _select_backend()

ez_components_batch = _IMPL["ez_components_batch"]
segment_sums = _IMPL["segment_sums"]
masked_delta_stats = _IMPL["masked_delta_stats"]
bottom_k_mean_batch = _IMPL["bottom_k_mean_batch"]
auc_from_counts = _IMPL["auc_from_counts"]
tpr_count_from_counts = _IMPL["tpr_count_from_counts"]
