"""Benchmark the hot kernels: numba JIT vs pure-numpy fallback.

Run:  python benchmarks/bench_kernels.py [--seqs 20000] [--tokens 127]

The same kernels back `ez-audit score`/`eval`; the backend used by the CLI
is selected with EZ_AUDIT_BACKEND (auto|numba|numpy).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ezaudit import kernels


def bench(name, numpy_fn, numba_fn, iterations=5):
    numpy_fn()  # warmup (and JIT compile for the numba side)
    numba_fn()
    t0 = time.perf_counter()
    for _ in range(iterations):
        numpy_fn()
    t_np = (time.perf_counter() - t0) / iterations
    t0 = time.perf_counter()
    for _ in range(iterations):
        numba_fn()
    t_nb = (time.perf_counter() - t0) / iterations
    print(f"{name:<28} numpy {t_np * 1000:9.2f} ms   numba {t_nb * 1000:9.2f} ms"
          f"   speedup {t_np / t_nb:5.2f}x")
    return t_np, t_nb


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seqs", type=int, default=20_000)
    parser.add_argument("--tokens", type=int, default=127)
    parser.add_argument("--resamples", type=int, default=1000)
    args = parser.parse_args()

    NP = kernels.get_impl("numpy")
    NB = kernels.get_impl("numba")

    rng = np.random.default_rng(0)
    n_seq, n_tok = args.seqs, args.tokens
    total = n_seq * n_tok
    delta = rng.normal(0, 1, total)
    ranks = rng.integers(1, 6, total).astype(np.int64)
    offsets = (np.arange(n_seq + 1) * n_tok).astype(np.int64)
    ks = np.full(n_seq, max(1, n_tok // 5), dtype=np.int64)

    print(f"{n_seq} sequences x {n_tok} tokens; active backend: {kernels.BACKEND}")
    bench(
        "ez components (P, N)",
        lambda: NP["ez_components_batch"](delta, ranks, offsets, 1, False),
        lambda: NB["ez_components_batch"](delta, ranks, offsets, 1, False),
    )
    bench(
        "segment sums",
        lambda: NP["segment_sums"](delta, offsets),
        lambda: NB["segment_sums"](delta, offsets),
    )
    bench(
        "masked mean/median",
        lambda: NP["masked_delta_stats"](delta, ranks, offsets, 1),
        lambda: NB["masked_delta_stats"](delta, ranks, offsets, 1),
        iterations=2,
    )
    bench(
        "bottom-k means (min-k%)",
        lambda: NP["bottom_k_mean_batch"](delta, offsets, ks),
        lambda: NB["bottom_k_mean_batch"](delta, offsets, ks),
    )

    # bootstrap-shaped workload: AUC + TPR from counts over resampled groups
    m = n = n_seq // 2
    member = np.sort(rng.normal(1, 1, m))
    nonmember = np.sort(rng.normal(0, 1, n))
    slots = np.unique(np.concatenate([member, nonmember]))
    m_ids = np.searchsorted(slots, member)
    n_ids = np.searchsorted(slots, nonmember)

    def boot(impl):
        def run():
            for i in range(args.resamples):
                r = np.random.Generator(
                    np.random.PCG64(np.random.SeedSequence(entropy=0, spawn_key=(i,)))
                )
                a = np.bincount(m_ids[r.integers(0, m, m)], minlength=slots.size).astype(np.int64)
                b = np.bincount(n_ids[r.integers(0, n, n)], minlength=slots.size).astype(np.int64)
                impl["auc_from_counts"](a, b)
                impl["tpr_count_from_counts"](a, b, n // 100)
        return run

    bench(
        f"bootstrap x{args.resamples} (AUC+TPR)",
        boot(NP),
        boot(NB),
        iterations=1,
    )


if __name__ == "__main__":
    main()
