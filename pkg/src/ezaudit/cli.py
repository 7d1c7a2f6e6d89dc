"""Command-line audit workflow: validate, score, eval, ablate, synth, analyze.

Exit codes: 0 success, 1 domain failure (invariant violations, failed
attacks, single-label populations), 2 usage / IO / parse failure.
Diagnostics go to stderr; data goes to files (or stdout for validate and
analyze-without---out). Every command with file output writes a
``<out>.manifest.json`` sidecar unless --no-manifest is given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from collections import Counter
from datetime import datetime, timezone

from . import __version__, analysis, kernels, metrics, synth
from .attacks import (
    ATTACK_NAMES,
    DEFAULT_ATTACKS,
    ScoreParams,
    read_scores_csv,
    score_traces,
    write_scores_csv,
)
from .trace import TraceParseError, TraceValidationError, read_traces, validate_traces

_ABLATE_VARIANTS = ("ez", "log_ratio", "p_minus_n", "pos_fraction", "median_delta", "mean_delta")
_ABLATE_TOP_K = (1, 5, 10)


def _err(msg: str) -> None:
    print(f"ez-audit: {msg}", file=sys.stderr)


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("EZ_AUDIT_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            _err(f"ignoring non-integer EZ_AUDIT_THREADS={env!r}")
    return 1


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()


def _write_manifest(args, out_path: str, inputs: list[str], params: dict) -> str | None:
    if getattr(args, "no_manifest", False):
        return None
    payload = {
        "engine": f"ezaudit {__version__}",
        "command": getattr(args, "_argv", []),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "backend": kernels.BACKEND,
        "inputs": {p: _sha256(p) for p in inputs},
        "outputs": [out_path],
        "params": params,
    }
    manifest_path = f"{out_path}.manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return manifest_path


def _dump_json(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


def _parse_float_list(text: str, what: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValueError(f"{what} must be a comma-separated list of numbers, got {text!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    summary = validate_traces(args.traces)
    print(f"sequences: {summary.n_sequences}")
    print(f"members: {summary.n_members}")
    print(f"nonmembers: {summary.n_nonmembers}")
    print(f"unknown: {summary.n_unknown}")
    print(f"tokens: {summary.n_tokens}")
    print(f"violations: {len(summary.violations)}")
    for v in summary.violations:
        print(f"  {v}")
    return 0 if summary.clean else 1


def cmd_score(args) -> int:
    try:
        attacks = [a.strip() for a in args.attacks.split(",") if a.strip()]
        for a in attacks:
            if a not in ATTACK_NAMES:
                raise ValueError(f"unknown attack {a!r}, expected one of {ATTACK_NAMES}")
        if not attacks:
            raise ValueError("no attacks requested")
        params = ScoreParams(k_percent=args.k_percent, top_k=args.top_k).validated()
    except ValueError as e:
        _err(str(e))
        return 2

    errors = []
    emitted: Counter = Counter()
    threads = _threads(args)

    def counting(rows):
        for score, label in rows:
            emitted[score.attack] += 1
            yield score, label

    rows = score_traces(
        read_traces(args.traces), attacks, params, threads=threads, on_error=errors.append
    )
    n_rows = write_scores_csv(args.out, counting(rows))

    for e in errors[:20]:
        _err(f"{e.attack}: sequence {e.sequence_id!r}: {e.message}")
    if len(errors) > 20:
        _err(f"... {len(errors) - 20} more scoring errors")
    _err(f"wrote {n_rows} scores for {len(attacks)} attacks to {args.out}")

    _write_manifest(
        args,
        args.out,
        [args.traces],
        {
            "attacks": attacks,
            "k_percent": args.k_percent,
            "top_k": args.top_k,
            "threads": threads,
            "errors": len(errors),
        },
    )
    err_attacks = {e.attack for e in errors}
    fully_failed = [a for a in attacks if emitted[a] == 0 and a in err_attacks]
    if fully_failed:
        _err(f"attacks with no successful scores: {', '.join(fully_failed)}")
        return 1
    return 0


def cmd_eval(args) -> int:
    try:
        levels = _parse_float_list(args.levels, "--levels")
        for lv in levels:
            if not (0.0 < lv < 1.0):
                raise ValueError(f"fpr level must be in (0, 1), got {lv}")
        if args.resamples < 1:
            raise ValueError("--resamples must be >= 1")
    except ValueError as e:
        _err(str(e))
        return 2

    scores = read_scores_csv(args.scores)
    threads = _threads(args)
    result = metrics.evaluate(
        scores, levels, resamples=args.resamples, seed=args.seed, threads=threads
    )
    payload = {"engine": f"ezaudit {__version__}", **result.to_dict()}
    _dump_json(payload, args.out)

    if result.unknown_label_rows:
        _err(f"excluded {result.unknown_label_rows} rows with label 'unknown'")
    for r in result.reports:
        if isinstance(r, metrics.AttackEvalError):
            _err(f"attack {r.attack}: {r.error}")

    if args.roc_csv:
        groups, _ = metrics.group_scores(scores)
        for attack, (members, nonmembers) in groups.items():
            if members and nonmembers:
                metrics.write_roc_csv(
                    f"{args.roc_csv}{attack}.roc.csv", metrics.roc(members, nonmembers)
                )

    _write_manifest(
        args,
        args.out,
        [args.scores],
        {
            "levels": levels,
            "resamples": args.resamples,
            "seed": args.seed,
            "threads": threads,
            "rng": metrics.RNG_DESCRIPTION,
        },
    )
    if not result.reports or result.all_failed:
        _err("no attack could be evaluated")
        return 1
    return 0


def cmd_ablate(args) -> int:
    traces = list(read_traces(args.traces))
    labeled = [t for t in traces if t.label in ("member", "nonmember")]
    if not any(t.label == "member" for t in labeled) or not any(
        t.label == "nonmember" for t in labeled
    ):
        _err("ablation needs both member and nonmember traces")
        return 1
    threads = _threads(args)

    total_tokens = sum(len(t) for t in labeled)
    auc_table: dict[str, dict[str, float]] = {}
    error_fraction: dict[str, float] = {}
    scores_top1: dict[str, list[float]] = {}
    for k in _ABLATE_TOP_K:
        rows = list(
            score_traces(labeled, _ABLATE_VARIANTS, ScoreParams(top_k=k), threads=threads)
        )
        grouped: dict[str, tuple[list[float], list[float]]] = {
            a: ([], []) for a in _ABLATE_VARIANTS
        }
        for score, label in rows:
            grouped[score.attack][0 if label == "member" else 1].append(score.score)
            if k == 1:
                scores_top1.setdefault(score.attack, []).append(score.score)
        auc_table[str(k)] = {
            a: metrics.auc(m, n) for a, (m, n) in grouped.items()
        }
        n_err = sum(int((t.gt_rank > k).sum()) for t in labeled)
        error_fraction[str(k)] = n_err / total_tokens

    sz_rows = list(score_traces(labeled, ("success_zone",), ScoreParams(top_k=1), threads=threads))
    sz_m = [s.score for s, lb in sz_rows if lb == "member"]
    sz_n = [s.score for s, lb in sz_rows if lb == "nonmember"]

    from scipy import stats as _stats

    correlations = {}
    for i, a in enumerate(_ABLATE_VARIANTS):
        for b in _ABLATE_VARIANTS[i + 1 :]:
            if len(set(scores_top1[a])) < 2 or len(set(scores_top1[b])) < 2:
                correlations[f"{a}|{b}"] = None  # constant scores, rho undefined
                continue
            rho = _stats.spearmanr(scores_top1[a], scores_top1[b]).statistic
            correlations[f"{a}|{b}"] = None if math.isnan(rho) else float(rho)

    payload = {
        "engine": f"ezaudit {__version__}",
        "counts": {
            "members": sum(1 for t in labeled if t.label == "member"),
            "nonmembers": sum(1 for t in labeled if t.label == "nonmember"),
            "excluded_unknown": len(traces) - len(labeled),
        },
        "auc_by_top_k": auc_table,
        "error_fraction_by_top_k": error_fraction,
        "success_zone_auc": metrics.auc(sz_m, sz_n),
        "rank_correlation_top1": correlations,
    }
    _dump_json(payload, args.out)
    _write_manifest(args, args.out, [args.traces], {"top_k_grid": list(_ABLATE_TOP_K)})
    return 0


def cmd_synth(args) -> int:
    try:
        cfg = synth.SynthConfig(
            n_members=args.members,
            n_nonmembers=args.nonmembers,
            errors_per_seq=args.errors_per_seq,
            g_sigma=args.g_sigma,
            mem_mean=args.mem_mean,
            seed=args.seed,
            success_fraction=args.success_fraction,
            success_mem_scale=args.success_mem_scale,
            emit_vocab_stats=not args.no_vocab_stats,
            emit_compressed_len=not args.no_compressed_len,
        ).validated()
    except ValueError as e:
        _err(str(e))
        return 2
    from .trace import write_traces

    n = write_traces(synth.generate(cfg), args.out)
    synth.write_sidecar(cfg, args.out)
    _err(f"wrote {n} synthetic traces to {args.out}")
    _write_manifest(args, args.out, [], {"config": json.loads(json.dumps(cfg.__dict__))})
    return 0


def _scores_for_attack(path: str, attack: str | None) -> tuple[dict[str, float], str]:
    rows = read_scores_csv(path)
    by_attack: dict[str, dict[str, float]] = {}
    for r in rows:
        by_attack.setdefault(r.attack, {})[r.sequence_id] = r.score
    if not by_attack:
        raise ValueError(f"{path}: no scores")
    if attack is None:
        if len(by_attack) > 1:
            raise ValueError(
                f"{path} holds attacks {sorted(by_attack)}; choose one with --attack"
            )
        attack = next(iter(by_attack))
    elif attack not in by_attack:
        raise ValueError(f"{path}: no scores for attack {attack!r}")
    return by_attack[attack], attack


def cmd_analyze(args) -> int:
    if args.analysis == "bins" and args.mode == "auc" and not args.scores:
        _err("analyze bins --mode auc requires --scores")
        return 2
    traces = list(read_traces(args.traces))
    csv_groups: dict[str, str] | None = None
    csv_scores: dict[str, float] | None = None
    try:
        if args.analysis == "bins":
            mode = args.mode.replace("-", "_")
            if mode == "auc":
                csv_scores, attack = _scores_for_attack(args.scores, args.attack)
                report = analysis.difficulty_bins(
                    traces, csv_scores, n_bins=args.n, mode="auc", top_k=args.top_k
                )
                payload = report.to_dict()
                payload["attack"] = attack
            else:
                report = analysis.difficulty_bins(
                    traces, None, n_bins=args.n, mode="delta_means", top_k=args.top_k
                )
                payload = report.to_dict()
            bins = analysis.assign_difficulty_bins(
                [t for t in traces if t.label in ("member", "nonmember")], args.n
            )
            kept = [t for t in traces if t.label in ("member", "nonmember")]
            csv_groups = {}
            for b, idxs in enumerate(bins):
                for i in idxs:
                    csv_groups[kept[i].id] = f"bin-{b}"
        elif args.analysis == "failure":
            csv_scores, attack = _scores_for_attack(args.scores, args.attack)
            report = analysis.failure_modes(traces, csv_scores, args.fpr, top_k=args.top_k)
            payload = report.to_dict()
            payload["attack"] = attack
            csv_groups = {}
            for t in traces:
                if t.label not in ("member", "nonmember"):
                    continue
                predicted = csv_scores[t.id] >= report.threshold
                if t.label == "member":
                    csv_groups[t.id] = "true_positive" if predicted else "false_negative"
                else:
                    csv_groups[t.id] = "false_positive" if predicted else "true_negative"
        elif args.analysis == "errors":
            payload = analysis.error_count_stats(traces, top_k=args.top_k).to_dict()
        else:  # ks
            payload = analysis.shift_removed_ks(traces, top_k=args.top_k).to_dict()
    except ValueError as e:
        _err(str(e))
        return 1

    payload = {"engine": f"ezaudit {__version__}", "analysis": args.analysis, **payload}
    _dump_json(payload, args.out)
    if args.csv:
        analysis.write_intermediates_csv(
            args.csv, traces, csv_scores, csv_groups, top_k=args.top_k
        )
    if args.out is not None:
        inputs = [args.traces] + ([args.scores] if getattr(args, "scores", None) else [])
        _write_manifest(args, args.out, inputs, {"analysis": args.analysis})
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ez-audit",
        description="Membership-inference auditing: error-zone scoring, baselines, exact low-FPR metrics.",
    )
    parser.add_argument("--version", action="version", version=f"ezaudit {__version__}")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add_common(p, manifest=True):
        p.add_argument("--threads", type=int, default=None,
                       help="parallelism cap (falls back to EZ_AUDIT_THREADS, then 1)")
        if manifest:
            p.add_argument("--no-manifest", action="store_true",
                           help="skip the <out>.manifest.json sidecar")

    p = sub.add_parser("validate", help="check a trace file against all invariants")
    p.add_argument("traces", help="trace .traces.jsonl file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("score", help="compute attack scores for every sequence")
    p.add_argument("-t", "--traces", required=True)
    p.add_argument("-o", "--out", required=True, help="output scores CSV")
    p.add_argument("--attacks", default=",".join(DEFAULT_ATTACKS),
                   help=f"comma list from {','.join(ATTACK_NAMES)}")
    p.add_argument("--k-percent", type=float, default=20.0, help="min-k%% aggregation share")
    p.add_argument("--top-k", type=int, default=1,
                   help="error definition: rank > K counts as an error position")
    add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate scored attacks (AUC, TPR@FPR, bootstrap CIs)")
    p.add_argument("-s", "--scores", required=True, help="scores CSV from `score`")
    p.add_argument("-o", "--out", required=True, help="output report JSON")
    p.add_argument("--levels", default="0.01,0.001", help="FPR levels, comma separated")
    p.add_argument("--resamples", type=int, default=metrics.DEFAULT_RESAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--roc-csv", default=None, metavar="PREFIX",
                   help="also dump <PREFIX><attack>.roc.csv per attack")
    add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="AUC table over aggregation variants x top-K error definitions")
    p.add_argument("-t", "--traces", required=True)
    p.add_argument("-o", "--out", default=None, help="output JSON (stdout when omitted)")
    add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="generate synthetic traces from the additive model")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--members", type=int, required=True)
    p.add_argument("--nonmembers", type=int, required=True)
    p.add_argument("--errors-per-seq", type=int, default=100)
    p.add_argument("--g-sigma", type=float, default=1.0)
    p.add_argument("--mem-mean", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--success-fraction", type=float, default=0.0)
    p.add_argument("--success-mem-scale", type=float, default=0.25)
    p.add_argument("--no-vocab-stats", action="store_true")
    p.add_argument("--no-compressed-len", action="store_true")
    add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("analyze", help="diagnostic analyses")
    an = p.add_subparsers(dest="analysis", required=True)

    pa = an.add_parser("bins", help="difficulty-binned AUC or delta means")
    pa.add_argument("-t", "--traces", required=True)
    pa.add_argument("--n", type=int, default=4, help="number of difficulty bins")
    pa.add_argument("--mode", choices=["auc", "delta-means"], default="auc")
    pa.add_argument("-s", "--scores", default=None, help="scores CSV (mode=auc)")
    pa.add_argument("--attack", default=None, help="attack to analyze when CSV has several")
    pa.add_argument("--top-k", type=int, default=1)
    pa.add_argument("-o", "--out", default=None)
    pa.add_argument("--csv", default=None, help="per-sequence intermediates CSV")
    add_common(pa)
    pa.set_defaults(func=cmd_analyze)

    pf = an.add_parser("failure", help="false negative/positive characteristics at an FPR level")
    pf.add_argument("-t", "--traces", required=True)
    pf.add_argument("-s", "--scores", required=True)
    pf.add_argument("--attack", default=None)
    pf.add_argument("--fpr", type=float, required=True)
    pf.add_argument("--top-k", type=int, default=1)
    pf.add_argument("-o", "--out", default=None)
    pf.add_argument("--csv", default=None)
    add_common(pf)
    pf.set_defaults(func=cmd_analyze)

    pe = an.add_parser("errors", help="error-count statistics and membership correlation")
    pe.add_argument("-t", "--traces", required=True)
    pe.add_argument("--top-k", type=int, default=1)
    pe.add_argument("-o", "--out", default=None)
    pe.add_argument("--csv", default=None)
    add_common(pe)
    pe.set_defaults(func=cmd_analyze)

    pk = an.add_parser("ks", help="shift-removed KS test on error-position deltas")
    pk.add_argument("-t", "--traces", required=True)
    pk.add_argument("--top-k", type=int, default=1)
    pk.add_argument("-o", "--out", default=None)
    pk.add_argument("--csv", default=None)
    add_common(pk)
    pk.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = argv
    try:
        return args.func(args)
    except TraceParseError as e:
        _err(str(e))
        return 2
    except TraceValidationError as e:
        _err(str(e))
        return 1
    except FileNotFoundError as e:
        _err(f"{e.filename}: no such file")
        return 2
    except OSError as e:
        _err(str(e))
        return 2
    except ValueError as e:
        _err(str(e))
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
