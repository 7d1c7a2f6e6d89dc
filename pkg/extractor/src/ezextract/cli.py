"""CLI: probe a (target, reference) checkpoint pair over a corpus.

Exit codes: 0 success, 1 extraction failure (tokenizer mismatch,
insufficient corpus), 2 usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ExtractionConfig
from .extract import TokenizerMismatchError, extract


def _read_id_list(path: str | None) -> list[str]:
    if not path:
        return []
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ez-extract",
        description="Extract ez-audit traces from a (target, reference) causal-LM pair.",
    )
    p.add_argument("--target", required=True, help="target checkpoint (path or hub id)")
    p.add_argument("--reference", required=True, help="reference checkpoint")
    p.add_argument("--corpus", required=True, help="text file (blank-line docs) or JSONL with 'text'")
    p.add_argument("-o", "--out", required=True, help="output trace file (.traces.jsonl)")
    p.add_argument("--chunk-len", type=int, default=128)
    p.add_argument("--member-ids", help="file with one chunk id per line")
    p.add_argument("--nonmember-ids", help="file with one chunk id per line")
    p.add_argument("--n-member", type=int, default=0)
    p.add_argument("--n-nonmember", type=int, default=0)
    p.add_argument("--n-validation", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-vocab-stats", action="store_true")
    p.add_argument("--no-compressed-len", action="store_true")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--device", default="cpu")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = ExtractionConfig(
            target=args.target,
            reference=args.reference,
            corpus=args.corpus,
            out=args.out,
            chunk_len=args.chunk_len,
            member_ids=_read_id_list(args.member_ids),
            nonmember_ids=_read_id_list(args.nonmember_ids),
            n_member=args.n_member,
            n_nonmember=args.n_nonmember,
            n_validation=args.n_validation,
            seed=args.seed,
            emit_vocab_stats=not args.no_vocab_stats,
            emit_compressed_len=not args.no_compressed_len,
            batch_size=args.batch_size,
            device=args.device,
        ).validated()
    except ValueError as e:
        print(f"ez-extract: {e}", file=sys.stderr)
        return 2
    try:
        result = extract(cfg)
    except (TokenizerMismatchError, ValueError, OSError) as e:
        print(f"ez-extract: {e}", file=sys.stderr)
        return 1
    print(
        f"ez-extract: wrote {result.n_member} member + {result.n_nonmember} nonmember "
        f"traces to {result.out} (sidecar {result.sidecar})",
        file=sys.stderr,
    )
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
