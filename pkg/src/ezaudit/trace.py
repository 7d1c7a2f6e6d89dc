"""Trace data model and line-delimited trace file IO.

A trace file is UTF-8 JSONL, one sequence per line:

    {"id": "...", "label": "member"|"nonmember"|"unknown",
     "compressed_len": 123,                # optional
     "tokens": [{"tl": -1.5, "rl": -2.0, "rank": 3,
                 "mu": -7.1, "sigma": 2.3},  # mu/sigma optional, paired
                ...]}

``tl``/``rl`` are natural-log probabilities of the ground-truth token under
the target and reference models, ``rank`` its 1-based rank under the target.
Field names are part of the wire contract. Floats are serialized with
shortest round-trip decimal repr, so write->read is bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

try:  # msgspec decodes this workload ~2x faster; stdlib json is the fallback
    import msgspec.json as _fastjson

    _loads = _fastjson.decode
    import msgspec as _msgspec

    _DECODE_ERRORS = (_msgspec.DecodeError,)
except ImportError:  # pragma: no cover - exercised only without msgspec
    _loads = json.loads
    _DECODE_ERRORS = (json.JSONDecodeError,)

LABELS = ("member", "nonmember", "unknown")


class TraceError(Exception):
    """Base class for trace file problems."""


class TraceParseError(TraceError):
    """Structurally malformed line (bad JSON, missing field, wrong type)."""


class TraceValidationError(TraceError):
    """Well-formed record violating a declared invariant."""


@dataclass(frozen=True)
class TokenRecord:
    """One conditioned position of a probed sequence."""

    target_logprob: float
    ref_logprob: float
    gt_rank: int
    vocab_mean: float | None = None
    vocab_std: float | None = None


@dataclass
class Violation:
    sequence_id: str
    field: str
    message: str
    line: int | None = None

    def __str__(self):
        where = f"line {self.line}: " if self.line is not None else ""
        return f"{where}sequence {self.sequence_id!r}: field {self.field}: {self.message}"


@dataclass
class SequenceTrace:
    """One labeled evaluation sequence with per-token arrays.

    ``vocab_mean``/``vocab_std`` hold NaN at positions where the optional
    vocabulary statistics are absent; both arrays are None when no token
    carries them.
    """

    id: str
    label: str
    target_logprob: np.ndarray
    ref_logprob: np.ndarray
    gt_rank: np.ndarray
    vocab_mean: np.ndarray | None = None
    vocab_std: np.ndarray | None = None
    compressed_len: int | None = None

    def __len__(self):
        return self.target_logprob.shape[0]

    @property
    def delta(self) -> np.ndarray:
        """Per-token log-probability shift target minus reference."""
        return self.target_logprob - self.ref_logprob

    def has_vocab_stats(self) -> bool:
        """True when every token carries vocabulary mean/std."""
        return (
            self.vocab_mean is not None
            and self.vocab_std is not None
            and not np.isnan(self.vocab_mean).any()
            and not np.isnan(self.vocab_std).any()
        )

    @classmethod
    def from_records(cls, id, label, records: Iterable[TokenRecord], compressed_len=None):
        records = list(records)
        tl = np.array([r.target_logprob for r in records], dtype=np.float64)
        rl = np.array([r.ref_logprob for r in records], dtype=np.float64)
        rank = np.array([r.gt_rank for r in records], dtype=np.int64)
        mu = sigma = None
        if any(r.vocab_mean is not None or r.vocab_std is not None for r in records):
            mu = np.array(
                [math.nan if r.vocab_mean is None else r.vocab_mean for r in records]
            )
            sigma = np.array(
                [math.nan if r.vocab_std is None else r.vocab_std for r in records]
            )
        return cls(str(id), label, tl, rl, rank, mu, sigma, compressed_len)

    def token_records(self) -> list[TokenRecord]:
        out = []
        for i in range(len(self)):
            mu = sig = None
            if self.vocab_mean is not None and not math.isnan(self.vocab_mean[i]):
                mu = float(self.vocab_mean[i])
            if self.vocab_std is not None and not math.isnan(self.vocab_std[i]):
                sig = float(self.vocab_std[i])
            out.append(
                TokenRecord(
                    float(self.target_logprob[i]),
                    float(self.ref_logprob[i]),
                    int(self.gt_rank[i]),
                    mu,
                    sig,
                )
            )
        return out

    def violations(self, line: int | None = None) -> list[Violation]:
        """Every invariant violation in this sequence (empty list = clean)."""
        out = []

        def bad(field_name, message):
            out.append(Violation(self.id, field_name, message, line))

        if not self.id:
            bad("id", "must be a nonempty string")
        if self.label not in LABELS:
            bad("label", f"must be one of {'/'.join(LABELS)}, got {self.label!r}")
        if len(self) == 0:
            bad("tokens", "must be nonempty")
            return out
        tl, rl = self.target_logprob, self.ref_logprob
        if not np.isfinite(tl).all():
            bad("target_logprob", "must be finite")
        elif (tl > 0).any():
            bad("target_logprob", "log-probabilities must be <= 0")
        if not np.isfinite(rl).all():
            bad("ref_logprob", "must be finite")
        elif (rl > 0).any():
            bad("ref_logprob", "log-probabilities must be <= 0")
        if (self.gt_rank < 1).any():
            bad("gt_rank", "ranks are 1-based, must be >= 1")
        mu, sigma = self.vocab_mean, self.vocab_std
        if (mu is None) != (sigma is None):
            bad("vocab_std", "vocab_mean and vocab_std must be paired")
        elif mu is not None:
            mu_absent = np.isnan(mu)
            sig_absent = np.isnan(sigma)
            if (mu_absent != sig_absent).any():
                bad("vocab_std", "vocab_mean and vocab_std must be paired per token")
            present = ~sig_absent
            if np.isinf(mu[~mu_absent]).any():
                bad("vocab_mean", "must be finite")
            if np.isinf(sigma[present]).any():
                bad("vocab_std", "must be finite")
            elif (sigma[present] <= 0).any():
                bad("vocab_std", "must be > 0")
        if self.compressed_len is not None and self.compressed_len < 1:
            bad("compressed_len", "must be >= 1")
        return out


@dataclass
class ValidationSummary:
    n_sequences: int = 0
    n_members: int = 0
    n_nonmembers: int = 0
    n_unknown: int = 0
    n_tokens: int = 0
    violations: list[Violation] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.violations


def _require(obj, key, line):
    try:
        return obj[key]
    except KeyError:
        raise TraceParseError(f"line {line}: missing field {key}") from None


def _is_number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def parse_trace_line(line: str, line_no: int = 1) -> SequenceTrace:
    """Parse one JSONL record; raises TraceParseError on structural problems.

    Invariant checking is separate (``SequenceTrace.violations``) so the
    validator can report every violation instead of stopping at the first.

    Token fields take a fast bulk-conversion path; when it trips, the strict
    per-token path reruns to produce a precise error message. The fast path
    accepts JSON booleans where numbers are expected (they coerce to 0/1).
    """
    try:
        obj = _loads(line)
    except _DECODE_ERRORS as e:
        raise TraceParseError(f"line {line_no}: invalid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise TraceParseError(f"line {line_no}: record must be a JSON object")
    seq_id = _require(obj, "id", line_no)
    label = _require(obj, "label", line_no)
    tokens = _require(obj, "tokens", line_no)
    comp = obj.get("compressed_len")
    if (
        isinstance(seq_id, str)
        and isinstance(label, str)
        and isinstance(tokens, list)
        and tokens
        and (comp is None or (isinstance(comp, int) and not isinstance(comp, bool)))
    ):
        try:
            tl = np.array([t["tl"] for t in tokens], dtype=np.float64)
            rl = np.array([t["rl"] for t in tokens], dtype=np.float64)
            rank_f = np.array([t["rank"] for t in tokens], dtype=np.float64)
        except (KeyError, TypeError, ValueError, OverflowError):
            return _parse_trace_line_strict(obj, line_no)
        with np.errstate(invalid="ignore"):
            rank = rank_f.astype(np.int64)
        if not (np.abs(rank_f) < 2**62).all() or not (rank == rank_f).all():
            return _parse_trace_line_strict(obj, line_no)
        mu = sigma = None
        if max(map(len, tokens)) > 3:
            try:
                mu = np.array([t.get("mu") for t in tokens], dtype=np.float64)
                sigma = np.array([t.get("sigma") for t in tokens], dtype=np.float64)
            except (TypeError, ValueError, OverflowError):
                return _parse_trace_line_strict(obj, line_no)
            if np.isnan(mu).all() and np.isnan(sigma).all():
                mu = sigma = None
        return SequenceTrace(seq_id, label, tl, rl, rank, mu, sigma, comp)
    return _parse_trace_line_strict(obj, line_no)


def _parse_trace_line_strict(obj: dict, line_no: int) -> SequenceTrace:
    seq_id = _require(obj, "id", line_no)
    if not isinstance(seq_id, str):
        raise TraceParseError(f"line {line_no}: field id must be a string")
    label = _require(obj, "label", line_no)
    if not isinstance(label, str):
        raise TraceParseError(f"line {line_no}: field label must be a string")
    tokens = _require(obj, "tokens", line_no)
    if not isinstance(tokens, list):
        raise TraceParseError(f"line {line_no}: field tokens must be an array")
    comp = obj.get("compressed_len")
    if comp is not None and (not isinstance(comp, int) or isinstance(comp, bool)):
        raise TraceParseError(f"line {line_no}: field compressed_len must be an integer")

    n = len(tokens)
    tl = np.empty(n)
    rl = np.empty(n)
    rank = np.empty(n, dtype=np.int64)
    mu = sigma = None
    for i, tok in enumerate(tokens):
        if not isinstance(tok, dict):
            raise TraceParseError(f"line {line_no}: token {i}: must be an object")
        try:
            v_tl = tok["tl"]
            v_rl = tok["rl"]
            v_rank = tok["rank"]
        except KeyError as e:
            raise TraceParseError(
                f"line {line_no}: token {i}: missing field {e.args[0]}"
            ) from None
        if not (_is_number(v_tl) and _is_number(v_rl)):
            raise TraceParseError(f"line {line_no}: token {i}: tl/rl must be numbers")
        if not isinstance(v_rank, int) or isinstance(v_rank, bool):
            raise TraceParseError(f"line {line_no}: token {i}: rank must be an integer")
        try:
            tl[i] = v_tl
            rl[i] = v_rl
            rank[i] = v_rank
        except OverflowError:
            raise TraceParseError(
                f"line {line_no}: token {i}: numeric value out of range"
            ) from None
        v_mu = tok.get("mu")
        v_sigma = tok.get("sigma")
        if v_mu is not None or v_sigma is not None:
            if mu is None:
                mu = np.full(n, np.nan)
                sigma = np.full(n, np.nan)
            if v_mu is not None:
                if not _is_number(v_mu):
                    raise TraceParseError(f"line {line_no}: token {i}: mu must be a number")
                mu[i] = v_mu
            if v_sigma is not None:
                if not _is_number(v_sigma):
                    raise TraceParseError(
                        f"line {line_no}: token {i}: sigma must be a number"
                    )
                sigma[i] = v_sigma
    return SequenceTrace(seq_id, label, tl, rl, rank, mu, sigma, comp)


def read_traces(path, *, validate: bool = True) -> Iterator[SequenceTrace]:
    """Stream traces from a file in order; memory stays per-sequence.

    Raises TraceParseError / TraceValidationError on the first bad record
    (use ``validate_traces`` to collect every problem instead).
    """
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            trace = parse_trace_line(line, line_no)
            if validate:
                bad = trace.violations(line_no)
                if bad:
                    raise TraceValidationError(str(bad[0]))
                if trace.id in seen:
                    raise TraceValidationError(
                        f"line {line_no}: duplicate sequence id {trace.id!r}"
                    )
                seen.add(trace.id)
            yield trace


def _format_float(x: float) -> str:
    # repr of a Python float is the shortest decimal that round-trips
    return repr(float(x))


def trace_to_json_line(trace: SequenceTrace) -> str:
    parts = [f'{{"id": {json.dumps(trace.id)}, "label": {json.dumps(trace.label)}']
    if trace.compressed_len is not None:
        parts.append(f', "compressed_len": {int(trace.compressed_len)}')
    toks = []
    mu, sigma = trace.vocab_mean, trace.vocab_std
    for i in range(len(trace)):
        t = (
            f'{{"tl": {_format_float(trace.target_logprob[i])}'
            f', "rl": {_format_float(trace.ref_logprob[i])}'
            f', "rank": {int(trace.gt_rank[i])}'
        )
        if mu is not None and not math.isnan(mu[i]):
            t += f', "mu": {_format_float(mu[i])}'
        if sigma is not None and not math.isnan(sigma[i]):
            t += f', "sigma": {_format_float(sigma[i])}'
        toks.append(t + "}")
    parts.append(f', "tokens": [{", ".join(toks)}]}}')
    return "".join(parts)


def write_traces(traces: Iterable[SequenceTrace], path) -> int:
    """Write traces as JSONL; refuses invariant-violating input. Returns count."""
    n = 0
    seen: set[str] = set()
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            bad = trace.violations()
            if bad:
                raise TraceValidationError(str(bad[0]))
            if trace.id in seen:
                raise TraceValidationError(f"duplicate sequence id {trace.id!r}")
            seen.add(trace.id)
            fh.write(trace_to_json_line(trace))
            fh.write("\n")
            n += 1
    return n


def validate_traces(path) -> ValidationSummary:
    """Scan a trace file and report every invariant violation.

    Structural parse errors still raise TraceParseError (the file cannot be
    meaningfully summarized past a malformed line).
    """
    summary = ValidationSummary()
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            trace = parse_trace_line(line, line_no)
            summary.n_sequences += 1
            summary.n_tokens += len(trace)
            if trace.label == "member":
                summary.n_members += 1
            elif trace.label == "nonmember":
                summary.n_nonmembers += 1
            else:
                summary.n_unknown += 1
            summary.violations.extend(trace.violations(line_no))
            if trace.id in seen:
                summary.violations.append(
                    Violation(trace.id, "id", "duplicate sequence id", line_no)
                )
            seen.add(trace.id)
    return summary
