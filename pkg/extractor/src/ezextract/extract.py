"""Two-forward-pass probe: target and reference log-probs per token.

For every chunk of L tokens the probe emits L-1 records (conditioned
positions only; the first token of a chunk has no prefix and is dropped).
Each record carries the ground-truth token's natural-log probability under
both models, its 1-based rank under the target's next-token distribution
(argmax ties resolved toward rank 1 and logged), optionally the mean/std
of the target's full-vocabulary log-probability vector (computed with
float64 accumulation), and optionally the DEFLATE length of the chunk's
detokenized text.

Output is the ez-audit trace JSONL wire format, written in corpus order
regardless of batch size, plus a metadata sidecar.
"""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import dataclass

import torch
from transformers import AutoModelForCausalLM, AutoTokenizer

from .config import ExtractionConfig
from .splits import chunk_id, make_splits

logger = logging.getLogger("ezextract")


class TokenizerMismatchError(Exception):
    """Target and reference tokenizers differ; ranks would be meaningless."""


def tokenizer_fingerprint(tokenizer) -> str:
    vocab = sorted(tokenizer.get_vocab().items())
    h = hashlib.sha256()
    for token, idx in vocab:
        h.update(token.encode("utf-8", "surrogatepass"))
        h.update(str(idx).encode())
    return h.hexdigest()


def read_corpus_texts(path: str) -> list[str]:
    """Documents from a blank-line-separated text file or a JSONL file."""
    with open(path, encoding="utf-8") as fh:
        raw = fh.read()
    if path.endswith(".jsonl"):
        texts = []
        for line in raw.splitlines():
            if line.strip():
                texts.append(json.loads(line)["text"])
        return texts
    return [block for block in raw.split("\n\n") if block.strip()]


def chunk_corpus(tokenizer, texts: list[str], chunk_len: int) -> list[list[int]]:
    """Concatenate consecutive texts and cut into fixed-length chunks,
    discarding the overflow."""
    ids: list[int] = []
    for text in texts:
        ids.extend(tokenizer(text, add_special_tokens=False)["input_ids"])
    return [ids[i : i + chunk_len] for i in range(0, len(ids) - chunk_len + 1, chunk_len)]


def _format(x: float) -> str:
    return repr(float(x))


def _trace_line(seq_id, label, tl, rl, rank, mu, sigma, compressed_len) -> str:
    parts = [f'{{"id": {json.dumps(seq_id)}, "label": {json.dumps(label)}']
    if compressed_len is not None:
        parts.append(f', "compressed_len": {int(compressed_len)}')
    toks = []
    for i in range(len(tl)):
        t = f'{{"tl": {_format(tl[i])}, "rl": {_format(rl[i])}, "rank": {int(rank[i])}'
        if mu is not None:
            t += f', "mu": {_format(mu[i])}, "sigma": {_format(sigma[i])}'
        toks.append(t + "}")
    parts.append(f', "tokens": [{", ".join(toks)}]}}')
    return "".join(parts)


def _gt_logprobs(model, ids: torch.Tensor):
    """Log-probs of the ground-truth continuation tokens: [B, L-1]."""
    lp = torch.log_softmax(model(input_ids=ids).logits, dim=-1)
    gt = ids[:, 1:]
    return lp, lp[:, :-1, :].gather(-1, gt.unsqueeze(-1)).squeeze(-1)


@dataclass
class ExtractionResult:
    out: str
    sidecar: str
    n_member: int
    n_nonmember: int
    n_chunks_total: int
    argmax_ties: int
    tokenizer_sha256: str


def extract(config: ExtractionConfig) -> ExtractionResult:
    cfg = config.validated()
    device = torch.device(cfg.device)

    tok_target = AutoTokenizer.from_pretrained(cfg.target)
    tok_reference = AutoTokenizer.from_pretrained(cfg.reference)
    fp = tokenizer_fingerprint(tok_target)
    fp_ref = tokenizer_fingerprint(tok_reference)
    if fp != fp_ref:
        raise TokenizerMismatchError(
            f"target tokenizer {fp[:12]} != reference tokenizer {fp_ref[:12]}; "
            "ranks and log-prob differences would be meaningless"
        )

    texts = read_corpus_texts(cfg.corpus)
    chunks = chunk_corpus(tok_target, texts, cfg.chunk_len)
    if cfg.member_ids or cfg.nonmember_ids:
        member_ids = list(cfg.member_ids)
        nonmember_ids = list(cfg.nonmember_ids)
    else:
        splits = make_splits(
            len(chunks), cfg.n_member, cfg.n_nonmember, cfg.n_validation, cfg.seed
        )
        member_ids, nonmember_ids = splits.member, splits.nonmember
    overlap = set(member_ids) & set(nonmember_ids)
    if overlap:
        raise ValueError(f"member/nonmember ids overlap: {sorted(overlap)[:5]}")
    label_of = {i: "member" for i in member_ids}
    label_of.update({i: "nonmember" for i in nonmember_ids})
    known = set(label_of)
    selected = [
        (idx, chunk) for idx, chunk in enumerate(chunks) if chunk_id(idx) in known
    ]
    missing = known - {chunk_id(idx) for idx, _ in selected}
    if missing:
        raise ValueError(
            f"labeled ids not present in corpus (have {len(chunks)} chunks): "
            f"{sorted(missing)[:5]}"
        )

    target = AutoModelForCausalLM.from_pretrained(cfg.target).to(device).eval()
    reference = AutoModelForCausalLM.from_pretrained(cfg.reference).to(device).eval()

    ties = 0
    counts = {"member": 0, "nonmember": 0}
    with open(cfg.out, "w", encoding="utf-8") as fh, torch.no_grad():
        for lo in range(0, len(selected), cfg.batch_size):
            batch = selected[lo : lo + cfg.batch_size]
            ids = torch.tensor([c for _, c in batch], dtype=torch.long, device=device)
            lp, tl = _gt_logprobs(target, ids)
            _, rl = _gt_logprobs(reference, ids)
            cond = lp[:, :-1, :]
            rank = 1 + (cond > tl.unsqueeze(-1)).sum(-1)
            tied = (cond == tl.unsqueeze(-1)).sum(-1) - 1
            mu = sigma = None
            if cfg.emit_vocab_stats:
                mu = cond.mean(-1, dtype=torch.float64)
                centered = cond.double() - mu.unsqueeze(-1)
                sigma = centered.pow(2).mean(-1).sqrt()
            for row, (idx, chunk) in enumerate(batch):
                n_tied = int(tied[row].sum())
                if n_tied:
                    ties += n_tied
                    logger.debug(
                        "chunk %s: %d argmax tie(s) resolved toward rank 1",
                        chunk_id(idx),
                        n_tied,
                    )
                comp = None
                if cfg.emit_compressed_len:
                    text = tok_target.decode(chunk)
                    comp = len(zlib.compress(text.encode("utf-8")))
                label = label_of[chunk_id(idx)]
                counts[label] += 1
                fh.write(
                    _trace_line(
                        chunk_id(idx),
                        label,
                        tl[row].tolist(),
                        rl[row].tolist(),
                        rank[row].tolist(),
                        mu[row].tolist() if mu is not None else None,
                        sigma[row].tolist() if sigma is not None else None,
                        comp,
                    )
                )
                fh.write("\n")
    if ties:
        logger.info("resolved %d argmax ties toward rank 1 in total", ties)

    sidecar = f"{cfg.out}.meta.json"
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "target": cfg.target,
                "reference": cfg.reference,
                "tokenizer_sha256": fp,
                "chunk_len": cfg.chunk_len,
                "records_per_chunk": cfg.chunk_len - 1,
                "first_token_dropped": True,
                "emit_vocab_stats": cfg.emit_vocab_stats,
                "emit_compressed_len": cfg.emit_compressed_len,
                "compression": "zlib level 6 (DEFLATE) over UTF-8 text",
                "seed": cfg.seed,
                "n_chunks_total": len(chunks),
                "counts": counts,
                "argmax_ties": ties,
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    return ExtractionResult(
        cfg.out, sidecar, counts["member"], counts["nonmember"], len(chunks), ties, fp
    )
