from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class ExtractionConfig:
    """What to probe and how to label the probed chunks.

    ``corpus`` is a UTF-8 text file (documents separated by blank lines) or
    a JSONL file with a ``text`` field per line; consecutive documents are
    tokenized and concatenated, then cut into ``chunk_len``-token chunks
    with the overflow discarded. Chunk ids are ``chunk-%06d`` in corpus
    order.

    Labels come either from explicit id lists or, when those are empty,
    from sampling ``n_member``/``n_nonmember``/``n_validation`` disjoint
    chunks with ``seed``. Validation chunks are never emitted; they exist
    for upstream checkpoint selection.
    """

    target: str
    reference: str
    corpus: str
    out: str
    chunk_len: int = 128
    member_ids: list[str] = field(default_factory=list)
    nonmember_ids: list[str] = field(default_factory=list)
    n_member: int = 0
    n_nonmember: int = 0
    n_validation: int = 0
    seed: int = 0
    emit_vocab_stats: bool = True
    emit_compressed_len: bool = True
    batch_size: int = 8
    device: str = "cpu"

    def validated(self):
        if self.chunk_len < 2:
            raise ValueError(f"chunk_len must be >= 2, got {self.chunk_len}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        explicit = bool(self.member_ids or self.nonmember_ids)
        sampled = self.n_member > 0 or self.n_nonmember > 0
        if explicit and sampled:
            raise ValueError("give either explicit id lists or sampling sizes, not both")
        if not explicit and not sampled:
            raise ValueError("no labels requested: set id lists or n_member/n_nonmember")
        return self
