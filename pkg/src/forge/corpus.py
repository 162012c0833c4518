"""Corpus ingestion and deterministic fixed-length chunking.

Documents are organized by topic, either as one JSONL file per topic
(``<topic>.jsonl`` with records ``{doc_id, title, text}``) or as a directory
of plain-text files (``<topic>/<doc_id>.txt``).  Chunking splits a document
every L tokens with no overlap; chunk boundaries sit at token starts so that
concatenating chunk texts in index order reproduces the body byte for byte.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

from .errors import CorpusError

TRAIN_SPLIT = "train"
EVAL_SPLIT = "eval"

_TOKEN_RE = re.compile(r"\S+")


class Tokenizer(Protocol):
    """Maps text to non-overlapping (start, end) spans, one per token."""

    name: str

    def spans(self, text: str) -> list[tuple[int, int]]: ...


class WhitespaceTokenizer:
    """Counts whitespace-delimited words; the default unit for chunk length."""

    name = "whitespace"

    def spans(self, text: str) -> list[tuple[int, int]]:
        return [m.span() for m in _TOKEN_RE.finditer(text)]


class CharacterTokenizer:
    """Counts individual characters; alternative chunk-length unit."""

    name = "character"

    def spans(self, text: str) -> list[tuple[int, int]]:
        return [(i, i + 1) for i in range(len(text))]


_TOKENIZERS = {t.name: t for t in (WhitespaceTokenizer(), CharacterTokenizer())}


def get_tokenizer(name: str) -> Tokenizer:
    try:
        return _TOKENIZERS[name]
    except KeyError:
        raise CorpusError(f"unknown tokenizer '{name}' (choose from {sorted(_TOKENIZERS)})") from None


@dataclass(frozen=True)
class SourceDocument:
    doc_id: str
    topic: str
    title: str
    body: str
    split: str  # TRAIN_SPLIT or EVAL_SPLIT

    def __post_init__(self):
        if not self.body.strip():
            raise CorpusError(f"document '{self.doc_id}' has an empty body")
        if self.split not in (TRAIN_SPLIT, EVAL_SPLIT):
            raise CorpusError(f"document '{self.doc_id}' has unknown split '{self.split}'")


@dataclass(frozen=True)
class DocumentChunk:
    doc_id: str
    chunk_index: int
    text: str
    token_count: int

    def to_record(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "chunk_index": self.chunk_index,
            "text": self.text,
            "token_count": self.token_count,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DocumentChunk":
        return cls(rec["doc_id"], rec["chunk_index"], rec["text"], rec["token_count"])


@dataclass
class IngestResult:
    documents: list[SourceDocument]
    skipped_empty: int


def chunk_document(doc: SourceDocument, length: int, tokenizer: Tokenizer | None = None) -> list[DocumentChunk]:
    """Split a document into consecutive chunks of at most ``length`` tokens.

    All chunks except possibly the last hold exactly ``length`` tokens.  Each
    chunk's text runs from the start of its first token to the start of the
    next chunk's first token (document start / end for the outermost chunks),
    so inter-chunk whitespace is preserved and the chunks concatenate back to
    the original body.
    """
    if length < 1:
        raise ValueError(f"chunk length must be >= 1, got {length}")
    tokenizer = tokenizer or WhitespaceTokenizer()
    spans = tokenizer.spans(doc.body)
    if not spans:
        return []
    chunks = []
    n_chunks = (len(spans) + length - 1) // length
    for i in range(n_chunks):
        tok_lo = i * length
        tok_hi = min(tok_lo + length, len(spans))
        start = 0 if i == 0 else spans[tok_lo][0]
        end = len(doc.body) if i == n_chunks - 1 else spans[tok_hi][0]
        chunks.append(
            DocumentChunk(
                doc_id=doc.doc_id,
                chunk_index=i,
                text=doc.body[start:end],
                token_count=tok_hi - tok_lo,
            )
        )
    return chunks


def _load_topic_records(source: Path, topic: str) -> list[dict]:
    """Raw {doc_id, title, text} records for one topic, in file order."""
    jsonl_path = source / f"{topic}.jsonl"
    topic_dir = source / topic
    records = []
    if jsonl_path.is_file():
        with open(jsonl_path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                missing = [k for k in ("doc_id", "title", "text") if k not in rec]
                if missing:
                    raise CorpusError(
                        f"{jsonl_path}:{line_no}: record missing fields {missing}"
                    )
                records.append(rec)
    elif topic_dir.is_dir():
        for path in sorted(topic_dir.glob("*.txt")):
            records.append(
                {"doc_id": path.stem, "title": path.stem, "text": path.read_text(encoding="utf-8")}
            )
    else:
        raise CorpusError(f"topic '{topic}': no corpus file {jsonl_path} or directory {topic_dir}")
    return records


def ingest_corpus(
    source,
    topics: Iterable[str],
    train_per_topic: int,
    eval_per_topic: int,
    seed: int,
) -> IngestResult:
    """Sample per-topic train/eval documents reproducibly from ``seed``.

    Documents with empty (or whitespace-only) bodies are skipped and counted.
    Raises :class:`CorpusError` naming the topic and shortfall when a topic
    cannot supply ``train_per_topic + eval_per_topic`` documents.
    """
    topics = list(topics)
    if not topics:
        raise CorpusError("no topics configured")
    if train_per_topic < 0 or eval_per_topic < 0:
        raise CorpusError("per-topic document counts must be >= 0")
    source = Path(source)
    if not source.exists():
        raise CorpusError(f"corpus source '{source}' does not exist")

    documents: list[SourceDocument] = []
    skipped_empty = 0
    for topic in topics:
        records = _load_topic_records(source, topic)
        usable = []
        seen_ids = set()
        for rec in records:
            if not str(rec["text"]).strip():
                skipped_empty += 1
                continue
            if rec["doc_id"] in seen_ids:
                raise CorpusError(f"topic '{topic}': duplicate doc_id '{rec['doc_id']}'")
            seen_ids.add(rec["doc_id"])
            usable.append(rec)

        needed = train_per_topic + eval_per_topic
        if len(usable) < needed:
            raise CorpusError(
                f"topic '{topic}': need {needed} documents "
                f"({train_per_topic} train + {eval_per_topic} eval), "
                f"found {len(usable)} (short by {needed - len(usable)})"
            )
        usable.sort(key=lambda rec: rec["doc_id"])
        rng = random.Random(f"{seed}:{topic}")
        picked = rng.sample(usable, needed)
        for idx, rec in enumerate(picked):
            split = TRAIN_SPLIT if idx < train_per_topic else EVAL_SPLIT
            documents.append(
                SourceDocument(
                    doc_id=str(rec["doc_id"]),
                    topic=topic,
                    title=str(rec["title"]),
                    body=str(rec["text"]),
                    split=split,
                )
            )
    return IngestResult(documents=documents, skipped_empty=skipped_empty)
