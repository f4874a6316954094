"""
Planted-evidence corpus generator.

Builds synthetic documents whose retrieval outcome is known in advance:

- every document carries one evidence chunk drawn from its own private
  vocabulary, aligned to a chunk boundary
- the rest of the document is filler from a shared vocabulary
- verbatim queries copy their evidence chunk
- paraphrase queries use evidence words of other documents only, so they
  share no content word with their gold document

With `dimension` set, evidence words are chosen so their hash buckets never
collide with filler or with another document's evidence.

NO real documents are used or recreated.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Set

import numpy as np

from src.embedding import hash_bucket
from src.latex_ingest import IngestedDocument, document_from_text, save_ingested
from src.query_pipeline import EvidenceType, Query, write_queries
from src.utils import require

log = logging.getLogger(__name__)


# ============================
# GLOBAL CONSTRAINTS
# ============================

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"

FILLER_VOCABULARY_SIZE = 40
MAX_WORD_ATTEMPTS = 10_000


# ============================
# HELPERS
# ============================

class _WordSource:
    """Pronounceable pseudo-words, unique across the corpus."""

    def __init__(self, rng: np.random.Generator, dimension: Optional[int]):
        self.rng = rng
        self.dimension = dimension
        self.used_words: Set[str] = set()
        self.used_buckets: Set[int] = set()

    def _candidate(self) -> str:
        syllables = int(self.rng.integers(2, 5))
        return "".join(
            CONSONANTS[int(self.rng.integers(len(CONSONANTS)))] + VOWELS[int(self.rng.integers(len(VOWELS)))]
            for _ in range(syllables)
        )

    def draw(self, count: int) -> List[str]:
        """`count` new words whose buckets are fresh (shared within the batch only)."""
        words: List[str] = []
        batch_buckets: Set[int] = set()
        for _ in range(MAX_WORD_ATTEMPTS):
            if len(words) == count:
                break
            word = self._candidate()
            if word in self.used_words:
                continue
            if self.dimension is not None:
                bucket = hash_bucket(word, self.dimension)
                if bucket in self.used_buckets:
                    continue
                batch_buckets.add(bucket)
            self.used_words.add(word)
            words.append(word)
        require(len(words) == count, f"could not draw {count} collision-free words; raise the dimension")
        self.used_buckets |= batch_buckets
        return words


# ============================
# CORPUS
# ============================

@dataclass(frozen=True)
class SyntheticDocument:
    doc_id: str
    text: str
    evidence_chunk_index: Optional[int]
    evidence_text: str
    vocabulary: tuple


@dataclass
class SyntheticCorpus:
    docs: List[SyntheticDocument]
    chunk_size: int
    verbatim_queries: List[Query] = field(default_factory=list)
    paraphrase_queries: List[Query] = field(default_factory=list)

    @property
    def queries(self) -> List[Query]:
        return self.verbatim_queries + self.paraphrase_queries

    @property
    def doc_ids(self) -> List[str]:
        return [d.doc_id for d in self.docs]

    def ingested(self) -> List[IngestedDocument]:
        return [document_from_text(d.doc_id, d.text) for d in self.docs]

    def without_evidence(self, doc_id: str) -> "SyntheticCorpus":
        """Copy of the corpus with `doc_id`'s evidence chunk cut out."""
        docs = []
        for doc in self.docs:
            if doc.doc_id == doc_id and doc.evidence_chunk_index is not None:
                tokens = doc.text.split()
                start = doc.evidence_chunk_index * self.chunk_size
                kept = tokens[:start] + tokens[start + self.chunk_size:]
                doc = replace(doc, text=_paragraphs(kept, self.chunk_size), evidence_chunk_index=None, evidence_text="")
            docs.append(doc)
        return replace(self, docs=docs)


def _paragraphs(tokens: List[str], width: int) -> str:
    return "\n\n".join(" ".join(tokens[i:i + width]) for i in range(0, len(tokens), width)) + "\n"


def generate_planted_corpus(
    n_docs: int = 20,
    chunk_size: int = 32,
    filler_chunks: int = 3,
    evidence_vocabulary: int = 8,
    n_verbatim: Optional[int] = None,
    n_paraphrase: int = 0,
    paraphrase_sources: int = 6,
    words_per_source: int = 2,
    dimension: Optional[int] = None,
    seed: int = 42,
) -> SyntheticCorpus:
    """
    Documents `doc-000` ... with `filler_chunks` filler chunks and one
    evidence chunk at a seeded position. The first `n_verbatim` documents
    get verbatim queries, the next `n_paraphrase` get paraphrase queries.
    """
    n_verbatim = n_docs if n_verbatim is None else n_verbatim
    require(n_verbatim + n_paraphrase <= n_docs, "more queries than documents")
    require(n_paraphrase == 0 or n_docs > paraphrase_sources, "not enough documents to paraphrase from")

    rng = np.random.default_rng(seed)
    words = _WordSource(rng, dimension)
    filler = words.draw(FILLER_VOCABULARY_SIZE)

    docs: List[SyntheticDocument] = []
    for i in range(n_docs):
        vocabulary = tuple(words.draw(evidence_vocabulary))
        evidence = [vocabulary[int(j)] for j in rng.integers(0, len(vocabulary), chunk_size)]
        position = int(rng.integers(0, filler_chunks + 1))

        tokens: List[str] = []
        for c in range(filler_chunks + 1):
            if c == position:
                tokens.extend(evidence)
            else:
                tokens.extend(filler[int(j)] for j in rng.integers(0, len(filler), chunk_size))

        docs.append(SyntheticDocument(
            doc_id=f"doc-{i:03d}",
            text=_paragraphs(tokens, chunk_size),
            evidence_chunk_index=position,
            evidence_text=" ".join(evidence),
            vocabulary=vocabulary,
        ))

    verbatim = [
        Query(f"{d.doc_id}:text:000", d.evidence_text, EvidenceType.TEXT, d.doc_id, audit={"planted": "verbatim"})
        for d in docs[:n_verbatim]
    ]

    paraphrase = []
    for i in range(n_verbatim, n_verbatim + n_paraphrase):
        others = [j for j in range(n_docs) if j != i]
        sources = rng.choice(others, size=paraphrase_sources, replace=False)
        query_words = []
        for j in sorted(int(s) for s in sources):
            query_words.extend(docs[j].vocabulary[:words_per_source])
        paraphrase.append(Query(
            f"{docs[i].doc_id}:text:000",
            " ".join(query_words),
            EvidenceType.TEXT,
            docs[i].doc_id,
            audit={"planted": "paraphrase"},
        ))

    log.info("Planted corpus: %d docs, %d verbatim, %d paraphrase", n_docs, len(verbatim), len(paraphrase))
    return SyntheticCorpus(docs, chunk_size, verbatim, paraphrase)


def write_planted_corpus(corpus: SyntheticCorpus, out_dir) -> Dict[str, Path]:
    """Save ingested documents under `<out>/corpus` and queries to `<out>/queries.jsonl`."""
    out_dir = Path(out_dir)
    corpus_dir = out_dir / "corpus"
    for doc in corpus.ingested():
        save_ingested(doc, corpus_dir)
    queries = write_queries(out_dir / "queries.jsonl", corpus.queries)
    return {"corpus": corpus_dir, "queries": queries}
