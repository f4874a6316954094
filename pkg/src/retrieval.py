"""
Scoring queries against indexes.

- score_single : cosine similarity between two vectors
- score_maxsim : late-interaction MaxSim (sum over query rows of the best unit row)
- doc_scores   : document score = max over the document's units
- Bm25Index    : Okapi BM25 over chunks, document score = max over chunks

Rankings sort by score descending, ties by doc_id ascending.

BM25 is computed here on scipy.sparse term matrices rather than with
rank_bm25: its BM25Okapi uses a different idf, while this index needs
idf = ln((N - n + 0.5) / (n + 0.5) + 1), which is never negative.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from scipy import sparse

from src.config import BM25_B, BM25_K1, CHUNK_OVERLAP, CHUNK_SIZE
from src.embedding import UnitEmbedding, VectorMode
from src.errors import DimensionMismatch, ModeMismatch
from src.index_store import Index
from src.latex_ingest import IngestedDocument
from src.representations import Chunk, chunk_text
from src.utils import Diagnostics, require

log = logging.getLogger(__name__)

QueryVectors = Union[UnitEmbedding, np.ndarray]


@dataclass(frozen=True)
class ScoredDoc:
    doc_id: str
    score: float
    best_unit_id: str


def rank(scored: Iterable[ScoredDoc], k: Optional[int] = None) -> List[ScoredDoc]:
    ordered = sorted(scored, key=lambda s: (-s.score, s.doc_id))
    return ordered if k is None else ordered[:k]


# ============================
# UNIT SCORERS
# ============================

def score_single(query_vec, unit_vec, diagnostics: Optional[Diagnostics] = None) -> float:
    """Cosine similarity; a zero vector on either side scores 0."""
    q = np.asarray(query_vec, dtype=np.float64).ravel()
    u = np.asarray(unit_vec, dtype=np.float64).ravel()
    if q.shape != u.shape:
        raise DimensionMismatch(f"query dimension {q.size} != unit dimension {u.size}")
    qn, un = np.linalg.norm(q), np.linalg.norm(u)
    if qn == 0 or un == 0:
        if diagnostics is not None:
            diagnostics.add("zero_vector", "cosine against a zero vector")
        return 0.0
    return float(q @ u / (qn * un))


def score_maxsim(query_vecs, unit_vecs) -> float:
    q = np.atleast_2d(np.asarray(query_vecs, dtype=np.float64))
    d = np.atleast_2d(np.asarray(unit_vecs, dtype=np.float64))
    if q.shape[1] != d.shape[1]:
        raise DimensionMismatch(f"query dimension {q.shape[1]} != unit dimension {d.shape[1]}")
    if d.shape[0] == 0:
        return float("-inf")
    if q.shape[0] == 0:
        return 0.0
    return float((q @ d.T).max(axis=1).sum())


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return np.divide(matrix, norms, out=np.zeros_like(matrix), where=norms > 0)


def _query_matrix(query: QueryVectors, index: Index, query_mode: Optional[VectorMode]) -> np.ndarray:
    matrix = query.vectors if isinstance(query, UnitEmbedding) else query
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    index_mode = index.provider.vector_mode

    if query_mode is not None and VectorMode(query_mode) is not index_mode:
        raise ModeMismatch(f"{VectorMode(query_mode).value} query against {index_mode.value} index")
    if index_mode is VectorMode.SINGLE and matrix.shape[0] != 1:
        raise ModeMismatch(f"multi-vector query ({matrix.shape[0]} rows) against single-vector index")
    if matrix.shape[1] != index.dimension:
        raise DimensionMismatch(f"query dimension {matrix.shape[1]} != index dimension {index.dimension}")
    return matrix


def unit_scores(
    query: QueryVectors,
    index: Index,
    query_mode: Optional[VectorMode] = None,
    diagnostics: Optional[Diagnostics] = None,
) -> np.ndarray:
    """
    Score of every index entry, in entry order. Single-vector indexes use
    cosine; multi-vector indexes use MaxSim on the raw rows. Entries with
    no rows score -inf.
    """
    q = _query_matrix(query, index, query_mode)
    matrix, offsets = index.stacked
    rows = matrix.astype(np.float64)

    if index.provider.vector_mode is VectorMode.SINGLE:
        if not np.any(q):
            if diagnostics is not None:
                diagnostics.add("zero_vector", "zero query vector")
            log.debug("Zero query vector, all cosine scores are 0")
        q = _normalize_rows(q)
        rows = _normalize_rows(rows)

    scores = np.full(len(index.entries), -np.inf)
    sizes = np.diff(offsets)
    filled = np.flatnonzero(sizes > 0)
    if filled.size == 0:
        return scores
    if q.shape[0] == 0:
        scores[filled] = 0.0
        return scores

    sim = q @ rows.T
    # reduceat over the starts of non-empty entries segments exactly their rows
    best = np.maximum.reduceat(sim, offsets[filled], axis=1)
    scores[filled] = best.sum(axis=0)
    return scores


def doc_scores(
    query: QueryVectors,
    index: Index,
    k: Optional[int] = None,
    query_mode: Optional[VectorMode] = None,
    diagnostics: Optional[Diagnostics] = None,
) -> List[ScoredDoc]:
    """Per-document max over unit scores; best_unit_id is the first unit reaching it."""
    require(k is None or k >= 1, "k must be >= 1")
    scores = unit_scores(query, index, query_mode, diagnostics)

    results = []
    for doc_id, positions in index.groups().items():
        if not positions:
            results.append(ScoredDoc(doc_id, float("-inf"), ""))
            continue
        local = scores[positions]
        best = int(np.argmax(local))
        results.append(ScoredDoc(doc_id, float(local[best]), index.entries[positions[best]].unit_id))
    return rank(results, k)


def search_many(
    queries: Sequence[QueryVectors],
    index: Index,
    k: Optional[int] = None,
    workers: int = 1,
) -> List[List[ScoredDoc]]:
    require(workers >= 1, "workers must be >= 1")
    # warm the shared stacked matrix once before fanning out
    index.stacked
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda q: doc_scores(q, index, k), queries))


# ============================
# BM25
# ============================

@dataclass(frozen=True)
class Bm25Params:
    k1: float = BM25_K1
    b: float = BM25_B

    def __post_init__(self):
        require(self.k1 >= 0, "k1 must be >= 0")
        require(0 <= self.b <= 1, "b must lie in [0, 1]")


def bm25_tokens(text: str) -> List[str]:
    return text.lower().split()


class Bm25Index:
    """
    Term-frequency matrix (chunks x vocabulary) in CSR form.

    idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)) with N counted in chunks.
    Each occurrence of a query token contributes its term score once.
    """

    def __init__(
        self,
        chunks: Sequence[Chunk],
        params: Optional[Bm25Params] = None,
        doc_ids: Optional[Iterable[str]] = None,
    ):
        self.params = params or Bm25Params()
        self.chunks = list(chunks)
        self.doc_ids = sorted(set(doc_ids or ()) | {c.doc_id for c in self.chunks})

        self.vocabulary: Dict[str, int] = {}
        rows, cols = [], []
        lengths = np.zeros(len(self.chunks), dtype=np.float64)
        for r, chunk in enumerate(self.chunks):
            tokens = bm25_tokens(chunk.text)
            lengths[r] = len(tokens)
            for token in tokens:
                rows.append(r)
                cols.append(self.vocabulary.setdefault(token, len(self.vocabulary)))

        shape = (len(self.chunks), len(self.vocabulary))
        tf = sparse.csr_matrix(
            (np.ones(len(rows)), (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))), shape=shape, dtype=np.float64)
        tf.sum_duplicates()
        self.tf = tf.tocsc()

        n = len(self.chunks)
        df = np.diff(self.tf.indptr).astype(np.float64)
        self.idf = np.log1p((n - df + 0.5) / (df + 0.5))
        avglen = lengths.mean() if n else 0.0
        self.length_norm = (
            1 - self.params.b + self.params.b * lengths / avglen if avglen > 0 else np.ones(n)
        )
        log.debug("BM25 index: %d chunks, %d terms, %d docs", n, len(self.vocabulary), len(self.doc_ids))

    @classmethod
    def from_documents(
        cls,
        docs: Sequence[IngestedDocument],
        chunk_size: int = CHUNK_SIZE,
        overlap: int = CHUNK_OVERLAP,
        params: Optional[Bm25Params] = None,
    ) -> "Bm25Index":
        chunks: List[Chunk] = []
        for doc in docs:
            chunks.extend(chunk_text(doc.normalized, chunk_size, overlap, doc.doc_id))
        return cls(chunks, params, [d.doc_id for d in docs])

    def chunk_scores(self, query: str) -> np.ndarray:
        k1 = self.params.k1
        scores = np.zeros(len(self.chunks), dtype=np.float64)
        for token in bm25_tokens(query):
            col = self.vocabulary.get(token)
            if col is None:
                continue
            start, end = self.tf.indptr[col], self.tf.indptr[col + 1]
            rows = self.tf.indices[start:end]
            tf = self.tf.data[start:end]
            scores[rows] += self.idf[col] * tf * (k1 + 1) / (tf + k1 * self.length_norm[rows])
        return scores

    def search(self, query: str, k: Optional[int] = None) -> List[ScoredDoc]:
        require(k is None or k >= 1, "k must be >= 1")
        if not bm25_tokens(query):
            return []
        scores = self.chunk_scores(query)

        best: Dict[str, ScoredDoc] = {d: ScoredDoc(d, 0.0, "") for d in self.doc_ids}
        seen = set()
        for chunk, score in zip(self.chunks, scores):
            current = best[chunk.doc_id]
            if chunk.doc_id not in seen or score > current.score:
                best[chunk.doc_id] = ScoredDoc(chunk.doc_id, float(score), chunk.unit_id)
                seen.add(chunk.doc_id)
        return rank(best.values(), k)

    def gold_rank(self, query: str, gold_doc_id: str) -> Optional[int]:
        """
        1-based rank of gold_doc_id in the full ranking. None for an empty
        query or when the gold document shares no term with it, so a zero
        score never wins a doc_id tie.
        """
        for position, scored in enumerate(self.search(query), start=1):
            if scored.doc_id == gold_doc_id:
                return position if scored.score > 0 else None
        return None


def bm25_search(
    query: str,
    chunks: Sequence[Chunk],
    k: Optional[int] = None,
    params: Optional[Bm25Params] = None,
    doc_ids: Optional[Iterable[str]] = None,
) -> List[ScoredDoc]:
    return Bm25Index(chunks, params, doc_ids).search(query, k)

