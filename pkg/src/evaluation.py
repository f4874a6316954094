"""
Retrieval metrics and analyses.

- ndcg_at_k / recall_at_k with a single gold document per query
- evaluate: embed queries, rank documents, aggregate per evidence type
- scaling windows: nested token windows around a sampled query span
- figure-text diagnostics: is the retrieved chunk near, referencing or
  paraphrasing a figure
- storage sweep: index size against nDCG over build settings
"""

import copy
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
from sklearn.feature_extraction.text import ENGLISH_STOP_WORDS

from src.config import (
    CHUNK_OVERLAP,
    CHUNK_SIZE,
    NDCG_K,
    NEAR_FIGURE_WINDOW,
    OVERLAP_THRESHOLD,
    PRECISION,
    SCALING_QUERY_LEN,
    SCALING_SIZES,
    SEED,
)
from src.embedding import EmbeddingProvider, VectorMode, embed_query
from src.errors import GoldMissing, ModeMismatch, TooShort, ToolkitError
from src.index_store import Index, index_corpus, index_size_bytes
from src.latex_ingest import FigureBlock, IngestedDocument
from src.query_pipeline import EvidenceType, Query
from src.representations import (
    Chunk,
    EmbeddingUnit,
    RepresentationKind,
    UnitKind,
    build_representation,
    chunk_for_anchor,
    chunk_text,
    page_unit_id,
    text_unit_id,
)
from src.retrieval import ScoredDoc, doc_scores, search_many
from src.utils import Diagnostics, json_dumps_safe, require, whitespace_tokens

log = logging.getLogger(__name__)


# ============================
# METRICS
# ============================

def gold_rank(ranked: Sequence[str], gold: str) -> Optional[int]:
    try:
        return list(ranked).index(gold) + 1
    except ValueError:
        return None


def ndcg_at_k(ranked: Sequence[str], gold: str, k: int = NDCG_K) -> float:
    """Single relevant document: 1 / log2(r + 1) when the gold rank r <= k, else 0."""
    require(k >= 1, "k must be >= 1")
    require(len(set(ranked)) == len(ranked), "ranked ids must be unique")
    r = gold_rank(ranked[:k], gold)
    return 0.0 if r is None else 1.0 / math.log2(r + 1)


def recall_at_k(ranked: Sequence[str], gold: str, k: int = NDCG_K) -> float:
    return 1.0 if gold in list(ranked[:k]) else 0.0


REPORT_COLUMNS = ["query_id", "evidence_type", "gold_doc_id", "rank", "ndcg", "recall"]


@dataclass
class EvalReport:
    rows: pd.DataFrame
    k: int
    index_size_bytes: int
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def mean_ndcg(self) -> float:
        return float(self.rows["ndcg"].mean()) if len(self.rows) else 0.0

    @property
    def mean_recall(self) -> float:
        return float(self.rows["recall"].mean()) if len(self.rows) else 0.0

    def per_type(self) -> Dict[str, float]:
        if not len(self.rows):
            return {}
        means = self.rows.groupby("evidence_type")["ndcg"].mean()
        return {str(t): float(v) for t, v in sorted(means.items())}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "queries": len(self.rows),
            f"ndcg@{self.k}": self.mean_ndcg,
            f"recall@{self.k}": self.mean_recall,
            f"ndcg@{self.k}_by_type": self.per_type(),
            "index_size_bytes": self.index_size_bytes,
            "config": self.config,
            "per_query": [
                {
                    "query_id": r.query_id,
                    "evidence_type": r.evidence_type,
                    "gold_doc_id": r.gold_doc_id,
                    "rank": int(r.rank),
                    "ndcg": float(r.ndcg),
                    "recall": float(r.recall),
                }
                for r in self.rows.itertuples(index=False)
            ],
        }

    def to_json(self) -> str:
        return json_dumps_safe(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self) -> str:
        summary = pd.DataFrame(
            [{"evidence_type": t, f"ndcg@{self.k}": v} for t, v in self.per_type().items()]
            + [{"evidence_type": "all", f"ndcg@{self.k}": self.mean_ndcg}]
        )
        lines = [
            summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"),
            f"recall@{self.k}: {self.mean_recall:.4f}",
            f"index_size_bytes: {self.index_size_bytes}",
        ]
        return "\n".join(lines)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.rows.to_csv(path, index=False)
        return path


def evaluate(
    queries: Sequence[Query],
    index: Index,
    provider: EmbeddingProvider,
    k: int = NDCG_K,
    workers: int = 1,
    config: Optional[Dict[str, Any]] = None,
) -> EvalReport:
    """Embed each query, rank every indexed document, score the gold rank."""
    require(k >= 1, "k must be >= 1")
    if VectorMode(provider.descriptor.vector_mode) is not index.provider.vector_mode:
        raise ModeMismatch(
            f"provider {provider.descriptor.vector_mode.value} vs index {index.provider.vector_mode.value}"
        )
    known = set(index.doc_ids)
    for query in queries:
        if query.gold_doc_id not in known:
            raise GoldMissing(query.query_id, query.gold_doc_id)

    embedded = [embed_query(q.text, provider, q.query_id) for q in queries]
    rankings = search_many(embedded, index, None, workers)

    rows = []
    for query, ranking in zip(queries, rankings):
        ranked = [s.doc_id for s in ranking]
        rows.append({
            "query_id": query.query_id,
            "evidence_type": query.evidence_type.value,
            "gold_doc_id": query.gold_doc_id,
            "rank": gold_rank(ranked, query.gold_doc_id),
            "ndcg": ndcg_at_k(ranked, query.gold_doc_id, k),
            "recall": recall_at_k(ranked, query.gold_doc_id, k),
        })

    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    report = EvalReport(frame, k, index_size_bytes(index), dict(config or {}))
    log.info("Evaluated %d queries: ndcg@%d = %.4f", len(frame), k, report.mean_ndcg)
    return report


# ============================
# SCALING WINDOWS
# ============================

@dataclass(frozen=True)
class ScalingWindowSet:
    doc_id: str
    tokens: Tuple[str, ...]
    windows: Dict[int, Tuple[int, int]]
    query_span: Tuple[int, int]

    @property
    def base_size(self) -> int:
        return min(self.windows)

    @property
    def base_query(self) -> str:
        start, end = self.query_span
        return " ".join(self.tokens[start:end])

    def window_text(self, size: int) -> str:
        start, end = self.windows[size]
        return " ".join(self.tokens[start:end])


def build_scaling_windows(
    flat_text: str,
    query_len: int = SCALING_QUERY_LEN,
    sizes: Sequence[int] = SCALING_SIZES,
    seed: int = SEED,
    doc_id: str = "",
) -> ScalingWindowSet:
    """
    Place a base window at a seeded position and grow it to each larger
    size: forward first, then backward once the text runs out. The query is
    a seeded span of the base window.
    """
    sizes = sorted(sizes)
    require(bool(sizes) and sizes[0] >= 1, "sizes must be positive")
    require(1 <= query_len <= sizes[0], "query_len must fit in the base window")

    tokens = tuple(t for t, _, _ in whitespace_tokens(flat_text))
    if len(tokens) < sizes[-1]:
        raise TooShort(f"{doc_id or 'document'}: {len(tokens)} tokens, need {sizes[-1]}")

    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, len(tokens) - sizes[0] + 1))
    query_start = start + int(rng.integers(0, sizes[0] - query_len + 1))

    end = start + sizes[0]
    windows = {sizes[0]: (start, end)}
    for size in sizes[1:]:
        need = size - (end - start)
        forward = min(need, len(tokens) - end)
        end += forward
        start -= need - forward
        windows[size] = (start, end)

    return ScalingWindowSet(doc_id, tokens, windows, (query_start, query_start + query_len))


_LATEX_ESCAPES = {
    "\\": r"\textbackslash{}",
    "{": r"\{",
    "}": r"\}",
    "$": r"\$",
    "&": r"\&",
    "#": r"\#",
    "^": r"\^{}",
    "_": r"\_",
    "%": r"\%",
    "~": r"\textasciitilde{}",
}


def scaling_snippet(text: str) -> str:
    """Minimal compilable document typesetting `text` verbatim as prose."""
    body = "".join(_LATEX_ESCAPES.get(ch, ch) for ch in text)
    return (
        "\\documentclass[10pt]{article}\n"
        "\\usepackage[margin=1in]{geometry}\n"
        "\\pagestyle{empty}\n"
        "\\begin{document}\n"
        f"{body}\n"
        "\\end{document}\n"
    )


def _mean_ndcg(
    units_by_doc: Dict[str, List[EmbeddingUnit]],
    queries: Sequence[Query],
    provider: EmbeddingProvider,
    representation: RepresentationKind,
    k: int,
) -> float:
    index = index_corpus(units_by_doc, representation, provider)
    scores = [
        ndcg_at_k([s.doc_id for s in doc_scores(embed_query(q.text, provider), index)], q.gold_doc_id, k)
        for q in queries
    ]
    return float(np.mean(scores)) if scores else 0.0


def scaling_study(
    window_sets: Sequence[ScalingWindowSet],
    provider: EmbeddingProvider,
    k: int = NDCG_K,
    page_images: Optional[Mapping[Tuple[str, int], bytes]] = None,
    page_provider: Optional[EmbeddingProvider] = None,
) -> pd.DataFrame:
    """
    nDCG@k per window size. Each window is one document; its query is the
    shared base-window span. Page rows appear when rendered pages
    (keyed by (doc_id, size)) and an image provider are given.
    """
    require(bool(window_sets), "no window sets")
    queries = [
        Query(f"{ws.doc_id}:scaling", ws.base_query, EvidenceType.TEXT, ws.doc_id)
        for ws in window_sets
    ]
    sizes = sorted(window_sets[0].windows)

    rows = []
    for size in sizes:
        text_units = {
            ws.doc_id: [EmbeddingUnit(ws.doc_id, text_unit_id(ws.doc_id, 0), UnitKind.TEXT_CHUNK,
                                      text=ws.window_text(size))]
            for ws in window_sets
        }
        rows.append({"size": size, "representation": RepresentationKind.TEXT_ONLY.value,
                     "ndcg": _mean_ndcg(text_units, queries, provider, RepresentationKind.TEXT_ONLY, k)})

        if page_images and page_provider is not None:
            for ws in window_sets:
                if (ws.doc_id, size) not in page_images:
                    raise ToolkitError(f"{ws.doc_id}: no rendered page for window {size}")
            page_units = {
                ws.doc_id: [EmbeddingUnit(ws.doc_id, page_unit_id(ws.doc_id, 1), UnitKind.PAGE_IMAGE,
                                          images=(page_images[(ws.doc_id, size)],))]
                for ws in window_sets
            }
            rows.append({"size": size, "representation": RepresentationKind.DOC_AS_IMAGE.value,
                         "ndcg": _mean_ndcg(page_units, queries, page_provider, RepresentationKind.DOC_AS_IMAGE, k)})

    return pd.DataFrame(rows, columns=["size", "representation", "ndcg"])


def plot_scaling(frame: pd.DataFrame, path, k: int = NDCG_K) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for representation, group in frame.groupby("representation", sort=True):
        ax.plot(group["size"], group["ndcg"], marker="o", label=representation)
    ax.set_xscale("log")
    ax.set_xlabel("window size (tokens)")
    ax.set_ylabel(f"nDCG@{k}")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


# ============================
# FIGURE-TEXT DIAGNOSTICS
# ============================

FIGURE_REFERENCE_PATTERNS = (
    r"\bFig\.",
    r"\bFigures?\s*~?\s*\d+",
    r"\\ref\{fig",
    r"\bFigures?~",
)

_WORD = re.compile(r"[a-z][a-z0-9\-]*")


def content_words(text: str) -> set:
    return {w for w in _WORD.findall(text.lower()) if len(w) > 1 and w not in ENGLISH_STOP_WORDS}


@dataclass(frozen=True)
class FigureTextDiagnostics:
    near_figure: bool
    references_figure: bool
    contains_caption_info: bool
    overlap_ratio: Optional[float]
    chunk_index: int
    figure_chunk_index: Optional[int]


def figure_text_diagnostics(
    top_chunk: Chunk,
    chunks: Sequence[Chunk],
    figure: Optional[FigureBlock],
    window: int = NEAR_FIGURE_WINDOW,
    overlap_threshold: float = OVERLAP_THRESHOLD,
    patterns: Sequence[str] = FIGURE_REFERENCE_PATTERNS,
    caption: Optional[str] = None,
    diagnostics: Optional[Diagnostics] = None,
) -> FigureTextDiagnostics:
    """
    Three independent flags for a retrieved chunk against a figure:
    within `window` chunks of the figure anchor, matching a figure-reference
    pattern, and sharing at least `overlap_threshold` of the caption's
    content words. `caption` overrides the figure's own caption.
    """
    require(0 <= overlap_threshold <= 1, "overlap_threshold must lie in [0, 1]")
    figure_index = chunk_for_anchor(list(chunks), figure.anchor) if figure is not None and chunks else None
    near = figure_index is not None and abs(top_chunk.index - figure_index) <= window

    references = any(re.search(p, top_chunk.text, re.IGNORECASE) for p in patterns)

    caption_text = caption if caption is not None else (figure.caption if figure is not None else "")
    caption_words = content_words(caption_text)
    if not caption_words:
        if diagnostics is not None:
            diagnostics.add("empty_caption", top_chunk.unit_id)
        overlap = None
    else:
        overlap = len(caption_words & content_words(top_chunk.text)) / len(caption_words)

    return FigureTextDiagnostics(
        near_figure=near,
        references_figure=references,
        contains_caption_info=overlap is not None and overlap >= overlap_threshold,
        overlap_ratio=overlap,
        chunk_index=top_chunk.index,
        figure_chunk_index=figure_index,
    )


def _nearest_figure(chunks: Sequence[Chunk], figures: Sequence[FigureBlock], chunk_index: int) -> Optional[FigureBlock]:
    if not figures or not chunks:
        return None
    return min(figures, key=lambda f: abs(chunk_for_anchor(list(chunks), f.anchor) - chunk_index))


def _evidence_figure(query: Query, doc: IngestedDocument) -> Optional[FigureBlock]:
    ref = str(query.audit.get("evidence_ref", ""))
    if ref.startswith("figure-"):
        position = int(ref.split("-", 1)[1])
        if position < len(doc.structure.figures):
            return doc.structure.figures[position]
    return None


def figure_text_report(
    queries: Sequence[Query],
    rankings: Mapping[str, Sequence[ScoredDoc]],
    docs: Mapping[str, IngestedDocument],
    chunk_size: int,
    overlap: int = 0,
    window: int = NEAR_FIGURE_WINDOW,
    overlap_threshold: float = OVERLAP_THRESHOLD,
) -> pd.DataFrame:
    """
    Diagnostics for figure queries on a text index: the top chunk of the gold
    document ("correct") against the top chunk of the best non-gold document
    ("incorrect"). The gold figure's caption is the reference for both; the
    incorrect side is measured against its own nearest figure. Returns the
    percentage of rows with each flag per group.
    """
    chunk_cache: Dict[str, List[Chunk]] = {}

    def chunks_of(doc_id: str) -> List[Chunk]:
        if doc_id not in chunk_cache:
            chunk_cache[doc_id] = chunk_text(docs[doc_id].normalized, chunk_size, overlap, doc_id)
        return chunk_cache[doc_id]

    def top_chunk(scored: ScoredDoc) -> Optional[Chunk]:
        for chunk in chunks_of(scored.doc_id):
            if chunk.unit_id == scored.best_unit_id:
                return chunk
        return None

    records = []
    for query in queries:
        if query.evidence_type is not EvidenceType.FIGURE or query.query_id not in rankings:
            continue
        gold_doc = docs[query.gold_doc_id]
        figure = _evidence_figure(query, gold_doc)
        if figure is None:
            continue
        ranking = rankings[query.query_id]

        gold = next((s for s in ranking if s.doc_id == query.gold_doc_id), None)
        other = next((s for s in ranking if s.doc_id != query.gold_doc_id and s.doc_id in docs), None)

        for group, scored in (("correct", gold), ("incorrect", other)):
            chunk = top_chunk(scored) if scored is not None else None
            if chunk is None:
                continue
            if group == "correct":
                target = figure
            else:
                target = _nearest_figure(chunks_of(scored.doc_id), docs[scored.doc_id].structure.figures, chunk.index)
            diag = figure_text_diagnostics(
                chunk, chunks_of(scored.doc_id), target, window, overlap_threshold, caption=figure.caption
            )
            records.append({
                "group": group,
                "query_id": query.query_id,
                "near_figure": diag.near_figure,
                "references_figure": diag.references_figure,
                "contains_caption_info": diag.contains_caption_info,
            })

    frame = pd.DataFrame(records, columns=["group", "query_id", "near_figure", "references_figure",
                                           "contains_caption_info"])
    if frame.empty:
        return pd.DataFrame(columns=["group", "n", "near_figure_pct", "references_figure_pct",
                                     "contains_caption_info_pct"])
    summary = frame.groupby("group").agg(
        n=("query_id", "count"),
        near_figure_pct=("near_figure", "mean"),
        references_figure_pct=("references_figure", "mean"),
        contains_caption_info_pct=("contains_caption_info", "mean"),
    )
    for column in ("near_figure_pct", "references_figure_pct", "contains_caption_info_pct"):
        summary[column] = summary[column] * 100.0
    return summary.reset_index()


# ============================
# STORAGE SWEEP
# ============================

def storage_sweep(
    docs: Sequence[IngestedDocument],
    queries: Sequence[Query],
    provider: EmbeddingProvider,
    representation: RepresentationKind,
    settings: Sequence[Dict[str, Any]],
    k: int = NDCG_K,
    captions: Optional[Mapping[str, Mapping[str, str]]] = None,
    page_images: Optional[Mapping[str, Sequence[bytes]]] = None,
) -> pd.DataFrame:
    """
    Build one index per setting (chunk_size, overlap, max_pixels, precision)
    and report its size next to nDCG@k, smallest index first. Unset keys
    fall back to the configured defaults; `page_images` feeds doc-as-image.
    """
    rows = []
    for setting in settings:
        chunk_size = setting.get("chunk_size", CHUNK_SIZE)
        overlap = setting.get("overlap", CHUNK_OVERLAP)
        precision = setting.get("precision", PRECISION)
        run_provider = provider
        if "max_pixels" in setting:
            run_provider = copy.copy(provider)
            run_provider.descriptor = replace(provider.descriptor, max_pixels=setting["max_pixels"])

        units = {
            doc.doc_id: build_representation(
                representation, doc, chunk_size, overlap,
                (captions or {}).get(doc.doc_id, {}), (page_images or {}).get(doc.doc_id),
            )
            for doc in docs
        }
        index = index_corpus(
            units, representation, run_provider,
            {"chunk_size": chunk_size, "overlap": overlap, "precision": precision},
        )
        report = evaluate(queries, index, run_provider, k)
        rows.append({
            "chunk_size": chunk_size,
            "overlap": overlap,
            "max_pixels": setting.get("max_pixels"),
            "precision": precision,
            "index_size_bytes": index_size_bytes(index),
            f"ndcg@{k}": report.mean_ndcg,
        })

    frame = pd.DataFrame(rows)
    return frame.sort_values("index_size_bytes", kind="stable").reset_index(drop=True)
