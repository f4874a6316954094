"""
Command orchestration: one cmd_* function per CLI subcommand.

Each command validates its inputs, runs the library operations, writes its
artifacts under the output directory and records itself in the run registry.
"""

import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import pandas as pd
from tqdm import tqdm

from src import db
from src.config import (
    ASSET_CONVERT_TEMPLATE,
    ASSET_CONVERTER,
    DATA_DIR,
    PAGE_RENDER_TEMPLATE,
    PROVIDER_TOKEN,
    SCALING_QUERY_LEN,
    SCALING_SIZES,
    RunConfig,
)
from src.embedding import (
    EmbeddingProvider,
    HashEmbeddingProvider,
    Modality,
    ProviderDescriptor,
    RemoteEmbeddingProvider,
    embed_query,
)
from src.errors import ConfigError, EmptyPages, ToolkitError, TooShort
from src.evaluation import (
    EvalReport,
    build_scaling_windows,
    evaluate,
    figure_text_report,
    plot_scaling,
    scaling_snippet,
    scaling_study,
)
from src.index_store import Index, index_corpus, index_size_bytes, load_index, read_header, save_index
from src.latex_ingest import ingest_document, load_ingested_corpus, load_project, save_ingested
from src.query_pipeline import (
    EvidenceType,
    LlmService,
    PipelineResult,
    Query,
    difficulty_filter,
    export_review,
    read_queries,
    run_query_pipeline,
    write_queries,
)
from src.representations import (
    RepresentationKind,
    build_representation,
    load_captions,
    load_page_images,
    render_pages,
)
from src.retrieval import Bm25Index, Bm25Params, ScoredDoc, doc_scores, search_many
from src.service_client import ServiceClient
from src.utils import Diagnostics, generate_run_id, json_dumps_safe, require

log = logging.getLogger(__name__)

ARCHIVE_SUFFIXES = (".tar.gz", ".tgz", ".tar", ".gz")


# ============================
# HELPERS
# ============================

@contextmanager
def tracked(command: str, config: RunConfig) -> Iterator[Dict[str, Any]]:
    """Register the run; the yielded dict becomes the stored summary."""
    run_id = generate_run_id(command.upper().replace("-", "_"))
    summary: Dict[str, Any] = {}
    db.start_run(run_id, command, config.to_dict())
    try:
        yield summary
    except Exception as exc:
        db.finish_run(run_id, "failed", {"error": str(exc), **summary})
        raise
    db.finish_run(run_id, "ok", summary)


def write_text_atomic(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)
    return path


def write_json(path, obj: Any) -> Path:
    return write_text_atomic(path, json_dumps_safe(obj, sort_keys=True, indent=2) + "\n")


def write_frame(path, frame: pd.DataFrame) -> Path:
    return write_text_atomic(path, frame.to_csv(index=False))


def output_dir(config: RunConfig, default: str) -> Path:
    return Path(config.out) if config.out else DATA_DIR / default


def needs(config: RunConfig, *names: str):
    for name in names:
        require(getattr(config, name), f"--{name.replace('_', '-')} is required for this command", ConfigError)


def make_client(config: RunConfig, endpoint: Optional[str]) -> ServiceClient:
    return ServiceClient(
        endpoint,
        token=PROVIDER_TOKEN,
        fixture_mode=config.fixtures,
        fixture_dir=config.fixture_dir,
    )


def make_provider(config: RunConfig, descriptor: Optional[ProviderDescriptor] = None) -> EmbeddingProvider:
    """Provider from the run config, or matching an existing index's descriptor."""
    if config.provider == "hash":
        d = descriptor
        return HashEmbeddingProvider(
            dimension=d.dimension if d else config.dimension,
            vector_mode=d.vector_mode.value if d else config.provider_mode,
            modality=d.modality.value if d else config.provider_modality,
            name=d.name if d else config.provider_name,
            max_pixels=d.max_pixels if d else config.max_pixels,
            patch_size=(d.patch_size if d else config.patch_size) or 14,
        )

    if descriptor is None:
        descriptor = ProviderDescriptor(
            name=config.provider_name,
            modality=config.provider_modality,
            vector_mode=config.provider_mode,
            dimension=config.dimension,
            normalizes=True,
            max_pixels=config.max_pixels,
            patch_size=config.patch_size,
        )
    return RemoteEmbeddingProvider(descriptor, make_client(config, config.provider_endpoint))


def make_llm(config: RunConfig) -> LlmService:
    return LlmService(make_client(config, config.llm_endpoint), model=config.extra.get("llm_model"))


def corpus_entries(corpus_dir) -> List[Tuple[str, Path]]:
    """(doc_id, path) for every project directory or source archive, sorted."""
    corpus_dir = Path(corpus_dir)
    require(corpus_dir.is_dir(), f"Corpus directory not found: {corpus_dir}", ConfigError)
    entries = []
    for path in sorted(corpus_dir.iterdir()):
        name = path.name
        if path.is_dir():
            entries.append((name, path))
            continue
        for suffix in ARCHIVE_SUFFIXES:
            if name.endswith(suffix):
                entries.append((name[: -len(suffix)], path))
                break
    return entries


# ============================
# INGEST
# ============================

def cmd_ingest(config: RunConfig) -> Dict[str, Any]:
    needs(config, "corpus")
    out = output_dir(config, "ingested")

    with tracked("ingest", config) as summary:
        ingested, failures = [], {}
        diagnostics = Diagnostics()
        for doc_id, path in tqdm(corpus_entries(config.corpus), desc="ingest", unit="doc"):
            try:
                project = load_project(path)
                doc = ingest_document(
                    doc_id, project, lenient=config.lenient,
                    converter=ASSET_CONVERTER, template=ASSET_CONVERT_TEMPLATE,
                )
            except ToolkitError as exc:
                log.warning("%s: ingestion failed: %s", doc_id, exc)
                failures[doc_id] = f"{type(exc).__name__}: {exc}"
                continue
            save_ingested(doc, out)
            diagnostics.merge(doc.diagnostics)
            ingested.append(doc_id)

        report = {
            "ingested": ingested,
            "failures": failures,
            "diagnostics": dict(sorted(diagnostics.counts.items())),
            "config": config.to_dict(),
        }
        write_json(out / "ingest_report.json", report)
        summary.update({"ingested": len(ingested), "failed": len(failures)})

    print(f"Ingested {len(ingested)} document(s), {len(failures)} failure(s) -> {out}")
    return report


# ============================
# INDEX
# ============================

def corpus_units(config: RunConfig, docs) -> Tuple[Dict[str, list], Dict[str, str]]:
    kind = RepresentationKind(config.representation)
    captions = load_captions(config.captions) if config.captions else {}
    if kind is RepresentationKind.DOC_AS_IMAGE:
        needs(config, "pages_dir")

    units, failures = {}, {}
    for doc in docs:
        pages = None
        if kind is RepresentationKind.DOC_AS_IMAGE:
            page_dir = Path(config.pages_dir) / doc.doc_id
            if not page_dir.is_dir() and PAGE_RENDER_TEMPLATE:
                try:
                    render_pages(Path(config.corpus) / doc.doc_id, page_dir)
                except ToolkitError as exc:
                    log.warning("%s: %s", doc.doc_id, exc)
            pages = load_page_images(page_dir) if page_dir.is_dir() else []
        try:
            units[doc.doc_id] = build_representation(
                kind, doc, config.chunk_size, config.overlap, captions.get(doc.doc_id, {}), pages
            )
        except EmptyPages as exc:
            log.warning("%s", exc)
            failures[doc.doc_id] = str(exc)
            units[doc.doc_id] = []
    return units, failures


def cmd_index(config: RunConfig) -> Dict[str, Any]:
    needs(config, "corpus", "index")

    with tracked("index", config) as summary:
        docs = load_ingested_corpus(config.corpus)
        require(bool(docs), f"No ingested documents under {config.corpus}", ConfigError)
        units, failures = corpus_units(config, docs)
        provider = make_provider(config)

        embed_failures: List[Tuple[str, str]] = []
        index = index_corpus(
            units,
            RepresentationKind(config.representation),
            provider,
            {"chunk_size": config.chunk_size, "overlap": config.overlap, "precision": config.precision_bytes},
            workers=config.workers,
            failures=embed_failures,
        )
        if not index.entries:
            log.warning("Index is empty: no %s units in the corpus", config.representation)

        path = save_index(index, config.index)
        size = index_size_bytes(index)
        result = {
            "index": str(path),
            "entries": len(index.entries),
            "documents": len(index.doc_ids),
            "empty_docs": index.empty_docs,
            "index_size_bytes": size,
            "build_failures": failures,
            "embed_failures": dict(embed_failures),
        }
        summary.update({k: result[k] for k in ("entries", "documents", "index_size_bytes")})

    print(f"index_size_bytes: {size}")
    return result


# ============================
# SEARCH & EVAL
# ============================

def open_index(config: RunConfig) -> Index:
    needs(config, "index")
    require(Path(config.index).is_file(), f"Index file not found: {config.index}", ConfigError)
    return load_index(config.index)


def cmd_search(config: RunConfig, query: str) -> List[ScoredDoc]:
    index = open_index(config)
    provider = make_provider(config, index.provider)
    results = doc_scores(embed_query(query, provider), index, config.k)
    for position, scored in enumerate(results, start=1):
        print(f"{position:>3}  {scored.score:.6f}  {scored.doc_id}  {scored.best_unit_id}")
    return results


def cmd_eval(config: RunConfig) -> EvalReport:
    needs(config, "queries")
    index = open_index(config)
    queries = read_queries(config.queries)
    out = output_dir(config, "eval")

    with tracked("eval", config) as summary:
        provider = make_provider(config, index.provider)
        report = evaluate(queries, index, provider, config.k, config.workers, config.to_dict())
        header = read_header(config.index)
        if header.payload_bytes != report.index_size_bytes:
            log.warning("Payload length %d differs from computed size %d",
                        header.payload_bytes, report.index_size_bytes)

        write_text_atomic(out / "report.json", report.to_json() + "\n")
        write_text_atomic(out / "report.txt", report.to_table() + "\n")
        write_frame(out / "per_query.csv", report.rows)
        summary.update({"queries": len(queries), "ndcg": report.mean_ndcg})

    print(report.to_table())
    return report


# ============================
# QUERY PIPELINE
# ============================

def bm25_for(config: RunConfig, docs) -> Bm25Index:
    return Bm25Index.from_documents(
        docs, config.chunk_size, config.overlap, Bm25Params(config.bm25_k1, config.bm25_b)
    )


def cmd_filter(config: RunConfig) -> Tuple[List[Query], List[Query]]:
    needs(config, "corpus", "queries")
    out = output_dir(config, "filter")

    with tracked("filter-queries", config) as summary:
        docs = load_ingested_corpus(config.corpus)
        queries = read_queries(config.queries)
        kept, removed = difficulty_filter(queries, bm25_for(config, docs), config.cutoff)
        write_queries(out / "kept.jsonl", kept)
        write_queries(out / "removed.jsonl", removed)
        summary.update({"kept": len(kept), "removed": len(removed)})

    print(f"kept {len(kept)}, removed {len(removed)} (cutoff {config.cutoff})")
    return kept, removed


def cmd_gen_queries(config: RunConfig, evidence_types: Sequence[str] = ("text", "table", "figure")) -> PipelineResult:
    needs(config, "corpus")
    out = output_dir(config, "queries")

    with tracked("gen-queries", config) as summary:
        docs = load_ingested_corpus(config.corpus)
        result = run_query_pipeline(
            docs,
            [EvidenceType(t) for t in evidence_types],
            make_llm(config),
            bm25_for(config, docs),
            cutoff=config.cutoff,
            workers=config.workers,
            progress=lambda it: tqdm(it, desc="generate", unit="doc"),
        )
        write_queries(out / "queries.jsonl", result.final)
        write_queries(out / "removed.jsonl", result.removed)
        write_queries(out / "invalid.jsonl", result.invalid)
        write_queries(out / "manual_review.jsonl", result.manual_review)
        write_queries(out / "rejected.jsonl", [r.query for r in result.rejected])
        write_frame(out / "stats.csv", result.stats.to_frame().reset_index())
        export_review(out / "review.csv", result.final)
        summary.update(result.stats.to_dict())

    print(result.stats.to_frame().to_string())
    return result


# ============================
# ANALYSES
# ============================

def cmd_analyze_scaling(
    config: RunConfig,
    doc_ids: Optional[Sequence[str]] = None,
    sizes: Sequence[int] = SCALING_SIZES,
    query_len: int = SCALING_QUERY_LEN,
) -> pd.DataFrame:
    needs(config, "corpus")
    out = output_dir(config, "scaling")

    with tracked("analyze-scaling", config) as summary:
        docs = load_ingested_corpus(config.corpus, doc_ids)
        window_sets, too_short = [], []
        for position, doc in enumerate(docs):
            try:
                window_sets.append(build_scaling_windows(
                    doc.flat.text, query_len, sizes, seed=config.seed + position, doc_id=doc.doc_id
                ))
            except TooShort as exc:
                log.warning("%s", exc)
                too_short.append(doc.doc_id)
        require(bool(window_sets), "No document is long enough for the scaling study", ConfigError)

        for ws in window_sets:
            for size in sorted(ws.windows):
                write_text_atomic(out / "snippets" / ws.doc_id / f"window-{size}.tex",
                                  scaling_snippet(ws.window_text(size)))

        page_images, page_provider = None, None
        if config.pages_dir:
            page_images = {}
            for ws in window_sets:
                for size in ws.windows:
                    page = Path(config.pages_dir) / ws.doc_id / f"window-{size}.png"
                    if page.is_file():
                        page_images[(ws.doc_id, size)] = page.read_bytes()
            if config.provider == "hash":
                page_provider = HashEmbeddingProvider(
                    config.dimension, config.provider_mode, Modality.IMAGE.value,
                    max_pixels=config.max_pixels, patch_size=config.patch_size or 14,
                )
            else:
                page_provider = make_provider(config)

        frame = scaling_study(
            window_sets,
            make_provider(config),
            config.k,
            page_images,
            page_provider,
        )
        write_frame(out / "scaling.csv", frame)
        plot_scaling(frame, out / "scaling.png", config.k)
        summary.update({"documents": len(window_sets), "too_short": too_short})

    print(frame.to_string(index=False))
    return frame


def cmd_analyze_figures(config: RunConfig) -> pd.DataFrame:
    needs(config, "corpus", "queries")
    index = open_index(config)
    out = output_dir(config, "figures")

    with tracked("analyze-figures", config) as summary:
        docs = {d.doc_id: d for d in load_ingested_corpus(config.corpus)}
        queries = [q for q in read_queries(config.queries) if q.evidence_type is EvidenceType.FIGURE]
        provider = make_provider(config, index.provider)

        embedded = [embed_query(q.text, provider, q.query_id) for q in queries]
        rankings = {
            q.query_id: ranking
            for q, ranking in zip(queries, search_many(embedded, index, None, config.workers))
        }
        chunk_size = index.manifest.get("chunk_size") or config.chunk_size
        overlap = index.manifest.get("overlap") or 0
        frame = figure_text_report(
            queries, rankings, docs, chunk_size, overlap,
            overlap_threshold=config.overlap_threshold,
        )
        write_frame(out / "figure_text.csv", frame)
        summary.update({"queries": len(queries)})

    print(frame.to_string(index=False))
    return frame
