"""
Query construction pipeline.

generated -> decontextualized -> filtered -> verified -> final

- generation, decontextualization and verification are LLM service calls
- the difficulty filter drops queries whose gold document BM25 already ranks
  within the cutoff
- naturalization is a pass-through stage
- every stage is counted per evidence type in PipelineStats
"""

import base64
import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd

from src.config import DIFFICULTY_CUTOFF, TEXT_EVIDENCE_MAX_TOKENS
from src.errors import GoldMissing, MalformedVerdict, StageError
from src.latex_ingest import IngestedDocument
from src.prompts import DECONTEXTUALIZE, FAILURE_LABELS, GENERATION_TEMPLATES, VERIFY, PromptTemplate
from src.retrieval import Bm25Index
from src.service_client import ServiceClient
from src.utils import Diagnostics, require

log = logging.getLogger(__name__)


# ============================
# DOMAIN TYPES
# ============================

class EvidenceType(str, Enum):
    TEXT = "text"
    TABLE = "table"
    FIGURE = "figure"


class Stage(str, Enum):
    GENERATED = "generated"
    DECONTEXTUALIZED = "decontextualized"
    FILTERED = "filtered"
    VERIFIED = "verified"
    FINAL = "final"

    @property
    def order(self) -> int:
        return list(Stage).index(self)


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str
    evidence_type: EvidenceType
    gold_doc_id: str
    stage: Stage = Stage.GENERATED
    audit: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "evidence_type", EvidenceType(self.evidence_type))
        object.__setattr__(self, "stage", Stage(self.stage))
        require(bool(self.text and self.text.strip()), f"{self.query_id}: empty query text")
        require(bool(self.gold_doc_id), f"{self.query_id}: missing gold document")

    def advanced(self, stage: Stage, text: Optional[str] = None, **audit) -> "Query":
        stage = Stage(stage)
        if stage.order <= self.stage.order:
            raise StageError(f"{self.query_id}: cannot move from {self.stage.value} to {stage.value}")
        return replace(self, stage=stage, text=text if text is not None else self.text,
                       audit={**self.audit, **audit})

    def annotated(self, **audit) -> "Query":
        return replace(self, audit={**self.audit, **audit})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "query_id": self.query_id,
            "text": self.text,
            "evidence_type": self.evidence_type.value,
            "gold_doc_id": self.gold_doc_id,
            "stage": self.stage.value,
            "audit": self.audit,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Query":
        return cls(
            query_id=data["query_id"],
            text=data["text"],
            evidence_type=data["evidence_type"],
            gold_doc_id=data["gold_doc_id"],
            stage=data.get("stage", Stage.GENERATED.value),
            audit=dict(data.get("audit") or {}),
        )


@dataclass(frozen=True)
class Rejection:
    query: Query
    stage: Stage
    reason: str


@dataclass
class PipelineStats:
    """Query counts per stage and evidence type, plus dropped-candidate tallies."""

    counts: Dict[str, Counter] = field(default_factory=lambda: {s.value: Counter() for s in Stage})
    dropped: Counter = field(default_factory=Counter)

    def record(self, stage: Stage, queries: Iterable[Query]):
        bucket = self.counts[Stage(stage).value]
        bucket.clear()
        bucket.update(q.evidence_type.value for q in queries)

    def count(self, stage: Stage, evidence_type: EvidenceType) -> int:
        return self.counts[Stage(stage).value][EvidenceType(evidence_type).value]

    def is_monotone(self) -> bool:
        stages = [s.value for s in Stage]
        for et in EvidenceType:
            series = [self.counts[s][et.value] for s in stages]
            if any(later > earlier for earlier, later in zip(series, series[1:])):
                return False
        return True

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            [[self.counts[s.value][et.value] for et in EvidenceType] for s in Stage],
            index=[s.value for s in Stage],
            columns=[et.value for et in EvidenceType],
        )
        frame.index.name = "stage"
        return frame

    def to_dict(self) -> Dict[str, Any]:
        return {
            "counts": {s: dict(sorted(c.items())) for s, c in self.counts.items()},
            "dropped": dict(sorted(self.dropped.items())),
        }


# ============================
# LLM SERVICE
# ============================

_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$")


class LlmService:
    """
    Prompted completions over the shared transport:

        {prompt_template_id, variables, prompt, images?} -> {text} | {structured answer}
    """

    route = "complete"

    def __init__(self, client: ServiceClient, model: Optional[str] = None):
        self.client = client
        self.model = model

    def complete(
        self, template: PromptTemplate, variables: Dict[str, str], images: Sequence[bytes] = ()
    ) -> Union[Dict[str, Any], str, None]:
        payload: Dict[str, Any] = {
            "prompt_template_id": template.template_id,
            "variables": dict(variables),
            "prompt": template.render(variables),
        }
        if images:
            payload["images"] = [base64.b64encode(b).decode("ascii") for b in images]
        if self.model:
            payload["model"] = self.model
        return decode_answer(self.client.post(self.route, payload))


def decode_answer(body: Dict[str, Any]) -> Union[Dict[str, Any], str, None]:
    """A structured body is returned as is; a `text` body is parsed as JSON when possible."""
    if "text" not in body:
        return body
    text = body["text"]
    if text is None or isinstance(text, dict):
        return text
    text = _FENCE.sub("", str(text).strip())
    try:
        parsed = json.loads(text)
    except json.JSONDecodeError:
        return text or None
    return parsed if isinstance(parsed, (dict, type(None))) else str(parsed)


def _answer_query(answer) -> Optional[str]:
    if isinstance(answer, dict):
        answer = answer.get("query")
    if not isinstance(answer, str) or not answer.strip() or answer.strip().lower() == "null":
        return None
    return " ".join(answer.split())


def _map(fn: Callable, items: Sequence, workers: int) -> List:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ============================
# GENERATION
# ============================

@dataclass(frozen=True)
class Evidence:
    ref: str
    text: str
    images: Tuple[bytes, ...] = ()


def collect_evidence(
    doc: IngestedDocument,
    evidence_type: EvidenceType,
    max_tokens: int = TEXT_EVIDENCE_MAX_TOKENS,
) -> List[Evidence]:
    evidence_type = EvidenceType(evidence_type)
    if evidence_type is EvidenceType.TEXT:
        tokens = doc.normalized.split()
        return [Evidence("text", " ".join(tokens[:max_tokens]))] if tokens else []

    if evidence_type is EvidenceType.TABLE:
        return [Evidence(f"table-{i:03d}", t.text) for i, t in enumerate(doc.structure.tables)]

    images: Dict[int, List[bytes]] = {}
    for asset in doc.embeddable_assets:
        images.setdefault(asset.figure_index, []).append(asset.data)
    return [
        Evidence(f"figure-{i:03d}", figure.caption, tuple(images[i]))
        for i, figure in enumerate(doc.structure.figures)
        if i in images
    ]


def generate_queries(
    doc: IngestedDocument,
    evidence_type: EvidenceType,
    llm: LlmService,
    workers: int = 1,
    stats: Optional[PipelineStats] = None,
    max_tokens: int = TEXT_EVIDENCE_MAX_TOKENS,
) -> List[Query]:
    """One candidate per evidence item; a null answer yields no query."""
    evidence_type = EvidenceType(evidence_type)
    template = GENERATION_TEMPLATES[evidence_type.value]
    items = collect_evidence(doc, evidence_type, max_tokens)
    if not items:
        log.debug("%s: no %s evidence", doc.doc_id, evidence_type.value)
        return []

    answers = _map(lambda e: llm.complete(template, {"paper_text": e.text}, e.images), items, workers)

    queries = []
    for n, (item, answer) in enumerate(zip(items, answers)):
        text = _answer_query(answer)
        if text is None:
            if stats is not None:
                stats.dropped[f"null_generation.{evidence_type.value}"] += 1
            log.debug("%s: null generation for %s", doc.doc_id, item.ref)
            continue
        queries.append(Query(
            query_id=f"{doc.doc_id}:{evidence_type.value}:{n:03d}",
            text=text,
            evidence_type=evidence_type,
            gold_doc_id=doc.doc_id,
            audit={"evidence_ref": item.ref, "generation_template": template.template_id},
        ))
    return queries


# ============================
# DECONTEXTUALIZATION
# ============================

CONTEXT_BOUND = re.compile(
    r"\b(?:this|these|that|those|the above|the following|the present|the shown)\s+"
    r"(?:figure|figures|table|tables|plot|chart|diagram|paper|work|study|section|results?|method|approach|experiment)s?\b"
    r"|\b(?:fig\.|figure\s+\d+|table\s+\d+)",
    re.IGNORECASE,
)


def decontextualize(query: Query, llm: LlmService) -> Union[Query, Rejection]:
    if query.stage is not Stage.GENERATED:
        raise StageError(f"{query.query_id}: decontextualize expects a generated query, got {query.stage.value}")

    answer = llm.complete(DECONTEXTUALIZE, {"query": query.text})
    reasoning = answer.get("reasoning", "") if isinstance(answer, dict) else ""
    text = _answer_query(answer)
    if text is None:
        return Rejection(query.annotated(decontext_reasoning=reasoning), Stage.DECONTEXTUALIZED,
                         reasoning or "service returned null")

    return query.advanced(
        Stage.DECONTEXTUALIZED,
        text=text,
        original_text=query.text,
        decontext_reasoning=reasoning,
        context_flag=bool(CONTEXT_BOUND.search(text)),
    )


# ============================
# DIFFICULTY FILTER
# ============================

def difficulty_filter(
    queries: Sequence[Query],
    bm25: Bm25Index,
    cutoff: int = DIFFICULTY_CUTOFF,
) -> Tuple[List[Query], List[Query]]:
    """
    Remove a query iff BM25 ranks its gold document within `cutoff`. A gold
    document with no lexical match is unranked and always kept. Kept
    queries advance to filtered; both lists record `bm25_rank`.
    """
    require(cutoff >= 1, "cutoff must be >= 1")
    known = set(bm25.doc_ids)
    kept, removed = [], []
    for query in queries:
        if query.gold_doc_id not in known:
            raise GoldMissing(query.query_id, query.gold_doc_id)
        position = bm25.gold_rank(query.text, query.gold_doc_id)
        if position is not None and position <= cutoff:
            removed.append(query.annotated(bm25_rank=position))
        else:
            kept.append(query.advanced(Stage.FILTERED, bm25_rank=position))
    log.info("Difficulty filter (cutoff %d): kept %d, removed %d", cutoff, len(kept), len(removed))
    return kept, removed


# ============================
# VERIFICATION
# ============================

@dataclass(frozen=True)
class Verdict:
    is_valid: bool
    score: int
    decision_rationale: str
    confidence: int
    labels: Tuple[str, ...] = ()

    @classmethod
    def parse(cls, answer) -> "Verdict":
        if not isinstance(answer, dict):
            raise MalformedVerdict(f"verdict is not an object: {str(answer)[:80]!r}")
        try:
            is_valid = answer["is_valid"]
            score = answer["score"]
            rationale = answer["decision_rationale"]
            confidence = answer["confidence"]
        except KeyError as exc:
            raise MalformedVerdict(f"verdict lacks {exc.args[0]!r}") from exc
        if not isinstance(is_valid, bool):
            raise MalformedVerdict("is_valid must be a boolean")
        if isinstance(score, bool) or not isinstance(score, int):
            raise MalformedVerdict("score must be an integer")
        if isinstance(confidence, bool) or not isinstance(confidence, int):
            raise MalformedVerdict("confidence must be an integer")
        if not isinstance(rationale, str):
            raise MalformedVerdict("decision_rationale must be a string")
        labels = answer.get("labels") or ()
        if isinstance(labels, str):
            labels = (labels,)
        if not labels:
            # failure modes named in the rationale
            labels = tuple(l for l in FAILURE_LABELS if l in rationale)
        return cls(is_valid, score, rationale, confidence, tuple(str(l) for l in labels))

    def to_audit(self) -> Dict[str, Any]:
        return {
            "verdict_valid": self.is_valid,
            "verdict_score": self.score,
            "verdict_rationale": self.decision_rationale,
            "verdict_confidence": self.confidence,
            "verdict_labels": list(self.labels),
        }


@dataclass
class VerificationResult:
    valid: List[Query] = field(default_factory=list)
    invalid: List[Query] = field(default_factory=list)
    manual_review: List[Query] = field(default_factory=list)


def verify_queries(queries: Sequence[Query], llm: LlmService, workers: int = 1) -> VerificationResult:
    """Valid queries advance to verified; unparseable verdicts go to manual review."""
    for query in queries:
        if query.stage is not Stage.FILTERED:
            raise StageError(f"{query.query_id}: verify expects a filtered query, got {query.stage.value}")

    def ask(query: Query):
        original = query.audit.get("original_text", query.text)
        return llm.complete(VERIFY, {"original": original, "query": query.text})

    result = VerificationResult()
    for query, answer in zip(queries, _map(ask, list(queries), workers)):
        try:
            verdict = Verdict.parse(answer)
        except MalformedVerdict as exc:
            log.warning("%s: %s; routed to manual review", query.query_id, exc)
            result.manual_review.append(query.annotated(malformed_verdict=str(exc)))
            continue
        if verdict.is_valid:
            result.valid.append(query.advanced(Stage.VERIFIED, **verdict.to_audit()))
        else:
            result.invalid.append(query.annotated(**verdict.to_audit()))
    return result


def naturalize(queries: Sequence[Query]) -> List[Query]:
    """Pass-through stage: verified queries become final unchanged."""
    return [q.advanced(Stage.FINAL) for q in queries]


# ============================
# END-TO-END
# ============================

@dataclass
class PipelineResult:
    final: List[Query]
    stats: PipelineStats
    rejected: List[Rejection] = field(default_factory=list)
    removed: List[Query] = field(default_factory=list)
    invalid: List[Query] = field(default_factory=list)
    manual_review: List[Query] = field(default_factory=list)
    diagnostics: Diagnostics = field(default_factory=Diagnostics)


def run_query_pipeline(
    docs: Sequence[IngestedDocument],
    evidence_types: Sequence[EvidenceType],
    llm: LlmService,
    bm25: Bm25Index,
    cutoff: int = DIFFICULTY_CUTOFF,
    workers: int = 1,
    progress: Callable[[Iterable], Iterable] = lambda it: it,
) -> PipelineResult:
    stats = PipelineStats()
    diagnostics = Diagnostics()

    generated: List[Query] = []
    for doc in progress(docs):
        for evidence_type in evidence_types:
            generated.extend(generate_queries(doc, evidence_type, llm, workers, stats))
    stats.record(Stage.GENERATED, generated)

    decontextualized, rejected = [], []
    for outcome in _map(lambda q: decontextualize(q, llm), generated, workers):
        if isinstance(outcome, Rejection):
            rejected.append(outcome)
            stats.dropped[f"decontext_null.{outcome.query.evidence_type.value}"] += 1
        else:
            decontextualized.append(outcome)
            if outcome.audit.get("context_flag"):
                diagnostics.add("context_flag", outcome.query_id)
    stats.record(Stage.DECONTEXTUALIZED, decontextualized)

    kept, removed = difficulty_filter(decontextualized, bm25, cutoff)
    stats.record(Stage.FILTERED, kept)

    verification = verify_queries(kept, llm, workers)
    stats.record(Stage.VERIFIED, verification.valid)
    for query in verification.manual_review:
        diagnostics.add("manual_review", query.query_id)

    final = naturalize(verification.valid)
    stats.record(Stage.FINAL, final)

    log.info("Query pipeline: %s", stats.to_dict()["counts"])
    return PipelineResult(
        final=final,
        stats=stats,
        rejected=rejected,
        removed=removed,
        invalid=verification.invalid,
        manual_review=verification.manual_review,
        diagnostics=diagnostics,
    )


# ============================
# QUERY FILES
# ============================

def write_queries(path, queries: Iterable[Query]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for query in queries:
            f.write(json.dumps(query.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
    return path


def read_queries(path) -> List[Query]:
    queries = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                queries.append(Query.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{line_no}: bad query record: {exc}") from exc
    return queries


REVIEW_COLUMNS = ("naturalness", "ambiguity", "answerability", "notes")


def export_review(path, queries: Iterable[Query]) -> Path:
    """CSV for human review: one row per query, empty judgment columns."""
    rows = []
    for q in queries:
        rows.append({
            "query_id": q.query_id,
            "evidence_type": q.evidence_type.value,
            "gold_doc_id": q.gold_doc_id,
            "stage": q.stage.value,
            "query": q.text,
            "original_query": q.audit.get("original_text", ""),
            **{column: "" for column in REVIEW_COLUMNS},
        })
    frame = pd.DataFrame(rows, columns=[
        "query_id", "evidence_type", "gold_doc_id", "stage", "query", "original_query", *REVIEW_COLUMNS,
    ])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path
