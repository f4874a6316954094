"""
Document representations.

Builds the five indexable views of an ingested document as ordered
lists of EmbeddingUnits:

- TextOnly          normalized LaTeX text, chunked
- TextPlusCaptions  text with vision-language captions appended, chunked
- FiguresOnly       one unit per resolved figure image
- DocAsImage        one unit per rendered page
- Interleaved       text chunks carrying their nearby figures (1-2 images)

Builders are pure and deterministic per document.
"""

import logging
import shlex
import subprocess
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from src.config import CHUNK_OVERLAP, CHUNK_SIZE, PAGE_RENDER_TEMPLATE
from src.errors import EmptyPages, ToolkitError
from src.latex_ingest import IngestedDocument, ResolvedAsset
from src.utils import require, whitespace_tokens

log = logging.getLogger(__name__)

MAX_IMAGES_PER_UNIT = 2


# ============================
# DOMAIN TYPES
# ============================

class UnitKind(str, Enum):
    TEXT_CHUNK = "TextChunk"
    FIGURE = "Figure"
    PAGE_IMAGE = "PageImage"
    INTERLEAVED = "Interleaved"


class RepresentationKind(str, Enum):
    TEXT_ONLY = "text"
    TEXT_PLUS_CAPTIONS = "text+captions"
    FIGURES_ONLY = "figures"
    DOC_AS_IMAGE = "doc-image"
    INTERLEAVED = "interleaved"


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    index: int
    text: str
    token_count: int
    char_span: Tuple[int, int]

    @property
    def unit_id(self) -> str:
        return text_unit_id(self.doc_id, self.index)


@dataclass(frozen=True)
class EmbeddingUnit:
    doc_id: str
    unit_id: str
    kind: UnitKind
    text: Optional[str] = None
    images: Tuple[bytes, ...] = ()

    def __post_init__(self):
        if self.kind is UnitKind.TEXT_CHUNK:
            require(not self.images, f"{self.unit_id}: text chunk carries images")
            require(bool(self.text), f"{self.unit_id}: text chunk without text")
        elif self.kind in (UnitKind.FIGURE, UnitKind.PAGE_IMAGE):
            require(len(self.images) == 1, f"{self.unit_id}: image unit needs exactly one image")
            require(not self.text, f"{self.unit_id}: image unit carries text")
        else:
            require(bool(self.text), f"{self.unit_id}: interleaved unit without text")
            require(
                1 <= len(self.images) <= MAX_IMAGES_PER_UNIT,
                f"{self.unit_id}: interleaved unit needs one or two images",
            )


def text_unit_id(doc_id: str, index: int) -> str:
    return f"{doc_id}#text-{index:04d}"


def figure_unit_id(doc_id: str, figure_index: int, ordinal: int) -> str:
    return f"{doc_id}#fig-{figure_index:03d}-{ordinal:02d}"


def page_unit_id(doc_id: str, page: int) -> str:
    return f"{doc_id}#page-{page:04d}"


def interleaved_unit_id(doc_id: str, index: int, continuation: int = 0) -> str:
    suffix = f"-c{continuation}" if continuation else ""
    return f"{doc_id}#inter-{index:04d}{suffix}"


# ============================
# CHUNKING
# ============================

Tokenizer = Callable[[str], List[Tuple[str, int, int]]]


def chunk_text(
    normalized: str,
    chunk_size: int = CHUNK_SIZE,
    overlap: int = CHUNK_OVERLAP,
    doc_id: str = "",
    tokenizer: Tokenizer = whitespace_tokens,
) -> List[Chunk]:
    """
    Greedy left-to-right packing of tokens into chunks of `chunk_size`.

    Consecutive chunks share `overlap` tokens; only the last chunk may be short.
    Chunk text joins its tokens with single spaces.
    """
    require(chunk_size >= 1, "chunk_size must be >= 1")
    require(0 <= overlap < chunk_size, "overlap must satisfy 0 <= overlap < chunk_size")

    tokens = tokenizer(normalized)
    chunks: List[Chunk] = []
    start = 0
    while start < len(tokens):
        end = min(start + chunk_size, len(tokens))
        window = tokens[start:end]
        chunks.append(Chunk(
            doc_id=doc_id,
            index=len(chunks),
            text=" ".join(t for t, _, _ in window),
            token_count=len(window),
            char_span=(window[0][1], window[-1][2]),
        ))
        if end == len(tokens):
            break
        start = end - overlap
    return chunks


def _text_units(doc_id: str, chunks: List[Chunk]) -> List[EmbeddingUnit]:
    return [
        EmbeddingUnit(doc_id, c.unit_id, UnitKind.TEXT_CHUNK, text=c.text)
        for c in chunks
    ]


# ============================
# TEXT BUILDERS
# ============================

def build_text_only(
    doc: IngestedDocument, chunk_size: int = CHUNK_SIZE, overlap: int = CHUNK_OVERLAP
) -> List[EmbeddingUnit]:
    chunks = chunk_text(doc.normalized, chunk_size, overlap, doc.doc_id)
    if not chunks:
        doc.diagnostics.add("empty_document", doc.doc_id)
        log.warning("%s: empty document, no text units", doc.doc_id)
    return _text_units(doc.doc_id, chunks)


def caption_keys(doc: IngestedDocument) -> List[str]:
    """Figure unit ids in figure order; captions are keyed by these."""
    return [u.unit_id for u in build_figures_only(doc, quiet=True)]


def text_with_captions(doc: IngestedDocument, captions: Dict[str, str]) -> str:
    paragraphs = [captions[key].strip() for key in caption_keys(doc) if captions.get(key, "").strip()]
    if not paragraphs:
        return doc.normalized
    return doc.normalized + "\n\n" + "\n\n".join(paragraphs)


def build_text_plus_captions(
    doc: IngestedDocument,
    captions: Dict[str, str],
    chunk_size: int = CHUNK_SIZE,
    overlap: int = CHUNK_OVERLAP,
) -> List[EmbeddingUnit]:
    """
    Append provider captions (one paragraph per figure, figure order) after
    the normalized text, then chunk like build_text_only. Missing captions are skipped.
    """
    chunks = chunk_text(text_with_captions(doc, captions), chunk_size, overlap, doc.doc_id)
    if not chunks:
        doc.diagnostics.add("empty_document", doc.doc_id)
    return _text_units(doc.doc_id, chunks)


# ============================
# IMAGE BUILDERS
# ============================

def _figure_images(doc: IngestedDocument) -> List[Tuple[str, ResolvedAsset]]:
    """(figure unit id, asset) for each embeddable asset, document order."""
    per_figure: Dict[int, int] = {}
    out = []
    for asset in doc.assets:
        ordinal = per_figure.get(asset.figure_index, 0)
        per_figure[asset.figure_index] = ordinal + 1
        if asset.embeddable:
            out.append((figure_unit_id(doc.doc_id, asset.figure_index, ordinal), asset))
    return out


def build_figures_only(doc: IngestedDocument, quiet: bool = False) -> List[EmbeddingUnit]:
    images = _figure_images(doc)
    if not quiet:
        skipped = sum(1 for f in doc.structure.figures if f.synthetic)
        skipped += sum(1 for a in doc.assets if not a.embeddable)
        if skipped:
            doc.diagnostics.add("figures_skipped", f"{doc.doc_id}: {skipped}")
        if not images:
            doc.diagnostics.add("unrepresentable", f"{doc.doc_id}: no figures")
            log.warning("%s: no embeddable figures; unrepresentable as FiguresOnly", doc.doc_id)
    return [
        EmbeddingUnit(doc.doc_id, unit_id, UnitKind.FIGURE, images=(asset.data,))
        for unit_id, asset in images
    ]


def build_doc_as_image(doc: IngestedDocument, page_images: Sequence[bytes]) -> List[EmbeddingUnit]:
    if not page_images:
        raise EmptyPages(f"{doc.doc_id}: no rendered pages")
    return [
        EmbeddingUnit(doc.doc_id, page_unit_id(doc.doc_id, page), UnitKind.PAGE_IMAGE, images=(blob,))
        for page, blob in enumerate(page_images, start=1)
    ]


# ============================
# INTERLEAVED
# ============================

def chunk_for_anchor(chunks: List[Chunk], anchor: int) -> int:
    """First chunk whose span ends after the anchor; past the last span -> last chunk."""
    for chunk in chunks:
        if anchor < chunk.char_span[1]:
            return chunk.index
    return chunks[-1].index


def _distance(anchor: int, span: Tuple[int, int]) -> int:
    if anchor < span[0]:
        return span[0] - anchor
    if anchor >= span[1]:
        return anchor - span[1] + 1
    return 0


def attach_figures(chunks: List[Chunk], anchored: List[Tuple[int, int, bytes]]) -> List[List[Tuple[int, int, bytes]]]:
    """
    Attach (order, anchor, image) triples to chunks by anchor containment.

    A chunk holding more than two keeps the two nearest (ties by document
    order) and spills the rest to the following chunk. Overflow at the
    final chunk stays there; the caller splits it into continuation units.
    """
    attached: List[List[Tuple[int, int, bytes]]] = [[] for _ in chunks]
    for item in anchored:
        attached[chunk_for_anchor(chunks, item[1])].append(item)

    for i in range(len(chunks) - 1):
        if len(attached[i]) <= MAX_IMAGES_PER_UNIT:
            continue
        span = chunks[i].char_span
        ranked = sorted(attached[i], key=lambda it: (_distance(it[1], span), it[0]))
        keep = sorted(ranked[:MAX_IMAGES_PER_UNIT])
        spill = sorted(ranked[MAX_IMAGES_PER_UNIT:])
        attached[i] = keep
        attached[i + 1] = sorted(spill + attached[i + 1])
    return attached


def build_interleaved(
    doc: IngestedDocument, chunk_size: int = CHUNK_SIZE, overlap: int = CHUNK_OVERLAP
) -> List[EmbeddingUnit]:
    chunks = chunk_text(doc.normalized, chunk_size, overlap, doc.doc_id)
    if not chunks:
        doc.diagnostics.add("empty_document", doc.doc_id)
        return []

    anchored = [
        (order, asset.figure.anchor, asset.data)
        for order, (_, asset) in enumerate(_figure_images(doc))
    ]
    attached = attach_figures(chunks, anchored)

    units: List[EmbeddingUnit] = []
    for chunk, items in zip(chunks, attached):
        if not items:
            units.append(EmbeddingUnit(doc.doc_id, chunk.unit_id, UnitKind.TEXT_CHUNK, text=chunk.text))
            continue
        for part in range(0, len(items), MAX_IMAGES_PER_UNIT):
            group = items[part:part + MAX_IMAGES_PER_UNIT]
            units.append(EmbeddingUnit(
                doc.doc_id,
                interleaved_unit_id(doc.doc_id, chunk.index, part // MAX_IMAGES_PER_UNIT),
                UnitKind.INTERLEAVED,
                text=chunk.text,
                images=tuple(image for _, _, image in group),
            ))
    return units


# ============================
# PAGE RENDERING & CAPTION FILES
# ============================

def render_pages(
    source_dir, out_dir, template: Optional[str] = PAGE_RENDER_TEMPLATE, timeout: float = 600
) -> List[Path]:
    """
    Run the configured render command, e.g.
    "render-pages {src} {out}", expected to write {out}/page-%04d.png.
    """
    require(bool(template), "No page render command configured", ToolkitError)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    command = template.format(src=shlex.quote(str(source_dir)), out=shlex.quote(str(out_dir)))
    try:
        result = subprocess.run(shlex.split(command), capture_output=True, timeout=timeout)
    except subprocess.TimeoutExpired as exc:
        raise ToolkitError(f"Page render timed out after {timeout}s: {command}") from exc
    except OSError as exc:
        raise ToolkitError(f"Page render could not start: {exc}") from exc
    if result.returncode != 0:
        raise ToolkitError(
            f"Page render failed ({result.returncode}): {result.stderr.decode(errors='replace')[:200]}"
        )
    return sorted(out_dir.glob("page-*.png"))


def load_page_images(pages_dir) -> List[bytes]:
    return [p.read_bytes() for p in sorted(Path(pages_dir).glob("page-*.png"))]


def load_captions(path) -> Dict[str, Dict[str, str]]:
    """doc_id -> figure unit id -> caption, from the tab-separated caption file."""
    captions: Dict[str, Dict[str, str]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t", 2)
            if len(parts) != 3:
                log.warning("%s:%d: expected 3 tab-separated fields", path, lineno)
                continue
            doc_id, unit_id, caption = parts
            captions.setdefault(doc_id, {})[unit_id] = caption
    return captions


def write_captions(path, captions: Dict[str, Dict[str, str]]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for doc_id in sorted(captions):
            for unit_id in sorted(captions[doc_id]):
                text = " ".join(captions[doc_id][unit_id].split())
                f.write(f"{doc_id}\t{unit_id}\t{text}\n")


# ============================
# DISPATCH
# ============================

def build_representation(
    kind: RepresentationKind,
    doc: IngestedDocument,
    chunk_size: int = CHUNK_SIZE,
    overlap: int = CHUNK_OVERLAP,
    captions: Optional[Dict[str, str]] = None,
    page_images: Optional[Sequence[bytes]] = None,
) -> List[EmbeddingUnit]:
    kind = RepresentationKind(kind)
    if kind is RepresentationKind.TEXT_ONLY:
        return build_text_only(doc, chunk_size, overlap)
    if kind is RepresentationKind.TEXT_PLUS_CAPTIONS:
        return build_text_plus_captions(doc, captions or {}, chunk_size, overlap)
    if kind is RepresentationKind.FIGURES_ONLY:
        return build_figures_only(doc)
    if kind is RepresentationKind.DOC_AS_IMAGE:
        return build_doc_as_image(doc, page_images or [])
    return build_interleaved(doc, chunk_size, overlap)
