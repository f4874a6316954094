"""
LaTeX ingestion.

Turns a raw LaTeX project (directory or arXiv-style tarball) into a
flattened, normalized, structurally annotated document:

- flatten:           resolve \\input / \\include recursively with provenance
- normalize:         drop comments and non-semantic markup, keep math and text
- extract_structure: sections, figure environments, table environments
- resolve_assets:    locate figure files and bring them to one raster format

All functions are pure over their inputs, so documents can be
ingested in parallel.
"""

import bisect
import gzip
import io
import json
import logging
import posixpath
import re
import shlex
import subprocess
import tarfile
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from src.config import ASSET_CONVERT_TEMPLATE
from src.errors import AssetMissing, IncludeCycle, MissingInclude, ToolkitError, UnreadableProject
from src.utils import Diagnostics, json_dumps_safe, require

log = logging.getLogger(__name__)

TEXT_EXTENSIONS = {".tex", ".sty", ".cls", ".bib", ".bbl", ".txt"}
ASSET_EXTENSIONS = {".png", ".jpg", ".jpeg", ".pdf", ".eps"}

# Tried in order after the reference as written
ASSET_EXTENSION_ORDER = ("", ".png", ".jpg", ".pdf", ".eps")
RASTER_FORMATS = {"png", "jpg", "jpeg"}

ROOT_FILE_PREFERENCE = ("main.tex", "ms.tex", "paper.tex")

VERBATIM_ENVIRONMENTS = ("verbatim", "verbatim*", "Verbatim", "lstlisting")

_INCLUDE = re.compile(r"\\(input|include)\s*\{([^{}]*)\}")
_PROTECTED = re.compile(
    r"\\\\|\\%|%[^\n]*|\\begin\{(" + "|".join(re.escape(e) for e in VERBATIM_ENVIRONMENTS) + r")\}"
)
_VERBATIM_BEGIN = re.compile(
    r"\\begin\{(" + "|".join(re.escape(e) for e in VERBATIM_ENVIRONMENTS) + r")\}"
)
_COMMAND = re.compile(r"\\([A-Za-z@]+)\*?")
_SPECIAL = re.compile(r"[\\%]")
_INLINE_SPACE = re.compile(r"[ \t]*(?:\n[ \t]*)?")
_FIGURE_BEGIN = re.compile(r"\\begin\{(figure\*?)\}")
_TABLE_BEGIN = re.compile(r"\\begin\{(table\*?)\}")
_CAPTION = re.compile(r"\\caption\*?")
_INCLUDEGRAPHICS = re.compile(r"\\includegraphics\*?\s*(?:\[[^\]]*\])?\s*\{([^{}]*)\}")
_LABEL = re.compile(r"\\label\s*\{([^{}]*)\}")
_SECTION = re.compile(r"\\(section|subsection)\*?")
_DOCUMENTCLASS = re.compile(r"^[^%\n]*\\documentclass", re.MULTILINE)


# ============================
# DOMAIN TYPES
# ============================

def normalize_relpath(path: str) -> str:
    """Normalize a project-relative path; refuse absolute paths and `..` escapes."""
    cleaned = posixpath.normpath(path.replace("\\", "/"))
    require(
        not cleaned.startswith("/") and cleaned != ".." and not cleaned.startswith("../"),
        f"Path escapes the project: {path}",
    )
    return cleaned


@dataclass(frozen=True)
class LatexProject:
    root_file: str
    files: Dict[str, str]
    assets: Dict[str, bytes] = field(default_factory=dict)

    def __post_init__(self):
        for path in list(self.files) + list(self.assets):
            require(normalize_relpath(path) == path, f"Path is not normalized: {path}")
        require(self.root_file in self.files, f"Root file missing: {self.root_file}")

    @property
    def base_dir(self) -> str:
        return posixpath.dirname(self.root_file)


@dataclass(frozen=True)
class OriginSpan:
    """Output span [out_start, out_end) came from source_file[source_start:source_end].

    source_file is None for the newlines inserted around an \\include.
    """

    out_start: int
    out_end: int
    source_file: Optional[str]
    source_start: int
    source_end: int


@dataclass
class FlatSource:
    text: str
    origin_map: List[OriginSpan]
    diagnostics: Diagnostics = field(default_factory=Diagnostics)


@dataclass(frozen=True)
class NormalizationPolicy:
    strip_comments: bool = True
    remove_commands: Tuple[str, ...] = ("cite", "ref", "label", "footnote")
    unwrap_commands: Tuple[str, ...] = ("emph", "textbf", "textit", "texttt")

    def __post_init__(self):
        overlap = set(self.remove_commands) & set(self.unwrap_commands)
        require(not overlap, f"Commands both removed and unwrapped: {sorted(overlap)}")


@dataclass(frozen=True)
class Section:
    title: str
    start: int
    end: int
    level: int


@dataclass(frozen=True)
class FigureBlock:
    caption: str
    asset_refs: Tuple[str, ...]
    anchor: int
    label: Optional[str] = None

    @property
    def synthetic(self) -> bool:
        """TikZ / inline figure without any \\includegraphics."""
        return not self.asset_refs


@dataclass(frozen=True)
class TableBlock:
    text: str
    anchor: int
    caption: str = ""
    label: Optional[str] = None


@dataclass
class DocumentStructure:
    sections: List[Section] = field(default_factory=list)
    figures: List[FigureBlock] = field(default_factory=list)
    tables: List[TableBlock] = field(default_factory=list)


@dataclass
class ResolvedAsset:
    figure_index: int
    figure: FigureBlock
    ref: str
    path: Optional[str]
    data: Optional[bytes]
    format: str
    needs_conversion: bool = False
    error: Optional[str] = None

    @property
    def embeddable(self) -> bool:
        return self.data is not None and self.error is None


@dataclass
class IngestedDocument:
    doc_id: str
    flat: FlatSource
    normalized: str
    structure: DocumentStructure
    assets: List[ResolvedAsset] = field(default_factory=list)
    diagnostics: Diagnostics = field(default_factory=Diagnostics)

    @property
    def embeddable_assets(self) -> List[ResolvedAsset]:
        return [a for a in self.assets if a.embeddable]


# ============================
# PROTECTED REGIONS
# ============================

def _protected_ranges(text: str) -> List[Tuple[int, int]]:
    """Comment and verbatim spans; nothing inside them is interpreted."""
    ranges = []
    pos = 0
    while True:
        m = _PROTECTED.search(text, pos)
        if not m:
            break
        token = m.group(0)
        if token.startswith("%"):
            ranges.append((m.start(), m.end()))
            pos = m.end()
        elif m.group(1):
            end_tag = "\\end{" + m.group(1) + "}"
            j = text.find(end_tag, m.end())
            stop = len(text) if j < 0 else j + len(end_tag)
            ranges.append((m.start(), stop))
            pos = stop
        else:
            pos = m.end()
    return ranges


def _inside(pos: int, ranges: List[Tuple[int, int]]) -> bool:
    i = bisect.bisect_right(ranges, (pos, float("inf"))) - 1
    return i >= 0 and ranges[i][0] <= pos < ranges[i][1]


# ============================
# FLATTEN
# ============================

def _resolve_include(project: LatexProject, name: str) -> Optional[str]:
    candidates = []
    if not name.endswith(".tex"):
        candidates.append(name + ".tex")
    candidates.append(name)
    for candidate in candidates:
        joined = posixpath.normpath(posixpath.join(project.base_dir, candidate))
        if joined.startswith(".."):
            continue
        if joined in project.files:
            return joined
    return None


class _FlatWriter:
    def __init__(self):
        self.pieces: List[str] = []
        self.origin: List[OriginSpan] = []
        self.length = 0

    def emit(self, text: str, source: Optional[str], start: int, end: int):
        if not text:
            return
        self.pieces.append(text)
        self.origin.append(OriginSpan(self.length, self.length + len(text), source, start, end))
        self.length += len(text)


def _expand(project, path, stack, writer, lenient, diagnostics):
    text = project.files[path]
    protected = _protected_ranges(text)
    cursor = 0

    for m in _INCLUDE.finditer(text):
        if _inside(m.start(), protected):
            continue
        writer.emit(text[cursor:m.start()], path, cursor, m.start())
        cursor = m.end()

        name = m.group(2).strip()
        target = _resolve_include(project, name)
        if target is None:
            if not lenient:
                raise MissingInclude(name, path)
            diagnostics.add("missing_include", f"{name} (from {path})")
            continue
        if target in stack:
            raise IncludeCycle(stack + [target])

        is_include = m.group(1) == "include"
        if is_include:
            writer.emit("\n", None, 0, 0)
        _expand(project, target, stack + [target], writer, lenient, diagnostics)
        if is_include:
            writer.emit("\n", None, 0, 0)

    writer.emit(text[cursor:], path, cursor, len(text))


def flatten(project: LatexProject, lenient: bool = False) -> FlatSource:
    """
    Replace every \\input / \\include by the referenced file, depth-first
    in textual order. Includes inside comments or verbatim blocks stay as written.
    """
    writer = _FlatWriter()
    diagnostics = Diagnostics()
    _expand(project, project.root_file, [project.root_file], writer, lenient, diagnostics)
    return FlatSource("".join(writer.pieces), writer.origin, diagnostics)


def reconstruct(flat: FlatSource, project: LatexProject) -> str:
    """Rebuild the flat text from its origin map."""
    parts = []
    for span in flat.origin_map:
        if span.source_file is None:
            parts.append("\n" * (span.out_end - span.out_start))
        else:
            parts.append(project.files[span.source_file][span.source_start:span.source_end])
    return "".join(parts)


# ============================
# NORMALIZE
# ============================

def _brace_group(text: str, pos: int) -> Optional[int]:
    """Index just past the `}` closing the group opening at `pos`, or None."""
    if pos >= len(text) or text[pos] != "{":
        return None
    depth = 0
    i = pos
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\\":
            i += 2
            continue
        if ch == "%":
            j = text.find("\n", i)
            i = n if j < 0 else j
            continue
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i + 1
        i += 1
    return None


def _bracket_group(text: str, pos: int) -> Optional[int]:
    depth = 0
    for i in range(pos, len(text)):
        ch = text[i]
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth == 0:
                return i + 1
    return None


def _skip_space(text: str, pos: int) -> int:
    return _INLINE_SPACE.match(text, pos).end()


def _removed_command_end(text: str, pos: int, diagnostics: Diagnostics) -> Optional[int]:
    """End of a removed command's optional + brace arguments, starting after its name."""
    i = _skip_space(text, pos)
    while i < len(text) and text[i] == "[":
        close = _bracket_group(text, i)
        if close is None:
            break
        i = _skip_space(text, close)
    if i >= len(text) or text[i] != "{":
        return None
    close = _brace_group(text, i)
    if close is not None:
        return close
    diagnostics.add("unbalanced_argument", text[pos:pos + 40])
    eol = text.find("\n", i)
    return len(text) if eol < 0 else eol


def _normalize_text(text: str, policy: NormalizationPolicy, diagnostics: Diagnostics) -> str:
    remove = set(policy.remove_commands)
    unwrap = set(policy.unwrap_commands)
    out: List[str] = []
    i = 0
    n = len(text)

    while i < n:
        m = _SPECIAL.search(text, i)
        if not m:
            out.append(text[i:])
            break
        j = m.start()
        out.append(text[i:j])
        i = j

        if text[i] == "%":
            if policy.strip_comments:
                eol = text.find("\n", i)
                i = n if eol < 0 else eol
            else:
                out.append("%")
                i += 1
            continue

        verbatim = _VERBATIM_BEGIN.match(text, i)
        if verbatim:
            end_tag = "\\end{" + verbatim.group(1) + "}"
            k = text.find(end_tag, verbatim.end())
            if k < 0:
                diagnostics.add("unterminated_verbatim", verbatim.group(1))
                stop = n
            else:
                stop = k + len(end_tag)
            out.append(text[i:stop])
            i = stop
            continue

        command = _COMMAND.match(text, i)
        if not command:
            # escaped character such as \% \{ or a \\ line break
            out.append(text[i:i + 2])
            i += 2
            continue

        name = command.group(1)
        if name in remove:
            end = _removed_command_end(text, command.end(), diagnostics)
            if end is None:
                diagnostics.add("missing_argument", name)
                out.append(command.group(0))
                i = command.end()
            else:
                i = end
            continue

        if name in unwrap:
            start = _skip_space(text, command.end())
            close = _brace_group(text, start)
            if close is None:
                diagnostics.add("malformed_unwrap", name)
                out.append(command.group(0))
                i = command.end()
            else:
                out.append(_normalize_text(text[start + 1:close - 1], policy, diagnostics))
                i = close
            continue

        out.append(command.group(0))
        i = command.end()

    return "".join(out)


def normalize(
    flat,
    policy: Optional[NormalizationPolicy] = None,
    diagnostics: Optional[Diagnostics] = None,
) -> str:
    """
    Strip comments and non-semantic markup; math, plain text, tables and
    verbatim blocks are preserved. Malformed regions pass through and are
    tallied in `diagnostics`.
    """
    text = flat.text if isinstance(flat, FlatSource) else flat
    return _normalize_text(text, policy or NormalizationPolicy(), diagnostics or Diagnostics())


# ============================
# STRUCTURE
# ============================

def _environment_spans(text: str, begin: re.Pattern, protected, diagnostics) -> List[Tuple[int, int]]:
    spans = []
    last_end = -1
    for m in begin.finditer(text):
        if m.start() < last_end or _inside(m.start(), protected):
            continue
        name = re.escape(m.group(1))
        marker = re.compile(r"\\(begin|end)\{" + name + r"\}")
        depth = 0
        end = None
        for tag in marker.finditer(text, m.start()):
            depth += 1 if tag.group(1) == "begin" else -1
            if depth == 0:
                end = tag.end()
                break
        if end is None:
            diagnostics.add("unmatched_environment", f"{m.group(1)} at {m.start()}")
            continue
        spans.append((m.start(), end))
        last_end = end
    return spans


def _first_caption(body: str, diagnostics: Diagnostics) -> str:
    captions = []
    for m in _CAPTION.finditer(body):
        i = _skip_space(body, m.end())
        if i < len(body) and body[i] == "[":
            close = _bracket_group(body, i)
            i = _skip_space(body, close) if close is not None else i
        close = _brace_group(body, i)
        if close is not None:
            captions.append(body[i + 1:close - 1].strip())
    if len(captions) > 1:
        diagnostics.add("multiple_captions", captions[0][:40])
    return captions[0] if captions else ""


def _labels_in_order(flat_text: str, begin: re.Pattern) -> List[Optional[str]]:
    # comments stripped, nothing else touched
    bare = _normalize_text(
        flat_text, NormalizationPolicy(remove_commands=(), unwrap_commands=()), Diagnostics()
    )
    spans = _environment_spans(bare, begin, _protected_ranges(bare), Diagnostics())
    labels = []
    for start, end in spans:
        m = _LABEL.search(bare, start, end)
        labels.append(m.group(1).strip() if m else None)
    return labels


def extract_structure(
    flat: FlatSource, normalized: str, diagnostics: Optional[Diagnostics] = None
) -> DocumentStructure:
    """
    Figures, tables and section boundaries with anchors into `normalized`.
    Labels come from the flat source because normalization drops \\label.
    """
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    protected = _protected_ranges(normalized)

    figure_spans = _environment_spans(normalized, _FIGURE_BEGIN, protected, diagnostics)
    table_spans = _environment_spans(normalized, _TABLE_BEGIN, protected, diagnostics)

    figure_labels = _labels_in_order(flat.text, _FIGURE_BEGIN)
    table_labels = _labels_in_order(flat.text, _TABLE_BEGIN)
    if len(figure_labels) != len(figure_spans):
        diagnostics.add("label_alignment", "figure labels dropped")
        figure_labels = [None] * len(figure_spans)
    if len(table_labels) != len(table_spans):
        diagnostics.add("label_alignment", "table labels dropped")
        table_labels = [None] * len(table_spans)

    figures = []
    for (start, end), label in zip(figure_spans, figure_labels):
        body = normalized[start:end]
        refs = tuple(m.group(1).strip() for m in _INCLUDEGRAPHICS.finditer(body))
        figures.append(FigureBlock(_first_caption(body, diagnostics), refs, start, label))

    tables = []
    for (start, end), label in zip(table_spans, table_labels):
        body = normalized[start:end]
        tables.append(TableBlock(body, start, _first_caption(body, diagnostics), label))

    heads = []
    for m in _SECTION.finditer(normalized):
        if _inside(m.start(), protected):
            continue
        i = _skip_space(normalized, m.end())
        if i < len(normalized) and normalized[i] == "[":
            close = _bracket_group(normalized, i)
            i = _skip_space(normalized, close) if close is not None else i
        close = _brace_group(normalized, i)
        if close is None:
            diagnostics.add("malformed_section", normalized[m.start():m.start() + 40])
            continue
        level = 1 if m.group(1) == "section" else 2
        heads.append((m.start(), normalized[i + 1:close - 1].strip(), level))

    sections = []
    for idx, (start, title, level) in enumerate(heads):
        end = heads[idx + 1][0] if idx + 1 < len(heads) else len(normalized)
        sections.append(Section(title, start, end, level))

    return DocumentStructure(sections, figures, tables)


# ============================
# ASSETS
# ============================

def _find_asset(project: LatexProject, ref: str) -> Optional[str]:
    for ext in ASSET_EXTENSION_ORDER:
        candidate = posixpath.normpath(posixpath.join(project.base_dir, ref + ext))
        if candidate in project.assets:
            return candidate
    return None


def _to_png(data: bytes) -> bytes:
    image = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise ValueError("undecodable raster image")
    ok, encoded = cv2.imencode(".png", image)
    if not ok:
        raise ValueError("PNG encoding failed")
    return encoded.tobytes()


def convert_asset(data: bytes, source_format: str, converter: str, template: str = ASSET_CONVERT_TEMPLATE) -> bytes:
    """Run the external converter (exit code 0 = success) and return PNG bytes."""
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / f"asset.{source_format}"
        dst = Path(tmp) / "asset.png"
        src.write_bytes(data)
        command = template.format(
            converter=converter, **{"in": shlex.quote(str(src)), "out": shlex.quote(str(dst))}
        )
        result = subprocess.run(shlex.split(command), capture_output=True, timeout=300)
        if result.returncode != 0 or not dst.exists():
            raise RuntimeError(
                f"converter exited with {result.returncode}: {result.stderr.decode(errors='replace')[:200]}"
            )
        return dst.read_bytes()


def resolve_assets(
    project: LatexProject,
    structure: DocumentStructure,
    converter: Optional[str] = None,
    template: str = ASSET_CONVERT_TEMPLATE,
    diagnostics: Optional[Diagnostics] = None,
) -> List[ResolvedAsset]:
    """
    Resolve every \\includegraphics reference to PNG bytes.

    Missing or unconvertible assets are recorded on the entry and the
    figure is left unembeddable; the pipeline continues.
    """
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    resolved = []

    for index, figure in enumerate(structure.figures):
        if figure.synthetic:
            diagnostics.add("synthetic_figure", figure.caption[:40])
            continue
        for ref in figure.asset_refs:
            path = _find_asset(project, ref)
            if path is None:
                error = AssetMissing(ref)
                diagnostics.add("asset_missing", ref)
                resolved.append(ResolvedAsset(index, figure, ref, None, None, "", error=str(error)))
                continue

            fmt = posixpath.splitext(path)[1].lstrip(".").lower()
            entry = ResolvedAsset(index, figure, ref, path, None, fmt, needs_conversion=fmt not in RASTER_FORMATS)
            data = project.assets[path]
            try:
                if fmt == "png":
                    entry.data = data
                elif fmt in RASTER_FORMATS:
                    entry.data = _to_png(data)
                elif converter:
                    entry.data = convert_asset(data, fmt, converter, template)
                else:
                    raise RuntimeError("no converter configured")
                if entry.data is not None:
                    entry.format = "png"
            except (ValueError, RuntimeError, OSError, subprocess.SubprocessError) as exc:
                entry.data = None
                entry.error = f"conversion failed: {exc}"
                diagnostics.add("asset_unconverted", f"{ref}: {exc}")
            resolved.append(entry)

    return resolved


# ============================
# PROJECT LOADING
# ============================

def _find_root(files: Dict[str, str]) -> str:
    tex = sorted(p for p in files if p.endswith(".tex"))
    if not tex:
        raise ToolkitError("Project has no .tex file")
    with_class = [p for p in tex if _DOCUMENTCLASS.search(files[p])]
    pool = with_class or tex
    for preferred in ROOT_FILE_PREFERENCE:
        if preferred in pool:
            return preferred
    return min(pool, key=lambda p: (p.count("/"), p))


def _collect(entries) -> LatexProject:
    files, assets = {}, {}
    for name, data in entries:
        try:
            rel = normalize_relpath(name)
        except ValueError:
            log.warning("Skipping unsafe path %s", name)
            continue
        ext = posixpath.splitext(rel)[1].lower()
        if ext in TEXT_EXTENSIONS:
            files[rel] = data.decode("utf-8", errors="replace")
        elif ext in ASSET_EXTENSIONS:
            assets[rel] = data
    return LatexProject(_find_root(files), files, assets)


def load_project(path) -> LatexProject:
    """
    Load a project from a directory or a gzip tarball (arXiv source layout).
    A gzipped single file is treated as main.tex.
    """
    path = Path(path)
    try:
        return _collect(_read_entries(path))
    except (OSError, EOFError, tarfile.TarError) as exc:
        raise UnreadableProject(str(path), f"{type(exc).__name__}: {exc}") from exc


def _read_entries(path: Path) -> List[Tuple[str, bytes]]:
    if path.is_dir():
        return [
            (p.relative_to(path).as_posix(), p.read_bytes())
            for p in sorted(path.rglob("*")) if p.is_file()
        ]
    raw = path.read_bytes()
    try:
        with tarfile.open(fileobj=io.BytesIO(raw), mode="r:*") as tar:
            return [
                (member.name, tar.extractfile(member).read())
                for member in sorted(tar.getmembers(), key=lambda m: m.name)
                if member.isfile()
            ]
    except tarfile.TarError:
        return [("main.tex", gzip.decompress(raw))]


# ============================
# DOCUMENT ORCHESTRATION
# ============================

def ingest_document(
    doc_id: str,
    project: LatexProject,
    policy: Optional[NormalizationPolicy] = None,
    lenient: bool = False,
    converter: Optional[str] = None,
    template: str = ASSET_CONVERT_TEMPLATE,
) -> IngestedDocument:
    """Run flatten -> normalize -> extract_structure -> resolve_assets for one document."""
    flat = flatten(project, lenient=lenient)
    diagnostics = Diagnostics()
    diagnostics.merge(flat.diagnostics)

    normalized = normalize(flat, policy, diagnostics)
    structure = extract_structure(flat, normalized, diagnostics)
    assets = resolve_assets(project, structure, converter, template, diagnostics)

    if diagnostics.counts:
        log.info("%s: diagnostics %s", doc_id, dict(diagnostics.counts))

    return IngestedDocument(doc_id, flat, normalized, structure, assets, diagnostics)


def document_from_text(doc_id: str, text: str) -> IngestedDocument:
    """Wrap plain LaTeX text as a single-file project and ingest it."""
    return ingest_document(doc_id, LatexProject("main.tex", {"main.tex": text}))


# ============================
# PERSISTENCE
# ============================

def _asset_filename(asset: ResolvedAsset, ordinal: int) -> str:
    return f"fig{asset.figure_index:03d}-{ordinal:02d}.png"


def save_ingested(doc: IngestedDocument, out_dir) -> Path:
    """Write flat.tex, normalized.tex, document.json and assets/ under out_dir/doc_id."""
    target = Path(out_dir) / doc.doc_id
    (target / "assets").mkdir(parents=True, exist_ok=True)

    (target / "flat.tex").write_text(doc.flat.text, encoding="utf-8", newline="")
    (target / "normalized.tex").write_text(doc.normalized, encoding="utf-8", newline="")

    assets_meta = []
    for ordinal, asset in enumerate(doc.assets):
        filename = None
        if asset.embeddable:
            filename = _asset_filename(asset, ordinal)
            (target / "assets" / filename).write_bytes(asset.data)
        assets_meta.append({
            "figure_index": asset.figure_index,
            "ref": asset.ref,
            "path": asset.path,
            "format": asset.format,
            "needs_conversion": asset.needs_conversion,
            "error": asset.error,
            "file": filename,
        })

    record = {
        "doc_id": doc.doc_id,
        "origin_map": [
            [s.out_start, s.out_end, s.source_file, s.source_start, s.source_end]
            for s in doc.flat.origin_map
        ],
        "sections": [[s.title, s.start, s.end, s.level] for s in doc.structure.sections],
        "figures": [
            {"caption": f.caption, "asset_refs": list(f.asset_refs), "anchor": f.anchor, "label": f.label}
            for f in doc.structure.figures
        ],
        "tables": [
            {"text": t.text, "anchor": t.anchor, "caption": t.caption, "label": t.label}
            for t in doc.structure.tables
        ],
        "assets": assets_meta,
        "diagnostics": doc.diagnostics.to_dict(),
    }
    (target / "document.json").write_text(
        json_dumps_safe(record, sort_keys=True, indent=2), encoding="utf-8", newline=""
    )
    return target


def load_ingested(doc_dir) -> IngestedDocument:
    doc_dir = Path(doc_dir)
    with open(doc_dir / "document.json", "r", encoding="utf-8") as f:
        record = json.load(f)
    with open(doc_dir / "flat.tex", "r", encoding="utf-8", newline="") as f:
        flat_text = f.read()
    with open(doc_dir / "normalized.tex", "r", encoding="utf-8", newline="") as f:
        normalized = f.read()

    flat = FlatSource(flat_text, [OriginSpan(*row) for row in record["origin_map"]])
    figures = [
        FigureBlock(f["caption"], tuple(f["asset_refs"]), f["anchor"], f["label"])
        for f in record["figures"]
    ]
    structure = DocumentStructure(
        [Section(*row) for row in record["sections"]],
        figures,
        [TableBlock(t["text"], t["anchor"], t["caption"], t["label"]) for t in record["tables"]],
    )
    assets = []
    for meta in record["assets"]:
        data = (doc_dir / "assets" / meta["file"]).read_bytes() if meta["file"] else None
        assets.append(ResolvedAsset(
            meta["figure_index"], figures[meta["figure_index"]], meta["ref"], meta["path"],
            data, meta["format"], meta["needs_conversion"], meta["error"],
        ))
    return IngestedDocument(
        record["doc_id"], flat, normalized, structure, assets,
        Diagnostics.from_dict(record["diagnostics"]),
    )


def load_ingested_corpus(corpus_dir, doc_ids: Optional[Sequence[str]] = None) -> List[IngestedDocument]:
    """Load every ingested document (sorted by doc_id) below corpus_dir."""
    corpus_dir = Path(corpus_dir)
    require(corpus_dir.is_dir(), f"Ingested corpus not found: {corpus_dir}", ToolkitError)
    names = sorted(p.name for p in corpus_dir.iterdir() if (p / "document.json").exists())
    if doc_ids is not None:
        wanted = set(doc_ids)
        names = [n for n in names if n in wanted]
    return [load_ingested(corpus_dir / name) for name in names]
