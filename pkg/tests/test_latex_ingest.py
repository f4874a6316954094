"""Tests for LaTeX ingestion.

These tests cover:
 - flatten() provenance, include cycles and missing includes
 - normalize() on comments, removed and unwrapped commands, math and verbatim
 - extract_structure() sections, figures, tables and labels
 - resolve_assets() for PNG, JPEG, missing and unconvertible assets
 - project loading from directories and tarballs, and ingested-document persistence
 - the golden corpus: exact outputs plus flatten / normalize idempotence
"""

from __future__ import annotations

import gzip
import io
import tarfile

import pytest

from conftest import golden_projects
from src.errors import IncludeCycle, MissingInclude, UnreadableProject
from src.latex_ingest import (
    LatexProject,
    NormalizationPolicy,
    document_from_text,
    extract_structure,
    flatten,
    ingest_document,
    load_ingested,
    load_ingested_corpus,
    load_project,
    normalize,
    reconstruct,
    resolve_assets,
    save_ingested,
)
from src.utils import Diagnostics


def _project(text: str, **files) -> LatexProject:
    return LatexProject("main.tex", {"main.tex": text, **files})


# ---------------------------------------------------------------------------
# LatexProject
# ---------------------------------------------------------------------------

class TestLatexProject:
    def test_root_must_exist(self):
        with pytest.raises(ValueError):
            LatexProject("main.tex", {"other.tex": "x"})

    def test_rejects_escaping_paths(self):
        with pytest.raises(ValueError):
            LatexProject("main.tex", {"main.tex": "x", "../secret.tex": "y"})

    def test_rejects_unnormalized_paths(self):
        with pytest.raises(ValueError):
            LatexProject("main.tex", {"main.tex": "x", "a/./b.tex": "y"})


# ---------------------------------------------------------------------------
# flatten
# ---------------------------------------------------------------------------

class TestFlatten:
    def test_input_is_inlined(self):
        project = _project("A\n\\input{sec/intro}\nB\n", **{"sec/intro.tex": "Intro text\n"})
        flat = flatten(project)
        assert flat.text == "A\nIntro text\n\nB\n"

    def test_include_is_wrapped_in_newlines(self):
        flat = flatten(_project("X\\include{ch}Y", **{"ch.tex": "C"}))
        assert flat.text == "X\nC\nY"

    def test_explicit_tex_extension(self):
        flat = flatten(_project("\\input{part.tex}", **{"part.tex": "body"}))
        assert flat.text == "body"

    def test_origin_map_covers_output(self):
        project = _project("A\n\\input{sec/intro}\nB\n", **{"sec/intro.tex": "Intro text\n"})
        flat = flatten(project)
        position = 0
        for span in flat.origin_map:
            assert span.out_start == position
            assert span.out_end > span.out_start
            source = project.files[span.source_file][span.source_start:span.source_end]
            assert flat.text[span.out_start:span.out_end] == source
            position = span.out_end
        assert position == len(flat.text)
        assert reconstruct(flat, project) == flat.text

    def test_include_inside_comment_is_ignored(self):
        flat = flatten(_project("% \\input{missing}\nText\n"))
        assert flat.text == "% \\input{missing}\nText\n"

    def test_include_inside_verbatim_is_ignored(self):
        text = "\\begin{verbatim}\\input{missing}\\end{verbatim}\n"
        assert flatten(_project(text)).text == text

    def test_missing_include_strict(self):
        with pytest.raises(MissingInclude) as info:
            flatten(_project("\\input{nowhere}"))
        assert info.value.path == "nowhere"
        assert info.value.included_from == "main.tex"

    def test_missing_include_lenient(self):
        flat = flatten(_project("a \\input{nowhere} b"), lenient=True)
        assert flat.text == "a  b"
        assert flat.diagnostics["missing_include"] == 1

    def test_parent_directory_include_is_missing(self):
        project = LatexProject("paper/main.tex", {"paper/main.tex": "\\input{../../etc/passwd}"})
        with pytest.raises(MissingInclude):
            flatten(project)

    def test_include_cycle(self):
        with pytest.raises(IncludeCycle) as info:
            flatten(golden_projects()["cycle"])
        assert info.value.cycle == ["main.tex", "a.tex", "b.tex", "a.tex"]

    def test_same_file_twice_is_not_a_cycle(self):
        flat = flatten(_project("\\input{p}\\input{p}", **{"p.tex": "x"}))
        assert flat.text == "xx"


# ---------------------------------------------------------------------------
# normalize
# ---------------------------------------------------------------------------

class TestNormalize:
    def test_strips_comments(self):
        assert normalize("Hello % comment\nworld") == "Hello \nworld"

    def test_keeps_escaped_percent(self):
        assert normalize(r"5\% off") == r"5\% off"

    def test_removes_cite_and_ref(self):
        assert normalize(r"See \cite{a,b} and Fig.~\ref{fig:x}.") == "See  and Fig.~."

    def test_removes_optional_arguments(self):
        assert normalize(r"As shown \cite[p.~3]{key}.") == "As shown ."

    def test_unwraps_nested_formatting(self):
        assert normalize(r"an \emph{important \textbf{bold}} word") == "an important bold word"

    def test_removes_footnote_with_nested_braces(self):
        assert normalize(r"a\footnote{see {x}}b") == "ab"

    def test_math_is_preserved(self):
        text = r"$\alpha + \beta = \frac{1}{2}$"
        assert normalize(text) == text

    def test_verbatim_is_preserved(self):
        text = "\\begin{verbatim}% not a comment \\cite{x}\\end{verbatim}"
        assert normalize(text) == text

    def test_unbalanced_argument_is_diagnosed(self):
        diagnostics = Diagnostics()
        out = normalize("\\cite{abc\nrest", diagnostics=diagnostics)
        assert out == "\nrest"
        assert diagnostics["unbalanced_argument"] == 1

    def test_missing_argument_passes_through(self):
        diagnostics = Diagnostics()
        out = normalize("\\cite alone", diagnostics=diagnostics)
        assert out == "\\cite alone"
        assert diagnostics["missing_argument"] == 1

    def test_policy_can_keep_comments(self):
        policy = NormalizationPolicy(strip_comments=False)
        assert normalize("a % b", policy) == "a % b"

    def test_policy_rejects_overlap(self):
        with pytest.raises(ValueError):
            NormalizationPolicy(remove_commands=("emph",), unwrap_commands=("emph",))


# ---------------------------------------------------------------------------
# extract_structure
# ---------------------------------------------------------------------------

class TestExtractStructure:
    def test_figures_tables_and_sections(self):
        doc = ingest_document("figures", golden_projects()["figures"])
        figures = doc.structure.figures
        assert len(figures) == 2
        assert figures[0].caption == "Training loss decreases for gradient batch sizes"
        assert figures[0].asset_refs == ("figs/loss",)
        assert figures[0].label == "fig:loss"
        assert figures[1].asset_refs == ("figs/acc-a", "figs/acc-b")
        assert figures[1].label is None
        assert figures[0].anchor == doc.normalized.index("\\begin{figure}")
        assert figures[1].anchor == doc.normalized.index("\\begin{figure*}")
        assert [s.title for s in doc.structure.sections] == ["Results"]

    def test_anchors_are_ordered_and_in_range(self):
        for doc_id, project in golden_projects().items():
            if doc_id == "cycle":
                continue
            doc = ingest_document(doc_id, project)
            anchors = [f.anchor for f in doc.structure.figures]
            assert anchors == sorted(anchors)
            assert all(0 <= a < len(doc.normalized) for a in anchors)

    def test_tables_and_nested_sections(self):
        doc = ingest_document("tables", golden_projects()["tables"])
        (table,) = doc.structure.tables
        assert table.caption == "Retrieval quality"
        assert table.label == "tab:quality"
        assert "BM25 & 0.41" in table.text
        assert "\\label" not in table.text
        sections = doc.structure.sections
        assert [(s.title, s.level) for s in sections] == [("Evaluation", 1), ("Ablation", 2)]
        assert sections[0].end == sections[1].start
        assert sections[1].end == len(doc.normalized)

    def test_tikz_figure_is_synthetic(self):
        doc = ingest_document("tikz", golden_projects()["tikz"])
        (figure,) = doc.structure.figures
        assert figure.synthetic
        assert figure.caption == "Schematic"
        assert doc.assets == []
        assert doc.diagnostics["synthetic_figure"] == 1

    def test_unmatched_environment(self):
        flat = flatten(_project("\\begin{figure}\\caption{x}"))
        diagnostics = Diagnostics()
        structure = extract_structure(flat, normalize(flat), diagnostics)
        assert structure.figures == []
        assert diagnostics["unmatched_environment"] == 1

    def test_multiple_captions_keep_first(self):
        flat = flatten(_project("\\begin{figure}\\caption{one}\\caption{two}\\end{figure}"))
        diagnostics = Diagnostics()
        structure = extract_structure(flat, normalize(flat), diagnostics)
        assert structure.figures[0].caption == "one"
        assert diagnostics["multiple_captions"] == 1


# ---------------------------------------------------------------------------
# resolve_assets
# ---------------------------------------------------------------------------

class TestResolveAssets:
    def test_png_assets_resolve_in_order(self):
        doc = ingest_document("figures", golden_projects()["figures"])
        assert [a.path for a in doc.assets] == ["figs/loss.png", "figs/acc-a.png", "figs/acc-b.png"]
        assert [a.figure_index for a in doc.assets] == [0, 1, 1]
        assert all(a.embeddable and a.format == "png" for a in doc.assets)

    def test_jpeg_is_converted_to_png(self):
        doc = ingest_document("jpgfig", golden_projects()["jpgfig"])
        (asset,) = doc.assets
        assert asset.format == "png"
        assert not asset.needs_conversion
        assert asset.data.startswith(b"\x89PNG")

    def test_missing_asset_is_recorded(self):
        doc = ingest_document("missing-asset", golden_projects()["missing-asset"])
        present, absent = doc.assets
        assert present.embeddable
        assert not absent.embeddable
        assert absent.path is None
        assert "figs/absent" in absent.error
        assert doc.diagnostics["asset_missing"] == 1
        assert doc.embeddable_assets == [present]

    def test_pdf_without_converter_is_unembeddable(self, make_image):
        project = LatexProject(
            "main.tex",
            {"main.tex": "\\begin{figure}\\includegraphics{plot}\\caption{c}\\end{figure}"},
            {"plot.pdf": b"%PDF-1.4 fake"},
        )
        doc = ingest_document("pdf", project)
        (asset,) = doc.assets
        assert asset.needs_conversion
        assert asset.data is None
        assert asset.error.startswith("conversion failed")
        assert doc.diagnostics["asset_unconverted"] == 1

    def test_extension_order_prefers_png(self, make_image):
        project = LatexProject(
            "main.tex",
            {"main.tex": "\\begin{figure}\\includegraphics{plot}\\end{figure}"},
            {"plot.png": make_image(8, 8, 1), "plot.jpg": make_image(8, 8, 2, ".jpg")},
        )
        flat = flatten(project)
        structure = extract_structure(flat, normalize(flat))
        (asset,) = resolve_assets(project, structure)
        assert asset.path == "plot.png"


# ---------------------------------------------------------------------------
# Loading & persistence
# ---------------------------------------------------------------------------

class TestProjectLoading:
    def test_directory(self, tmp_path):
        (tmp_path / "sections").mkdir()
        (tmp_path / "main.tex").write_text("\\documentclass{article}\n\\input{sections/a}\n")
        (tmp_path / "sections" / "a.tex").write_text("Body.\n")
        (tmp_path / "notes.md").write_text("ignored")
        project = load_project(tmp_path)
        assert project.root_file == "main.tex"
        assert set(project.files) == {"main.tex", "sections/a.tex"}

    def test_root_detected_by_documentclass(self, tmp_path):
        (tmp_path / "appendix.tex").write_text("Appendix only.\n")
        (tmp_path / "zz-paper.tex").write_text("\\documentclass{article}\nBody\n")
        assert load_project(tmp_path).root_file == "zz-paper.tex"

    def test_tarball(self, tmp_path, make_image):
        archive = tmp_path / "2401.00001.tar.gz"
        members = {
            "ms.tex": b"\\documentclass{article}\n\\begin{figure}\\includegraphics{fig}\\end{figure}\n",
            "fig.png": make_image(8, 8),
        }
        with tarfile.open(archive, "w:gz") as tar:
            for name, data in members.items():
                info = tarfile.TarInfo(name)
                info.size = len(data)
                tar.addfile(info, io.BytesIO(data))
        project = load_project(archive)
        assert project.root_file == "ms.tex"
        assert set(project.assets) == {"fig.png"}

    def test_gzipped_single_file(self, tmp_path):
        archive = tmp_path / "2401.00002.gz"
        archive.write_bytes(gzip.compress(b"\\documentclass{article}\nSolo.\n"))
        project = load_project(archive)
        assert project.root_file == "main.tex"
        assert "Solo." in project.files["main.tex"]

    @pytest.mark.parametrize("name, data", [
        ("garbage.tar.gz", b"not an archive"),
        ("truncated.gz", gzip.compress(b"\\documentclass{article}\n" * 50)[:20]),
    ])
    def test_unreadable_archive(self, tmp_path, name, data):
        archive = tmp_path / name
        archive.write_bytes(data)
        with pytest.raises(UnreadableProject) as err:
            load_project(archive)
        assert err.value.path == str(archive)


class TestPersistence:
    def test_save_and_load(self, tmp_path):
        doc = ingest_document("figures", golden_projects()["figures"])
        save_ingested(doc, tmp_path)
        loaded = load_ingested(tmp_path / "figures")
        assert loaded.normalized == doc.normalized
        assert loaded.flat.text == doc.flat.text
        assert loaded.flat.origin_map == doc.flat.origin_map
        assert loaded.structure == doc.structure
        assert [a.data for a in loaded.assets] == [a.data for a in doc.assets]
        assert loaded.diagnostics.counts == doc.diagnostics.counts

    def test_load_corpus_sorted_and_filtered(self, tmp_path):
        for doc_id in ("b", "a", "c"):
            save_ingested(document_from_text(doc_id, f"text of {doc_id}"), tmp_path)
        assert [d.doc_id for d in load_ingested_corpus(tmp_path)] == ["a", "b", "c"]
        assert [d.doc_id for d in load_ingested_corpus(tmp_path, ["c", "a"])] == ["a", "c"]


# ---------------------------------------------------------------------------
# Golden corpus
# ---------------------------------------------------------------------------

GOLDEN_NORMALIZED = {
    "single": (
        "\\documentclass{article}\n"
        "\\begin{document}\n"
        "\\section{Introduction}\n"
        "Sparse retrieval  ranks documents.\n"
        "We use $\\mathbf{x} \\in \\mathbb{R}^d$ as in Eq.~.\n"
        "\\end{document}\n"
    ),
    "multifile": (
        "\\documentclass{article}\n"
        "\\begin{document}\n"
        "\\section{Intro}\n"
        "We study late interaction.\n"
        "\n\n"
        "\\section{Method}\n"
        "Scores are summed.\n"
        "\n\n"
        "\\end{document}\n"
    ),
    "comments": (
        "\\documentclass{article}\n"
        "\n"
        "\\begin{document}\n"
        "Discounts of 5\\% apply. \n"
        "\n"
        "Bold claim  holds.\n"
        "\\end{document}\n"
    ),
    "verbatim": (
        "\\documentclass{article}\n"
        "\\begin{document}\n"
        "Code listing:\n"
        "\\begin{verbatim}\n"
        "x = 5 % not a comment \\input{nothing} \\cite{kept}\n"
        "\\end{verbatim}\n"
        "After the listing .\n"
        "\\end{document}\n"
    ),
}


class TestGoldenCorpus:
    def test_multifile_flat_text_and_provenance(self):
        project = golden_projects()["multifile"]
        flat = flatten(project)
        assert flat.text == (
            "\\documentclass{article}\n\\begin{document}\n"
            "\\section{Intro}\nWe study \\emph{late interaction}.\n"
            "\n\n"
            "\\section{Method}\nScores are summed.\n"
            "\n\n\\end{document}\n"
        )
        assert [s.source_file for s in flat.origin_map] == [
            "main.tex", "sections/intro.tex", "main.tex", None, "sections/method.tex", None, "main.tex",
        ]

    @pytest.mark.parametrize("doc_id", sorted(GOLDEN_NORMALIZED))
    def test_normalized_output(self, doc_id):
        doc = ingest_document(doc_id, golden_projects()[doc_id])
        assert doc.normalized == GOLDEN_NORMALIZED[doc_id]

    @pytest.mark.parametrize("doc_id", sorted(set(golden_projects()) - {"cycle"}))
    def test_flatten_and_normalize_idempotent(self, doc_id):
        flat = flatten(golden_projects()[doc_id])
        again = flatten(LatexProject("main.tex", {"main.tex": flat.text}))
        assert again.text == flat.text
        once = normalize(flat)
        assert normalize(once) == once

    @pytest.mark.parametrize("doc_id", sorted(set(golden_projects()) - {"cycle"}))
    def test_ingestion_is_deterministic(self, doc_id):
        first = ingest_document(doc_id, golden_projects()[doc_id])
        second = ingest_document(doc_id, golden_projects()[doc_id])
        assert first.normalized == second.normalized
        assert first.structure == second.structure
        assert [a.data for a in first.assets] == [a.data for a in second.assets]

    def test_cycle_fails_without_affecting_others(self):
        outcomes = {}
        for doc_id, project in golden_projects().items():
            try:
                ingest_document(doc_id, project)
                outcomes[doc_id] = "ok"
            except IncludeCycle:
                outcomes[doc_id] = "cycle"
        assert outcomes.pop("cycle") == "cycle"
        assert set(outcomes.values()) == {"ok"}
