"""Shared fixtures: the golden LaTeX corpus, image bytes, providers and an isolated audit db."""

from __future__ import annotations

from typing import Callable, Dict

import cv2
import numpy as np
import pytest

from src import config
from src.embedding import HashEmbeddingProvider
from src.latex_ingest import LatexProject


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def encode_image(width: int, height: int, value: int = 128, ext: str = ".png") -> bytes:
    image = np.full((height, width, 3), value % 256, dtype=np.uint8)
    image[0, 0] = (value * 7 % 256, value * 13 % 256, value * 31 % 256)
    ok, encoded = cv2.imencode(ext, image)
    assert ok
    return encoded.tobytes()


@pytest.fixture
def make_image() -> Callable[..., bytes]:
    return encode_image


# ---------------------------------------------------------------------------
# Golden corpus
# ---------------------------------------------------------------------------

SINGLE_MAIN = r"""\documentclass{article}
\begin{document}
\section{Introduction}
Sparse retrieval \cite{robertson2009} ranks documents.
We use $\mathbf{x} \in \mathbb{R}^d$ as in Eq.~\ref{eq:one}.% trailing comment
\end{document}
"""

MULTIFILE_MAIN = r"""\documentclass{article}
\begin{document}
\input{sections/intro}
\include{sections/method}
\end{document}
"""

COMMENTS_MAIN = r"""\documentclass{article}
% \input{drafts/unused}
\begin{document}
Discounts of 5\% apply. % a remark
%% whole line comment
\textbf{Bold claim} \footnote{with {nested} braces} holds.
\end{document}
"""

FIGURES_MAIN = r"""\documentclass{article}
\begin{document}
\section{Results}
Training converges quickly, see Figure~\ref{fig:loss}.
\begin{figure}[t]
\centering
\includegraphics[width=0.5\linewidth]{figs/loss}
\caption{Training loss decreases for \emph{gradient} batch sizes}
\label{fig:loss}
\end{figure}
Accuracy also improves.
\begin{figure*}
\includegraphics{figs/acc-a}
\includegraphics{figs/acc-b}
\caption{Accuracy panels}
\end{figure*}
\end{document}
"""

JPG_MAIN = r"""\documentclass{article}
\begin{document}
A photograph of the apparatus.
\begin{figure}
\includegraphics{photo.jpg}
\caption{The apparatus}
\end{figure}
\end{document}
"""

TABLES_MAIN = r"""\documentclass{article}
\begin{document}
\section{Evaluation}
\begin{table}
\caption{Retrieval quality}
\label{tab:quality}
\begin{tabular}{lc}
Method & nDCG \\
BM25 & 0.41 \\
\end{tabular}
\end{table}
\subsection{Ablation}
Removing captions hurts.
\end{document}
"""

TIKZ_MAIN = r"""\documentclass{article}
\usepackage{tikz}
\begin{document}
A schematic follows.
\begin{figure}
\begin{tikzpicture}\draw (0,0) -- (1,1);\end{tikzpicture}
\caption{Schematic}
\end{figure}
\end{document}
"""

VERBATIM_MAIN = r"""\documentclass{article}
\begin{document}
Code listing:
\begin{verbatim}
x = 5 % not a comment \input{nothing} \cite{kept}
\end{verbatim}
After the listing \cite{gone}.
\end{document}
"""

CYCLE_MAIN = r"""\documentclass{article}
\begin{document}
\input{a}
\end{document}
"""

MISSING_ASSET_MAIN = r"""\documentclass{article}
\begin{document}
Intro text.
\begin{figure}
\includegraphics{figs/present}
\caption{Present figure}
\end{figure}
\begin{figure}
\includegraphics{figs/absent}
\caption{Absent figure}
\end{figure}
\end{document}
"""


def golden_projects() -> Dict[str, LatexProject]:
    return {
        "single": LatexProject("main.tex", {"main.tex": SINGLE_MAIN}),
        "multifile": LatexProject("main.tex", {
            "main.tex": MULTIFILE_MAIN,
            "sections/intro.tex": "\\section{Intro}\nWe study \\emph{late interaction}.\n",
            "sections/method.tex": "\\section{Method}\nScores are summed.\n",
        }),
        "comments": LatexProject("main.tex", {"main.tex": COMMENTS_MAIN}),
        "figures": LatexProject(
            "main.tex",
            {"main.tex": FIGURES_MAIN},
            {
                "figs/loss.png": encode_image(64, 48, 10),
                "figs/acc-a.png": encode_image(32, 32, 20),
                "figs/acc-b.png": encode_image(32, 32, 30),
            },
        ),
        "jpgfig": LatexProject("main.tex", {"main.tex": JPG_MAIN}, {"photo.jpg": encode_image(40, 30, 90, ".jpg")}),
        "tables": LatexProject("main.tex", {"main.tex": TABLES_MAIN}),
        "tikz": LatexProject("main.tex", {"main.tex": TIKZ_MAIN}),
        "verbatim": LatexProject("main.tex", {"main.tex": VERBATIM_MAIN}),
        "cycle": LatexProject("main.tex", {
            "main.tex": CYCLE_MAIN,
            "a.tex": "Part a.\n\\input{b}\n",
            "b.tex": "Part b.\n\\input{a}\n",
        }),
        "missing-asset": LatexProject(
            "main.tex", {"main.tex": MISSING_ASSET_MAIN}, {"figs/present.png": encode_image(16, 16, 50)}
        ),
    }


@pytest.fixture
def golden() -> Dict[str, LatexProject]:
    return golden_projects()


# ---------------------------------------------------------------------------
# Providers & isolation
# ---------------------------------------------------------------------------

@pytest.fixture
def hash_provider() -> HashEmbeddingProvider:
    return HashEmbeddingProvider(dimension=4096)


@pytest.fixture(autouse=True)
def isolated_audit_db(tmp_path, monkeypatch):
    monkeypatch.setattr(config, "DATABASE_PATH", tmp_path / "audit.db")
    monkeypatch.setattr(config, "ENABLE_AUDIT_LOGGING", True)
    return tmp_path / "audit.db"
