"""
Prompt templates for the LLM stages of the query pipeline.

Each template carries an id (sent to the service with the variables so a
hosted prompt can be used instead of the rendered text) and the JSON keys
its answer must contain. Literal braces in the text are doubled for
str.format.
"""

from dataclasses import dataclass
from typing import Dict, Tuple

from src.utils import require

FAILURE_LABELS = (
    "underspecified_parameter",
    "still_context_bound",
    "domain_missing_or_vague",
    "ambiguity_pronouns_placeholders",
    "unanswerable_generic",
)


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    text: str
    variables: Tuple[str, ...]
    output_keys: Tuple[str, ...]

    def render(self, values: Dict[str, str]) -> str:
        missing = [v for v in self.variables if v not in values]
        require(not missing, f"{self.template_id}: missing variables {missing}")
        return self.text.format(**{v: values[v] for v in self.variables})


# ============================
# Generation
# ============================

_GENERATION_TASK = (
    "Your task is to generate a single, high-quality synthetic query that would "
    "meaningfully test a document retrieval system.\n\n"
)

_GENERATION_BODY = """\
Instructions:
1. The query must require expert-level reasoning over implications, trends, limitations, or constraints discussed in the document, and must not be a direct restatement of any sentence from the input.
2. The query must minimize lexical overlap with the input text by avoiding distinctive phrases or terminology, relying instead on abstraction and paraphrasing rather than keyword matching.
3. The query must be answerable from the document but not trivially retrievable via keyword or phrase matching, and must not reference sections, figures, experiments, or document-specific wording.
4. The query must ask exactly one focused question, without combining multiple sub-questions or enumerating parameters or conditions.
5. The query must be realistic and concise, phrased as a single sentence that a knowledgeable researcher would plausibly ask, without verbose framing or artificial difficulty.
6. If no query satisfying these criteria can be generated, return null.

Required Output Format:
{{
  "query": "<generated question or null>"
}}

Here is the document content:
{paper_text}"""


def _generation(kind: str, lead: str) -> PromptTemplate:
    return PromptTemplate(
        template_id=f"generate.{kind}.v1",
        text=lead + " " + _GENERATION_TASK + _GENERATION_BODY,
        variables=("paper_text",),
        output_keys=("query",),
    )


GENERATE_TEXT = _generation(
    "text", "You are given extracted text from a scientific research paper."
)
GENERATE_TABLE = _generation(
    "table", "You are given a table from a scientific research paper, as its LaTeX source."
)
GENERATE_FIGURE = _generation(
    "figure",
    "You are given a figure from a scientific research paper, as the attached image "
    "followed by its caption.",
)

# ============================
# Decontextualization
# ============================

DECONTEXTUALIZE = PromptTemplate(
    template_id="decontextualize.v1",
    text="""\
You are a scientific question rewriter. You are given an original question that references a specific portion of a research paper. Your task is to rewrite it into a context-independent, open-domain scientific query that targets the same underlying concept, without relying on document-local or visual references.

Do not refer to any figure, plot, panel, image, document, or use deictic expressions such as this, that, above, or below.

Requirements:
1. Preserve the core scientific intent, variables, and conditions present in the original question.
2. Replace visual or deictic phrasing with concept-level wording (e.g., remove references such as "based on the graph" and ask directly about the relationship or effect).
3. If symbols (e.g., $f_{{\\text{{spec}}}}$) appear without definition, retain them exactly as written and do not invent meanings. A minimal parenthetical alias may be included only if it appears in the input.
4. Remove all references to figures, plots, tables, panels, or document-local indices.
5. Ensure the rewritten query can be answered by a knowledgeable reader without access to the original document or image.
6. Retain units, ranges, and experimental or observational conditions if present.
7. Avoid unresolved pronouns or placeholders (e.g., "the parameter", "the system") unless the domain makes them unambiguous.
8. If the original question contains multiple sub-questions, keep only one and discard the rest.
9. The final query must be a single, concise sentence with no superfluous framing or background.

Required Output Format:
{{
  "query": "<single rewritten question or null>",
  "reasoning": "<one-sentence rationale>"
}}

If a valid context-independent query cannot be produced, set "query" to null and briefly explain why in "reasoning".

Original question:
{query}""",
    variables=("query",),
    output_keys=("query", "reasoning"),
)

# ============================
# Verification
# ============================

VERIFY = PromptTemplate(
    template_id="verify.v1",
    text="""\
You are a validator that checks whether a decontextualized question is well-formed for open-domain retrieval.
Judge only from the provided JSON fields. Do not assume access to the original figure, table, or paper.

What "valid decontextualized question" means:

A question is valid if and only if all of the following criteria are satisfied:
1. Context-independent: The question contains no references to local context such as "this figure," "the table above," "these results," or any indexical phrasing that requires the original document or image.
2. Answerable in principle: A knowledgeable person or external source could answer the question without access to the original paper or figure. The domain and variables must be sufficiently specified. Crucially, the question must not rely on parameters, symbols, or notations that are defined arbitrarily or only within the source paper (e.g., a tuning parameter with no standard meaning in the field).
3. Intent preserved: The question targets the same underlying information need as the original question, but generalized beyond the local figure or document context.
4. Clarity and unambiguous entities: Any entities, variables, or notations must be interpretable by an expert in the relevant field without requiring the specific paper. Unresolved pronouns or placeholders (e.g., "the parameter," "the system") are not allowed unless they are standard and unambiguous within the domain.

Guiding Principle for Ambiguity:

Requiring background domain knowledge is acceptable and expected for real search queries. However, ambiguity arising from terms that are defined only within the source document or that depend on the original figure context is not acceptable.

Common failure modes (label them if present):
- underspecified_parameter (especially if defined arbitrarily in the source paper)
- still_context_bound
- domain_missing_or_vague
- ambiguity_pronouns_placeholders
- unanswerable_generic

Required Output Format (JSON only):
{{
  "is_valid": boolean,
  "score": integer,
  "decision_rationale": string,
  "confidence": integer
}}

{{
  "original_question": "{original}",
  "decontextualized_question": "{query}"
}}""",
    variables=("original", "query"),
    output_keys=("is_valid", "score", "decision_rationale", "confidence"),
)

GENERATION_TEMPLATES = {
    "text": GENERATE_TEXT,
    "table": GENERATE_TABLE,
    "figure": GENERATE_FIGURE,
}

TEMPLATES = {
    t.template_id: t
    for t in (GENERATE_TEXT, GENERATE_TABLE, GENERATE_FIGURE, DECONTEXTUALIZE, VERIFY)
}
