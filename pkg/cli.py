"""
texdoc-retrieval command line.

    python cli.py ingest --corpus sources/ --out data/ingested
    python cli.py index --corpus data/ingested --rep text --index data/text.idx
    python cli.py eval --index data/text.idx --queries queries.jsonl --out data/eval

Exit codes: 0 success, 1 toolkit or input error, 2 usage error.
"""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

import pipeline_runner as runner
from src.config import APP_NAME, LOG_LEVEL, PRECISION_CHOICES, REPRESENTATION_CHOICES, load_run_config
from src.errors import ToolkitError
from src.utils import setup_logging

log = logging.getLogger("cli")

# argparse dest -> RunConfig field
FLAG_FIELDS = {
    "corpus": "corpus",
    "rep": "representation",
    "provider": "provider",
    "provider_name": "provider_name",
    "provider_mode": "provider_mode",
    "provider_modality": "provider_modality",
    "provider_endpoint": "provider_endpoint",
    "llm_endpoint": "llm_endpoint",
    "dimension": "dimension",
    "patch_size": "patch_size",
    "chunk_size": "chunk_size",
    "overlap": "overlap",
    "max_pixels": "max_pixels",
    "precision": "precision",
    "bm25_k1": "bm25_k1",
    "bm25_b": "bm25_b",
    "k": "k",
    "cutoff": "cutoff",
    "overlap_threshold": "overlap_threshold",
    "seed": "seed",
    "fixtures": "fixtures",
    "fixture_dir": "fixture_dir",
    "workers": "workers",
    "lenient": "lenient",
    "out": "out",
    "index": "index",
    "queries": "queries",
    "captions": "captions",
    "pages_dir": "pages_dir",
}


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--log-level", default=None)
    p.add_argument("--corpus")
    p.add_argument("--rep", choices=REPRESENTATION_CHOICES)
    p.add_argument("--provider", choices=("hash", "remote"))
    p.add_argument("--provider-name")
    p.add_argument("--provider-mode", choices=("single", "multi"))
    p.add_argument("--provider-modality", choices=("text", "image", "multimodal"))
    p.add_argument("--provider-endpoint")
    p.add_argument("--llm-endpoint")
    p.add_argument("--dimension", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--overlap", type=int)
    p.add_argument("--max-pixels", type=int)
    p.add_argument("--precision", choices=tuple(PRECISION_CHOICES))
    p.add_argument("--bm25-k1", type=float)
    p.add_argument("--bm25-b", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--cutoff", type=int)
    p.add_argument("--overlap-threshold", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--fixtures", choices=("record", "replay", "off"))
    p.add_argument("--fixture-dir")
    p.add_argument("--workers", type=int)
    p.add_argument("--lenient", action="store_true", default=None)
    p.add_argument("--out")
    p.add_argument("--index")
    p.add_argument("--queries")
    p.add_argument("--captions")
    p.add_argument("--pages-dir")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog=APP_NAME, description="Scientific document retrieval from LaTeX sources")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", parents=[common], help="flatten, normalize and parse LaTeX projects")
    sub.add_parser("index", parents=[common], help="build and embed a representation index")

    search = sub.add_parser("search", parents=[common], help="rank documents for one query")
    search.add_argument("query")

    sub.add_parser("eval", parents=[common], help="nDCG@k of a query file against an index")
    sub.add_parser("filter-queries", parents=[common], help="BM25 difficulty filter")

    gen = sub.add_parser("gen-queries", parents=[common], help="generate, rewrite, filter and verify queries")
    gen.add_argument("--evidence-types", default="text,table,figure")

    scaling = sub.add_parser("analyze-scaling", parents=[common], help="context-window scaling study")
    scaling.add_argument("--docs", nargs="*", help="document ids (default: whole corpus)")
    scaling.add_argument("--sizes", help="comma-separated window sizes")
    scaling.add_argument("--query-len", type=int)

    sub.add_parser("analyze-figures", parents=[common], help="figure-text chunk diagnostics")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {field: getattr(args, dest, None) for dest, field in FLAG_FIELDS.items()}


def _dispatch(args: argparse.Namespace, config) -> None:
    command = args.command
    if command == "ingest":
        report = runner.cmd_ingest(config)
        if not report["ingested"] and report["failures"]:
            raise ToolkitError("every document failed to ingest")
    elif command == "index":
        runner.cmd_index(config)
    elif command == "search":
        runner.cmd_search(config, args.query)
    elif command == "eval":
        runner.cmd_eval(config)
    elif command == "filter-queries":
        runner.cmd_filter(config)
    elif command == "gen-queries":
        types = [t.strip() for t in args.evidence_types.split(",") if t.strip()]
        runner.cmd_gen_queries(config, types)
    elif command == "analyze-scaling":
        kwargs: Dict[str, Any] = {}
        if args.sizes:
            kwargs["sizes"] = [int(s) for s in args.sizes.split(",")]
        if args.query_len:
            kwargs["query_len"] = args.query_len
        runner.cmd_analyze_scaling(config, args.docs or None, **kwargs)
    elif command == "analyze-figures":
        runner.cmd_analyze_figures(config)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or LOG_LEVEL)

    try:
        config = load_run_config(args.config, _overrides(args))
        _dispatch(args, config)
    except ToolkitError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
