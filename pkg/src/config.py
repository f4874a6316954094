"""
Global configuration for the LaTeX document retrieval toolkit.

This module should be the ONLY place that reads environment variables.
All other modules must import from here.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv

from src.errors import ConfigError
from src.utils import require

# Load .env file if present
load_dotenv()


def _env_int(name: str, default: int) -> int:
    return int(os.getenv(name, str(default)))


def _env_float(name: str, default: float) -> float:
    return float(os.getenv(name, str(default)))


# ============================
# APPLICATION METADATA
# ============================

APP_NAME: str = os.getenv("APP_NAME", "texdoc-retrieval")

LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

# ============================
# DATA & STORAGE PATHS
# ============================

BASE_DIR: Path = Path(__file__).resolve().parent.parent

DATA_DIR: Path = BASE_DIR / os.getenv("DATA_DIR", "data")
DATABASE_PATH: Path = BASE_DIR / os.getenv("DATABASE_PATH", "data/audit.db")
FIXTURE_DIR: Path = BASE_DIR / os.getenv("FIXTURE_DIR", "data/fixtures")

# ============================
# REPRESENTATION DEFAULTS
# ============================

CHUNK_SIZE: int = _env_int("CHUNK_SIZE", 512)
CHUNK_OVERLAP: int = _env_int("CHUNK_OVERLAP", 0)
MAX_PIXELS: int = _env_int("MAX_PIXELS", 1_000_000)

# Bytes per stored vector value: 4 (f32) or 2 (f16)
PRECISION: int = _env_int("PRECISION", 4)

# ============================
# RETRIEVAL & EVALUATION
# ============================

BM25_K1: float = _env_float("BM25_K1", 1.2)
BM25_B: float = _env_float("BM25_B", 0.75)

DIFFICULTY_CUTOFF: int = _env_int("DIFFICULTY_CUTOFF", 5)
NDCG_K: int = _env_int("NDCG_K", 10)

OVERLAP_THRESHOLD: float = _env_float("OVERLAP_THRESHOLD", 0.3)
NEAR_FIGURE_WINDOW: int = _env_int("NEAR_FIGURE_WINDOW", 2)

SCALING_SIZES: Tuple[int, ...] = (500, 1000, 4000, 8000)
SCALING_QUERY_LEN: int = 100

SEED: int = _env_int("SEED", 0)
WORKERS: int = _env_int("WORKERS", os.cpu_count() or 1)

# Tokens of document text handed to the generation prompt
TEXT_EVIDENCE_MAX_TOKENS: int = _env_int("TEXT_EVIDENCE_MAX_TOKENS", 2048)

# ============================
# EXTERNAL SERVICES
# ============================

PROVIDER_ENDPOINT: Optional[str] = os.getenv("PROVIDER_ENDPOINT") or None
PROVIDER_TOKEN: Optional[str] = os.getenv("PROVIDER_TOKEN") or None
LLM_ENDPOINT: Optional[str] = os.getenv("LLM_ENDPOINT") or None

FIXTURE_MODE: str = os.getenv("FIXTURE_MODE", "off")
REQUEST_TIMEOUT: float = _env_float("REQUEST_TIMEOUT", 60.0)

# Sleep before each retry; attempts = 1 + len(RETRY_BACKOFF_SECONDS)
RETRY_BACKOFF_SECONDS: Tuple[float, ...] = (1.0, 2.0, 4.0)

# Share of units allowed to fail before an embedding run aborts
FAILURE_THRESHOLD: float = _env_float("FAILURE_THRESHOLD", 0.01)

EMBED_BATCH_SIZE: int = _env_int("EMBED_BATCH_SIZE", 16)

# ============================
# EXTERNAL COMMANDS
# ============================

ASSET_CONVERTER: Optional[str] = os.getenv("ASSET_CONVERTER") or None
ASSET_CONVERT_TEMPLATE: str = os.getenv(
    "ASSET_CONVERT_TEMPLATE", "{converter} {in} {out}"
)

# Renders <dir>/main.tex into <out>/page-%04d.png
PAGE_RENDER_TEMPLATE: Optional[str] = os.getenv("PAGE_RENDER_TEMPLATE") or None

# ============================
# LOGGING / AUDIT
# ============================

ENABLE_AUDIT_LOGGING: bool = os.getenv(
    "ENABLE_AUDIT_LOGGING", "true"
).lower() == "true"


# ============================
# RUN CONFIGURATION
# ============================

REPRESENTATION_CHOICES = ("text", "text+captions", "figures", "doc-image", "interleaved")
PRECISION_CHOICES = {"f32": 4, "f16": 2}
FIXTURE_CHOICES = ("record", "replay", "off")


@dataclass
class RunConfig:
    """
    Everything one CLI invocation needs.

    Loaded from an optional JSON file, then overridden by flags.
    """

    corpus: Optional[str] = None
    representation: str = "text"
    provider: str = "hash"
    provider_name: str = "hash-embed"
    provider_mode: str = "single"
    provider_modality: str = "text"
    provider_endpoint: Optional[str] = PROVIDER_ENDPOINT
    llm_endpoint: Optional[str] = LLM_ENDPOINT
    dimension: int = 1024
    patch_size: Optional[int] = None
    chunk_size: int = CHUNK_SIZE
    overlap: int = CHUNK_OVERLAP
    max_pixels: Optional[int] = MAX_PIXELS
    precision: str = "f16" if PRECISION == 2 else "f32"
    bm25_k1: float = BM25_K1
    bm25_b: float = BM25_B
    k: int = NDCG_K
    cutoff: int = DIFFICULTY_CUTOFF
    overlap_threshold: float = OVERLAP_THRESHOLD
    seed: int = SEED
    fixtures: str = FIXTURE_MODE
    fixture_dir: str = str(FIXTURE_DIR)
    workers: int = WORKERS
    lenient: bool = False
    out: Optional[str] = None
    index: Optional[str] = None
    queries: Optional[str] = None
    captions: Optional[str] = None
    pages_dir: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def precision_bytes(self) -> int:
        return PRECISION_CHOICES[self.precision]

    def validate(self) -> "RunConfig":
        require(
            self.representation in REPRESENTATION_CHOICES,
            f"Unknown representation: {self.representation}", ConfigError,
        )
        require(
            self.precision in PRECISION_CHOICES,
            f"Unknown precision: {self.precision}", ConfigError,
        )
        require(self.fixtures in FIXTURE_CHOICES, f"Unknown fixture mode: {self.fixtures}", ConfigError)
        require(self.provider in ("hash", "remote"), f"Unknown provider: {self.provider}", ConfigError)
        require(self.provider_mode in ("single", "multi"), "provider_mode must be single or multi", ConfigError)
        require(
            self.provider_modality in ("text", "image", "multimodal"),
            "provider_modality must be text, image or multimodal", ConfigError,
        )
        require(self.chunk_size >= 1, "chunk_size must be >= 1", ConfigError)
        require(0 <= self.overlap < self.chunk_size, "overlap must satisfy 0 <= overlap < chunk_size", ConfigError)
        require(self.max_pixels is None or self.max_pixels >= 1, "max_pixels must be positive", ConfigError)
        require(self.dimension >= 2, "dimension must be >= 2", ConfigError)
        require(self.bm25_k1 >= 0, "bm25 k1 must be >= 0", ConfigError)
        require(0 <= self.bm25_b <= 1, "bm25 b must lie in [0, 1]", ConfigError)
        require(self.k >= 1 and self.cutoff >= 1, "k and cutoff must be >= 1", ConfigError)
        require(self.workers >= 1, "workers must be >= 1", ConfigError)
        require(
            self.provider != "remote" or bool(self.provider_endpoint) or self.fixtures == "replay",
            "Remote provider needs --provider-endpoint (or fixture replay)", ConfigError,
        )
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build a RunConfig: defaults < JSON config file < explicit overrides.

    Overrides whose value is None are ignored so unset CLI flags
    never clobber the config file.
    """
    values: Dict[str, Any] = {}
    known = {f.name for f in fields(RunConfig)}

    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"Cannot read config file {path}: {exc}") from exc
        require(isinstance(loaded, dict), "Config file must hold a JSON object", ConfigError)
        unknown = sorted(set(loaded) - known)
        require(not unknown, f"Unknown config keys: {unknown}", ConfigError)
        values.update(loaded)

    for key, value in (overrides or {}).items():
        if value is not None and key in known:
            values[key] = value

    return RunConfig(**values).validate()
