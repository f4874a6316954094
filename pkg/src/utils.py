"""
Shared utility helpers used across the toolkit.
Standard library only; nothing here touches numpy or the filesystem.
"""

import hashlib
import json
import logging
import re
import time
import uuid
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Tuple

log = logging.getLogger(__name__)

_TOKEN = re.compile(r"\S+")


# ============================
# TIME UTILITIES
# ============================

def utc_now_iso() -> str:
    """Timestamp for audit rows, e.g. 2026-01-01T12:00:00.000000+00:00."""
    return datetime.now(timezone.utc).isoformat()


def epoch_ms() -> int:
    """Wall clock in integer milliseconds."""
    return int(time.time() * 1000)


# ============================
# ID GENERATION
# ============================

def generate_run_id(prefix: str = "RUN") -> str:
    """
    Generate a readable, collision-resistant run ID.

    Example:
        RUN-1700000000000-a3f9c2
    """
    short_uuid = uuid.uuid4().hex[:6]
    return f"{prefix}-{epoch_ms()}-{short_uuid}"


def fingerprint(parts: Iterable[str]) -> str:
    """SHA-256 over an ordered sequence of strings."""
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part.encode("utf-8"))
        digest.update(b"\x00")
    return digest.hexdigest()


# ============================
# JSON HELPERS
# ============================

def json_dumps_safe(obj: Any, sort_keys: bool = False, indent: int | None = None) -> str:
    """json.dumps that falls back to str() for paths, enums and numpy scalars."""
    return json.dumps(
        obj, default=str, ensure_ascii=False, sort_keys=sort_keys, indent=indent
    )


def json_loads_safe(data: str | None) -> Dict[str, Any]:
    """Parse a stored JSON object; None, garbage or a non-object all give {}."""
    if not data:
        return {}
    try:
        loaded = json.loads(data)
    except json.JSONDecodeError:
        return {}
    return loaded if isinstance(loaded, dict) else {}


def canonical_json(obj: Any) -> str:
    """Compact, key-sorted JSON used for hashing and byte-stable artifacts."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# ============================
# TEXT HELPERS
# ============================

def whitespace_tokens(text: str) -> List[Tuple[str, int, int]]:
    """Whitespace-delimited tokens with their character spans."""
    return [(m.group(0), m.start(), m.end()) for m in _TOKEN.finditer(text)]


# ============================
# VALIDATION HELPERS
# ============================

def require(condition: bool, message: str, exc: type = ValueError):
    """
    Raise `exc` (ValueError by default) if condition is False.
    """
    if not condition:
        raise exc(message)


# ============================
# DIAGNOSTICS
# ============================

@dataclass
class Diagnostics:
    """Tally of non-fatal problems met while processing one object."""

    counts: Counter = field(default_factory=Counter)
    messages: List[str] = field(default_factory=list)

    def add(self, code: str, message: str = ""):
        self.counts[code] += 1
        if message:
            self.messages.append(f"{code}: {message}")
            log.debug("%s: %s", code, message)

    def merge(self, other: "Diagnostics"):
        self.counts.update(other.counts)
        self.messages.extend(other.messages)

    def __getitem__(self, code: str) -> int:
        return self.counts[code]

    def to_dict(self) -> Dict[str, Any]:
        return {"counts": dict(sorted(self.counts.items())), "messages": list(self.messages)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Diagnostics":
        return cls(Counter(data.get("counts", {})), list(data.get("messages", [])))


# ============================
# LOGGING
# ============================

def setup_logging(level: str = "INFO"):
    """Configure the root logger once for CLI runs."""
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
