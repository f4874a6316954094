"""
HTTP transport shared by the embedding provider and the LLM stages.

- JSON POST with optional bearer token
- bounded retries with exponential backoff on transport errors, 429 and 5xx
- record / replay of every request-response pair for deterministic runs
"""

import hashlib
import json
import logging
import threading
import time
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence

import requests

from src.config import REQUEST_TIMEOUT, RETRY_BACKOFF_SECONDS
from src.errors import ServiceError
from src.utils import canonical_json, require

log = logging.getLogger(__name__)

FIXTURE_MODES = ("record", "replay", "off")
RETRYABLE_STATUS = {429, 500, 502, 503, 504}


class FixtureStore:
    """One JSON file per request, named by the SHA-256 of the canonical request."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self._lock = threading.Lock()

    @staticmethod
    def key(route: str, payload: Dict[str, Any]) -> str:
        return hashlib.sha256(canonical_json({"route": route, "payload": payload}).encode("utf-8")).hexdigest()

    def path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def load(self, route: str, payload: Dict[str, Any]) -> Optional[Dict[str, Any]]:
        path = self.path(self.key(route, payload))
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)["response"]

    def save(self, route: str, payload: Dict[str, Any], response: Dict[str, Any]):
        key = self.key(route, payload)
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            record = {"route": route, "request": payload, "response": response}
            self.path(key).write_text(
                json.dumps(record, sort_keys=True, indent=1, ensure_ascii=False),
                encoding="utf-8",
            )


class ServiceClient:
    def __init__(
        self,
        endpoint: Optional[str],
        token: Optional[str] = None,
        fixture_mode: str = "off",
        fixture_dir=None,
        timeout: float = REQUEST_TIMEOUT,
        backoff: Sequence[float] = RETRY_BACKOFF_SECONDS,
        session=None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        require(fixture_mode in FIXTURE_MODES, f"Unknown fixture mode: {fixture_mode}")
        require(
            fixture_mode == "off" or fixture_dir is not None,
            "Fixture record/replay needs a fixture directory",
        )
        require(
            fixture_mode == "replay" or bool(endpoint),
            "A service endpoint is required unless replaying fixtures",
        )
        self.endpoint = endpoint.rstrip("/") if endpoint else None
        self.token = token
        self.fixture_mode = fixture_mode
        self.fixtures = FixtureStore(fixture_dir) if fixture_dir is not None else None
        self.timeout = timeout
        self.backoff = tuple(backoff)
        self.session = session or requests.Session()
        self._sleep = sleep

    # ============================
    # TRANSPORT
    # ============================

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return headers

    def _send(self, route: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        url = f"{self.endpoint}/{route.lstrip('/')}"
        last_error = None

        for attempt in range(len(self.backoff) + 1):
            if attempt:
                delay = self.backoff[attempt - 1]
                log.warning("Retrying %s in %.1fs (attempt %d): %s", route, delay, attempt + 1, last_error)
                self._sleep(delay)
            try:
                response = self.session.post(
                    url, data=canonical_json(payload), headers=self._headers(), timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = str(exc)
                continue

            if response.status_code in RETRYABLE_STATUS:
                last_error = f"HTTP {response.status_code}"
                continue
            if response.status_code >= 400:
                raise ServiceError(f"{route}: HTTP {response.status_code}: {response.text[:200]}")
            try:
                body = response.json()
            except ValueError as exc:
                raise ServiceError(f"{route}: response is not JSON") from exc
            if not isinstance(body, dict):
                raise ServiceError(f"{route}: response is not a JSON object")
            return body

        raise ServiceError(f"{route}: giving up after {len(self.backoff) + 1} attempts: {last_error}")

    def post(self, route: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        """POST a JSON payload, honouring the fixture mode."""
        if self.fixture_mode == "replay":
            recorded = self.fixtures.load(route, payload)
            if recorded is None:
                raise ServiceError(f"{route}: no recorded fixture for request {FixtureStore.key(route, payload)[:12]}")
            return recorded

        body = self._send(route, payload)
        if self.fixture_mode == "record":
            self.fixtures.save(route, payload, body)
        return body
