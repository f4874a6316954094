"""Tests for the shared HTTP transport: retries, error mapping and fixture record / replay."""

from __future__ import annotations

import json

import pytest
import requests

from src.errors import ServiceError
from src.service_client import FixtureStore, ServiceClient


class _Response:
    def __init__(self, status_code: int, body=None):
        self.status_code = status_code
        self._body = body
        self.text = json.dumps(body) if body is not None else "oops"

    def json(self):
        if self._body is None:
            raise ValueError("not json")
        return self._body


class _ScriptedSession:
    """Plays back a list of responses (or exceptions) in order."""

    def __init__(self, script):
        self.script = list(script)
        self.calls = []

    def post(self, url, data, headers, timeout):
        self.calls.append({"url": url, "data": json.loads(data), "headers": headers})
        step = self.script.pop(0)
        if isinstance(step, Exception):
            raise step
        return step


class _NoNetwork:
    def post(self, *args, **kwargs):
        raise AssertionError("network used during replay")


def _client(session, sleeps, **kwargs):
    return ServiceClient("http://svc.test/", session=session, sleep=sleeps.append, **kwargs)


# ---------------------------------------------------------------------------
# Transport
# ---------------------------------------------------------------------------

class TestRetries:
    def test_success_first_try(self):
        sleeps = []
        session = _ScriptedSession([_Response(200, {"ok": 1})])
        assert _client(session, sleeps).post("embed", {"a": 1}) == {"ok": 1}
        assert session.calls[0]["url"] == "http://svc.test/embed"
        assert sleeps == []

    def test_retries_server_errors_with_backoff(self):
        sleeps = []
        session = _ScriptedSession([_Response(503), _Response(429), _Response(200, {"ok": 1})])
        assert _client(session, sleeps).post("embed", {}) == {"ok": 1}
        assert sleeps == [1.0, 2.0]

    def test_gives_up_after_four_attempts(self):
        sleeps = []
        session = _ScriptedSession([_Response(500)] * 4)
        with pytest.raises(ServiceError):
            _client(session, sleeps).post("embed", {})
        assert len(session.calls) == 4
        assert sleeps == [1.0, 2.0, 4.0]

    def test_transport_errors_are_retried(self):
        sleeps = []
        session = _ScriptedSession([requests.ConnectionError("reset"), _Response(200, {"ok": 2})])
        assert _client(session, sleeps).post("embed", {}) == {"ok": 2}
        assert sleeps == [1.0]

    def test_client_errors_are_not_retried(self):
        sleeps = []
        session = _ScriptedSession([_Response(400)])
        with pytest.raises(ServiceError):
            _client(session, sleeps).post("embed", {})
        assert len(session.calls) == 1

    def test_non_json_body(self):
        with pytest.raises(ServiceError):
            _client(_ScriptedSession([_Response(200)]), []).post("embed", {})

    def test_bearer_token(self):
        session = _ScriptedSession([_Response(200, {})])
        _client(session, [], token="secret").post("complete", {})
        assert session.calls[0]["headers"]["Authorization"] == "Bearer secret"

    def test_endpoint_required_unless_replaying(self):
        with pytest.raises(ValueError):
            ServiceClient(None)


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------

class TestFixtures:
    def test_key_ignores_dict_order(self):
        assert FixtureStore.key("r", {"a": 1, "b": 2}) == FixtureStore.key("r", {"b": 2, "a": 1})
        assert FixtureStore.key("r", {"a": 1}) != FixtureStore.key("s", {"a": 1})

    def test_record_then_replay(self, tmp_path):
        session = _ScriptedSession([_Response(200, {"vectors": [[0.5]]})])
        recorder = _client(session, [], fixture_mode="record", fixture_dir=tmp_path)
        recorded = recorder.post("embed", {"inputs": ["x"]})

        replayer = ServiceClient(None, fixture_mode="replay", fixture_dir=tmp_path, session=_NoNetwork())
        assert replayer.post("embed", {"inputs": ["x"]}) == recorded
        assert len(list(tmp_path.glob("*.json"))) == 1

    def test_replay_miss(self, tmp_path):
        replayer = ServiceClient(None, fixture_mode="replay", fixture_dir=tmp_path, session=_NoNetwork())
        with pytest.raises(ServiceError):
            replayer.post("embed", {"inputs": ["unseen"]})
