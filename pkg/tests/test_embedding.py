"""Tests for embedding providers.

These tests cover:
 - the pixel budget: resize_for_budget, estimate_visual_tokens, prepare_image
 - hash embeddings in single- and multi-vector mode
 - embed_units() ordering, modality checks, failure accounting and norm checks
 - the remote provider wire format against a fake HTTP session
"""

from __future__ import annotations

import base64
import json
import math
from typing import List

import numpy as np
import pytest

from src.embedding import (
    EmbedInput,
    EmbeddingProvider,
    HashEmbeddingProvider,
    ProviderDescriptor,
    RemoteEmbeddingProvider,
    UnitEmbedding,
    embed_query,
    embed_units,
    estimate_visual_tokens,
    hash_embed,
    image_size,
    prepare_image,
    resize_for_budget,
)
from src.errors import ImageDecodeError, ModalityMismatch, ProviderError, ServiceError
from src.representations import EmbeddingUnit, UnitKind
from src.service_client import ServiceClient


def _text_unit(i: int, text: str = None) -> EmbeddingUnit:
    return EmbeddingUnit(f"d{i % 3}", f"d{i % 3}#text-{i:04d}", UnitKind.TEXT_CHUNK, text=text or f"word{i} common")


class _FakeResponse:
    def __init__(self, status_code: int, body=None, text: str = ""):
        self.status_code = status_code
        self._body = body
        self.text = text

    def json(self):
        if self._body is None:
            raise ValueError("no json")
        return self._body


class _EchoSession:
    """Answers the embed route with one constant vector set per input."""

    def __init__(self, dimension: int, rows: int = 1, reported_dimension: int = None):
        self.dimension = dimension
        self.rows = rows
        self.reported_dimension = reported_dimension or dimension
        self.payloads: List[dict] = []

    def post(self, url, data, headers, timeout):
        payload = json.loads(data)
        self.payloads.append(payload)
        vector = [1.0] + [0.0] * (self.dimension - 1)
        return _FakeResponse(200, {
            "vectors": [[vector] * self.rows for _ in payload["inputs"]],
            "dimension": self.reported_dimension,
            "normalized": True,
        })


# ---------------------------------------------------------------------------
# Pixel budget
# ---------------------------------------------------------------------------

class TestPixelBudget:
    def test_never_exceeds_budget(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            width = int(rng.integers(1, 6000))
            height = int(rng.integers(1, 6000))
            budget = int(rng.integers(1, 4_000_000))
            w, h = resize_for_budget(width, height, budget)
            assert 1 <= w <= width
            assert 1 <= h <= height
            assert w * h <= budget
            assert resize_for_budget(w, h, budget) == (w, h)

    def test_under_budget_is_unchanged(self):
        assert resize_for_budget(640, 480, 640 * 480) == (640, 480)

    def test_halves_both_sides(self):
        assert resize_for_budget(2000, 1000, 500_000) == (1000, 500)

    def test_aspect_ratio_within_rounding(self):
        w, h = resize_for_budget(3000, 1000, 300_000)
        assert abs(w / h - 3.0) < 3.0 / h + 1e-9

    def test_visual_tokens(self):
        assert estimate_visual_tokens(28, 28, 14) == 4
        assert estimate_visual_tokens(29, 28, 14) == 6
        assert estimate_visual_tokens(1, 1, 14) == 1

    def test_prepare_image_downscales(self, make_image):
        blob = make_image(200, 100)
        resized = prepare_image(blob, 5000)
        w, h = image_size(resized)
        assert w * h <= 5000
        assert w / h == pytest.approx(2.0, rel=0.05)

    def test_prepare_image_passthrough(self, make_image):
        blob = make_image(20, 10)
        assert prepare_image(blob, 1000) is blob
        assert prepare_image(blob, None) is blob

    def test_undecodable_image(self):
        with pytest.raises(ImageDecodeError):
            prepare_image(b"not an image", 100)


# ---------------------------------------------------------------------------
# Descriptors & UnitEmbedding
# ---------------------------------------------------------------------------

class TestDescriptor:
    def test_multi_vector_image_provider_needs_patch_size(self):
        with pytest.raises(ValueError):
            ProviderDescriptor("vlm", "image", "multi", 128, True)

    def test_round_trip_dict(self):
        d = ProviderDescriptor("vlm", "multimodal", "multi", 128, True, 1_000_000, 14)
        assert ProviderDescriptor.from_dict(d.to_dict()) == d


class TestUnitEmbedding:
    def test_reshapes_single_vector(self):
        e = UnitEmbedding("u", "d", np.ones(8))
        assert e.vectors.shape == (1, 8)
        assert e.vectors.dtype == np.float32
        assert e.nbytes == 32

    def test_half_precision(self):
        e = UnitEmbedding("u", "d", np.ones((3, 8)), precision=2)
        assert e.vectors.dtype == np.float16
        assert e.nbytes == 3 * 8 * 2

    def test_rejects_unknown_precision(self):
        with pytest.raises(ValueError):
            UnitEmbedding("u", "d", np.ones(4), precision=8)


# ---------------------------------------------------------------------------
# Hash provider
# ---------------------------------------------------------------------------

class TestHashEmbedding:
    def test_unit_norm_and_deterministic(self):
        a = hash_embed("late interaction retrieval", 256)
        b = hash_embed("late interaction retrieval", 256)
        assert np.linalg.norm(a.vectors) == pytest.approx(1.0, abs=1e-6)
        assert a == b

    def test_empty_text(self):
        e = hash_embed("  ", 64)
        assert not e.normalized
        assert not np.any(e.vectors)

    def test_single_vector_mode(self, hash_provider):
        (matrix,) = hash_provider.embed_batch([EmbedInput(text="a b a")])
        assert matrix.shape == (1, 4096)

    def test_multi_vector_mode_one_row_per_token(self):
        provider = HashEmbeddingProvider(64, vector_mode="multi")
        (matrix,) = provider.embed_batch([EmbedInput(text="a b a")])
        assert matrix.shape == (3, 64)
        assert np.array_equal(matrix[0], matrix[2])
        assert np.allclose(np.linalg.norm(matrix, axis=1), 1.0)

    def test_multi_vector_images_yield_patch_rows(self, make_image):
        provider = HashEmbeddingProvider(64, vector_mode="multi", modality="image", patch_size=14)
        (matrix,) = provider.embed_batch([EmbedInput(images=(make_image(28, 28),))])
        assert matrix.shape == (4, 64)

    def test_identical_images_embed_identically(self, make_image):
        provider = HashEmbeddingProvider(4096, modality="image")
        a, b, c = provider.embed_batch([
            EmbedInput(images=(make_image(8, 8, 1),)),
            EmbedInput(images=(make_image(8, 8, 1),)),
            EmbedInput(images=(make_image(8, 8, 2),)),
        ])
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_query_embedding(self, hash_provider):
        q = embed_query("what is maxsim", hash_provider, "q1")
        assert q.unit_id == "q1"
        assert q.normalized
        assert not embed_query(" ", hash_provider).normalized


# ---------------------------------------------------------------------------
# embed_units
# ---------------------------------------------------------------------------

class _FlakyProvider(EmbeddingProvider):
    def __init__(self, failing: set, normalized: bool = True):
        self.descriptor = ProviderDescriptor("flaky", "text", "single", 4, True)
        self.failing = failing
        self.normalized = normalized

    def embed_batch(self, inputs):
        out = []
        for item in inputs:
            if item.text in self.failing:
                raise ServiceError(f"boom on {item.text}")
            vector = np.array([[1.0, 0.0, 0.0, 0.0]], dtype=np.float32)
            out.append(vector if self.normalized else vector * 3)
        return out


class TestEmbedUnits:
    def test_order_is_preserved_under_concurrency(self, hash_provider):
        units = [_text_unit(i) for i in range(37)]
        sequential = embed_units(units, hash_provider, batch=4, workers=1)
        parallel = embed_units(units, hash_provider, batch=4, workers=4)
        assert [e.unit_id for e in parallel] == [u.unit_id for u in units]
        assert sequential == parallel

    def test_modality_mismatch(self, hash_provider, make_image):
        unit = EmbeddingUnit("d", "d#fig-000-00", UnitKind.FIGURE, images=(make_image(8, 8),))
        with pytest.raises(ModalityMismatch):
            embed_units([unit], hash_provider)

    def test_interleaved_needs_multimodal(self, make_image):
        unit = EmbeddingUnit("d", "d#inter-0000", UnitKind.INTERLEAVED, text="x", images=(make_image(8, 8),))
        with pytest.raises(ModalityMismatch):
            embed_units([unit], HashEmbeddingProvider(64, modality="image"))
        (embedded,) = embed_units([unit], HashEmbeddingProvider(64, modality="multimodal"))
        assert embedded.unit_id == "d#inter-0000"

    def test_failures_under_threshold_are_recorded(self):
        units = [_text_unit(i, f"text {i}") for i in range(10)]
        failures = []
        embedded = embed_units(units, _FlakyProvider({"text 3"}), batch=1, failure_threshold=0.2, failures=failures)
        assert len(embedded) == 9
        assert [f[0] for f in failures] == [units[3].unit_id]

    def test_failures_over_threshold_abort(self):
        units = [_text_unit(i, f"text {i}") for i in range(10)]
        with pytest.raises(ProviderError):
            embed_units(units, _FlakyProvider({"text 3"}), batch=1, failure_threshold=0.01)

    def test_declared_normalization_is_checked(self):
        with pytest.raises(ProviderError):
            embed_units([_text_unit(0)], _FlakyProvider(set(), normalized=False))

    def test_precision_is_applied(self, hash_provider):
        (embedded,) = embed_units([_text_unit(0)], hash_provider, precision=2)
        assert embedded.vectors.dtype == np.float16


# ---------------------------------------------------------------------------
# Remote provider
# ---------------------------------------------------------------------------

class TestRemoteProvider:
    def _provider(self, session, dimension=8, mode="single"):
        descriptor = ProviderDescriptor("remote-model", "multimodal", mode, dimension, True, patch_size=14)
        client = ServiceClient("http://embed.test", session=session, sleep=lambda s: None)
        return RemoteEmbeddingProvider(descriptor, client)

    def test_payload_format(self, make_image):
        session = _EchoSession(8)
        provider = self._provider(session)
        image = make_image(4, 4)
        out = provider.embed_batch([EmbedInput(text="hello"), EmbedInput(images=(image,))])
        assert [m.shape for m in out] == [(1, 8), (1, 8)]
        (payload,) = session.payloads
        assert payload["model"] == "remote-model"
        assert payload["mode"] == "single"
        assert payload["inputs"][0] == {"text": "hello"}
        assert base64.b64decode(payload["inputs"][1]["images"][0]) == image

    def test_multi_vector_rows(self):
        provider = self._provider(_EchoSession(8, rows=3), mode="multi")
        (matrix,) = provider.embed_batch([EmbedInput(text="x")])
        assert matrix.shape == (3, 8)

    def test_dimension_mismatch(self):
        provider = self._provider(_EchoSession(8, reported_dimension=16))
        with pytest.raises(ProviderError):
            provider.embed_batch([EmbedInput(text="x")])

    def test_http_error_becomes_provider_error(self):
        class Failing:
            def post(self, *args, **kwargs):
                return _FakeResponse(401, text="unauthorized")

        with pytest.raises(ProviderError):
            self._provider(Failing()).embed_batch([EmbedInput(text="x")])

    def test_embed_units_through_remote(self):
        provider = self._provider(_EchoSession(8))
        units = [_text_unit(i) for i in range(5)]
        embedded = embed_units(units, provider, batch=2)
        assert len(embedded) == 5
        assert all(math.isclose(float(np.linalg.norm(e.vectors)), 1.0) for e in embedded)
