"""
Embedding providers.

A uniform interface producing single-vector or multi-vector
(token-level) embeddings for units and queries:

- HashEmbeddingProvider   deterministic bag-of-words hashing, no model
- RemoteEmbeddingProvider the JSON wire protocol in front of real models

Images are resized to the provider's pixel budget before dispatch.
"""

import base64
import hashlib
import logging
import math
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import cv2
import numpy as np
from sklearn.utils import murmurhash3_32

from src.config import EMBED_BATCH_SIZE, FAILURE_THRESHOLD
from src.errors import ImageDecodeError, ModalityMismatch, ProviderError, ServiceError
from src.representations import EmbeddingUnit, UnitKind
from src.service_client import ServiceClient
from src.utils import require

log = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-4
PRECISION_DTYPES = {4: np.float32, 2: np.float16}


# ============================
# DESCRIPTORS & EMBEDDINGS
# ============================

class Modality(str, Enum):
    TEXT = "text"
    IMAGE = "image"
    MULTIMODAL = "multimodal"


class VectorMode(str, Enum):
    SINGLE = "single"
    MULTI = "multi"


@dataclass(frozen=True)
class ProviderDescriptor:
    name: str
    modality: Modality
    vector_mode: VectorMode
    dimension: int
    normalizes: bool
    max_pixels: Optional[int] = None
    patch_size: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "vector_mode", VectorMode(self.vector_mode))
        require(self.dimension > 0, "dimension must be positive")
        require(
            self.modality is Modality.TEXT
            or self.vector_mode is VectorMode.SINGLE
            or bool(self.patch_size),
            f"{self.name}: multi-vector image providers must declare patch_size",
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "modality": self.modality.value,
            "vector_mode": self.vector_mode.value,
            "dimension": self.dimension,
            "normalizes": self.normalizes,
            "max_pixels": self.max_pixels,
            "patch_size": self.patch_size,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ProviderDescriptor":
        return cls(**data)


@dataclass(eq=False)
class UnitEmbedding:
    """Vectors of one unit: 1 row (single-vector) or one row per token (multi-vector)."""

    unit_id: str
    doc_id: str
    vectors: np.ndarray
    precision: int = 4
    normalized: bool = True

    def __post_init__(self):
        require(self.precision in PRECISION_DTYPES, f"precision must be 4 or 2, got {self.precision}")
        vectors = np.asarray(self.vectors, dtype=PRECISION_DTYPES[self.precision])
        if vectors.ndim == 1:
            vectors = vectors.reshape(1, -1)
        require(vectors.ndim == 2 and vectors.shape[1] > 0, f"{self.unit_id}: bad vector shape {vectors.shape}")
        self.vectors = vectors

    @property
    def rows(self) -> int:
        return self.vectors.shape[0]

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    @property
    def nbytes(self) -> int:
        return self.rows * self.dimension * self.precision

    def __eq__(self, other) -> bool:
        if not isinstance(other, UnitEmbedding):
            return NotImplemented
        return (
            self.unit_id == other.unit_id
            and self.doc_id == other.doc_id
            and self.precision == other.precision
            and self.normalized == other.normalized
            and self.vectors.shape == other.vectors.shape
            and np.array_equal(self.vectors, other.vectors)
        )


@dataclass(frozen=True)
class EmbedInput:
    text: Optional[str] = None
    images: Tuple[bytes, ...] = field(default_factory=tuple)


# ============================
# PIXEL BUDGET
# ============================

def resize_for_budget(width: int, height: int, max_pixels: int) -> Tuple[int, int]:
    """
    Scale (width, height) so width * height <= max_pixels, keeping the aspect
    ratio within one rounding step. Under-budget sizes are returned unchanged.
    """
    require(width > 0 and height > 0 and max_pixels > 0, "width, height and max_pixels must be positive")
    if width * height <= max_pixels:
        return width, height

    scale = math.sqrt(max_pixels / (width * height))
    w = max(1, math.floor(width * scale))
    h = max(1, math.floor(height * scale))

    # float error or the one-pixel floor can overshoot; trim the longer side
    if w * h > max_pixels:
        if w >= h:
            w = max(1, max_pixels // h)
        else:
            h = max(1, max_pixels // w)
    return w, h


def estimate_visual_tokens(width: int, height: int, patch_size: int) -> int:
    require(patch_size > 0, "patch_size must be positive")
    return -(-width // patch_size) * -(-height // patch_size)


def _decode(blob: bytes) -> np.ndarray:
    image = cv2.imdecode(np.frombuffer(blob, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise ImageDecodeError("image bytes could not be decoded")
    return image


def image_size(blob: bytes) -> Tuple[int, int]:
    height, width = _decode(blob).shape[:2]
    return width, height


def prepare_image(blob: bytes, max_pixels: Optional[int]) -> bytes:
    """Downscale to the pixel budget (PNG out); under-budget images pass through untouched."""
    if not max_pixels:
        return blob
    image = _decode(blob)
    height, width = image.shape[:2]
    new_w, new_h = resize_for_budget(width, height, max_pixels)
    if (new_w, new_h) == (width, height):
        return blob
    resized = cv2.resize(image, (new_w, new_h), interpolation=cv2.INTER_AREA)
    ok, encoded = cv2.imencode(".png", resized)
    if not ok:
        raise ImageDecodeError("PNG encoding failed")
    return encoded.tobytes()


# ============================
# HASH EMBEDDING
# ============================

def hash_bucket(token: str, dimension: int) -> int:
    return murmurhash3_32(token, seed=0, positive=True) % dimension


def hash_embed(text: str, dimension: int, unit_id: str = "", doc_id: str = "") -> UnitEmbedding:
    """
    Bag-of-words vector: each whitespace token counted in its hash bucket,
    then L2-normalized. Empty text gives a zero vector flagged non-normalized.
    """
    require(dimension >= 2, "dimension must be >= 2")
    tokens = text.split()
    if not tokens:
        log.debug("hash_embed: empty text for %r", unit_id)
        return UnitEmbedding(unit_id, doc_id, np.zeros((1, dimension), dtype=np.float32), normalized=False)

    counts = np.bincount([hash_bucket(t, dimension) for t in tokens], minlength=dimension).astype(np.float64)
    vector = counts / np.linalg.norm(counts)
    return UnitEmbedding(unit_id, doc_id, vector.astype(np.float32).reshape(1, -1))


def _one_hot_rows(keys: List[str], dimension: int) -> np.ndarray:
    rows = np.zeros((len(keys), dimension), dtype=np.float32)
    for r, key in enumerate(keys):
        rows[r, hash_bucket(key, dimension)] = 1.0
    return rows


# ============================
# PROVIDERS
# ============================

class EmbeddingProvider(ABC):
    descriptor: ProviderDescriptor

    @abstractmethod
    def embed_batch(self, inputs: List[EmbedInput]) -> List[np.ndarray]:
        """One (rows, dimension) float32 matrix per input, in input order."""

    def embed_query(self, text: str) -> np.ndarray:
        return self.embed_batch([EmbedInput(text=text)])[0]


class HashEmbeddingProvider(EmbeddingProvider):
    """
    Deterministic local provider.

    Single-vector mode hashes the bag of tokens; multi-vector mode emits one
    one-hot row per token. Images contribute content-hash tokens (one per
    visual patch in multi-vector mode), so figures and pages can be indexed
    without a model.
    """

    def __init__(
        self,
        dimension: int = 1024,
        vector_mode: str = "single",
        modality: str = "text",
        name: str = "hash-embed",
        max_pixels: Optional[int] = None,
        patch_size: int = 14,
    ):
        self.descriptor = ProviderDescriptor(
            name=name,
            modality=Modality(modality),
            vector_mode=VectorMode(vector_mode),
            dimension=dimension,
            normalizes=True,
            max_pixels=max_pixels,
            patch_size=patch_size if Modality(modality) is not Modality.TEXT else None,
        )

    def _image_tokens(self, blob: bytes) -> List[str]:
        digest = hashlib.sha1(blob).hexdigest()[:16]
        if self.descriptor.vector_mode is VectorMode.SINGLE:
            return [f"<img:{digest}>"]
        width, height = image_size(blob)
        count = estimate_visual_tokens(width, height, self.descriptor.patch_size)
        return [f"<img:{digest}:{p}>" for p in range(count)]

    def _embed_one(self, item: EmbedInput) -> np.ndarray:
        dim = self.descriptor.dimension
        tokens = (item.text or "").split()
        for blob in item.images:
            tokens.extend(self._image_tokens(blob))

        if self.descriptor.vector_mode is VectorMode.MULTI:
            return _one_hot_rows(tokens, dim)
        return hash_embed(" ".join(tokens), dim).vectors.astype(np.float32)

    def embed_batch(self, inputs: List[EmbedInput]) -> List[np.ndarray]:
        return [self._embed_one(item) for item in inputs]


class RemoteEmbeddingProvider(EmbeddingProvider):
    """
    Embedding service over HTTP:

        {model, inputs: [{text?, images?: [base64]}], mode}
        -> {vectors: [[[f32, ...], ...], ...], dimension, normalized}
    """

    route = "embed"

    def __init__(self, descriptor: ProviderDescriptor, client: ServiceClient):
        self.descriptor = descriptor
        self.client = client

    def _payload(self, inputs: List[EmbedInput]) -> Dict[str, Any]:
        encoded = []
        for item in inputs:
            entry: Dict[str, Any] = {}
            if item.text is not None:
                entry["text"] = item.text
            if item.images:
                entry["images"] = [base64.b64encode(b).decode("ascii") for b in item.images]
            encoded.append(entry)
        return {
            "model": self.descriptor.name,
            "inputs": encoded,
            "mode": self.descriptor.vector_mode.value,
        }

    def embed_batch(self, inputs: List[EmbedInput]) -> List[np.ndarray]:
        try:
            body = self.client.post(self.route, self._payload(inputs))
        except ServiceError as exc:
            raise ProviderError(str(exc)) from exc

        vectors = body.get("vectors")
        if not isinstance(vectors, list) or len(vectors) != len(inputs):
            raise ProviderError(f"{self.descriptor.name}: expected {len(inputs)} vector sets")
        dimension = body.get("dimension", self.descriptor.dimension)
        if dimension != self.descriptor.dimension:
            raise ProviderError(
                f"{self.descriptor.name}: service dimension {dimension} != declared {self.descriptor.dimension}"
            )
        if "normalized" in body and bool(body["normalized"]) != self.descriptor.normalizes:
            log.warning("%s: service reports normalized=%s", self.descriptor.name, body["normalized"])

        out = []
        for item in vectors:
            matrix = np.asarray(item, dtype=np.float32)
            if matrix.ndim == 1:
                matrix = matrix.reshape(1, -1)
            if matrix.ndim != 2 or matrix.shape[1] != self.descriptor.dimension:
                raise ProviderError(f"{self.descriptor.name}: bad vector shape {matrix.shape}")
            out.append(matrix)
        return out


# ============================
# UNIT EMBEDDING
# ============================

_REQUIRED_MODALITIES = {
    UnitKind.TEXT_CHUNK: {Modality.TEXT, Modality.MULTIMODAL},
    UnitKind.FIGURE: {Modality.IMAGE, Modality.MULTIMODAL},
    UnitKind.PAGE_IMAGE: {Modality.IMAGE, Modality.MULTIMODAL},
    UnitKind.INTERLEAVED: {Modality.MULTIMODAL},
}


def check_modality(unit: EmbeddingUnit, descriptor: ProviderDescriptor):
    if descriptor.modality not in _REQUIRED_MODALITIES[unit.kind]:
        raise ModalityMismatch(
            f"{unit.unit_id}: {unit.kind.value} unit cannot be embedded by "
            f"{descriptor.modality.value} provider {descriptor.name}"
        )


def _check_normalized(matrix: np.ndarray, unit_id: str, descriptor: ProviderDescriptor):
    if not descriptor.normalizes or matrix.shape[0] == 0:
        return
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
        raise ProviderError(f"{unit_id}: {descriptor.name} declared normalized output but row norms deviate")


def embed_units(
    units: List[EmbeddingUnit],
    provider: EmbeddingProvider,
    batch: int = EMBED_BATCH_SIZE,
    workers: int = 1,
    precision: int = 4,
    failure_threshold: float = FAILURE_THRESHOLD,
    failures: Optional[List[Tuple[str, str]]] = None,
) -> List[UnitEmbedding]:
    """
    Embed units in batches under bounded concurrency; output order follows input.

    Failed batches are recorded per unit in `failures` and skipped; the run
    raises ProviderError only when the failure ratio exceeds `failure_threshold`.
    """
    require(batch >= 1 and workers >= 1, "batch and workers must be >= 1")
    descriptor = provider.descriptor
    for unit in units:
        check_modality(unit, descriptor)

    failures = failures if failures is not None else []
    inputs: List[Optional[EmbedInput]] = []
    for unit in units:
        try:
            images = tuple(prepare_image(b, descriptor.max_pixels) for b in unit.images)
            inputs.append(EmbedInput(unit.text or None, images))
        except ImageDecodeError as exc:
            failures.append((unit.unit_id, str(exc)))
            inputs.append(None)

    ready = [i for i, item in enumerate(inputs) if item is not None]
    batches = [ready[i:i + batch] for i in range(0, len(ready), batch)]

    def run(indices: List[int]) -> List[np.ndarray]:
        return provider.embed_batch([inputs[i] for i in indices])

    results: List[Optional[UnitEmbedding]] = [None] * len(units)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run, indices) for indices in batches]
        for indices, future in zip(batches, futures):
            try:
                matrices = future.result()
            except ServiceError as exc:
                for i in indices:
                    failures.append((units[i].unit_id, str(exc)))
                continue
            if len(matrices) != len(indices):
                raise ProviderError(f"{descriptor.name}: returned {len(matrices)} results for {len(indices)} inputs")
            for i, matrix in zip(indices, matrices):
                _check_normalized(matrix, units[i].unit_id, descriptor)
                results[i] = UnitEmbedding(
                    units[i].unit_id, units[i].doc_id, matrix, precision, descriptor.normalizes
                )

    if units and len(failures) / len(units) > failure_threshold:
        raise ProviderError(
            f"{len(failures)} of {len(units)} units failed to embed (threshold {failure_threshold:.2%})"
        )
    for unit_id, reason in failures:
        log.warning("Embedding failed for %s: %s", unit_id, reason)

    return [r for r in results if r is not None]


def embed_query(text: str, provider: EmbeddingProvider, query_id: str = "") -> UnitEmbedding:
    matrix = provider.embed_query(text)
    return UnitEmbedding(query_id, "", matrix, 4, provider.descriptor.normalizes and bool(text.strip()))
