"""Confidence scores, semantic similarity, and their weighted combination.

Score matrices and embedding indexes are immutable after load; every scoring
function here is pure, so concurrent use per query is safe.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Bag, RelationOntology

logger = logging.getLogger(__name__)

EMBED_API_KEY_ENV = "HYDRE_EMBED_API_KEY"
RETRY_BACKOFF_SECONDS = (1.0, 4.0, 16.0)


class ProviderError(ValueError):
    """Missing, malformed, or inconsistent provider data."""


@dataclass
class ScoreMatrix:
    """Per-item confidence vectors f(item, r) over the ontology order.

    Rows exist for test queries and for training sentences; bag scores are
    derived by pooling, never stored.
    """

    relation_order: tuple[str, ...]
    rows: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        self._index = {name: i for i, name in enumerate(self.relation_order)}

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.rows

    def vector(self, item_id: str) -> np.ndarray:
        try:
            return self.rows[item_id]
        except KeyError:
            raise ProviderError(f"no score row for item {item_id!r}") from None

    def score_of(self, item_id: str, relation: str) -> float:
        try:
            col = self._index[relation]
        except KeyError:
            raise ProviderError(f"relation {relation!r} not in score matrix") from None
        return float(self.vector(item_id)[col])

    @classmethod
    def load(cls, path: str | Path, ontology: RelationOntology) -> "ScoreMatrix":
        """Load a score file: manifest line first, then one row per item."""
        path = Path(path)
        rows: dict[str, np.ndarray] = {}
        relation_order: tuple[str, ...] | None = None
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ProviderError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
                if relation_order is None:
                    order = record.get("relation_order")
                    if order is None:
                        raise ProviderError(
                            f"{path}:{lineno}: first line must be the "
                            "relation_order manifest"
                        )
                    relation_order = tuple(order)
                    if relation_order != ontology.names:
                        raise ProviderError(
                            f"{path}: relation_order does not match the "
                            "ontology order"
                        )
                    continue
                item_id = record.get("id")
                scores = record.get("scores")
                if not isinstance(item_id, str) or scores is None:
                    raise ProviderError(f"{path}:{lineno}: malformed score row")
                vec = np.asarray(scores, dtype=float)
                if vec.shape != (len(relation_order),):
                    raise ProviderError(
                        f"{path}:{lineno}: row {item_id!r} has {vec.size} "
                        f"scores, expected {len(relation_order)}"
                    )
                if np.any(vec < 0.0) or np.any(vec > 1.0):
                    # fail loudly on provider mismatch instead of clamping
                    raise ProviderError(
                        f"{path}:{lineno}: row {item_id!r} has scores "
                        "outside [0, 1]"
                    )
                if item_id in rows:
                    raise ProviderError(f"{path}:{lineno}: duplicate id {item_id!r}")
                rows[item_id] = vec
        if relation_order is None:
            raise ProviderError(f"{path}: empty score file")
        return cls(relation_order, rows)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            fh.write(json.dumps({"relation_order": list(self.relation_order)}))
            fh.write("\n")
            for item_id, vec in self.rows.items():
                fh.write(
                    json.dumps({"id": item_id, "scores": [float(v) for v in vec]})
                )
                fh.write("\n")


def _normalize(vec: np.ndarray, item_id: str) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ProviderError(f"zero embedding vector for item {item_id!r}")
    return vec / norm


@dataclass
class EmbeddingIndex:
    """L2-normalized embedding vectors keyed by item id."""

    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.vectors

    def vector(self, item_id: str) -> np.ndarray:
        try:
            return self.vectors[item_id]
        except KeyError:
            raise ProviderError(f"no embedding for item {item_id!r}") from None

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingIndex":
        path = Path(path)
        vectors: dict[str, np.ndarray] = {}
        dim: int | None = None
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ProviderError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
                item_id = record.get("id")
                raw = record.get("vector")
                if not isinstance(item_id, str) or raw is None:
                    raise ProviderError(f"{path}:{lineno}: malformed embedding row")
                vec = np.asarray(raw, dtype=float)
                if dim is None:
                    dim = int(vec.size)
                elif vec.size != dim:
                    raise ProviderError(
                        f"{path}:{lineno}: vector for {item_id!r} has dim "
                        f"{vec.size}, expected {dim}"
                    )
                if item_id in vectors:
                    raise ProviderError(f"{path}:{lineno}: duplicate id {item_id!r}")
                vectors[item_id] = _normalize(vec, item_id)
        if dim is None:
            raise ProviderError(f"{path}: empty embedding file")
        return cls(dim, vectors)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for item_id, vec in self.vectors.items():
                fh.write(
                    json.dumps({"id": item_id, "vector": [float(v) for v in vec]})
                )
                fh.write("\n")


@dataclass(frozen=True)
class ScoringConfig:
    """Weights and knobs for the exemplar selection stages."""

    w_sim: float = 1.0
    w_conf: float = 1.0
    threshold: float = 0.5
    k: int = 5
    bag_sim_pooling: str = "max"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.w_sim < 0 or self.w_conf < 0:
            raise ValueError("weights must be nonnegative")
        if self.w_sim + self.w_conf <= 0:
            raise ValueError("at least one of w_sim, w_conf must be positive")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must lie in (0, 1)")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.bag_sim_pooling not in ("max", "mean"):
            raise ValueError("bag_sim_pooling must be 'max' or 'mean'")


def cosine_sim(u: Sequence[float] | np.ndarray, v: Sequence[float] | np.ndarray) -> float:
    """Cosine similarity mapped from [-1, 1] into [0, 1].

    Shares a scale with model confidences so the two can be weighted
    together.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ProviderError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ProviderError("cosine similarity of a zero vector is undefined")
    cos = float(np.dot(u, v)) / (nu * nv)
    return (1.0 + cos) / 2.0


def bag_similarity(
    q_id: str, bag: Bag, embeddings: EmbeddingIndex, config: ScoringConfig
) -> float:
    """Similarity of a query to a bag, pooled over the bag's sentences."""
    q_vec = embeddings.vector(q_id)
    sims = [cosine_sim(q_vec, embeddings.vector(s.sentence_id)) for s in bag.sentences]
    if config.bag_sim_pooling == "mean":
        return sum(sims) / len(sims)
    return max(sims)


def bag_confidence(bag: Bag, relation: str, scores: ScoreMatrix) -> float:
    """Bag-level confidence for a relation: max over sentence scores."""
    return max(bag_sentence_scores(bag, relation, scores))


def bag_sentence_scores(bag: Bag, relation: str, scores: ScoreMatrix) -> list[float]:
    return [scores.score_of(s.sentence_id, relation) for s in bag.sentences]


def combined_bag_score(
    q_id: str,
    bag: Bag,
    relation: str,
    scores: ScoreMatrix | None,
    embeddings: EmbeddingIndex | None,
    config: ScoringConfig,
) -> float:
    """w_sim * sim(q, bag) + w_conf * f(bag, relation).

    A provider whose weight is zero is never consulted, so confidence-only
    and similarity-only modes run without the other artifact.
    """
    total = 0.0
    if config.w_sim > 0:
        if embeddings is None:
            raise ProviderError("w_sim > 0 but no embedding index supplied")
        total += config.w_sim * bag_similarity(q_id, bag, embeddings, config)
    if config.w_conf > 0:
        if scores is None:
            raise ProviderError("w_conf > 0 but no score matrix supplied")
        total += config.w_conf * bag_confidence(bag, relation, scores)
    return total


def http_embedding_transport(
    endpoint: str,
    api_key_env: str = EMBED_API_KEY_ENV,
    timeout: float = 60.0,
    session=None,
) -> Callable[[list[str]], list[list[float]]]:
    """Build a transport posting {"texts": [...]} and reading {"vectors": [...]}."""
    if session is None:
        import requests

        session = requests.Session()

    def post(texts: list[str]) -> list[list[float]]:
        headers = {}
        token = os.environ.get(api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        response = session.post(
            endpoint, json={"texts": texts}, headers=headers, timeout=timeout
        )
        response.raise_for_status()
        body = response.json()
        return body["vectors"]

    return post


class EmbeddingClient:
    """Fetch embeddings from a service, caching them in an embedding file.

    Items already present in the file are served from cache without any
    request; new vectors are L2-normalized and appended for reuse.
    """

    def __init__(
        self,
        transport: Callable[[list[str]], list[list[float]]],
        cache_path: str | Path,
        batch_size: int = 64,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.transport = transport
        self.cache_path = Path(cache_path)
        self.batch_size = batch_size
        self._sleep = sleep
        if self.cache_path.exists() and self.cache_path.stat().st_size > 0:
            self.index = EmbeddingIndex.load(self.cache_path)
        else:
            self.index = EmbeddingIndex(dim=0)

    def _post_with_retry(self, texts: list[str]) -> list[list[float]]:
        last: Exception | None = None
        for attempt, backoff in enumerate((None,) + RETRY_BACKOFF_SECONDS):
            if backoff is not None:
                logger.warning(
                    "embedding request failed (%s); retrying in %ss", last, backoff
                )
                self._sleep(backoff)
            try:
                return self.transport(texts)
            except Exception as exc:  # transport errors are backend-specific
                last = exc
        raise ProviderError(f"embedding service failed after retries: {last}")

    def fetch_embeddings(self, items: Sequence[tuple[str, str]]) -> EmbeddingIndex:
        """Ensure every (item_id, text) pair has a cached vector.

        Returns the full index including previously cached rows.
        """
        if not items:
            raise ProviderError("fetch_embeddings called with no items")
        missing = [(i, t) for i, t in items if i not in self.index.vectors]
        for start in range(0, len(missing), self.batch_size):
            batch = missing[start : start + self.batch_size]
            vectors = self._post_with_retry([t for _, t in batch])
            if len(vectors) != len(batch):
                raise ProviderError(
                    f"embedding service returned {len(vectors)} vectors "
                    f"for {len(batch)} texts"
                )
            new_rows: dict[str, np.ndarray] = {}
            for (item_id, _), raw in zip(batch, vectors):
                vec = np.asarray(raw, dtype=float)
                if self.index.dim and vec.size != self.index.dim:
                    raise ProviderError(
                        f"embedding service returned dim {vec.size}, "
                        f"index has dim {self.index.dim}"
                    )
                new_rows[item_id] = _normalize(vec, item_id)
            if not self.index.dim and new_rows:
                self.index.dim = int(next(iter(new_rows.values())).size)
            self.index.vectors.update(new_rows)
            self._append_rows(new_rows)
        return self.index

    def _append_rows(self, rows: dict[str, np.ndarray]) -> None:
        with self.cache_path.open("a", encoding="utf-8") as fh:
            for item_id, vec in rows.items():
                fh.write(
                    json.dumps({"id": item_id, "vector": [float(v) for v in vec]})
                )
                fh.write("\n")
