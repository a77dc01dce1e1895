from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hydre.corpus import (
    Bag,
    Corpus,
    EntitySpan,
    QueryInstance,
    RelationOntology,
    SentenceInstance,
)
from hydre.providers import EmbeddingIndex, ScoreMatrix

FIXTURES = Path(__file__).parent / "fixtures"


def make_sentence(sentence_id: str, head: str = "Alice", tail: str = "Paris") -> SentenceInstance:
    """A small valid sentence with one head and one tail mention."""
    text = f"{head} visited {tail} [{sentence_id}] last spring."
    h = text.index(head)
    t = text.index(tail)
    return SentenceInstance(
        sentence_id,
        text,
        EntitySpan(h, h + len(head), head),
        EntitySpan(t, t + len(tail), tail),
    )


def make_query(query_id: str, gold: set[str] | None, head: str = "Bob", tail: str = "Rome") -> QueryInstance:
    text = f"{head} spoke about {tail} [{query_id}] at length."
    h = text.index(head)
    t = text.index(tail)
    return QueryInstance(
        query_id,
        text,
        EntitySpan(h, h + len(head), head),
        EntitySpan(t, t + len(tail), tail),
        gold=frozenset(gold or set()),
        is_na=not gold,
    )


def ontology_from_names(names: list[str]) -> RelationOntology:
    return RelationOntology(tuple((n, f"definition of {n}") for n in names))


def corpus_from_instance(instance: dict) -> Corpus:
    """Build hydre objects from a primitive oracle instance."""
    ontology = ontology_from_names(instance["relations"])
    bags = []
    for raw in instance["bags"]:
        sentences = tuple(make_sentence(s["sentence_id"]) for s in raw["sentences"])
        bags.append(
            Bag(raw["bag_id"], "head", "tail", sentences, frozenset(raw["labels"]))
        )
    queries = [
        make_query(q_id, {instance["relations"][0]}) for q_id in instance["queries"]
    ]
    return Corpus.assemble(ontology, bags, queries)


def scores_from_instance(instance: dict) -> ScoreMatrix:
    return ScoreMatrix(
        tuple(instance["relations"]),
        {k: np.asarray(v, dtype=float) for k, v in instance["scores"].items()},
    )


def embeddings_from_instance(instance: dict) -> EmbeddingIndex:
    vectors = {
        k: np.asarray(v, dtype=float) for k, v in instance["embeddings"].items()
    }
    dim = len(next(iter(vectors.values())))
    return EmbeddingIndex(dim, vectors)


@pytest.fixture
def tiny_ontology() -> RelationOntology:
    return ontology_from_names(["rel_a", "rel_b", "rel_c"])
