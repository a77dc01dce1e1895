"""Exemplar-selection baselines over the flattened corpus, plus the
ablation variants of the main pipeline.

Baselines operate on sentences: bags are flattened and every sentence
inherits its bag's full labelset. All selections are deterministic given
a seed.
"""

from __future__ import annotations

import dataclasses
import random
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Bag, Corpus, SentenceInstance
from .providers import EmbeddingIndex, ScoreMatrix, ScoringConfig, cosine_sim
from .selection import (
    BagExemplarSet,
    Exemplar,
    ExemplarSet,
    _order_ascending,
    _query_rng,
    build_bag_exemplar_set,
    build_exemplar_set,
    select_candidates,
)

DEFAULT_MMR_ALPHA = 0.3
DEFAULT_MMR_POOL_SIZE = 100

ABLATION_NAMES = (
    "all_relations",
    "flat_retrieval",
    "full_bag",
    "no_sim",
    "no_conf",
    "random_bag_sentence",
    "no_icl",
)


@dataclass(frozen=True)
class FlatExample:
    """One (bag, sentence) pair carrying the bag's full labelset."""

    sentence: SentenceInstance
    labels: frozenset[str]
    source_bag_id: str


def flatten(bags: Sequence[Bag]) -> list[FlatExample]:
    """One FlatExample per (bag, sentence) pair, corpus order preserved."""
    return [
        FlatExample(sentence, bag.labelset, bag.bag_id)
        for bag in bags
        for sentence in bag.sentences
    ]


def random_k(
    flat: Sequence[FlatExample], k: int, seed: int | str
) -> list[FlatExample]:
    """Uniform sample without replacement, deterministic given the seed."""
    if k > len(flat):
        raise ValueError(f"k={k} exceeds corpus size {len(flat)}")
    return random.Random(seed).sample(list(flat), k)


def _query_sims(
    q_id: str, flat: Sequence[FlatExample], embeddings: EmbeddingIndex
) -> np.ndarray:
    q = embeddings.vector(q_id)
    matrix = np.stack([embeddings.vector(f.sentence.sentence_id) for f in flat])
    norms = np.linalg.norm(matrix, axis=1) * np.linalg.norm(q)
    return (1.0 + (matrix @ q) / norms) / 2.0


def topk_sim(
    q_id: str,
    flat: Sequence[FlatExample],
    embeddings: EmbeddingIndex,
    k: int,
) -> list[FlatExample]:
    """The k sentences most similar to the query, descending; corpus order
    breaks ties."""
    sims = _query_sims(q_id, flat, embeddings)
    order = sorted(range(len(flat)), key=lambda i: (-sims[i], i))
    return [flat[i] for i in order[:k]]


def mmr_select(
    q_id: str,
    flat: Sequence[FlatExample],
    embeddings: EmbeddingIndex,
    k: int,
    alpha: float = DEFAULT_MMR_ALPHA,
    pool_size: int | None = DEFAULT_MMR_POOL_SIZE,
) -> list[FlatExample]:
    """Greedy maximal-marginal-relevance selection, in selection order.

    Each step maximizes alpha * sim(q, s) - (1 - alpha) * max sim(s, s')
    over sentences not yet selected, where s' ranges over the selection so
    far. The pool is pre-truncated to the pool_size most query-similar
    sentences; pass pool_size=None to rank the whole corpus.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    sims = _query_sims(q_id, flat, embeddings)
    order = sorted(range(len(flat)), key=lambda i: (-sims[i], i))
    pool = order if pool_size is None else order[:pool_size]
    if k > len(pool):
        raise ValueError(f"k={k} exceeds pool size {len(pool)}")
    vectors = np.stack(
        [embeddings.vector(flat[i].sentence.sentence_id) for i in pool]
    )
    norms = np.linalg.norm(vectors, axis=1)
    pairwise = (1.0 + (vectors @ vectors.T) / np.outer(norms, norms)) / 2.0
    q_sims = np.array([sims[i] for i in pool])

    selected: list[int] = []
    remaining = list(range(len(pool)))
    max_to_selected = np.zeros(len(pool))
    for _ in range(k):
        best_j = None
        best_obj = float("-inf")
        for j in remaining:
            obj = alpha * q_sims[j]
            if selected:
                obj -= (1.0 - alpha) * max_to_selected[j]
            if obj > best_obj:
                best_j, best_obj = j, obj
        selected.append(best_j)
        remaining.remove(best_j)
        max_to_selected = np.maximum(max_to_selected, pairwise[best_j])
    return [flat[pool[j]] for j in selected]


@dataclass(frozen=True)
class AblationSelection:
    """An ablation's selection plus the relation scope its prompt should use."""

    selection: ExemplarSet | BagExemplarSet
    relation_scope: str  # "full_ontology" | "candidates_only"


def ablation_variant(
    name: str,
    q_id: str,
    corpus: Corpus,
    scores: ScoreMatrix | None,
    embeddings: EmbeddingIndex | None,
    config: ScoringConfig,
) -> AblationSelection:
    """Run one ablation of the main pipeline for a single query."""
    if name == "all_relations":
        cfg = dataclasses.replace(config, k=len(corpus.ontology))
        return AblationSelection(
            build_exemplar_set(q_id, corpus, scores, embeddings, cfg),
            "full_ontology",
        )
    if name == "flat_retrieval":
        return AblationSelection(
            _flat_retrieval(q_id, corpus, scores, embeddings, config),
            "full_ontology",
        )
    if name == "full_bag":
        return AblationSelection(
            build_bag_exemplar_set(q_id, corpus, scores, embeddings, config, reduced=False),
            "full_ontology",
        )
    if name == "no_sim":
        cfg = dataclasses.replace(config, w_sim=0.0)
        return AblationSelection(
            build_exemplar_set(q_id, corpus, scores, None, cfg), "full_ontology"
        )
    if name == "no_conf":
        cfg = dataclasses.replace(config, w_conf=0.0)
        return AblationSelection(
            build_exemplar_set(q_id, corpus, None, embeddings, cfg), "full_ontology"
        )
    if name == "random_bag_sentence":
        return AblationSelection(
            _random_bag_sentence(q_id, corpus, scores, config), "full_ontology"
        )
    if name == "no_icl":
        candidates = select_candidates(q_id, scores, config.k)
        return AblationSelection(
            ExemplarSet(q_id, (), tuple(candidates), ()), "candidates_only"
        )
    raise ValueError(f"unknown ablation variant {name!r}")


def _flat_retrieval(
    q_id: str,
    corpus: Corpus,
    scores: ScoreMatrix,
    embeddings: EmbeddingIndex | None,
    config: ScoringConfig,
) -> ExemplarSet:
    """Stage 2/3 replacement: retrieve one best sentence per candidate
    directly from the flattened corpus, scored like a one-sentence bag."""
    candidates = select_candidates(q_id, scores, config.k)
    flat = flatten(corpus.bags)
    q_vec = embeddings.vector(q_id) if config.w_sim > 0 else None
    exemplars = []
    skipped = []
    for relation, score in candidates:
        best = None
        best_score = float("-inf")
        for example in flat:
            if relation not in example.labels:
                continue
            total = config.w_conf * scores.score_of(
                example.sentence.sentence_id, relation
            )
            if q_vec is not None:
                total += config.w_sim * cosine_sim(
                    q_vec, embeddings.vector(example.sentence.sentence_id)
                )
            if total > best_score:
                best, best_score = example, total
        if best is None:
            skipped.append(relation)
            continue
        exemplars.append(
            Exemplar(best.sentence, best.labels, best.source_bag_id, relation, score)
        )
    return ExemplarSet(
        q_id, _order_ascending(exemplars), tuple(candidates), tuple(skipped)
    )


def _random_bag_sentence(
    q_id: str,
    corpus: Corpus,
    scores: ScoreMatrix,
    config: ScoringConfig,
) -> ExemplarSet:
    """Both retrieval signals removed: seeded-random bag per candidate,
    then a seeded-random sentence from it."""
    candidates = select_candidates(q_id, scores, config.k)
    rng = _query_rng(config.seed, q_id)
    exemplars = []
    skipped = []
    for relation, score in candidates:
        bag_ids = corpus.bags_by_relation[relation]
        if not bag_ids:
            skipped.append(relation)
            continue
        bag = corpus.bags_by_id[bag_ids[rng.randrange(len(bag_ids))]]
        sentence = bag.sentences[rng.randrange(len(bag.sentences))]
        exemplars.append(
            Exemplar(sentence, bag.labelset, bag.bag_id, relation, score)
        )
    return ExemplarSet(
        q_id, _order_ascending(exemplars), tuple(candidates), tuple(skipped)
    )
