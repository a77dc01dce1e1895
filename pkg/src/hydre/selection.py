"""Three-stage exemplar selection over a bag-level training corpus.

Stage 1 ranks candidate relations by query confidence, stage 2 picks the
best bag per candidate by combined similarity + confidence, stage 3 picks
the bag sentence with maximal label coverage and aggregate confidence.
Every tie is broken deterministically: ontology index for relations,
corpus order for bags, in-bag order for sentences.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .corpus import Bag, Corpus, RelationOntology, SentenceInstance
from .providers import (
    EmbeddingIndex,
    ScoreMatrix,
    ScoringConfig,
    bag_similarity,
    combined_bag_score,
)


class NoBagForRelation(LookupError):
    """No training bag carries the requested relation."""

    def __init__(self, relation: str) -> None:
        super().__init__(f"no training bag is labeled with {relation!r}")
        self.relation = relation


@dataclass(frozen=True)
class Exemplar:
    """A selected sentence plus its source bag's full labelset."""

    sentence: SentenceInstance
    labels: frozenset[str]
    source_bag_id: str
    candidate_relation: str
    candidate_score: float

    def __post_init__(self) -> None:
        if self.candidate_relation not in self.labels:
            raise ValueError(
                f"candidate relation {self.candidate_relation!r} missing from "
                f"exemplar labels {sorted(self.labels)}"
            )


@dataclass(frozen=True)
class BagExemplar:
    """A selected bag rendered whole (or reduced) instead of one sentence."""

    sentences: tuple[SentenceInstance, ...]
    labels: frozenset[str]
    source_bag_id: str
    candidate_relation: str
    candidate_score: float


@dataclass(frozen=True)
class ExemplarSet:
    """Per-query exemplars ordered ascending by candidate score.

    The least relevant exemplar comes first so the most relevant one sits
    adjacent to the query in the prompt. ``candidates`` records the stage-1
    output and ``skipped`` the candidate relations with no training bag.
    """

    query_id: str
    exemplars: tuple[Exemplar, ...]
    candidates: tuple[tuple[str, float], ...] = ()
    skipped: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        scores = [e.candidate_score for e in self.exemplars]
        if any(a > b for a, b in zip(scores, scores[1:])):
            raise ValueError("exemplars must be ordered ascending by score")
        relations = [e.candidate_relation for e in self.exemplars]
        if len(set(relations)) != len(relations):
            raise ValueError("at most one exemplar per candidate relation")


@dataclass(frozen=True)
class BagExemplarSet:
    """Bag-level counterpart of ExemplarSet (whole or reduced bags)."""

    query_id: str
    exemplars: tuple[BagExemplar, ...]
    candidates: tuple[tuple[str, float], ...] = ()
    skipped: tuple[str, ...] = ()
    reduced: bool = False


def select_candidates(
    q_id: str, scores: ScoreMatrix, k: int
) -> list[tuple[str, float]]:
    """Stage 1: the k relations with highest f(q, r), descending.

    Ties break toward the lower ontology index. k larger than the ontology
    is clamped, which also serves the run-every-relation variant.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    vec = scores.vector(q_id)
    order = sorted(range(len(vec)), key=lambda i: (-vec[i], i))
    return [(scores.relation_order[i], float(vec[i])) for i in order[:k]]


def select_bag(
    q_id: str,
    relation: str,
    corpus: Corpus,
    scores: ScoreMatrix | None,
    embeddings: EmbeddingIndex | None,
    config: ScoringConfig,
) -> str:
    """Stage 2: argmax of the combined bag score; ties keep the earliest bag."""
    bag_ids = corpus.bags_by_relation.get(relation)
    if bag_ids is None:
        raise KeyError(f"unknown relation {relation!r}")
    if not bag_ids:
        raise NoBagForRelation(relation)
    best_id = None
    best_score = float("-inf")
    for bag_id in bag_ids:
        score = combined_bag_score(
            q_id, corpus.bags_by_id[bag_id], relation, scores, embeddings, config
        )
        if score > best_score:
            best_id, best_score = bag_id, score
    assert best_id is not None
    return best_id


def select_sentence(bag: Bag, scores: ScoreMatrix, threshold: float) -> SentenceInstance:
    """Stage 3: maximal label coverage, then maximal aggregate confidence.

    Coverage counts bag labels scored strictly above the threshold; among
    coverage-maximal sentences the one with the highest confidence sum over
    all bag labels wins, earliest in-bag position on ties.
    """
    labels = sorted(bag.labelset)
    best = None
    best_key = (-1, float("-inf"))
    for sentence in bag.sentences:
        confs = [scores.score_of(sentence.sentence_id, r) for r in labels]
        coverage = sum(1 for c in confs if c > threshold)
        aggregate = sum(confs)
        if (coverage, aggregate) > best_key:
            best, best_key = sentence, (coverage, aggregate)
    assert best is not None
    return best


def _order_ascending(exemplars: list) -> tuple:
    # Reverse candidate order, then stable-sort ascending by score: scores
    # become nondecreasing and ties keep the higher-ranked candidate last
    # (adjacent to the query).
    return tuple(sorted(reversed(exemplars), key=lambda e: e.candidate_score))


def _query_rng(seed: int, q_id: str) -> random.Random:
    # String seeding hashes with SHA-512 internally: stable across runs,
    # platforms, and batch order.
    return random.Random(f"{seed}|{q_id}")


def _similarity_candidates(
    q_id: str,
    corpus: Corpus,
    embeddings: EmbeddingIndex,
    config: ScoringConfig,
) -> list[tuple[str, float]]:
    """Confidence-free stage 1: labels of the k most similar bags.

    A documented heuristic for running without any confidence model: rank
    bags by similarity, then collect their labelsets in that order,
    deduplicated, NA excluded.
    """
    sims = [bag_similarity(q_id, bag, embeddings, config) for bag in corpus.bags]
    ranked = sorted(range(len(corpus.bags)), key=lambda i: (-sims[i], i))
    candidates: list[tuple[str, float]] = []
    seen: set[str] = set()
    for i in ranked[: config.k]:
        bag, sim = corpus.bags[i], sims[i]
        for label in corpus.ontology.sorted_labels(bag.labelset):
            if label == corpus.ontology.na_symbol or label in seen:
                continue
            seen.add(label)
            candidates.append((label, sim))
    return candidates


def select_candidate_bags(
    q_id: str,
    corpus: Corpus,
    scores: ScoreMatrix | None,
    embeddings: EmbeddingIndex | None,
    config: ScoringConfig,
) -> tuple[list[tuple[str, float]], list[tuple[str, float, str]], list[str]]:
    """Stages 1 + 2: candidates, their chosen bags, and recorded skips.

    Returns (candidates, picks, skipped) where picks holds
    (relation, score, bag_id) in candidate order. In similarity-only mode
    (w_conf = 0) the exemplar score is the chosen bag's similarity.
    """
    if config.w_conf > 0:
        candidates = select_candidates(q_id, scores, config.k)
    else:
        candidates = _similarity_candidates(q_id, corpus, embeddings, config)
    picks: list[tuple[str, float, str]] = []
    skipped: list[str] = []
    for relation, score in candidates:
        try:
            bag_id = select_bag(q_id, relation, corpus, scores, embeddings, config)
        except NoBagForRelation:
            skipped.append(relation)
            continue
        if config.w_conf == 0:
            score = bag_similarity(
                q_id, corpus.bags_by_id[bag_id], embeddings, config
            )
        picks.append((relation, score, bag_id))
    return candidates, picks, skipped


def build_exemplar_set(
    q_id: str,
    corpus: Corpus,
    scores: ScoreMatrix | None,
    embeddings: EmbeddingIndex | None,
    config: ScoringConfig,
) -> ExemplarSet:
    """Run all three stages for one query.

    With w_conf = 0 there is no confidence model: sentence selection falls
    back to a seeded uniform choice within the chosen bag and ordering is
    ascending by bag similarity.
    """
    candidates, picks, skipped = select_candidate_bags(
        q_id, corpus, scores, embeddings, config
    )
    rng = _query_rng(config.seed, q_id) if config.w_conf == 0 else None
    exemplars = []
    for relation, score, bag_id in picks:
        bag = corpus.bags_by_id[bag_id]
        if rng is not None:
            sentence = bag.sentences[rng.randrange(len(bag.sentences))]
        else:
            sentence = select_sentence(bag, scores, config.threshold)
        exemplars.append(
            Exemplar(sentence, bag.labelset, bag_id, relation, score)
        )
    return ExemplarSet(
        query_id=q_id,
        exemplars=_order_ascending(exemplars),
        candidates=tuple(candidates),
        skipped=tuple(skipped),
    )


def reduce_bag(bag: Bag, scores: ScoreMatrix) -> list[tuple[str, SentenceInstance]]:
    """One best sentence per bag label: highest f(s, r), in-bag order on ties.

    Labels are visited in ontology order. A label without a score column
    (e.g. the NA symbol) is rejected.
    """
    order = {name: i for i, name in enumerate(scores.relation_order)}
    unknown = [l for l in bag.labelset if l not in order]
    if unknown:
        raise ValueError(
            f"bag {bag.bag_id!r} labels {sorted(unknown)} have no score column"
        )
    pairs: list[tuple[str, SentenceInstance]] = []
    for relation in sorted(bag.labelset, key=order.__getitem__):
        best = max(
            bag.sentences,
            key=lambda s: scores.score_of(s.sentence_id, relation),
        )
        # max() keeps the first maximal element: in-bag order tie-break
        pairs.append((relation, best))
    return pairs


def group_reduced(
    pairs: list[tuple[str, SentenceInstance]]
) -> list[tuple[SentenceInstance, list[str]]]:
    """Collapse duplicate sentences, keeping the union of their relations."""
    grouped: dict[str, tuple[SentenceInstance, list[str]]] = {}
    for relation, sentence in pairs:
        if sentence.sentence_id not in grouped:
            grouped[sentence.sentence_id] = (sentence, [])
        grouped[sentence.sentence_id][1].append(relation)
    return list(grouped.values())


def build_bag_exemplar_set(
    q_id: str,
    corpus: Corpus,
    scores: ScoreMatrix | None,
    embeddings: EmbeddingIndex | None,
    config: ScoringConfig,
    reduced: bool,
) -> BagExemplarSet:
    """Stages 1 + 2 with whole-bag exemplars, optionally reduced per label."""
    candidates, picks, skipped = select_candidate_bags(
        q_id, corpus, scores, embeddings, config
    )
    exemplars = []
    for relation, score, bag_id in picks:
        bag = corpus.bags_by_id[bag_id]
        if reduced:
            sentences = tuple(s for s, _ in group_reduced(reduce_bag(bag, scores)))
        else:
            sentences = bag.sentences
        exemplars.append(
            BagExemplar(sentences, bag.labelset, bag_id, relation, score)
        )
    return BagExemplarSet(
        query_id=q_id,
        exemplars=_order_ascending(exemplars),
        candidates=tuple(candidates),
        skipped=tuple(skipped),
        reduced=reduced,
    )


def serialize_exemplar_set(
    exemplar_set: ExemplarSet | BagExemplarSet, ontology: RelationOntology
) -> dict:
    """Audit/replay record for one query's selection."""
    entries = []
    for e in exemplar_set.exemplars:
        entry = {
            "source_bag_id": e.source_bag_id,
            "candidate_relation": e.candidate_relation,
            "candidate_score": e.candidate_score,
            "labels": ontology.sorted_labels(e.labels),
        }
        if isinstance(e, BagExemplar):
            entry["sentence_id"] = None
            entry["sentence_ids"] = [s.sentence_id for s in e.sentences]
        else:
            entry["sentence_id"] = e.sentence.sentence_id
        entries.append(entry)
    record = {
        "query_id": exemplar_set.query_id,
        "exemplars": entries,
        "candidates": [[r, s] for r, s in exemplar_set.candidates],
        "skipped": list(exemplar_set.skipped),
    }
    if isinstance(exemplar_set, BagExemplarSet):
        record["style"] = "reduced_bag" if exemplar_set.reduced else "full_bag"
    else:
        record["style"] = "sentence"
    return record


def deserialize_exemplar_set(
    record: dict, corpus: Corpus
) -> ExemplarSet | BagExemplarSet:
    """Rebuild a selection from its serialized record and the corpus."""
    style = record.get("style", "sentence")
    candidates = tuple((r, float(s)) for r, s in record.get("candidates", []))
    skipped = tuple(record.get("skipped", []))
    if style == "sentence":
        exemplars = tuple(
            Exemplar(
                sentence=corpus.sentences_by_id[e["sentence_id"]],
                labels=frozenset(e["labels"]),
                source_bag_id=e["source_bag_id"],
                candidate_relation=e["candidate_relation"],
                candidate_score=float(e["candidate_score"]),
            )
            for e in record["exemplars"]
        )
        return ExemplarSet(record["query_id"], exemplars, candidates, skipped)
    exemplars = tuple(
        BagExemplar(
            sentences=tuple(
                corpus.sentences_by_id[sid] for sid in e["sentence_ids"]
            ),
            labels=frozenset(e["labels"]),
            source_bag_id=e["source_bag_id"],
            candidate_relation=e["candidate_relation"],
            candidate_score=float(e["candidate_score"]),
        )
        for e in record["exemplars"]
    )
    return BagExemplarSet(
        record["query_id"],
        exemplars,
        candidates,
        skipped,
        reduced=(style == "reduced_bag"),
    )
