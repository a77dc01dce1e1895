"""Multi-label evaluation: micro/macro F1, Recall@k, paired McNemar
significance, and per-relation-pair confusion counts.

The unit of evaluation is the fact: a (query_id, relation) pair. NA never
enters the fact space; an NA query contributes no gold facts and a correct
NA prediction contributes nothing, while relations predicted for an NA
query count as false positives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import AbstractSet, Iterable, Mapping, Sequence

from .corpus import QueryInstance, RelationOntology
from .providers import ScoreMatrix
from .selection import select_candidates

# below this many discordant pairs the chi-square approximation is poor
EXACT_BINOMIAL_THRESHOLD = 25


@dataclass(frozen=True)
class FactSet:
    """(query_id, relation) pairs plus the query universe they came from."""

    facts: frozenset[tuple[str, str]]
    query_ids: frozenset[str]

    @classmethod
    def from_queries(cls, queries: Iterable[QueryInstance]) -> "FactSet":
        queries = list(queries)
        return cls(
            frozenset((q.query_id, r) for q in queries for r in q.gold),
            frozenset(q.query_id for q in queries),
        )

    @classmethod
    def from_predictions(
        cls,
        predictions: Mapping[str, AbstractSet[str]],
        ontology: RelationOntology,
    ) -> "FactSet":
        facts = set()
        for query_id, relations in predictions.items():
            for r in relations:
                if r == ontology.na_symbol or r not in ontology:
                    raise ValueError(f"prediction {r!r} is not an ontology relation")
                facts.add((query_id, r))
        return cls(frozenset(facts), frozenset(predictions))


@dataclass(frozen=True)
class RelationScore:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class EvalReport:
    micro_precision: float
    micro_recall: float
    micro_f1: float
    macro_f1: float
    per_relation: dict[str, RelationScore]
    n_queries: int
    n_gold_facts: int
    # per gold fact: was it predicted? ordered by (query_id, relation)
    paired_records: tuple[tuple[tuple[str, str], bool], ...]


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def score(gold: FactSet, pred: FactSet, ontology: RelationOntology) -> EvalReport:
    """Micro F1 over pooled fact counts; macro F1 averaged over relations
    with gold support."""
    unknown = pred.query_ids - gold.query_ids
    if unknown:
        raise ValueError(f"predictions for unknown queries: {sorted(unknown)}")
    tp_facts = gold.facts & pred.facts
    fp_facts = pred.facts - gold.facts
    fn_facts = gold.facts - pred.facts
    if not gold.facts and not pred.facts:
        # all-NA gold predicted all-NA: vacuously perfect
        micro_p = micro_r = micro_f1 = 1.0
    else:
        micro_p, micro_r, micro_f1 = _prf(len(tp_facts), len(fp_facts), len(fn_facts))

    per_relation: dict[str, RelationScore] = {}
    supported_f1s = []
    for name in ontology.names:
        tp = sum(1 for _, r in tp_facts if r == name)
        fp = sum(1 for _, r in fp_facts if r == name)
        fn = sum(1 for _, r in fn_facts if r == name)
        support = tp + fn
        p, r, f1 = _prf(tp, fp, fn)
        per_relation[name] = RelationScore(p, r, f1, support)
        if support > 0:
            supported_f1s.append(f1)
    if supported_f1s:
        macro_f1 = sum(supported_f1s) / len(supported_f1s)
    else:
        # no supported relation: perfect only if nothing was predicted
        macro_f1 = 1.0 if not pred.facts else 0.0

    paired = tuple(
        (fact, fact in pred.facts) for fact in sorted(gold.facts)
    )
    return EvalReport(
        micro_precision=micro_p,
        micro_recall=micro_r,
        micro_f1=micro_f1,
        macro_f1=macro_f1,
        per_relation=per_relation,
        n_queries=len(gold.query_ids),
        n_gold_facts=len(gold.facts),
        paired_records=paired,
    )


def recall_at_k(gold: FactSet, scores: ScoreMatrix, k: int) -> float:
    """Fraction of gold facts whose relation ranks in the query's top k.

    Ranking and tie-breaking follow candidate selection. Queries with no
    gold facts (NA) never enter the denominator.
    """
    if not gold.facts:
        return 1.0
    hits = 0
    top_cache: dict[str, set[str]] = {}
    for query_id, relation in gold.facts:
        if query_id not in top_cache:
            top_cache[query_id] = {
                r for r, _ in select_candidates(query_id, scores, k)
            }
        if relation in top_cache[query_id]:
            hits += 1
    return hits / len(gold.facts)


def pair_reports(report_a: EvalReport, report_b: EvalReport) -> list[tuple[bool, bool]]:
    """Align two reports' per-fact correctness bits over the same gold."""
    facts_a = [fact for fact, _ in report_a.paired_records]
    facts_b = [fact for fact, _ in report_b.paired_records]
    if facts_a != facts_b:
        raise ValueError("reports were scored against different gold facts")
    return [
        (a_ok, b_ok)
        for (_, a_ok), (_, b_ok) in zip(report_a.paired_records, report_b.paired_records)
    ]


@dataclass(frozen=True)
class McNemarResult:
    statistic: float
    p_value: float
    b: int  # A correct, B wrong
    c: int  # A wrong, B correct
    method: str  # "chi2" | "exact-binomial" | "degenerate"


def _binom_cdf(m: int, n: int) -> float:
    """P(X <= m) for X ~ Binomial(n, 1/2), exact."""
    total = sum(math.comb(n, i) for i in range(m + 1))
    return total / 2.0**n


def mcnemar(paired: Sequence[tuple[bool, bool]]) -> McNemarResult:
    """Continuity-corrected McNemar test on paired correctness bits.

    With fewer than 25 discordant pairs the p-value comes from the exact
    two-sided binomial instead of the chi-square tail.
    """
    b = sum(1 for a_ok, b_ok in paired if a_ok and not b_ok)
    c = sum(1 for a_ok, b_ok in paired if not a_ok and b_ok)
    n = b + c
    if n == 0:
        return McNemarResult(0.0, 1.0, 0, 0, "degenerate")
    statistic = (abs(b - c) - 1) ** 2 / n
    if n < EXACT_BINOMIAL_THRESHOLD:
        p = 2.0 * min(_binom_cdf(min(b, c), n), 0.5)
        return McNemarResult(statistic, p, b, c, "exact-binomial")
    # chi-square(1) upper tail
    p = math.erfc(math.sqrt(statistic / 2.0))
    return McNemarResult(statistic, p, b, c, "chi2")


@dataclass(frozen=True)
class ConfusionRow:
    relation_a: str
    relation_b: str
    a_as_a: int
    a_as_b: int
    b_as_a: int
    b_as_b: int


def confusion_pairs(
    gold: FactSet,
    pred: FactSet,
    pairs: Sequence[tuple[str, str]],
    ontology: RelationOntology,
) -> list[ConfusionRow]:
    """2x2 counts for each relation pair: how often gold-rA queries were
    predicted rA vs rB, and symmetrically."""
    for pair in pairs:
        for name in pair:
            if name not in ontology:
                raise ValueError(f"unknown relation {name!r} in pair list")

    def count(gold_r: str, pred_r: str) -> int:
        return sum(
            1
            for query_id, r in gold.facts
            if r == gold_r and (query_id, pred_r) in pred.facts
        )

    return [
        ConfusionRow(
            relation_a=ra,
            relation_b=rb,
            a_as_a=count(ra, ra),
            a_as_b=count(ra, rb),
            b_as_a=count(rb, ra),
            b_as_b=count(rb, rb),
        )
        for ra, rb in pairs
    ]
