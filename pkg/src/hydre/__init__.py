"""HYDRE: hybrid exemplar selection for bag-supervised relation extraction.

A trained bag-level model ranks candidate relations for each query; for
every candidate the most relevant training bag is retrieved by combined
semantic similarity and model confidence, and its most representative
sentence becomes an in-context exemplar for an LLM judge.
"""

__version__ = "0.1.0"

from .corpus import (
    Bag,
    Corpus,
    CorpusError,
    EntitySpan,
    QueryInstance,
    RelationOntology,
    SentenceInstance,
    builtin_ontology_path,
    index_bags_by_relation,
    load_bags,
    load_ontology,
    load_queries,
)
from .providers import (
    EmbeddingClient,
    EmbeddingIndex,
    ProviderError,
    ScoreMatrix,
    ScoringConfig,
    bag_confidence,
    bag_similarity,
    combined_bag_score,
    cosine_sim,
)
from .selection import (
    BagExemplar,
    BagExemplarSet,
    Exemplar,
    ExemplarSet,
    NoBagForRelation,
    build_bag_exemplar_set,
    build_exemplar_set,
    reduce_bag,
    select_bag,
    select_candidates,
    select_sentence,
)
from .baselines import (
    FlatExample,
    ablation_variant,
    flatten,
    mmr_select,
    random_k,
    topk_sim,
)
from .prompting import (
    ExemplarBlock,
    ParsedPrediction,
    PromptTemplate,
    parse_response,
    render_prompt,
)
from .judge import (
    GenerationParams,
    PromptTooLong,
    ReplayCache,
    ReplayMiss,
    generate,
    run_batch,
)
from .evaluation import (
    EvalReport,
    FactSet,
    confusion_pairs,
    mcnemar,
    recall_at_k,
    score,
)
