"""Coarse-to-fine entity knowledge pre-training for MRC-style NER."""

from .corpus import (
    AnchoredSentence,
    Gazetteer,
    MRCExample,
    QueryTable,
    build_general_dataset,
    load_anchored_corpus,
    match_gazetteer,
)
from .evaluation import EvalResult, gazetteer_matching_baseline, micro_prf, predict, score
from .fine_typing import ClusterModel, build_pseudo_dataset, fet_stage, kmeans
from .model import EntityMention, SpanExtractor, SpanScores, decode_entities, pool_entity
from .objectives import cluster_loss, cluster_variances, cluster_weights, fet_loss, mrc_loss
from .pipeline import PipelineConfig, esi_stage, run_cofee, validate_config
from .self_picking import RelabelConfig, nee_stage, relabel_dataset

__version__ = "0.1.0"

__all__ = [
    "AnchoredSentence", "Gazetteer", "MRCExample", "QueryTable",
    "build_general_dataset", "load_anchored_corpus", "match_gazetteer",
    "EvalResult", "gazetteer_matching_baseline", "micro_prf", "predict", "score",
    "ClusterModel", "build_pseudo_dataset", "fet_stage", "kmeans",
    "EntityMention", "SpanExtractor", "SpanScores", "decode_entities", "pool_entity",
    "cluster_loss", "cluster_variances", "cluster_weights", "fet_loss", "mrc_loss",
    "PipelineConfig", "esi_stage", "run_cofee", "validate_config",
    "RelabelConfig", "nee_stage", "relabel_dataset",
]
