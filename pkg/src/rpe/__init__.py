"""Relation path embedding for knowledge base completion."""

from .kb import (AdjacencyIndex, DataError, TripleStore, TypeConstraintIndex, build_type_index,
                 classify_relations)
from .model import (MODES, ConfigError, ModelParams, ScoreBreakdown, compose_projection, path_representation,
                    project, score_final, score_goal, score_path, score_relation)
from .paths import (PathEvidence, enumerate_paths, mine_evidence, path_probability, path_relation_confidence,
                    top_paths_for_relation)
from .trainer import (CorruptedTriple, NumericalError, TrainConfig, Trainer, initialize, margin_loss,
                      sample_negative, sgd_epoch, triple_objective)
from .evaluate import (LinkPredictionReport, RankResult, ThresholdSet, generate_classification_negatives,
                       link_prediction, rank_entity, triple_classification, tune_thresholds)

__version__ = "0.1.0"
