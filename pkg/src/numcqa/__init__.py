"""Numerical complex query answering over knowledge graphs.

Benchmark construction (graph splits, numerical edges, query sampling),
exact answering by graph search, and the Number Reasoning Network with its
values-as-entities ablation.
"""
from .dsl import GENERAL_TYPE_NAMES, Node, parse, serialize
from .encoding import EncodingSpec
from .evaluate import Report, evaluate, random_expected_mrr
from .kg import (NUM_RELATIONS, KnowledgeGraph, SplitGraphs, augment_numerical_edges, load_triples,
                 make_synthetic_kg, split_edges)
from .model import ModelConfig, NumberReasoningNetwork
from .sampler import QueryRecord, ground_general_type, sample_dataset, search_answers
from .train import TrainConfig, Trainer, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "GENERAL_TYPE_NAMES", "Node", "parse", "serialize", "EncodingSpec", "Report", "evaluate",
    "random_expected_mrr", "NUM_RELATIONS", "KnowledgeGraph", "SplitGraphs", "augment_numerical_edges",
    "load_triples", "make_synthetic_kg", "split_edges", "ModelConfig", "NumberReasoningNetwork",
    "QueryRecord", "ground_general_type", "sample_dataset", "search_answers", "TrainConfig", "Trainer",
    "load_checkpoint", "save_checkpoint", "train",
]
