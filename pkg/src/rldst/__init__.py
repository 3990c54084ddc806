"""Dialogue state tracking with supervised pretraining and reward-only domain transfer."""

from .corpus import Corpus, Dialogue, Ontology, SyntheticSpec, generate_synthetic_corpus, load_corpus
from .embeddings import EmbeddingTable
from .evaluation import run_setup_matrix, run_weak_supervision_curve
from .metrics import evaluate_dialogues, jaccard_reward, turn_level_accuracy
from .pg import PGConfig, finetune_pg
from .statenet import ModelConfig, StateNet, load_checkpoint, save_checkpoint
from .supervised import TrainConfig, train_supervised

__all__ = ["Corpus", "Dialogue", "Ontology", "SyntheticSpec", "generate_synthetic_corpus", "load_corpus",
           "EmbeddingTable", "run_setup_matrix", "run_weak_supervision_curve", "evaluate_dialogues",
           "jaccard_reward", "turn_level_accuracy", "PGConfig", "finetune_pg", "ModelConfig", "StateNet",
           "load_checkpoint", "save_checkpoint", "TrainConfig", "train_supervised"]
