"""Learned caption evaluation: a critic that scores how human-like a caption is."""
from .baselines import CiderCorpusStats, bleu, cider, normalize_scores, rouge_l
from .corpus import Caption, Dataset, ImageRecord, Vocabulary, build_vocabulary, load_dataset, synth_dataset
from .critic import GENERATED, HUMAN, CriticModel, ModelConfig, build_model, load_model, save_model, score_many
from .errors import ConfigError, DataError, ShapeError
from .estimator import CaptionCritic
from .evalstats import kendall_tau, pearson_rho, robustness_auc
from .trainer import TrainConfig, train, two_fold_score

__all__ = [
    "CaptionCritic", "Caption", "CiderCorpusStats", "ConfigError", "CriticModel", "DataError", "Dataset",
    "GENERATED", "HUMAN", "ImageRecord", "ModelConfig", "ShapeError", "TrainConfig", "Vocabulary", "bleu",
    "build_model", "build_vocabulary", "cider", "kendall_tau", "load_dataset", "load_model", "normalize_scores",
    "pearson_rho", "robustness_auc", "rouge_l", "save_model", "score_many", "synth_dataset", "train",
    "two_fold_score",
]
