"""scikit-learn style wrapper around the critic training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .augment import DEFAULT_GAMMA_GRID, SOURCES, TRANSFORMS
from .corpus import Caption, Dataset
from .critic import GENERATED, HUMAN, score_many
from .errors import DataError
from .trainer import TrainConfig, train


def _as_items(X) -> list[tuple]:
    """Normalise rows to ``(image, [references], candidate)``."""
    items = []
    for row in X:
        if len(row) != 3:
            raise DataError("each row must be (image, reference(s), candidate)")
        image, refs, cand = row
        if isinstance(refs, Caption):
            refs = [refs]
        elif refs is None:
            refs = []
        if not isinstance(cand, Caption):
            raise DataError("candidate must be a Caption")
        items.append((image, list(refs), cand))
    return items


class CaptionCritic(ClassifierMixin, BaseEstimator):
    """Learned caption metric: probability that a caption is human written.

    ``fit`` takes a :class:`~capcritic.corpus.Dataset` (positives are its
    references, negatives come from the configured mixer).  Prediction takes
    rows ``(image, reference or references, candidate)``; with several
    references the probability is averaged over them.

    Parameters mirror :class:`~capcritic.trainer.TrainConfig`.
    """

    def __init__(self, *, batch_size=100, epochs=30, learning_rate=1e-3, lr_decay=0.9, beta1=0.9,
                 beta2=0.999, adam_eps=1e-8, seed=0, context="image+caption", fusion="concat_mlp",
                 embed_dim=300, hidden_size=512, num_layers=1, mlp_hidden=512, cbp_dim=8192,
                 cbp_normalize=True, negative_sources=SOURCES, transforms=TRANSFORMS,
                 gamma_grid=DEFAULT_GAMMA_GRID, generator=None, embeddings_path=None):
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.seed = seed
        self.context = context
        self.fusion = fusion
        self.embed_dim = embed_dim
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.mlp_hidden = mlp_hidden
        self.cbp_dim = cbp_dim
        self.cbp_normalize = cbp_normalize
        self.negative_sources = negative_sources
        self.transforms = transforms
        self.gamma_grid = gamma_grid
        self.generator = generator
        self.embeddings_path = embeddings_path

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in TrainConfig.field_names()})

    def fit(self, X: Dataset, y=None, validation: Dataset | None = None):
        if not isinstance(X, Dataset):
            raise DataError("CaptionCritic.fit expects a Dataset")
        self.model_, self.history_ = train(X, self.train_config(), validation)
        self.classes_ = np.array([GENERATED, HUMAN])
        self.vocab_ = X.vocab
        return self

    def score_captions(self, X) -> np.ndarray:
        """Probability of the human class per row."""
        check_is_fitted(self, "model_")
        return score_many(self.model_, _as_items(X))

    def predict_proba(self, X) -> np.ndarray:
        p = self.score_captions(X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return self.classes_[(self.score_captions(X) > 0.5).astype(int)]
