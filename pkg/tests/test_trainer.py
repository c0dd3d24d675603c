import math

import numpy as np
import pytest

from capcritic import trainer
from capcritic.augment import NegativeMixer
from capcritic.corpus import synth_dataset
from capcritic.critic import GENERATED, HUMAN
from capcritic.errors import ConfigError, DataError
from capcritic.trainer import AdamState, TrainConfig, adam_step, fold_of, make_batch, two_fold_score, write_history

TINY = dict(embed_dim=6, hidden_size=5, mlp_hidden=6, cbp_dim=16, batch_size=8, epochs=2)


def test_adam_matches_hand_computation():
    p = np.array([1.0, -2.0])
    state = AdamState.zeros_like([p])
    g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.3])
    adam_step([p], [g1], state, lr=0.1)
    # first step: mhat = g, vhat = g^2, so the update is lr * sign(g) (up to eps)
    np.testing.assert_allclose(p, [1.0 - 0.1, -2.0 + 0.1], atol=1e-7)
    adam_step([p], [g2], state, lr=0.1)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    mhat, vhat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
    p1 = np.array([1.0, -2.0]) - 0.1 * g1 / (np.abs(g1) + 1e-8)
    np.testing.assert_allclose(p, p1 - 0.1 * mhat / (np.sqrt(vhat) + 1e-8), rtol=1e-12)
    assert state.t == 2


def test_adam_minimises_a_quadratic():
    p = np.array([3.0, -4.0])
    state = AdamState.zeros_like([p])
    for _ in range(2000):
        adam_step([p], [2 * p], state, lr=0.05)
    assert np.abs(p).max() < 1e-2


def test_adam_shape_mismatch():
    p = np.zeros(2)
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(3)], AdamState.zeros_like([p]), 0.1)


def test_learning_rate_schedule():
    cfg = TrainConfig(learning_rate=1e-3, lr_decay=0.9)
    assert cfg.lr_at(1) == 1e-3
    assert cfg.lr_at(3) == pytest.approx(1e-3 * 0.81)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=7)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(negative_sources=("nope",))
    assert TrainConfig(gamma_grid=[0.5]).gamma_grid == (0.5,)


def test_batch_is_half_human_half_negative(tiny_dataset):
    batch = make_batch(tiny_dataset, NegativeMixer(), 20, seed=1)
    assert [e.label for e in batch] == [HUMAN] * 10 + [GENERATED] * 10
    for e in batch[:10]:
        k = tiny_dataset.images.index(e.image)
        refs = tiny_dataset.references[k]
        assert e.candidate in refs and e.reference in refs
        assert refs.index(e.candidate) != refs.index(e.reference)


def test_fold_of_is_stable_and_balanced():
    ids = [f"img{k:05d}" for k in range(2000)]
    folds = [fold_of(i) for i in ids]
    assert folds == [fold_of(i) for i in ids]
    assert set(folds) == {0, 1}
    assert abs(np.mean(folds) - 0.5) < 0.05


def test_training_is_deterministic_and_reduces_loss(tiny_dataset):
    cfg = TrainConfig(**{**TINY, "epochs": 6, "learning_rate": 1e-2})
    m1, h1 = trainer.train(tiny_dataset, cfg)
    m2, h2 = trainer.train(tiny_dataset, cfg)
    for a, b in zip(m1.parameters(), m2.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    assert [r.mean_loss for r in h1] == [r.mean_loss for r in h2]
    assert h1[-1].mean_loss < h1[0].mean_loss
    assert [r.lr for r in h1] == [cfg.lr_at(e) for e in range(1, 7)]
    np.testing.assert_array_equal(m1.embedding.weight.data[tiny_dataset.vocab.pad_id], 0.0)


def test_epoch_length(monkeypatch, tiny_dataset):
    calls = []
    real = trainer.make_batch
    monkeypatch.setattr(trainer, "make_batch", lambda *a, **k: calls.append(1) or real(*a, **k))
    trainer.train(tiny_dataset, TrainConfig(**{**TINY, "epochs": 1}))
    assert len(calls) == math.ceil(tiny_dataset.n_references() / 4)


def test_validation_history_and_csv(tmp_path, tiny_dataset):
    _, hist = trainer.train(tiny_dataset.subset(range(10)), TrainConfig(**TINY), tiny_dataset.subset(range(10, 16)))
    assert all(0 < r.val_human_mean < 1 and 0 < r.val_generated_mean < 1 for r in hist)
    write_history(hist, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,lr,val_human_mean,val_generated_mean"
    assert len(lines) == 3


def test_two_fold_scores_every_caption_once(tiny_dataset):
    res = two_fold_score(tiny_dataset, "synth", TrainConfig(**{**TINY, "epochs": 1}))
    n_gen = sum(len(c) for c in tiny_dataset.generated["synth"])
    assert len(res.pairs) == n_gen
    assert len(res.runs) == 2
    assert sorted(i for r in res.runs for i in r.scored_image_ids) == sorted(p.image_id for p in res.pairs)
    assert all(0 < p.score < 1 for p in res.pairs)


def test_two_fold_threads_do_not_change_results(tiny_dataset):
    cfg = TrainConfig(**{**TINY, "epochs": 1})
    a = two_fold_score(tiny_dataset, "synth", cfg, replicas=2, threads=1)
    b = two_fold_score(tiny_dataset, "synth", cfg, replicas=2, threads=3)
    assert [p.score for p in a.pairs] == [p.score for p in b.pairs]


def test_two_fold_protocol_isolation(monkeypatch, tiny_dataset):
    """Every scored caption's image is absent from the training set of the model that scored it."""
    trained, scored = {}, []
    real_train, real_score = trainer.train, trainer.score_many

    def spy_train(ds, cfg, validation=None):
        model, hist = real_train(ds, cfg, validation)
        trained[id(model)] = {im.id for im in ds.images}
        return model, hist

    def spy_score(model, items, *a, **k):
        scored.extend((id(model), img.id) for img, _, _ in items)
        return real_score(model, items, *a, **k)

    monkeypatch.setattr(trainer, "train", spy_train)
    monkeypatch.setattr(trainer, "score_many", spy_score)
    two_fold_score(tiny_dataset, "synth", TrainConfig(**{**TINY, "epochs": 1}), replicas=2)
    assert len(trained) == 4 and scored
    assert all(img not in trained[m] for m, img in scored)


def test_two_fold_errors(tiny_dataset):
    cfg = TrainConfig(**TINY)
    with pytest.raises(DataError):
        two_fold_score(tiny_dataset, "missing", cfg)
    with pytest.raises(ConfigError):
        two_fold_score(tiny_dataset, "synth", cfg, replicas=0)


def test_train_on_dataset_without_generator_needs_other_sources():
    ds = synth_dataset(1, 8)
    bare = type(ds)(ds.images, ds.references, ds.vocab)
    with pytest.raises(ConfigError):
        trainer.train(bare, TrainConfig(**TINY))
    trainer.train(bare, TrainConfig(**{**TINY, "negative_sources": ("pathological", "monte_carlo")}))
