import numpy as np
import pytest

from geomtl.towers import TowerConfig, build_model
from geomtl.trainer import (
    Features,
    TrainConfig,
    TrainingError,
    evaluation_schedule,
    incremental_step,
    score,
    train,
)
from geomtl.worldgen import EmbeddingTable, Interactions, build_datasets, build_world

from conftest import small_config


@pytest.fixture(scope="module")
def bundle(small_world):
    return build_datasets(small_world, seed=0)


@pytest.fixture(scope="module")
def feats(small_world):
    w = small_world
    return Features(EmbeddingTable(np.arange(w.n_users), w.user_embeddings),
                    EmbeddingTable(np.arange(len(w.title_is_global)), w.title_embeddings), w.group_map)


def _model(world, kind="mtl", seed=0):
    c = world.config
    return build_model(kind, TowerConfig(c.user_dim, c.title_dim, hidden_dim=16, num_groups=c.n_groups), seed=seed)


def _params(model):
    return {k: v.copy() for k, v in model.named_params().items()}


def test_zero_learning_rate_is_frozen(small_world, bundle, feats):
    model = _model(small_world)
    before = _params(model)
    data = bundle.random_split.train.select(slice(0, 500))
    # one full-data batch per epoch: batch-norm statistics are the same every epoch
    _, man = train(model, data, feats, TrainConfig(learning_rate=0.0, epochs=3, batch_size=500))
    for k, v in model.named_params().items():
        np.testing.assert_array_equal(v, before[k])
    m = man.epoch_means()
    np.testing.assert_allclose(m, m[0], rtol=1e-12)


@pytest.mark.parametrize("kind", ["baseline", "mtl"])
def test_training_is_deterministic(small_world, bundle, feats, kind):
    runs = []
    for _ in range(2):
        model, man = train(_model(small_world, kind), bundle.random_split.train, feats, TrainConfig(epochs=1, seed=4))
        runs.append((_params(model), man.loss_curve))
    assert runs[0][1] == runs[1][1]
    for k in runs[0][0]:
        np.testing.assert_array_equal(runs[0][0][k], runs[1][0][k])


def test_shuffle_seed_changes_run(small_world, bundle, feats):
    curves = [train(_model(small_world), bundle.random_split.train, feats, TrainConfig(epochs=1, seed=s))[1].loss_curve
              for s in (0, 1)]
    assert curves[0] != curves[1]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_decreases(seed):
    world = build_world(small_config(), seed=seed)
    fe = Features(EmbeddingTable(np.arange(world.n_users), world.user_embeddings),
                  EmbeddingTable(np.arange(len(world.title_is_global)), world.title_embeddings), world.group_map)
    data = build_datasets(world, seed=seed).upsampled_split.train
    _, man = train(_model(world, seed=seed), data, fe, TrainConfig(epochs=5, seed=seed))
    m = man.epoch_means()
    assert len(m) == 5 and m[-1] < m[0]


def test_empty_incremental_day_is_noop(small_world, bundle, feats):
    model, man = train(_model(small_world), bundle.random_split.train, feats, TrainConfig(epochs=1))
    before, n_curve = _params(model), len(man.loss_curve)
    incremental_step(model, Interactions.empty(), feats, TrainConfig(), man)
    assert len(man.loss_curve) == n_curve
    for k, v in model.named_params().items():
        np.testing.assert_array_equal(v, before[k])


def test_empty_training_set_raises(small_world, feats):
    with pytest.raises(TrainingError, match="empty"):
        train(_model(small_world), Interactions.empty(), feats, TrainConfig())


def test_schedule_never_leaks(small_world, bundle, feats):
    split = bundle.random_split
    model, man = train(_model(small_world), split.train, feats, TrainConfig(epochs=1))
    days = []
    for day, m, seen in evaluation_schedule(model, split, feats, TrainConfig(), man):
        assert max(seen) == day - 1
        days.append(day)
        score(m, split.tests[day], feats)
    assert days == sorted(split.tests)
    # the first test day reuses the base model; every later day adds one fine-tuning stage
    stages = [s for s, *_ in man.loss_curve]
    assert sorted(set(stages) - {"base"}) == sorted(f"day{d - 1}" for d in days[1:])


def test_schedule_detects_leak(small_world, bundle, feats):
    split = bundle.random_split
    model, man = train(_model(small_world), split.train, feats, TrainConfig(epochs=1))
    man.stages[0]["days_seen"].append(max(split.tests))
    with pytest.raises(TrainingError, match="leakage"):
        list(evaluation_schedule(model, split, feats, TrainConfig(), man))


def test_frozen_schedule_skips_fine_tuning(small_world, bundle, feats):
    split = bundle.random_split
    model, man = train(_model(small_world), split.train, feats, TrainConfig(epochs=1))
    before = _params(model)
    for _ in evaluation_schedule(model, split, feats, TrainConfig(incremental=False), man):
        pass
    for k, v in model.named_params().items():
        np.testing.assert_array_equal(v, before[k])


def test_missing_embedding_raises(small_world, bundle, feats):
    data = bundle.random_split.train
    bad = Interactions(np.r_[data.user_id[:9], 10**9], data.title_id[:10], data.territory[:10],
                       data.day[:10], data.label[:10])
    with pytest.raises(KeyError, match=str(10**9)):
        train(_model(small_world), bad, feats, TrainConfig())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_raises(small_world, bundle, feats):
    data = bundle.random_split.train.select(slice(0, 64))
    users = feats.users.matrix.copy()
    users[data.user_id[0]] = np.inf
    poisoned = Features(EmbeddingTable(feats.users.ids, users), feats.titles, feats.group_map)
    with pytest.raises(TrainingError, match="non-finite"):
        train(_model(small_world), data, poisoned, TrainConfig(batch_size=64))


def test_invalid_config():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1).validate()
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0).validate()
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"epochs": 1, "bogus": 2})


def test_scores_are_probabilities(small_world, bundle, feats):
    split = bundle.random_split
    model, _ = train(_model(small_world), split.train, feats, TrainConfig(epochs=1))
    day = min(split.tests)
    s = score(model, split.tests[day], feats, chunk=97)
    assert s.shape == (len(split.tests[day]),)
    assert np.all((s > 0) & (s < 1))
    np.testing.assert_allclose(s, score(model, split.tests[day], feats), rtol=0, atol=1e-12)

