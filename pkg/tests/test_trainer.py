import csv
import time

import numpy as np
import pytest

from mtp_net import NetworkConfig, NetworkShapeError, forward, load_params
from simulator import SimConfig, rollout_expert
from trainer import (AugmentationConfig, AugmentationStats, NonFiniteLossError, TrainConfig, Trainer, augment_scene,
                     split_by_episode, train)
from util.scene import Trajectory
from tests.conftest import straight_scene

SMALL = NetworkConfig(encoder_sizes=(16,), aggregator_sizes=(16,), horizon=10)


def _config(**changes):
    base = dict(epochs=2, batch_size=4, network=SMALL, augmentation=AugmentationConfig(enabled=False),
                validation_fraction=0.0, checkpoint_every=0)
    base.update(changes)
    return TrainConfig(**base)


def _dataset(episodes=5):
    return [straight_scene(n=1 + e % 3, scene_id=f"e{e}:f{f}", episode=e) for e in range(episodes) for f in range(2)]


def test_invalid_train_config():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        AugmentationConfig(fraction=1.5)


@pytest.mark.parametrize("seed", range(20))
def test_single_step_reduces_loss(seed):
    trainer = Trainer(_config(learning_rate=1e-4, seed=seed))
    batch = _dataset(2)
    before = trainer.step(batch)
    after, _ = trainer.batch_loss(batch)
    assert after < before


def test_training_is_reproducible_across_worker_counts():
    scenes = _dataset()
    a = train(scenes, _config(validation_fraction=0.2), workers=1)
    b = train(scenes, _config(validation_fraction=0.2), workers=3)
    assert all(np.array_equal(p, q) for p, q in zip(a.net.parameters(), b.net.parameters()))
    assert a.history == b.history
    assert a.val_scenes > 0 and a.train_scenes + a.val_scenes == len(scenes)


def test_ablation_flag_disables_aggregation():
    trainer = Trainer(_config(disable_aggregation=True))
    assert trainer.net.config.disable_aggregation


def test_fit_writes_metrics_and_checkpoints(tmp_path):
    trainer = Trainer(_config(checkpoint_every=1))
    history = trainer.fit(_dataset(3), [straight_scene(n=2, scene_id="val")], tmp_path)
    assert [row["epoch"] for row in history] == [1, 2]
    with open(tmp_path / "metrics.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["epoch", "train_loss", "val_loss", "val_ade", "val_fde", "val_mr", "val_cr"]
    assert len(rows) == 2
    for name in ("epoch_0001.mtp", "epoch_0002.mtp", "final.mtp"):
        assert (tmp_path / name).exists()
    net, metadata = load_params(tmp_path / "final.mtp")
    assert metadata["epoch"] == 2
    assert all(np.array_equal(p, q) for p, q in zip(net.parameters(), trainer.net.parameters()))


def test_fit_rejects_horizon_mismatch():
    trainer = Trainer(_config())
    with pytest.raises(NetworkShapeError):
        trainer.fit([straight_scene(horizon=5)])


def test_non_finite_loss_names_the_scene():
    scene = straight_scene(scene_id="broken")
    scene = scene.with_vehicle(0, scene.vehicles[0], Trajectory(np.full((10, 2), np.nan), 0.2))
    with pytest.raises(NonFiniteLossError, match="broken"):
        Trainer(_config()).step([scene])


def test_split_by_episode_keeps_episodes_whole():
    scenes = _dataset(5)
    train_set, val_set = split_by_episode(scenes, 0.2, seed=0)
    assert len({s.episode for s in val_set}) == 1
    assert not {s.episode for s in train_set} & {s.episode for s in val_set}
    single = _dataset(1)
    assert split_by_episode(single, 0.2, seed=0) == (single, [])


def test_augmentation_with_zero_fraction_is_identity(rng):
    scene = straight_scene()
    assert augment_scene(scene, AugmentationConfig(fraction=0.0), rng) is scene


def test_noise_free_relabel_reproduces_the_future(rng):
    scene = straight_scene(n=2)
    stats = AugmentationStats()
    relabeled = augment_scene(scene, AugmentationConfig(sigma=0.0, heading_sigma=0.0, fraction=1.0), rng,
                              stats=stats)
    assert stats.augmented == 2 and stats.failures == 0
    np.testing.assert_allclose(relabeled.future_array(), scene.future_array(), atol=1e-6)
    np.testing.assert_allclose(relabeled.positions(), scene.positions())


def test_noisy_relabel_ends_at_the_original_endpoint(rng):
    scene = straight_scene(n=2)
    stats = AugmentationStats()
    relabeled = augment_scene(scene, AugmentationConfig(sigma=0.5, heading_sigma=0.1, fraction=1.0), rng,
                              stats=stats)
    assert stats.augmented == 2
    assert not np.allclose(relabeled.positions(), scene.positions())
    ends = np.linalg.norm(relabeled.future_array()[:, -1] - scene.future_array()[:, -1], axis=1)
    assert np.all(ends <= 1.0)
    assert relabeled.ids == scene.ids


@pytest.mark.parametrize("refresh_every, passes", [(0, 1), (1, 3), (2, 2)])
def test_relabels_are_reused_between_refreshes(refresh_every, passes):
    augmentation = AugmentationConfig(fraction=1.0, refresh_every=refresh_every)
    trainer = Trainer(_config(epochs=3, augmentation=augmentation))
    scenes = _dataset(2)
    trainer.fit(scenes)
    vehicles = sum(s.n for s in scenes)
    assert trainer.aug_stats.augmented + trainer.aug_stats.failures == passes * vehicles


def test_negative_refresh_is_rejected():
    with pytest.raises(ValueError):
        AugmentationConfig(refresh_every=-1)

@pytest.mark.slow
def test_overfits_a_single_scene():
    scene = straight_scene(n=1)
    cfg = _config(epochs=600, learning_rate=1e-3,
                  network=NetworkConfig(encoder_sizes=(32,), aggregator_sizes=(32,), horizon=10))
    trainer = Trainer(cfg)
    history = trainer.fit([scene])
    assert history[-1]["train_loss"] < 0.1 * history[0]["train_loss"]
    predictions, _ = forward(trainer.net, scene)
    ade = np.linalg.norm(predictions - scene.future_array(), axis=-1).mean()
    assert ade < 1.0


@pytest.mark.slow
def test_default_training_fits_the_budget():
    scenes, _ = rollout_expert(SimConfig(), episodes=2, seed=0)
    sample = scenes[:40]
    cfg = TrainConfig(epochs=1, validation_fraction=0.0, checkpoint_every=0)
    trainer = Trainer(cfg)

    start = time.perf_counter()
    trainer.fit(sample)
    per_scene_first_epoch = (time.perf_counter() - start) / len(sample)
    start = time.perf_counter()
    for s in range(0, len(sample), cfg.batch_size):
        trainer.step(sample[s:s + cfg.batch_size])
    per_scene_epoch = (time.perf_counter() - start) / len(sample)

    # 2000 scenes: relabels once, then plain epochs
    estimate = 2000 * (per_scene_first_epoch + (TrainConfig().epochs - 1) * per_scene_epoch)
    assert estimate < 30 * 60
