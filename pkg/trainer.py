"""
Training loop for the trajectory prediction network.

Batches are whole scenes; the collision term only pairs vehicles of the same
scene. Gradients come from the network's analytic backward pass and are
applied by torch's Adam through tensors that share memory with the numpy
parameters.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from bicycle_mpc import DynamicVehicle, MpcError, MpcSettings, VehicleLimits, solve_mpc_to_point
from mtp_net import MtpNetwork, NetworkConfig, NetworkShapeError, backward, forward, init_network, save_params
from util.configuration import config_digest, to_dict
from util.scene import Scene, SceneError, Trajectory, VehicleSnapshot
from util.trajectory_metrics import LossConfig, OfflineReport, offline_metrics, pool_offline_reports, total_loss

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "train_loss", "val_loss", "val_ade", "val_fde", "val_mr", "val_cr"]


class NonFiniteLossError(RuntimeError):

    def __init__(self, scene_id: str, value: float):
        super().__init__(f"non-finite loss {value} on scene {scene_id!r}")
        self.scene_id = scene_id
        self.value = value


@dataclass(frozen=True)
class AugmentationConfig:
    enabled: bool = True
    sigma: float = 0.5
    heading_sigma: float = 0.1
    fraction: float = 0.5
    # relabels ending further than this from the original endpoint are rejected
    max_residual: float = 1.0
    # epochs between fresh relabels; 0 relabels once and reuses the result
    refresh_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"augmentation fraction must be in [0, 1], got {self.fraction}")
        if self.sigma < 0 or self.heading_sigma < 0:
            raise ValueError("augmentation noise must be >= 0")
        if self.refresh_every < 0:
            raise ValueError(f"refresh_every must be >= 0, got {self.refresh_every}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    collision_weight: float = 1.0
    safety_distance: float = 2.0
    normalize_by_horizon: bool = False
    miss_threshold: float = 2.0
    disable_aggregation: bool = False
    validation_fraction: float = 0.2
    checkpoint_every: int = 10
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    limits: VehicleLimits = field(default_factory=VehicleLimits)
    mpc: MpcSettings = field(default_factory=MpcSettings)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")

    def loss_config(self) -> LossConfig:
        return LossConfig(self.safety_distance, self.collision_weight, self.normalize_by_horizon)

    def network_config(self) -> NetworkConfig:
        if self.disable_aggregation and not self.network.disable_aggregation:
            return replace(self.network, disable_aggregation=True)
        return self.network


@dataclass
class AugmentationStats:
    augmented: int = 0
    failures: int = 0


# ---------------------------------------------------------------- augmentation

def augment_scene(scene: Scene, cfg: AugmentationConfig, rng: np.random.Generator,
                  limits: VehicleLimits = VehicleLimits(), mpc: MpcSettings = MpcSettings(),
                  stats: Optional[AugmentationStats] = None) -> Scene:
    """Perturb the current pose of a random subset of vehicles and relabel their futures.

    The relabeled future is the MPC rollout from the perturbed pose to the
    original final point, one step per future sample. A relabel that misses
    that point by more than `max_residual` keeps the vehicle unaugmented.
    """
    if scene.futures is None:
        raise SceneError(f"scene {scene.scene_id!r} has no futures to relabel")
    stats = stats if stats is not None else AugmentationStats()
    if cfg.fraction == 0:
        return scene
    for k in range(scene.n):
        if rng.random() >= cfg.fraction:
            continue
        noise = rng.normal(0.0, cfg.sigma, size=2) if cfg.sigma > 0 else np.zeros(2)
        heading_noise = float(rng.normal(0.0, cfg.heading_sigma)) if cfg.heading_sigma > 0 else 0.0

        vehicle = scene.vehicles[k]
        future = scene.futures[k].points
        position = np.asarray(vehicle.position)
        speed = float(np.linalg.norm(future[0] - position)) / scene.dt
        last_step = future[-1] - (future[-2] if len(future) > 1 else position)
        if np.linalg.norm(last_step) > 1e-3:
            end_heading = math.atan2(last_step[1], last_step[0])
        else:
            end_heading = vehicle.heading

        start = position + noise
        initial = DynamicVehicle(start[0], start[1], vehicle.heading + heading_noise,
                                 speed, limits.wheelbase, limits.v_max)
        try:
            solution = solve_mpc_to_point(initial, (future[-1][0], future[-1][1], end_heading),
                                          len(future), scene.dt, limits, settings=mpc)
        except MpcError as e:
            logger.debug(f"Relabel failed on {scene.scene_id} vehicle {vehicle.id}: {e}")
            stats.failures += 1
            continue
        if np.linalg.norm(solution.rollout[-1, :2] - future[-1]) > cfg.max_residual:
            stats.failures += 1
            continue
        stats.augmented += 1
        scene = scene.with_vehicle(
            k,
            VehicleSnapshot(vehicle.id, (start[0], start[1]), initial.theta, vehicle.intention),
            Trajectory(solution.rollout[:, :2], scene.dt),
        )
    return scene


# ---------------------------------------------------------------- evaluation

def scene_loss(net: MtpNetwork, scene: Scene, loss_cfg: LossConfig) -> Tuple[float, List[np.ndarray]]:
    predictions, acts = forward(net, scene)
    loss, _, _, grad = total_loss(predictions, scene.future_array(), loss_cfg)
    if not math.isfinite(loss):
        raise NonFiniteLossError(scene.scene_id, loss)
    return loss, backward(net, acts, grad)


def evaluate_offline(predictor, scenes: Sequence[Scene], miss_threshold: float = 2.0,
                     safety_distance: float = 2.0) -> Tuple[OfflineReport, List[Dict]]:
    """Pooled report over scenes plus one row per scene (scene_id, n_vehicles, ade, fde, mr, cr)."""
    if not scenes:
        raise SceneError("no scenes to evaluate")
    reports, rows = [], []
    for scene in scenes:
        report = offline_metrics(predictor.predict(scene), scene.future_array(), miss_threshold, safety_distance)
        reports.append(report)
        rows.append({"scene_id": scene.scene_id, "n_vehicles": report.n_vehicles, "ade": report.ade,
                     "fde": report.fde, "mr": report.mr, "cr": report.cr})
    return pool_offline_reports(reports), rows


def check_compatible(net: MtpNetwork, scenes: Sequence[Scene]):
    horizons = {s.horizon for s in scenes}
    if horizons and horizons != {net.horizon}:
        raise NetworkShapeError(f"network predicts T={net.horizon} points but the dataset has "
                                f"T={sorted(h for h in horizons if h is not None)}")


def split_by_episode(scenes: Sequence[Scene], fraction: float, seed: int) -> Tuple[List[Scene], List[Scene]]:
    episodes = sorted({s.episode for s in scenes})
    n_val = int(round(fraction * len(episodes)))
    if fraction > 0 and len(episodes) > 1:
        n_val = min(max(n_val, 1), len(episodes) - 1)
    else:
        n_val = 0
    rng = np.random.default_rng([seed & (2 ** 63 - 1), 3])
    held_out = {episodes[i] for i in rng.permutation(len(episodes))[:n_val]}
    train = [s for s in scenes if s.episode not in held_out]
    val = [s for s in scenes if s.episode in held_out]
    return train, val


# ---------------------------------------------------------------- training

class Trainer:

    def __init__(self, cfg: TrainConfig, net: Optional[MtpNetwork] = None, workers: int = 1):
        self.cfg = cfg
        self.net = net if net is not None else init_network(cfg.network_config(), cfg.seed)
        self.loss_cfg = cfg.loss_config()
        self.workers = max(1, workers)
        # share memory with the numpy parameters so Adam updates them in place
        self._tensors = [torch.from_numpy(p).requires_grad_(True) for p in self.net.parameters()]
        self.optimizer = torch.optim.Adam(self._tensors, lr=cfg.learning_rate, betas=tuple(cfg.betas),
                                          eps=cfg.adam_eps, weight_decay=0.0, foreach=False)
        self.aug_stats = AugmentationStats()

    def batch_loss(self, scenes: Sequence[Scene]) -> Tuple[float, List[np.ndarray]]:
        """Mean scene loss over the batch and its gradient, summed in batch order."""
        if self.workers > 1 and len(scenes) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(lambda s: scene_loss(self.net, s, self.loss_cfg), scenes))
        else:
            results = [scene_loss(self.net, s, self.loss_cfg) for s in scenes]
        total = 0.0
        grads = [np.zeros_like(p) for p in self.net.parameters()]
        for loss, scene_grads in results:
            total += loss
            for acc, g in zip(grads, scene_grads):
                acc += g
        n = len(scenes)
        return total / n, [g / n for g in grads]

    def step(self, scenes: Sequence[Scene]) -> float:
        """One optimizer update on a batch; returns the batch loss before the update."""
        loss, grads = self.batch_loss(scenes)
        for tensor, g in zip(self._tensors, grads):
            tensor.grad = torch.from_numpy(g)
        self.optimizer.step()
        for tensor in self._tensors:
            tensor.grad = None
        return loss

    def validation(self, scenes: Sequence[Scene]) -> Tuple[float, Optional[OfflineReport]]:
        if not scenes:
            return math.nan, None
        loss = sum(scene_loss(self.net, s, self.loss_cfg)[0] for s in scenes) / len(scenes)
        report, _ = evaluate_offline(self.net, scenes, self.cfg.miss_threshold, self.cfg.safety_distance)
        return loss, report

    def _augment(self, scenes: List[Scene], epoch: int) -> List[Scene]:
        aug = self.cfg.augmentation
        if not aug.enabled or aug.fraction == 0:
            return scenes
        rng = np.random.default_rng([self.cfg.seed & (2 ** 63 - 1), 2, epoch])
        return [augment_scene(s, aug, rng, self.cfg.limits, self.cfg.mpc, self.aug_stats) for s in scenes]

    def fit(self, train: Sequence[Scene], val: Sequence[Scene] = (), out_dir: Optional[Union[str, Path]] = None,
            progress: bool = False) -> List[Dict]:
        if not train:
            raise SceneError("no training scenes")
        check_compatible(self.net, list(train) + list(val))
        cfg = self.cfg
        out_dir = Path(out_dir) if out_dir is not None else None
        metrics_file = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            metrics_file = open(out_dir / "metrics.csv", "w", encoding="utf-8", newline="")
            writer = csv.writer(metrics_file)
            writer.writerow(METRICS_COLUMNS)

        order_rng = np.random.default_rng([cfg.seed & (2 ** 63 - 1), 1])
        refresh = cfg.augmentation.refresh_every
        augmented = None
        history = []
        try:
            for epoch in tqdm(range(1, cfg.epochs + 1), desc="epochs", disable=not progress):
                if augmented is None or (refresh and (epoch - 1) % refresh == 0):
                    augmented = self._augment(list(train), epoch)
                order = order_rng.permutation(len(train))
                epoch_scenes = [augmented[i] for i in order]
                losses = []
                for start in range(0, len(epoch_scenes), cfg.batch_size):
                    batch = epoch_scenes[start:start + cfg.batch_size]
                    losses.append(self.step(batch) * len(batch))
                train_loss = sum(losses) / len(epoch_scenes)
                val_loss, report = self.validation(val)
                row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                       "val_ade": report.ade if report else math.nan, "val_fde": report.fde if report else math.nan,
                       "val_mr": report.mr if report else math.nan, "val_cr": report.cr if report else math.nan}
                history.append(row)
                logger.info(f"epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f} "
                            f"ade {row['val_ade']:.3f} fde {row['val_fde']:.3f}")
                if metrics_file is not None:
                    writer.writerow([_csv_value(row[c]) for c in METRICS_COLUMNS])
                    metrics_file.flush()
                    if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                        self.save(out_dir / f"epoch_{epoch:04d}.mtp", epoch)
            if out_dir is not None:
                self.save(out_dir / "final.mtp", cfg.epochs)
        finally:
            if metrics_file is not None:
                metrics_file.close()
        if self.aug_stats.failures:
            logger.warning(f"{self.aug_stats.failures} augmentation relabel(s) failed "
                           f"({self.aug_stats.augmented} succeeded)")
        return history

    def save(self, path: Path, epoch: int):
        save_params(self.net, path, metadata={
            "epoch": epoch,
            "train_config": to_dict(self.cfg),
            "config_digest": config_digest(self.cfg),
        })


def _csv_value(value):
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return value


@dataclass
class TrainResult:
    net: MtpNetwork
    history: List[Dict]
    train_scenes: int
    val_scenes: int
    augmentation: AugmentationStats


def train(scenes: Sequence[Scene], cfg: TrainConfig, out_dir: Optional[Union[str, Path]] = None,
          workers: int = 1, progress: bool = False) -> TrainResult:
    """Split by episode, fit, and checkpoint. Fixed (scenes, cfg) gives bit-identical parameters."""
    if not scenes:
        raise SceneError("no scenes to train on")
    train_set, val_set = split_by_episode(scenes, cfg.validation_fraction, cfg.seed)
    logger.info(f"Training on {len(train_set)} scenes, validating on {len(val_set)}")
    trainer = Trainer(cfg, workers=workers)
    history = trainer.fit(train_set, val_set, out_dir, progress)
    return TrainResult(trainer.net, history, len(train_set), len(val_set), trainer.aug_stats)
