import json

import numpy as np
import pytest

from util.intention_type import Intention
from util.scene import Scene, Trajectory, VehicleSnapshot


def straight_scene(n=2, horizon=10, dt=0.2, speed=10.0, spacing=20.0, scene_id="s0", episode=0):
    """n vehicles driving north in parallel lanes at constant speed."""
    vehicles, futures = [], []
    steps = np.arange(1, horizon + 1)[:, None]
    for k in range(n):
        x0, y0 = 1.75 + k * spacing, -30.0
        vehicles.append(VehicleSnapshot(k + 1, (x0, y0), np.pi / 2, Intention.STRAIGHT))
        futures.append(Trajectory(np.hstack([np.full_like(steps, x0, dtype=float),
                                             y0 + speed * dt * steps]), dt))
    return Scene(tuple(vehicles), tuple(futures), dt, scene_id, episode)


SIM = {
    "scenario": {"n_vehicles": [1, 2], "episode_length": 12.0, "seed": 5},
    "dataset": {"horizon": 10, "dt": 0.2, "t_stride": 10},
    "control": {"horizon": 5},
}
TRAIN = {
    "epochs": 2,
    "batch_size": 8,
    "validation_fraction": 0.5,
    "network": {"encoder_sizes": [8], "aggregator_sizes": [8], "horizon": 10},
    "augmentation": {"enabled": False},
}

@pytest.fixture
def scene():
    return straight_scene()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def configs(tmp_path):
    """Small simulation and training config files."""
    sim, train = tmp_path / "sim.json", tmp_path / "train.json"
    sim.write_text(json.dumps(SIM))
    train.write_text(json.dumps(TRAIN))
    return sim, train
