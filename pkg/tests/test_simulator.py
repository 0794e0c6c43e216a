import time
from dataclasses import replace

import numpy as np
import pytest

from mtp_net import NetworkConfig, init_network
from simulator import (ExpertPredictor, ScenarioConfig, ScenarioError, SimConfig, SpawnSpec, ZeroPredictor,
                       ControlConfig, DatasetConfig, Expert, closed_loop_eval, export_trajectories_csv,
                       generate_scenario, make_vehicle, read_episode_logs, rollout_expert, run_closed_loop_episode,
                       run_expert_episode, write_episode_logs)
from util.intention_type import Arm, Intention
from util.intersection_map import IntersectionMap
from util.scene import write_scenes

ONCOMING = [SpawnSpec(2, Arm.NORTH, Intention.STRAIGHT, 0.0, 10.0),
            SpawnSpec(3, Arm.NORTH, Intention.STRAIGHT, 12.0, 10.0),
            SpawnSpec(4, Arm.NORTH, Intention.STRAIGHT, 24.0, 10.0)]


def _config(episode_length=15.0, **scenario):
    return SimConfig(scenario=ScenarioConfig(episode_length=episode_length, **scenario))


def _drive(cfg, spawns, seconds):
    """Run the expert without despawning; returns the map and per-tick {id: (s, v)}."""
    imap = IntersectionMap(cfg.map)
    vehicles = [make_vehicle(sp, imap) for sp in spawns]
    expert = Expert(imap, cfg)
    history = []
    for _ in range(int(round(seconds / cfg.scenario.dt))):
        commands = expert.step(vehicles)
        for v in vehicles:
            expert.advance(v, commands[v.id], cfg.scenario.dt)
        history.append({v.id: (v.s, v.v) for v in vehicles})
    return imap, history


def test_scenario_is_deterministic_in_seed():
    cfg = ScenarioConfig(seed=42)
    assert generate_scenario(cfg, 0) == generate_scenario(cfg, 0)
    assert generate_scenario(cfg, 0) != generate_scenario(cfg, 1)


def test_round_robin_uses_every_arm():
    spawns = generate_scenario(ScenarioConfig(n_vehicles=(4, 4), arm_assignment="round_robin"))
    assert sorted(sp.arm for sp in spawns) == list(Arm)


def test_spawns_respect_headway():
    for episode in range(20):
        spawns = generate_scenario(ScenarioConfig(n_vehicles=(6, 6), seed=3), episode)
        for arm in Arm:
            positions = sorted(sp.s for sp in spawns if sp.arm == arm)
            assert all(b - a >= 8.0 - 1e-9 for a, b in zip(positions, positions[1:]))


def test_infeasible_scenarios():
    with pytest.raises(ScenarioError):
        generate_scenario(ScenarioConfig(n_vehicles=(20, 20)))
    with pytest.raises(ScenarioError):
        generate_scenario(ScenarioConfig(n_vehicles=(2, 2), arms=("south",), arm_assignment="round_robin",
                                         spawn_zone=5.0))
    close = ({"arm": "north", "intention": "straight", "s": 0.0, "speed": 10.0},
             {"arm": "north", "intention": "left", "s": 3.0, "speed": 10.0})
    with pytest.raises(ScenarioError):
        generate_scenario(ScenarioConfig(scripted=close))


def test_scripted_scenario_instantiates_stated_vehicles():
    scripted = ({"id": 1, "arm": "south", "intention": "left", "s": 35.0, "speed": 8.0},
                {"id": 2, "arm": "north", "intention": "straight", "s": 0.0, "speed": 10.0})
    spawns = generate_scenario(ScenarioConfig(scripted=scripted), episode=5)
    assert spawns == [SpawnSpec(1, Arm.SOUTH, Intention.LEFT, 35.0, 8.0),
                      SpawnSpec(2, Arm.NORTH, Intention.STRAIGHT, 0.0, 10.0)]


def test_priority_straight_vehicle_keeps_cruising():
    cfg = _config()
    log = run_expert_episode([SpawnSpec(1, Arm.SOUTH, Intention.STRAIGHT, 0.0, 10.0)], cfg, IntersectionMap(cfg.map))
    speeds = [v["v"] for tick in log.ticks for v in tick["vehicles"]]
    assert min(speeds) > 0.9 * 10.0
    assert log.events == []
    assert log.vehicles[1]["status"] == "completed"


def test_left_turner_yields_to_oncoming_traffic():
    cfg = _config()
    turner = SpawnSpec(1, Arm.SOUTH, Intention.LEFT, 35.0, 8.0)
    imap, history = _drive(cfg, [turner] + ONCOMING, 15.0)
    zone = imap.conflict_zone((Arm.SOUTH, Intention.LEFT), (Arm.NORTH, Intention.STRAIGHT),
                              2 * cfg.vehicle_radius + cfg.expert.conflict_margin)
    assert zone is not None
    entered = next(k for k, state in enumerate(history) if state[1][0] >= zone.a_in)
    assert min(state[1][1] for state in history[:entered]) < 0.1
    for q in (2, 3, 4):
        assert history[entered][q][0] > zone.b_out


def test_straight_vehicle_from_same_arm_does_not_yield():
    cfg = _config()
    _, history = _drive(cfg, [SpawnSpec(1, Arm.SOUTH, Intention.STRAIGHT, 35.0, 8.0)] + ONCOMING, 6.0)
    assert min(state[1][1] for state in history) > 0.9 * 8.0


def test_fast_follower_keeps_headway():
    cfg = _config()
    spawns = [SpawnSpec(1, Arm.SOUTH, Intention.STRAIGHT, 20.0, 8.0),
              SpawnSpec(2, Arm.SOUTH, Intention.STRAIGHT, 0.0, 11.0)]
    log = run_expert_episode(spawns, cfg, IntersectionMap(cfg.map))
    gaps, follower_speeds = [], []
    for tick in log.ticks:
        poses = {v["id"]: v for v in tick["vehicles"]}
        if len(poses) == 2:
            gaps.append(np.hypot(poses[1]["x"] - poses[2]["x"], poses[1]["y"] - poses[2]["y"]))
            follower_speeds.append(poses[2]["v"])
    assert min(gaps) >= cfg.scenario.headway
    assert min(follower_speeds) < 10.0
    assert log.events == []


def test_episode_log_file_and_csv(tmp_path):
    cfg = _config(episode_length=3.0)
    spawns = [SpawnSpec(1, Arm.SOUTH, Intention.STRAIGHT, 0.0, 10.0),
              SpawnSpec(2, Arm.EAST, Intention.RIGHT, 0.0, 9.0)]
    log = run_expert_episode(spawns, cfg, IntersectionMap(cfg.map), episode=3, seed=7)
    path = tmp_path / "episodes.ndjson"
    write_episode_logs(path, [log])
    (loaded,) = read_episode_logs(path)
    assert loaded.episode == 3 and loaded.seed == 7
    assert loaded.ticks == log.ticks
    assert loaded.vehicles == log.vehicles
    assert len(log.ticks) == 31
    rows = export_trajectories_csv([loaded], tmp_path / "traj.csv")
    assert rows == 62
    header = (tmp_path / "traj.csv").read_text().splitlines()[0]
    assert header == "episode,tick,vehicle,x,y,theta,v"


def test_truncated_episode_log(tmp_path):
    cfg = _config(episode_length=1.0)
    log = run_expert_episode([SpawnSpec(1, Arm.SOUTH, Intention.STRAIGHT, 0.0, 10.0)], cfg, IntersectionMap(cfg.map))
    path = tmp_path / "episodes.ndjson"
    path.write_text("\n".join(log.to_lines()[:-1]) + "\n")
    with pytest.raises(ValueError, match="truncated"):
        read_episode_logs(path)


def test_single_vehicle_episodes_give_single_vehicle_scenes():
    cfg = _config(n_vehicles=(1, 1))
    scenes, logs = rollout_expert(cfg, episodes=2)
    assert len(logs) == 2
    assert scenes and all(s.n == 1 for s in scenes)
    assert all(s.horizon == cfg.dataset.horizon for s in scenes)
    outcome = logs[0].outcome()
    assert outcome.spawned == outcome.completed + outcome.off_map + outcome.alive


@pytest.mark.slow
def test_expert_dataset_is_collision_free_and_reproducible(tmp_path):
    cfg = _config(episode_length=20.0, seed=11)
    scenes, logs = rollout_expert(cfg, episodes=4)
    assert all(log.events == [] for log in logs)
    again, _ = rollout_expert(cfg, episodes=4, workers=2)
    write_scenes(tmp_path / "a.ndjson", scenes, cfg.dataset.horizon, cfg.dataset.dt)
    write_scenes(tmp_path / "b.ndjson", again, cfg.dataset.horizon, cfg.dataset.dt)
    assert (tmp_path / "a.ndjson").read_bytes() == (tmp_path / "b.ndjson").read_bytes()


def test_closed_loop_rejects_short_predictor_horizon():
    with pytest.raises(ScenarioError, match="control horizon"):
        closed_loop_eval(ZeroPredictor(5), _config(), episodes=1)


def test_unusable_predictions_abort_the_episode():
    class NanPredictor:
        horizon = 30

        def predict(self, scene, world=None):
            return np.full((scene.n, 30, 2), np.nan)

    cfg = _config(episode_length=2.0)
    log = run_closed_loop_episode(NanPredictor(), [SpawnSpec(1, Arm.SOUTH, Intention.STRAIGHT, 0.0, 10.0)], cfg,
                                  IntersectionMap(cfg.map))
    assert log.aborted and "tick 0" in log.abort_reason
    assert log.outcome().v2v_collisions == 0


@pytest.mark.slow
def test_zero_predictor_causes_collisions():
    cfg = SimConfig(scenario=ScenarioConfig(n_vehicles=(4, 4), arm_assignment="round_robin", episode_length=10.0),
                    control=ControlConfig(horizon=5))
    report, logs = closed_loop_eval(ZeroPredictor(cfg.dataset.horizon), cfg, episodes=1)
    assert report.v2v_collisions + report.v2b_collisions > 0
    assert np.isfinite(report.dcr_v2v) and np.isfinite(report.dcr_v2b)
    assert report.spawned == report.completed + report.off_map + report.alive


@pytest.mark.slow
def test_expert_predictor_reproduces_straight_cruise():
    cfg = _config(episode_length=6.0)
    imap = IntersectionMap(cfg.map)
    spawns = [SpawnSpec(1, Arm.SOUTH, Intention.STRAIGHT, 10.0, 10.0)]
    expert_path = run_expert_episode(spawns, cfg, imap).positions()[1]
    closed = run_closed_loop_episode(ExpertPredictor(cfg, imap), spawns, cfg, imap)
    closed_path = closed.positions()[1]
    assert not closed.aborted
    n = min(len(expert_path), len(closed_path))
    rms = np.sqrt(np.mean(np.sum((expert_path[:n] - closed_path[:n]) ** 2, axis=1)))
    assert rms < 0.3


@pytest.mark.slow
def test_expert_predictor_keeps_left_turner_on_its_lane():
    cfg = _config(episode_length=12.0)
    imap = IntersectionMap(cfg.map)
    spawns = [SpawnSpec(1, Arm.SOUTH, Intention.LEFT, 10.0, 8.0)]
    log = run_closed_loop_episode(ExpertPredictor(cfg, imap), spawns, cfg, imap)
    assert not log.aborted and log.events == []
    route = imap.route(Arm.SOUTH, Intention.LEFT)
    offsets = [route.project(p)[1] for p in log.positions()[1]]
    assert np.sqrt(np.mean(np.square(offsets))) < 0.3


class CountingPredictor(ZeroPredictor):

    def __init__(self, horizon):
        super().__init__(horizon)
        self.calls = 0

    def predict(self, scene, world=None):
        self.calls += 1
        return super().predict(scene, world)


@pytest.mark.parametrize("replan_every, calls", [(1, 20), (2, 10), (3, 7)])
def test_predictor_runs_once_per_replan(replan_every, calls):
    cfg = replace(_config(episode_length=2.0), control=ControlConfig(replan_every=replan_every))
    predictor = CountingPredictor(cfg.dataset.horizon)
    spawns = [SpawnSpec(1, Arm.SOUTH, Intention.STRAIGHT, 0.0, 10.0)]
    log = run_closed_loop_episode(predictor, spawns, cfg, IntersectionMap(cfg.map))
    assert not log.aborted
    assert predictor.calls == calls


def test_replan_period_must_be_positive():
    with pytest.raises(ValueError):
        ControlConfig(replan_every=0)


@pytest.mark.slow
def test_closed_loop_with_default_network_fits_the_evaluation_budget():
    cfg = SimConfig()
    net = init_network(NetworkConfig(), seed=0)
    episodes = 3
    start = time.perf_counter()
    closed_loop_eval(net, cfg, episodes, seed=0)
    per_episode = (time.perf_counter() - start) / episodes
    assert per_episode * 100 < 20 * 60
