"""
Intersection micro-simulator.

Generates scenarios, drives them with a rule-based expert to produce
demonstrations, and evaluates a trajectory predictor in closed loop where
every vehicle is a kinematic bicycle steered by MPC onto its own predicted
trajectory. Vehicle-to-vehicle and vehicle-to-curb contacts are counted
per contact interval.
"""

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from bicycle_mpc import (ControlCommand, DynamicVehicle, MpcError, MpcProblem, MpcSettings, VehicleLimits,
                         reference_from_points, shift_controls, solve_mpc, step_bicycle)
from util.collision import CollisionDetector, CollisionEvent, CollisionType
from util.intention_type import Arm, Intention
from util.intersection_map import ConflictZone, IntersectionMap, MapConfig, Route
from util.scene import Scene, TrackSequence, VehicleSnapshot, slice_scenes, wrap_angle
from util.trajectory_metrics import EpisodeOutcome, OnlineReport, dcr

logger = logging.getLogger(__name__)

EPISODE_FORMAT = "mtp-episode"
EPISODE_FORMAT_VERSION = 1


class ScenarioError(ValueError):
    pass


class ExpertCollisionError(RuntimeError):

    def __init__(self, message, episode: int, events: Sequence[CollisionEvent] = ()):
        super().__init__(message)
        self.episode = episode
        self.events = list(events)


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class ScenarioConfig:
    n_vehicles: Tuple[int, int] = (2, 6)
    arms: Tuple[str, ...] = ("south", "east", "north", "west")
    intentions: Tuple[str, ...] = ("left", "straight", "right")
    arm_assignment: str = "random"
    speed_range: Tuple[float, float] = (8.0, 11.0)
    headway: float = 8.0
    spawn_zone: float = 25.0
    episode_length: float = 40.0
    dt: float = 0.1
    seed: int = 0
    # each entry: {"arm", "intention", "s", "speed"} and optionally "id"
    scripted: Tuple[Dict, ...] = ()

    def __post_init__(self):
        lo, hi = self.n_vehicles
        if not 1 <= lo <= hi:
            raise ValueError(f"n_vehicles must satisfy 1 <= min <= max, got {self.n_vehicles}")
        if not self.headway > 0 or not self.dt > 0:
            raise ValueError("headway and dt must be positive")
        if not 0 <= self.speed_range[0] <= self.speed_range[1]:
            raise ValueError(f"bad speed_range {self.speed_range}")
        if self.arm_assignment not in ("random", "round_robin"):
            raise ValueError(f"arm_assignment must be 'random' or 'round_robin', got {self.arm_assignment!r}")
        if not self.arms or not self.intentions:
            raise ValueError("arms and intentions must not be empty")
        for a in self.arms:
            Arm.parse(a)
        for i in self.intentions:
            Intention.parse(i)


@dataclass(frozen=True)
class ExpertConfig:
    time_headway: float = 1.2
    comfortable_decel: float = 2.0
    max_accel: float = 1.5
    jam_buffer: float = 2.0
    stop_gap: float = 1.0
    lateral_accel: float = 2.0
    speed_tau: float = 0.5
    yield_window: float = 4.0
    clear_margin: float = 1.0
    accept_accel: float = 1.0
    queue_speed: float = 0.5
    lane_tolerance: float = 1.2
    leader_range: float = 60.0
    conflict_margin: float = 1.0


@dataclass(frozen=True)
class DatasetConfig:
    horizon: int = 30
    dt: float = 0.2
    t_stride: int = 5


@dataclass(frozen=True)
class ControlConfig:
    horizon: int = 10
    # sim ticks between MPC solves; the plan is held in between
    replan_every: int = 2
    mpc: MpcSettings = field(default_factory=MpcSettings)

    def __post_init__(self):
        if self.horizon < 1 or self.replan_every < 1:
            raise ValueError(f"control horizon and replan_every must be >= 1, got {self.horizon}, {self.replan_every}")


@dataclass(frozen=True)
class SimConfig:
    map: MapConfig = field(default_factory=MapConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    limits: VehicleLimits = field(default_factory=VehicleLimits)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    vehicle_radius: float = 0.9
    max_reseeds: int = 20

    def __post_init__(self):
        ratio = self.dataset.dt / self.scenario.dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(f"dataset dt {self.dataset.dt} must be a whole multiple of sim dt {self.scenario.dt}")

    @property
    def frame_step(self) -> int:
        return int(round(self.dataset.dt / self.scenario.dt))

    @property
    def n_ticks(self) -> int:
        return int(round(self.scenario.episode_length / self.scenario.dt))


# ---------------------------------------------------------------- scenarios

@dataclass(frozen=True)
class SpawnSpec:
    id: int
    arm: Arm
    intention: Intention
    s: float
    speed: float


def generate_scenario(cfg: ScenarioConfig, episode: int = 0, attempt: int = 0) -> List[SpawnSpec]:
    """Initial vehicles for one episode; deterministic in (seed, episode, attempt)."""
    if cfg.scripted:
        return _scripted_scenario(cfg)
    rng = np.random.default_rng([cfg.seed & (2 ** 63 - 1), episode, attempt])
    arms = [Arm.parse(a) for a in cfg.arms]
    intentions = [Intention.parse(i) for i in cfg.intentions]
    lo, hi = cfg.n_vehicles
    n = int(rng.integers(lo, hi + 1))
    capacity = int(cfg.spawn_zone // cfg.headway) + 1
    if n > capacity * len(arms):
        raise ScenarioError(f"{n} vehicles cannot keep a {cfg.headway} m headway within a "
                            f"{cfg.spawn_zone} m spawn zone on {len(arms)} arm(s)")

    counts = {a: 0 for a in arms}
    for i in range(n):
        if cfg.arm_assignment == "round_robin":
            arm = arms[i % len(arms)]
            if counts[arm] >= capacity:
                raise ScenarioError(f"arm {arm.name} cannot hold {counts[arm] + 1} vehicles at headway {cfg.headway} m")
        else:
            open_arms = [a for a in arms if counts[a] < capacity]
            arm = open_arms[int(rng.integers(len(open_arms)))]
        counts[arm] += 1

    spawns = []
    for arm in arms:
        k = counts[arm]
        if k == 0:
            continue
        slack = cfg.spawn_zone - (k - 1) * cfg.headway
        offsets = np.sort(rng.uniform(0.0, slack, size=k))
        for j in range(k):
            intention = intentions[int(rng.integers(len(intentions)))]
            speed = float(rng.uniform(*cfg.speed_range))
            spawns.append(SpawnSpec(len(spawns) + 1, arm, intention, float(offsets[j] + j * cfg.headway), speed))
    return spawns


def _scripted_scenario(cfg: ScenarioConfig) -> List[SpawnSpec]:
    spawns = []
    for i, entry in enumerate(cfg.scripted):
        try:
            spawns.append(SpawnSpec(int(entry.get("id", i + 1)), Arm.parse(entry["arm"]),
                                    Intention.parse(entry["intention"]), float(entry["s"]), float(entry["speed"])))
        except (KeyError, TypeError, ValueError) as e:
            raise ScenarioError(f"scripted vehicle {i}: {e}") from None
    if len({sp.id for sp in spawns}) != len(spawns):
        raise ScenarioError("scripted vehicles need distinct ids")
    for arm in Arm:
        positions = sorted(sp.s for sp in spawns if sp.arm == arm)
        if any(b - a < cfg.headway for a, b in zip(positions, positions[1:])):
            raise ScenarioError(f"scripted vehicles on arm {arm.name} are closer than the {cfg.headway} m headway")
    return spawns


# ---------------------------------------------------------------- world

@dataclass
class SimVehicle:
    id: int
    route: Route
    s: float
    v: float
    x: float
    y: float
    theta: float
    desired_speed: float
    committed: bool = False
    plan: Optional[np.ndarray] = None

    @property
    def intention(self) -> Intention:
        return self.route.intention

    @property
    def arm(self) -> Arm:
        return self.route.entry

    def snapshot(self) -> VehicleSnapshot:
        return VehicleSnapshot(self.id, (self.x, self.y), self.theta, self.intention)


@dataclass
class World:
    tick: int
    vehicles: List[SimVehicle]
    imap: IntersectionMap


def make_vehicle(spawn: SpawnSpec, imap: IntersectionMap) -> SimVehicle:
    route = imap.route(spawn.arm, spawn.intention)
    x, y, theta = route.pose_at(spawn.s)
    return SimVehicle(spawn.id, route, spawn.s, spawn.speed, x, y, wrap_angle(theta), spawn.speed,
                      committed=spawn.s >= route.stop_s)


# ---------------------------------------------------------------- expert

class Expert:
    """Rule-based driver.

    Car following is IDM on the lane, slowed for turn curvature. Vehicles that
    must give way stop at their stop line until every conflicting vehicle
    has cleared, is queued, or is far enough away, and commit once they reach
    the point where stopping would need more than comfortable braking.
    Everyone brakes for a conflict zone another vehicle currently occupies.
    """

    def __init__(self, imap: IntersectionMap, cfg: SimConfig):
        self.imap = imap
        self.cfg = cfg.expert
        self.limits = cfg.limits
        self.dt = cfg.scenario.dt
        self.jam_distance = cfg.scenario.headway + cfg.expert.jam_buffer
        self.clearance = 2 * cfg.vehicle_radius + cfg.expert.conflict_margin

    def step(self, vehicles: Sequence[SimVehicle]) -> Dict[int, ControlCommand]:
        """One command per vehicle. Updates each vehicle's commitment flag."""
        ordered = sorted(vehicles, key=lambda v: v.id)
        leaders = {v.id: self._leader(v, ordered) for v in ordered}
        queued = {v.id: self._is_queued(v, leaders[v.id]) for v in ordered}
        commands = {}
        for me in ordered:
            commands[me.id] = ControlCommand(self._accel(me, ordered, leaders, queued), self._steer(me))
        return commands

    def advance(self, v: SimVehicle, command: ControlCommand, dt: float):
        """Move along the lane: arc length with the pre-update speed, then speed."""
        v.s += v.v * dt
        v.v = min(max(v.v + command.accel * dt, 0.0), self.limits.v_max)
        x, y, theta = v.route.pose_at(v.s)
        v.x, v.y, v.theta = x, y, wrap_angle(theta)

    def _idm(self, v, v0, gap, dv, s0):
        a, b = self.cfg.max_accel, self.cfg.comfortable_decel
        s_star = s0 + max(0.0, v * self.cfg.time_headway + v * dv / (2 * math.sqrt(a * b)))
        return a * (1.0 - (v / max(v0, 0.1)) ** 4 - (s_star / max(gap, 0.1)) ** 2)

    def _stop_at(self, me: SimVehicle, target_s: float) -> float:
        gap = target_s - me.s + self.cfg.stop_gap
        return self._idm(me.v, me.desired_speed, gap, me.v, self.cfg.stop_gap)

    def _turn_speed(self, route: Route) -> float:
        return math.sqrt(self.cfg.lateral_accel * route.turn_radius)

    def _curve_accel(self, me: SimVehicle) -> float:
        lo, hi = me.route.turn_interval
        if me.s > hi:
            return math.inf
        v_turn = self._turn_speed(me.route)
        if me.s >= lo:
            v_limit = v_turn
        else:
            v_limit = math.sqrt(v_turn ** 2 + 2 * self.cfg.comfortable_decel * (lo - me.s))
        return (v_limit - me.v) / self.cfg.speed_tau

    def _leader(self, me: SimVehicle, vehicles: Sequence[SimVehicle]) -> Optional[Tuple[SimVehicle, float]]:
        """Closest vehicle ahead in my lane: (vehicle, center distance along my route)."""
        best = None
        c, s = math.cos(me.theta), math.sin(me.theta)
        for q in vehicles:
            if q.id == me.id:
                continue
            dx, dy = q.x - me.x, q.y - me.y
            dist = math.hypot(dx, dy)
            if dist > self.cfg.leader_range or dx * c + dy * s <= 0:
                continue
            s_q, offset = me.route.project((q.x, q.y), s_hint=me.s + dist, window=0.6 * dist + 3.0)
            if abs(offset) > self.cfg.lane_tolerance or s_q <= me.s:
                continue
            if abs(wrap_angle(q.theta - float(me.route.heading_at(s_q)))) > math.pi / 4:
                continue
            gap = s_q - me.s
            if best is None or gap < best[1]:
                best = (q, gap)
        return best

    def _is_queued(self, q: SimVehicle, leader) -> bool:
        if leader is None or q.v >= self.cfg.queue_speed or q.s >= q.route.stop_s:
            return False
        lead = leader[0]
        return lead.v < self.cfg.queue_speed and lead.s < lead.route.stop_s

    def _must_yield(self, me: SimVehicle, q: SimVehicle) -> bool:
        me_priority = self.imap.is_priority(me.arm)
        q_priority = self.imap.is_priority(q.arm)
        if me_priority != q_priority:
            return q_priority
        return (me.intention == Intention.LEFT and q.arm == me.arm.opposite
                and q.intention != Intention.LEFT)

    def _clear_time(self, me: SimVehicle, s_out: float) -> float:
        distance = max(s_out - me.s, 0.0)
        v = me.v
        if math.isfinite(me.route.turn_radius):
            v = min(v, self._turn_speed(me.route))
        a = self.cfg.accept_accel
        return (-v + math.sqrt(v * v + 2 * a * distance)) / a

    def _accepts(self, me: SimVehicle, q: SimVehicle, zone: ConflictZone, queued: Dict[int, bool]) -> bool:
        if q.s > zone.b_out:
            return True
        if q.s >= zone.b_in:
            return False
        if queued[q.id]:
            return True
        t_q = (zone.b_in - q.s) / max(q.v, q.desired_speed, 0.1)
        return t_q > self.cfg.yield_window and t_q > self._clear_time(me, zone.a_out) + self.cfg.clear_margin

    def _accel(self, me, vehicles, leaders, queued) -> float:
        v = me.v
        leader = leaders[me.id]
        if leader is None:
            candidates = [self.cfg.max_accel * (1.0 - (v / max(me.desired_speed, 0.1)) ** 4)]
        else:
            q, gap = leader
            candidates = [self._idm(v, me.desired_speed, gap, v - q.v, self.jam_distance)]
        candidates.append(self._curve_accel(me))

        conflicts = []
        for q in vehicles:
            if q.id == me.id:
                continue
            zone = self.imap.conflict_zone(me.route.key, q.route.key, self.clearance)
            if zone is None or me.s >= zone.a_in:
                continue
            conflicts.append((q, zone))
            if zone.b_in <= q.s <= zone.b_out:
                candidates.append(self._stop_at(me, zone.a_in))

        if not me.committed:
            accepted = all(self._accepts(me, q, zone, queued) for q, zone in conflicts if self._must_yield(me, q))
            to_stop_line = me.route.stop_s - me.s
            if accepted and to_stop_line <= v * v / (2 * self.cfg.comfortable_decel) + v * self.dt + 1.0:
                me.committed = True
            elif not accepted:
                candidates.append(self._stop_at(me, me.route.stop_s))

        a = min(candidates)
        return float(min(max(a, -self.limits.a_max), min(self.cfg.max_accel, self.limits.a_max)))

    def _steer(self, me: SimVehicle) -> float:
        radius = me.route.curvature_radius_at(me.s)
        if not math.isfinite(radius):
            return 0.0
        sign = 1.0 if me.intention == Intention.LEFT else -1.0
        return sign * math.atan(self.limits.wheelbase / radius)


# ---------------------------------------------------------------- episode logs

@dataclass
class EpisodeLog:
    """Per-tick poses, contact events and per-vehicle outcomes of one episode."""
    episode: int
    seed: int
    dt: float
    vehicles: Dict[int, Dict] = field(default_factory=dict)
    ticks: List[Dict] = field(default_factory=list)
    events: List[CollisionEvent] = field(default_factory=list)
    aborted: bool = False
    abort_reason: str = ""

    @classmethod
    def start(cls, episode: int, seed: int, dt: float, vehicles: Sequence[SimVehicle]) -> "EpisodeLog":
        log = cls(episode, seed, dt)
        for v in vehicles:
            log.vehicles[v.id] = {"arm": v.arm.name.lower(), "intention": v.intention.label,
                                  "desired_speed": v.desired_speed, "spawn_tick": 0,
                                  "despawn_tick": None, "status": "alive"}
        return log

    def record(self, tick: int, vehicles: Sequence[SimVehicle]):
        self.ticks.append({"tick": tick, "vehicles": [
            {"id": v.id, "x": v.x, "y": v.y, "theta": v.theta, "v": v.v}
            for v in sorted(vehicles, key=lambda v: v.id)
        ]})

    def despawn(self, vehicle: SimVehicle, tick: int, status: str):
        self.vehicles[vehicle.id]["despawn_tick"] = tick
        self.vehicles[vehicle.id]["status"] = status

    def count(self, kind: CollisionType) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    def to_lines(self) -> List[str]:
        header = {"format": EPISODE_FORMAT, "version": EPISODE_FORMAT_VERSION, "episode": self.episode,
                  "seed": self.seed, "dt": self.dt}
        summary = {"summary": True, "episode": self.episode,
                   "vehicles": [{"id": vid, **info} for vid, info in sorted(self.vehicles.items())],
                   "events": [e.to_dict() for e in self.events],
                   "aborted": self.aborted, "abort_reason": self.abort_reason}
        lines = [header] + self.ticks + [summary]
        return [json.dumps(line, separators=(",", ":")) for line in lines]

    def positions(self) -> Dict[int, np.ndarray]:
        paths: Dict[int, List] = {}
        for record in self.ticks:
            for v in record["vehicles"]:
                paths.setdefault(v["id"], []).append((v["x"], v["y"]))
        return {vid: np.asarray(p, dtype=np.float64) for vid, p in paths.items()}

    def tracks(self) -> List[TrackSequence]:
        rows: Dict[int, List] = {}
        for record in self.ticks:
            for v in record["vehicles"]:
                rows.setdefault(v["id"], []).append((record["tick"], v["x"], v["y"], v["theta"]))
        tracks = []
        for vid in sorted(rows):
            data = np.asarray(rows[vid], dtype=np.float64)
            tracks.append(TrackSequence(
                track_id=vid,
                frames=data[:, 0].astype(np.int64),
                xy=data[:, 1:3],
                heading=data[:, 3],
                intention=Intention.parse(self.vehicles[vid]["intention"]),
                episode=self.episode,
            ))
        return tracks

    def outcome(self) -> EpisodeOutcome:
        statuses = [info["status"] for info in self.vehicles.values()]
        return EpisodeOutcome(
            paths=[p for _, p in sorted(self.positions().items())],
            v2v_collisions=self.count(CollisionType.V2V),
            v2b_collisions=self.count(CollisionType.V2B),
            aborted=self.aborted,
            spawned=len(self.vehicles),
            completed=statuses.count("completed"),
            off_map=statuses.count("off_map"),
            alive=statuses.count("alive"),
        )


def write_episode_logs(path: Union[str, Path], logs: Iterable[EpisodeLog]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for log in logs:
            for line in log.to_lines():
                f.write(line + "\n")


def read_episode_logs(path: Union[str, Path]) -> List[EpisodeLog]:
    logs = []
    current = None
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            if record.get("format") == EPISODE_FORMAT:
                if record.get("version") != EPISODE_FORMAT_VERSION:
                    raise ValueError(f"{path}:{line_no}: unsupported episode log version {record.get('version')}")
                current = EpisodeLog(record["episode"], record["seed"], record["dt"])
            elif current is None:
                raise ValueError(f"{path}:{line_no}: not an {EPISODE_FORMAT} log")
            elif record.get("summary"):
                for v in record["vehicles"]:
                    current.vehicles[v["id"]] = {k: val for k, val in v.items() if k != "id"}
                current.events = [CollisionEvent(CollisionType(e["type"]), e["tick"], tuple(e["vehicles"]))
                                  for e in record["events"]]
                current.aborted = record["aborted"]
                current.abort_reason = record["abort_reason"]
                logs.append(current)
                current = None
            else:
                current.ticks.append(record)
    if current is not None:
        raise ValueError(f"{path}: truncated episode log (episode {current.episode} has no summary)")
    return logs


def export_trajectories_csv(logs: Iterable[EpisodeLog], path: Union[str, Path]) -> int:
    """Per-tick rows (episode, tick, vehicle, x, y, theta, v). Returns the row count."""
    rows = 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["episode", "tick", "vehicle", "x", "y", "theta", "v"])
        for log in logs:
            for record in log.ticks:
                for v in record["vehicles"]:
                    writer.writerow([log.episode, record["tick"], v["id"], repr(v["x"]), repr(v["y"]),
                                     repr(v["theta"]), repr(v["v"])])
                    rows += 1
    return rows


# ---------------------------------------------------------------- episodes

def _despawn_finished(alive: List[SimVehicle], imap: IntersectionMap, tick: int, log: EpisodeLog) -> List[SimVehicle]:
    remaining = []
    for v in alive:
        if v.s >= v.route.length - 1.0:
            log.despawn(v, tick, "completed")
        elif imap.is_off_map(v.x, v.y):
            log.despawn(v, tick, "off_map")
        else:
            remaining.append(v)
    return remaining


def _detect(detector: CollisionDetector, tick: int, alive: Sequence[SimVehicle], log: EpisodeLog):
    ids = [v.id for v in alive]
    positions = np.array([(v.x, v.y) for v in alive], dtype=np.float64).reshape(-1, 2)
    log.events.extend(detector.update(tick, ids, positions))


def run_expert_episode(spawns: Sequence[SpawnSpec], cfg: SimConfig, imap: IntersectionMap,
                       episode: int = 0, seed: int = 0) -> EpisodeLog:
    vehicles = [make_vehicle(sp, imap) for sp in spawns]
    expert = Expert(imap, cfg)
    detector = CollisionDetector(imap.barrier_segments, cfg.vehicle_radius)
    log = EpisodeLog.start(episode, seed, cfg.scenario.dt, vehicles)
    alive = list(vehicles)
    log.record(0, alive)
    _detect(detector, 0, alive, log)
    for tick in range(1, cfg.n_ticks + 1):
        if not alive:
            break
        commands = expert.step(alive)
        for v in alive:
            expert.advance(v, commands[v.id], cfg.scenario.dt)
        alive = _despawn_finished(alive, imap, tick, log)
        log.record(tick, alive)
        _detect(detector, tick, alive, log)
    return log


def rollout_expert(cfg: SimConfig, episodes: int, seed: Optional[int] = None, workers: int = 1,
                   progress: bool = False) -> Tuple[List[Scene], List[EpisodeLog]]:
    """Collision-free expert episodes and the scenes sliced from them.

    An episode with any contact is rejected and re-drawn with the next attempt
    seed; more than `max_reseeds` rejections in a row raise ExpertCollisionError.
    """
    seed = cfg.scenario.seed if seed is None else seed
    scenario = replace(cfg.scenario, seed=seed)
    imap = IntersectionMap(cfg.map)

    def run(episode: int) -> EpisodeLog:
        log = None
        for attempt in range(cfg.max_reseeds + 1):
            spawns = generate_scenario(scenario, episode, attempt)
            log = run_expert_episode(spawns, cfg, imap, episode, seed)
            if not log.events:
                return log
            logger.warning(f"Expert episode {episode} attempt {attempt} had {len(log.events)} contact(s), reseeding")
        raise ExpertCollisionError(
            f"expert episode {episode} still collides after {cfg.max_reseeds} reseeds: "
            f"{[e.to_dict() for e in log.events]}", episode, log.events)

    logs = _map_episodes(run, episodes, workers, progress, "expert episodes")
    tracks = [t for log in logs for t in log.tracks()]
    scenes = slice_scenes(tracks, cfg.dataset.t_stride, cfg.dataset.horizon, cfg.dataset.dt, cfg.frame_step)
    logger.info(f"Generated {len(logs)} expert episodes, {len(scenes)} scenes")
    return scenes, logs


def _map_episodes(fn, episodes: int, workers: int, progress: bool, desc: str) -> list:
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = pool.map(fn, range(episodes))
        return list(tqdm(results, total=episodes, desc=desc, disable=not progress))


# ---------------------------------------------------------------- closed loop

class ZeroPredictor:
    """Predicts every vehicle parked at the intersection center."""

    def __init__(self, horizon: int):
        self.horizon = horizon

    def predict(self, scene: Scene, world: Optional[World] = None) -> np.ndarray:
        return np.zeros((scene.n, self.horizon, 2))


class ExpertPredictor:
    """Rolls the expert forward from the current world and reports its positions at the network rate.

    Commitment decisions made on the first expert tick are written back to
    the world vehicles so they persist between calls.
    """

    def __init__(self, cfg: SimConfig, imap: IntersectionMap):
        self.cfg = cfg
        self.imap = imap
        self.horizon = cfg.dataset.horizon

    def predict(self, scene: Scene, world: Optional[World] = None) -> np.ndarray:
        if world is None:
            raise ValueError("ExpertPredictor needs the simulation world")
        expert = Expert(self.imap, self.cfg)
        clones = [replace(v, plan=None) for v in world.vehicles]
        for c in clones:
            x, y, theta = c.route.pose_at(c.s)
            c.x, c.y, c.theta = x, y, wrap_angle(theta)
        index = {c.id: i for i, c in enumerate(clones)}
        out = np.zeros((len(clones), self.horizon, 2))
        step = self.cfg.frame_step
        for k in range(self.horizon * step):
            commands = expert.step(clones)
            for c in clones:
                expert.advance(c, commands[c.id], self.cfg.scenario.dt)
            if k == 0:
                for v, c in zip(world.vehicles, clones):
                    v.committed = c.committed
            if (k + 1) % step == 0:
                out[:, (k + 1) // step - 1] = [(c.x, c.y) for c in clones]
        return out[[index[vid] for vid in scene.ids]]


def run_closed_loop_episode(predictor, spawns: Sequence[SpawnSpec], cfg: SimConfig, imap: IntersectionMap,
                            episode: int = 0, seed: int = 0) -> EpisodeLog:
    """Predict and re-solve the MPC every `replan_every` ticks, applying the held plan in between."""
    limits = cfg.limits
    sim_dt, net_dt, J = cfg.scenario.dt, cfg.dataset.dt, cfg.control.horizon
    replan_every = cfg.control.replan_every
    vehicles = [make_vehicle(sp, imap) for sp in spawns]
    detector = CollisionDetector(imap.barrier_segments, cfg.vehicle_radius)
    log = EpisodeLog.start(episode, seed, sim_dt, vehicles)
    alive = list(vehicles)
    log.record(0, alive)
    _detect(detector, 0, alive, log)

    for tick in range(1, cfg.n_ticks + 1):
        if not alive:
            break
        phase = (tick - 1) % replan_every
        if phase == 0:
            scene = Scene(tuple(v.snapshot() for v in alive), dt=net_dt, scene_id=f"e{episode}:t{tick - 1}",
                          episode=episode)
            predictions = np.asarray(predictor.predict(scene, World(tick - 1, alive, imap)), dtype=np.float64)
            if predictions.ndim != 3 or predictions.shape[0] != len(alive) or predictions.shape[1] < J \
                    or not np.all(np.isfinite(predictions)):
                log.aborted = True
                log.abort_reason = f"unusable prediction at tick {tick - 1} (shape {predictions.shape})"
                logger.warning(f"Episode {episode}: {log.abort_reason}")
                break

        next_states = []
        try:
            for k, v in enumerate(alive):
                state = DynamicVehicle(v.x, v.y, v.theta, v.v, limits.wheelbase, limits.v_max)
                if phase == 0:
                    warm = None if v.plan is None else shift_controls(v.plan, replan_every * sim_dt, net_dt)
                    reference = reference_from_points(state, predictions[k, :J])
                    solution = solve_mpc(MpcProblem(state, reference, net_dt, limits=limits), warm,
                                         cfg.control.mpc)
                    v.plan = solution.controls
                step = min(int(phase * sim_dt / net_dt + 1e-9), J - 1)
                command = ControlCommand(float(v.plan[step, 0]), float(v.plan[step, 1]))
                next_states.append(step_bicycle(state, command, sim_dt, limits))
        except MpcError as e:
            log.aborted = True
            log.abort_reason = f"MPC failure at tick {tick - 1}: {e}"
            logger.warning(f"Episode {episode}: {log.abort_reason}")
            break

        for v, state in zip(alive, next_states):
            v.x, v.y, v.theta, v.v = state.x, state.y, state.theta, state.v
            v.s = v.route.project((v.x, v.y), s_hint=v.s, window=5.0)[0]
        alive = _despawn_finished(alive, imap, tick, log)
        log.record(tick, alive)
        _detect(detector, tick, alive, log)
    return log


def closed_loop_eval(predictor, cfg: SimConfig, episodes: int, seed: Optional[int] = None, workers: int = 1,
                     progress: bool = False) -> Tuple[OnlineReport, List[EpisodeLog]]:
    horizon = getattr(predictor, "horizon", None)
    if horizon is None and hasattr(predictor, "config"):
        horizon = predictor.config.horizon
    if horizon is not None and horizon < cfg.control.horizon:
        raise ScenarioError(f"predictor horizon T={horizon} is shorter than the control horizon "
                            f"J={cfg.control.horizon}")
    seed = cfg.scenario.seed if seed is None else seed
    scenario = replace(cfg.scenario, seed=seed)
    imap = IntersectionMap(cfg.map)

    def run(episode: int) -> EpisodeLog:
        return run_closed_loop_episode(predictor, generate_scenario(scenario, episode), cfg, imap, episode, seed)

    logs = _map_episodes(run, episodes, workers, progress, "closed-loop episodes")
    report = dcr([log.outcome() for log in logs])
    logger.info(f"Closed loop: {report.total_distance:.1f} m driven, {report.v2v_collisions} V2V, "
                f"{report.v2b_collisions} V2B, {report.aborted_episodes} aborted")
    return report, logs
