"""
Vehicles, trajectories and scenes in the intersection-centered frame
(+x east, +y north, meters), plus track-file ingestion and slicing of
tracks into (current state, future trajectory) training samples.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from util.intention_type import Arm, Intention

logger = logging.getLogger(__name__)

SCENE_FORMAT = "mtp-scenes"
SCENE_FORMAT_VERSION = 1
INPUT_DIM = 6


class TrackFormatError(ValueError):
    pass


class SceneError(ValueError):
    pass


def wrap_angle(angle):
    """Wrap radians into [-pi, pi). Works on floats and numpy arrays."""
    wrapped = np.mod(np.asarray(angle, dtype=np.float64) + math.pi, 2.0 * math.pi) - math.pi
    # mod can round up to exactly 2*pi for tiny negative inputs
    wrapped = np.where(wrapped >= math.pi, wrapped - 2.0 * math.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class VehicleSnapshot:
    id: int
    position: Tuple[float, float]
    heading: float
    intention: Intention

    def __post_init__(self):
        x, y = self.position
        object.__setattr__(self, "position", (float(x), float(y)))
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))
        object.__setattr__(self, "intention", Intention.parse(self.intention))


@dataclass(frozen=True, eq=False)
class Trajectory:
    points: np.ndarray
    dt: float

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 1:
            raise SceneError(f"Trajectory points must have shape (T, 2), got {points.shape}")
        if not self.dt > 0:
            raise SceneError(f"Trajectory dt must be positive, got {self.dt}")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "dt", float(self.dt))

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class Scene:
    vehicles: Tuple[VehicleSnapshot, ...]
    futures: Optional[Tuple[Trajectory, ...]] = None
    dt: float = 0.2
    scene_id: str = ""
    episode: int = 0

    def __post_init__(self):
        vehicles = tuple(self.vehicles)
        if len(vehicles) < 1:
            raise SceneError("A scene needs at least one vehicle")
        ids = [v.id for v in vehicles]
        if len(set(ids)) != len(ids):
            raise SceneError(f"Duplicate vehicle ids in scene {self.scene_id!r}: {ids}")
        object.__setattr__(self, "vehicles", vehicles)
        if self.futures is not None:
            futures = tuple(self.futures)
            if len(futures) != len(vehicles):
                raise SceneError(
                    f"Scene {self.scene_id!r} has {len(vehicles)} vehicles but {len(futures)} futures")
            horizons = {len(f) for f in futures}
            if len(horizons) != 1:
                raise SceneError(f"Scene {self.scene_id!r} mixes future lengths {sorted(horizons)}")
            object.__setattr__(self, "futures", futures)

    @property
    def n(self) -> int:
        return len(self.vehicles)

    @property
    def ids(self) -> List[int]:
        return [v.id for v in self.vehicles]

    @property
    def horizon(self) -> Optional[int]:
        return None if self.futures is None else len(self.futures[0])

    def features(self, scale: float) -> np.ndarray:
        return np.stack([assemble_input(v, scale) for v in self.vehicles])

    def positions(self) -> np.ndarray:
        return np.array([v.position for v in self.vehicles], dtype=np.float64)

    def future_array(self) -> np.ndarray:
        if self.futures is None:
            raise SceneError(f"Scene {self.scene_id!r} has no ground-truth futures")
        return np.stack([f.points for f in self.futures])

    def with_vehicle(self, index: int, vehicle: VehicleSnapshot, future: Optional[Trajectory] = None) -> "Scene":
        vehicles = list(self.vehicles)
        vehicles[index] = vehicle
        futures = self.futures
        if future is not None:
            futures = list(self.futures)
            futures[index] = future
        return Scene(tuple(vehicles), None if futures is None else tuple(futures),
                     self.dt, self.scene_id, self.episode)

    def permuted(self, order: Sequence[int]) -> "Scene":
        vehicles = tuple(self.vehicles[i] for i in order)
        futures = None if self.futures is None else tuple(self.futures[i] for i in order)
        return Scene(vehicles, futures, self.dt, self.scene_id, self.episode)

    def to_json_dict(self) -> Dict:
        record = {
            "scene_id": self.scene_id,
            "episode": int(self.episode),
            "dt": self.dt,
            "vehicles": [
                {"id": v.id, "x": v.position[0], "y": v.position[1],
                 "heading": v.heading, "intention": v.intention.label}
                for v in self.vehicles
            ],
        }
        if self.futures is not None:
            record["futures"] = [f.points.tolist() for f in self.futures]
        return record

    @classmethod
    def from_json_dict(cls, record: Dict) -> "Scene":
        dt = float(record["dt"])
        vehicles = tuple(
            VehicleSnapshot(v["id"], (v["x"], v["y"]), v["heading"], Intention.parse(v["intention"]))
            for v in record["vehicles"]
        )
        futures = record.get("futures")
        if futures is not None:
            futures = tuple(Trajectory(np.asarray(f, dtype=np.float64), dt) for f in futures)
        return cls(vehicles, futures, dt, record.get("scene_id", ""), int(record.get("episode", 0)))


def assemble_input(v: VehicleSnapshot, scale: float) -> np.ndarray:
    """Network input X_k = [x/scale, y/scale, heading, one_hot(intention)]."""
    if not scale > 0:
        raise SceneError(f"scale must be positive, got {scale}")
    one_hot = [0.0, 0.0, 0.0]
    one_hot[int(v.intention)] = 1.0
    return np.array([v.position[0] / scale, v.position[1] / scale, v.heading] + one_hot, dtype=np.float64)


# ---------------------------------------------------------------- track files

@dataclass(frozen=True)
class TrackColumns:
    track_id: str = "trackId"
    frame: str = "frame"
    x: str = "xCenter"
    y: str = "yCenter"
    heading: str = "heading"


@dataclass(frozen=True)
class TrackRecord:
    track_id: int
    frame: int
    x: float
    y: float
    heading: float
    extras: Dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class TrackSequence:
    """One vehicle's contiguous, frame-sorted pose sequence."""
    track_id: int
    frames: np.ndarray
    xy: np.ndarray
    heading: np.ndarray
    intention: Optional[Intention] = None
    episode: int = 0

    def __len__(self):
        return int(self.frames.shape[0])

    @property
    def first_frame(self) -> int:
        return int(self.frames[0])

    @property
    def last_frame(self) -> int:
        return int(self.frames[-1])

    def entry_arm(self) -> Arm:
        return Arm.of_position(*self.xy[0])

    def exit_arm(self) -> Arm:
        return Arm.of_position(*self.xy[-1])

    def resolved_intention(self) -> Optional[Intention]:
        if self.intention is not None:
            return self.intention
        return Intention.from_arms(self.entry_arm(), self.exit_arm())


def read_track_records(path: Union[str, Path], columns: TrackColumns = TrackColumns(),
                       heading_unit: str = "degrees") -> List[TrackRecord]:
    if heading_unit not in ("degrees", "radians"):
        raise TrackFormatError(f"heading_unit must be 'degrees' or 'radians', got {heading_unit!r}")
    required = [columns.track_id, columns.frame, columns.x, columns.y, columns.heading]
    records = []
    seen = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise TrackFormatError(f"{path}: missing required column(s) {', '.join(missing)}")
        for row in reader:
            line = reader.line_num
            try:
                track_id = int(float(row[columns.track_id]))
                frame = int(float(row[columns.frame]))
                x = float(row[columns.x])
                y = float(row[columns.y])
                heading = float(row[columns.heading])
            except (TypeError, ValueError) as e:
                raise TrackFormatError(f"{path}: malformed row at line {line}: {e}") from None
            if not all(math.isfinite(v) for v in (x, y, heading)):
                raise TrackFormatError(f"{path}: non-finite value at line {line}")
            key = (track_id, frame)
            if key in seen:
                raise TrackFormatError(
                    f"{path}: duplicate record for track {track_id} frame {frame} "
                    f"(lines {seen[key]} and {line})")
            seen[key] = line
            if heading_unit == "degrees":
                heading = math.radians(heading)
            extras = {k: v for k, v in row.items() if k not in required and k is not None}
            records.append(TrackRecord(track_id, frame, x, y, wrap_angle(heading), extras))
    return records


def group_tracks(records: Iterable[TrackRecord], episode: int = 0) -> List[TrackSequence]:
    by_track: Dict[int, List[TrackRecord]] = {}
    for r in records:
        by_track.setdefault(r.track_id, []).append(r)
    sequences = []
    for track_id in sorted(by_track):
        rows = sorted(by_track[track_id], key=lambda r: r.frame)
        frames = np.array([r.frame for r in rows], dtype=np.int64)
        if np.any(np.diff(frames) != 1):
            raise TrackFormatError(f"Track {track_id} has non-contiguous frames")
        sequences.append(TrackSequence(
            track_id=track_id,
            frames=frames,
            xy=np.array([[r.x, r.y] for r in rows], dtype=np.float64),
            heading=np.array([r.heading for r in rows], dtype=np.float64),
            episode=episode,
        ))
    return sequences


def load_tracks(path: Union[str, Path], columns: TrackColumns = TrackColumns(),
                heading_unit: str = "degrees", episode: int = 0) -> List[TrackSequence]:
    """Read a track CSV into per-vehicle sequences grouped by track id and sorted by frame."""
    sequences = group_tracks(read_track_records(path, columns, heading_unit), episode)
    logger.info(f"Loaded {len(sequences)} tracks from {path}")
    return sequences


def slice_scenes(sequences: Sequence[TrackSequence], t_stride: int, horizon: int, dt: float,
                 frame_step: int = 1) -> List[Scene]:
    """Cut tracks into scenes every `t_stride` frames.

    A vehicle joins the scene at frame f when it is alive at f and its track
    still holds frames f + frame_step*1 ... f + frame_step*horizon.
    """
    if horizon < 1:
        raise SceneError(f"horizon must be >= 1, got {horizon}")
    if t_stride < 1 or frame_step < 1:
        raise SceneError("t_stride and frame_step must be >= 1")

    by_episode: Dict[int, List[Tuple[TrackSequence, Intention]]] = {}
    for seq in sequences:
        intention = seq.resolved_intention()
        if intention is None:
            logger.warning(f"Skipping track {seq.track_id}: no intention (U-turn or undeterminable arms)")
            continue
        by_episode.setdefault(seq.episode, []).append((seq, intention))

    scenes = []
    offsets = frame_step * np.arange(1, horizon + 1)
    for episode in sorted(by_episode):
        tracks = sorted(by_episode[episode], key=lambda item: item[0].track_id)
        start = min(seq.first_frame for seq, _ in tracks)
        stop = max(seq.last_frame for seq, _ in tracks)
        for frame in range(start, stop + 1, t_stride):
            vehicles, futures = [], []
            for seq, intention in tracks:
                if frame < seq.first_frame or frame + offsets[-1] > seq.last_frame:
                    continue
                i = frame - seq.first_frame
                vehicles.append(VehicleSnapshot(seq.track_id, tuple(seq.xy[i]), seq.heading[i], intention))
                futures.append(Trajectory(seq.xy[i + offsets], dt))
            if vehicles:
                scenes.append(Scene(tuple(vehicles), tuple(futures), dt, f"e{episode}:f{frame}", episode))
    return scenes


# ---------------------------------------------------------------- datasets

def write_scenes(path: Union[str, Path], scenes: Sequence[Scene], horizon: int, dt: float) -> None:
    header = {"format": SCENE_FORMAT, "version": SCENE_FORMAT_VERSION,
              "horizon": int(horizon), "dt": float(dt), "count": len(scenes)}
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, separators=(",", ":")) + "\n")
        for scene in scenes:
            f.write(json.dumps(scene.to_json_dict(), separators=(",", ":")) + "\n")


def read_scenes(path: Union[str, Path]) -> Tuple[Dict, List[Scene]]:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError:
            header = None
        if not isinstance(header, dict) or header.get("format") != SCENE_FORMAT:
            raise SceneError(f"{path}: not a {SCENE_FORMAT} dataset")
        if header.get("version") != SCENE_FORMAT_VERSION:
            raise SceneError(f"{path}: unsupported dataset version {header.get('version')}")
        scenes = []
        for line_no, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                scenes.append(Scene.from_json_dict(json.loads(line)))
            except (KeyError, TypeError, ValueError) as e:
                raise SceneError(f"{path}: bad scene at line {line_no}: {e}") from None
    return header, scenes
