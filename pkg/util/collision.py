"""
Disc-footprint collision detection between vehicles and against curbs.

Contacts are counted once per contiguous contact interval: a pair (or a
vehicle touching a curb) raises one event on the tick the contact starts.
"""

import enum
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Sequence, Set, Tuple

import numpy as np


class CollisionType(enum.Enum):
    V2V = "v2v"
    V2B = "v2b"


@dataclass(frozen=True)
class CollisionEvent:
    kind: CollisionType
    tick: int
    participants: Tuple[int, ...]

    def to_dict(self) -> Dict:
        return {"type": self.kind.value, "tick": self.tick, "vehicles": list(self.participants)}


def point_segment_distances(points, segments) -> np.ndarray:
    """Distances from each point (N, 2) to each segment (S, 2, 2), shape (N, S)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    segments = np.asarray(segments, dtype=np.float64).reshape(-1, 2, 2)
    a = segments[None, :, 0, :]
    ab = segments[None, :, 1, :] - a
    ap = points[:, None, :] - a
    denom = np.maximum(np.sum(ab * ab, axis=-1), 1e-12)
    t = np.clip(np.sum(ap * ab, axis=-1) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def find_contacts(ids: Sequence[int], positions, barrier_segments, radius: float
                  ) -> Tuple[Set[FrozenSet[int]], Set[int]]:
    """Vehicle pairs closer than 2*radius and vehicles whose disc touches a curb."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    ids = list(ids)
    pairs = set()
    if len(ids) >= 2:
        dist = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
        for i, j in zip(*np.nonzero(np.triu(dist < 2 * radius, k=1))):
            pairs.add(frozenset((ids[i], ids[j])))
    barrier_hits = set()
    if len(ids) and len(barrier_segments):
        near = point_segment_distances(positions, barrier_segments).min(axis=1) < radius
        barrier_hits = {ids[i] for i in np.nonzero(near)[0]}
    return pairs, barrier_hits


class CollisionDetector:
    """Tracks contacts across ticks and reports rising edges only."""

    def __init__(self, barrier_segments, vehicle_radius: float = 0.9):
        self.barrier_segments = np.asarray(barrier_segments, dtype=np.float64)
        self.vehicle_radius = vehicle_radius
        self._pairs: Set[FrozenSet[int]] = set()
        self._barrier: Set[int] = set()

    def reset(self):
        self._pairs = set()
        self._barrier = set()

    def update(self, tick: int, ids: Sequence[int], positions) -> List[CollisionEvent]:
        pairs, barrier = find_contacts(ids, positions, self.barrier_segments, self.vehicle_radius)
        events = [CollisionEvent(CollisionType.V2V, tick, tuple(sorted(p)))
                  for p in sorted(pairs - self._pairs, key=sorted)]
        events += [CollisionEvent(CollisionType.V2B, tick, (v,)) for v in sorted(barrier - self._barrier)]
        self._pairs = pairs
        self._barrier = barrier
        return events
