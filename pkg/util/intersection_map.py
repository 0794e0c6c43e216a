'''
Geometry of the 4-way intersection: lane routes, curbs and conflict zones.

Right-hand traffic, one lane per direction, intersection center at the
origin. Every (entry arm, intention) pair has one route: a straight
approach, a circular-arc turn tangent to both lane centerlines (or a
straight crossing), and a straight exit to the end of the exit arm.
'''

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from util.intention_type import Arm, Intention


@dataclass(frozen=True)
class MapConfig:
  half_length: float = 60.0
  lane_width: float = 3.5
  stop_offset: float = 10.0
  corner_radius: float = 6.0
  priority_axis: str = "vertical"
  route_spacing: float = 0.25
  off_map_margin: float = 5.0

  def __post_init__(self):
    if self.priority_axis not in ("vertical", "horizontal"):
      raise ValueError(f"priority_axis must be 'vertical' or 'horizontal', got {self.priority_axis!r}")
    if min(self.half_length, self.lane_width, self.corner_radius, self.route_spacing) <= 0:
      raise ValueError("map dimensions must be positive")
    if not self.stop_offset < self.half_length:
      raise ValueError(f"stop_offset {self.stop_offset} must be below half_length {self.half_length}")
    if self.stop_offset < self.box_half_size:
      raise ValueError(f"stop line at {self.stop_offset} m lies inside the intersection box "
                       f"(half-size {self.box_half_size} m)")

  @property
  def box_half_size(self) -> float:
    return self.lane_width + self.corner_radius


@dataclass(frozen=True)
class ConflictZone:
  """Arc-length intervals [in, out] on two routes where the vehicles could touch."""
  a_in: float
  a_out: float
  b_in: float
  b_out: float

  def swapped(self) -> 'ConflictZone':
    return ConflictZone(self.b_in, self.b_out, self.a_in, self.a_out)


def _inbound(arm: Arm) -> Tuple[np.ndarray, np.ndarray]:
  """Driving direction toward the center and its right-hand normal."""
  d = -np.asarray(arm.outward, dtype=np.float64)
  return d, np.array([d[1], -d[0]])


def _line(start, end, spacing):
  length = float(np.linalg.norm(end - start))
  n = max(int(math.ceil(length / spacing)), 1)
  t = np.linspace(0.0, 1.0, n + 1)[:, None]
  heading = math.atan2(end[1] - start[1], end[0] - start[0])
  return start + t * (end - start), np.full(n + 1, heading)


def _arc(center, radius, phi0, sweep, spacing):
  n = max(int(math.ceil(abs(sweep) * radius / spacing)), 1)
  phi = phi0 + np.linspace(0.0, sweep, n + 1)
  points = center + radius * np.column_stack([np.cos(phi), np.sin(phi)])
  return points, phi + math.copysign(math.pi / 2, sweep)


class Route:
  """A sampled lane path with arc-length lookup and projection."""

  def __init__(self, entry: Arm, intention: Intention, points, headings, stop_s: float,
               turn_interval: Tuple[float, float], turn_radius: float):
    self.entry = entry
    self.intention = intention
    self.exit = entry.exit_for(intention)
    self.points = np.asarray(points, dtype=np.float64)
    # unwrapped so interpolation through a turn is smooth
    self.headings = np.unwrap(np.asarray(headings, dtype=np.float64))
    self.s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(self.points, axis=0), axis=1))])
    self.length = float(self.s[-1])
    self.stop_s = stop_s
    self.turn_interval = turn_interval
    self.turn_radius = turn_radius
    self.points.setflags(write=False)

  def __repr__(self):
    return f"Route({self.entry.name}->{self.exit.name}, {self.intention.label}, {self.length:.1f} m)"

  @property
  def key(self) -> Tuple[Arm, Intention]:
    return self.entry, self.intention

  def position_at(self, s) -> np.ndarray:
    s = np.clip(s, 0.0, self.length)
    return np.stack([np.interp(s, self.s, self.points[:, 0]), np.interp(s, self.s, self.points[:, 1])], axis=-1)

  def heading_at(self, s):
    return np.interp(np.clip(s, 0.0, self.length), self.s, self.headings)

  def pose_at(self, s: float) -> Tuple[float, float, float]:
    x, y = self.position_at(s)
    return float(x), float(y), float(self.heading_at(s))

  def curvature_radius_at(self, s: float) -> float:
    lo, hi = self.turn_interval
    return self.turn_radius if lo <= s <= hi else math.inf

  def project(self, p, s_hint: Optional[float] = None, window: float = 10.0) -> Tuple[float, float]:
    """Arc length of the closest route point and signed lateral offset (left positive)."""
    p = np.asarray(p, dtype=np.float64)
    if s_hint is None:
      lo, hi = 0, len(self.s) - 1
    else:
      lo = int(np.searchsorted(self.s, s_hint - window))
      hi = min(int(np.searchsorted(self.s, s_hint + window)), len(self.s) - 1)
      lo = min(lo, hi)
    seg = self.points[lo:hi + 1]
    i = lo + int(np.argmin(np.sum((seg - p) ** 2, axis=1)))
    best_s, best_off, best_d = self.s[i], 0.0, math.inf
    for j in (i - 1, i):
      if j < 0 or j + 1 >= len(self.s):
        continue
      a, b = self.points[j], self.points[j + 1]
      ab = b - a
      t = float(np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0))
      q = a + t * ab
      d = float(np.linalg.norm(p - q))
      if d < best_d:
        cross = ab[0] * (p - a)[1] - ab[1] * (p - a)[0]
        best_s = self.s[j] + t * (self.s[j + 1] - self.s[j])
        best_off = math.copysign(d, cross) if d > 0 else 0.0
        best_d = d
    return float(best_s), float(best_off)


class IntersectionMap:

  def __init__(self, config: MapConfig = MapConfig()):
    self.config = config
    self.routes: Dict[Tuple[Arm, Intention], Route] = {
        (arm, intention): self._build_route(arm, intention) for arm in Arm for intention in Intention
    }
    self.barriers: List[np.ndarray] = [self._build_curb(arm) for arm in Arm]
    self.barrier_segments = np.concatenate(
        [np.stack([b[:-1], b[1:]], axis=1) for b in self.barriers], axis=0)
    self._conflicts: Dict[Tuple, Optional[ConflictZone]] = {}

  def route(self, arm: Arm, intention: Intention) -> Route:
    return self.routes[(Arm.parse(arm), Intention.parse(intention))]

  def is_priority(self, arm: Arm) -> bool:
    return arm.is_vertical == (self.config.priority_axis == "vertical")

  def is_off_map(self, x: float, y: float) -> bool:
    limit = self.config.half_length + self.config.off_map_margin
    return abs(x) > limit or abs(y) > limit

  def _build_route(self, arm: Arm, intention: Intention) -> Route:
    cfg = self.config
    spacing = cfg.route_spacing
    h = cfg.lane_width / 2
    b = cfg.box_half_size
    L = cfg.half_length
    d, r = _inbound(arm)
    start = -d * L + r * h
    turn_start = -d * b + r * h

    if intention == Intention.STRAIGHT:
      points, headings = _line(start, d * L + r * h, spacing)
      return Route(arm, intention, points, headings, L - cfg.stop_offset, (math.inf, -math.inf), math.inf)

    approach, approach_h = _line(start, turn_start, spacing)
    if intention == Intention.RIGHT:
      radius, side, sweep = b - h, 1.0, -math.pi / 2
    else:
      radius, side, sweep = b + h, -1.0, math.pi / 2
    center = turn_start + side * r * radius
    phi0 = math.atan2(*(turn_start - center)[::-1])
    arc, arc_h = _arc(center, radius, phi0, sweep, spacing)
    exit_dir = side * r
    exit_line, exit_h = _line(arc[-1], arc[-1] + exit_dir * (L - b), spacing)
    points = np.concatenate([approach, arc[1:], exit_line[1:]])
    headings = np.concatenate([approach_h, arc_h[1:], exit_h[1:]])
    approach_len = L - b
    interval = (approach_len, approach_len + abs(sweep) * radius)
    return Route(arm, intention, points, headings, L - cfg.stop_offset, interval, radius)

  def _build_curb(self, arm: Arm) -> np.ndarray:
    """Curb on the right-hand side of the arm's inbound lane, rounding into the next arm."""
    cfg = self.config
    w, b, L = cfg.lane_width, cfg.box_half_size, cfg.half_length
    d, r = _inbound(arm)
    far = -d * L + r * w
    corner_in = -d * b + r * w
    center = -d * b + r * b
    phi0 = math.atan2(*(corner_in - center)[::-1])
    arc, _ = _arc(center, cfg.corner_radius, phi0, -math.pi / 2, cfg.corner_radius * math.pi / 24)
    end = -d * w + r * L
    return np.concatenate([far[None], arc, end[None]])

  def conflict_zone(self, key_a: Tuple[Arm, Intention], key_b: Tuple[Arm, Intention],
                    clearance: float = 2.8) -> Optional[ConflictZone]:
    """Where routes from different arms come within `clearance` of each other inside the box."""
    key = (key_a, key_b, clearance)
    if key not in self._conflicts:
      self._conflicts[key] = self._find_conflict_zone(key_a, key_b, clearance)
    return self._conflicts[key]

  def _find_conflict_zone(self, key_a, key_b, clearance: float) -> Optional[ConflictZone]:
    if key_a[0] == key_b[0]:
      return None
    ra, rb = self.routes[key_a], self.routes[key_b]
    limit = self.config.box_half_size + 3.0
    ia = np.all(np.abs(ra.points) <= limit, axis=1)
    ib = np.all(np.abs(rb.points) <= limit, axis=1)
    pa, pb = ra.points[ia], rb.points[ib]
    if len(pa) == 0 or len(pb) == 0:
      return None
    dist = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
    close = dist < clearance
    if not close.any():
      return None
    sa = ra.s[ia][np.any(close, axis=1)]
    sb = rb.s[ib][np.any(close, axis=0)]
    return ConflictZone(float(sa.min()), float(sa.max()), float(sb.min()), float(sb.max()))
