'''
Training losses and evaluation metrics for predicted trajectories.

All trajectory arguments are float arrays of shape (N, T, 2) in meters,
vehicle-aligned between prediction and ground truth.
'''

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class LossConfig:
  safety_distance: float = 2.0
  collision_weight: float = 1.0
  # Divide the imitation loss by T. Off keeps the sum over timesteps.
  normalize_by_horizon: bool = False

  def __post_init__(self):
    if not self.safety_distance > 0:
      raise ValueError(f"safety_distance must be positive, got {self.safety_distance}")
    if not self.collision_weight >= 0:
      raise ValueError(f"collision_weight must be >= 0, got {self.collision_weight}")


def _check_aligned(pred, gt):
  pred = np.asarray(pred, dtype=np.float64)
  gt = np.asarray(gt, dtype=np.float64)
  if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 2:
    raise ValueError(f"Prediction {pred.shape} and ground truth {gt.shape} are not aligned (N, T, 2) arrays")
  return pred, gt


def imitation_loss(pred, gt, normalize_by_horizon: bool = False) -> Tuple[float, np.ndarray]:
  """Mean over vehicles of the summed pointwise L2 error.

  Args:
    pred: predicted positions, (N, T, 2).
    gt: ground-truth positions, (N, T, 2).
    normalize_by_horizon: additionally divide by T.

  Returns:
    (loss, gradient with respect to pred). The gradient is zero at points
    where prediction and ground truth coincide.
  """
  pred, gt = _check_aligned(pred, gt)
  n, t = pred.shape[:2]
  diff = pred - gt
  dist = np.linalg.norm(diff, axis=-1)
  denom = n * (t if normalize_by_horizon else 1)
  loss = float(dist.sum() / denom)
  safe = np.where(dist > 0, dist, 1.0)
  grad = np.where((dist > 0)[..., None], diff / safe[..., None], 0.0) / denom
  return loss, grad


def pairwise_min_distances(pred) -> Tuple[np.ndarray, np.ndarray]:
  """Same-time minimum distance for every vehicle pair.

  Returns:
    (min_dist, argmin_t), both (N, N). The first minimizing timestep wins
    ties. Diagonal entries are +inf and -1.
  """
  pred = np.asarray(pred, dtype=np.float64)
  n = pred.shape[0]
  dist = np.linalg.norm(pred[:, None, :, :] - pred[None, :, :, :], axis=-1)
  argmin_t = np.argmin(dist, axis=-1)
  min_dist = np.take_along_axis(dist, argmin_t[..., None], axis=-1)[..., 0]
  eye = np.eye(n, dtype=bool)
  min_dist[eye] = np.inf
  argmin_t[eye] = -1
  return min_dist, argmin_t


def collision_loss(pred, safety_distance: float) -> Tuple[float, np.ndarray]:
  """Hinge on the closest same-time approach of every unordered pair.

  The gradient only flows through the arg-min timestep of each pair closer
  than `safety_distance`.
  """
  pred = np.asarray(pred, dtype=np.float64)
  grad = np.zeros_like(pred)
  n = pred.shape[0]
  if n < 2:
    return 0.0, grad
  min_dist, argmin_t = pairwise_min_distances(pred)
  loss = 0.0
  for i, j in zip(*np.triu_indices(n, k=1)):
    d = min_dist[i, j]
    if d >= safety_distance:
      continue
    loss += safety_distance - d
    if d > 0:
      t = argmin_t[i, j]
      unit = (pred[i, t] - pred[j, t]) / d
      grad[i, t] -= unit
      grad[j, t] += unit
  return float(loss), grad


def total_loss(pred, gt, cfg: LossConfig) -> Tuple[float, float, float, np.ndarray]:
  """Returns (total, imitation, collision, gradient of total wrt pred)."""
  imitation, g_imitation = imitation_loss(pred, gt, cfg.normalize_by_horizon)
  if cfg.collision_weight == 0:
    return imitation, imitation, 0.0, g_imitation
  collision, g_collision = collision_loss(pred, cfg.safety_distance)
  total = imitation + cfg.collision_weight * collision
  return total, imitation, collision, g_imitation + cfg.collision_weight * g_collision


# ---------------------------------------------------------------- offline


@dataclass
class OfflineReport:
  ade: float
  fde: float
  mr: float
  cr: float
  mr_plus_cr: float
  n_vehicles: int

  def to_dict(self) -> Dict:
    return dataclasses.asdict(self)


def collision_flags(pred, safety_distance: float) -> np.ndarray:
  """Per-vehicle flag: some other predicted trajectory comes strictly closer than safety_distance."""
  pred = np.asarray(pred, dtype=np.float64)
  if pred.shape[0] < 2:
    return np.zeros(pred.shape[0], dtype=bool)
  min_dist, _ = pairwise_min_distances(pred)
  return np.any(min_dist < safety_distance, axis=1)


def offline_metrics(pred, gt, miss_threshold: float = 2.0, safety_distance: float = 2.0) -> OfflineReport:
  pred, gt = _check_aligned(pred, gt)
  err = np.linalg.norm(pred - gt, axis=-1)
  final = err[:, -1]
  mr = float(np.mean(final > miss_threshold))
  cr = float(np.mean(collision_flags(pred, safety_distance)))
  return OfflineReport(
      ade=float(err.mean()),
      fde=float(final.mean()),
      mr=mr,
      cr=cr,
      mr_plus_cr=mr + cr,
      n_vehicles=int(pred.shape[0]),
  )


def pool_offline_reports(reports: Sequence[OfflineReport]) -> OfflineReport:
  """Vehicle-weighted average of per-scene reports."""
  total = sum(r.n_vehicles for r in reports)
  if total == 0:
    raise ValueError("no scenes to pool")

  def weighted(name):
    return float(sum(getattr(r, name) * r.n_vehicles for r in reports) / total)

  mr, cr = weighted("mr"), weighted("cr")
  return OfflineReport(weighted("ade"), weighted("fde"), mr, cr, mr + cr, total)


# ---------------------------------------------------------------- online


@dataclass
class EpisodeOutcome:
  """What one closed-loop episode contributes to the distance-collision ratio."""
  paths: List[np.ndarray]
  v2v_collisions: int = 0
  v2b_collisions: int = 0
  aborted: bool = False
  spawned: int = 0
  completed: int = 0
  off_map: int = 0
  alive: int = 0

  @property
  def distance(self) -> float:
    return float(sum(path_length(p) for p in self.paths))


@dataclass
class OnlineReport:
  total_distance: float
  v2v_collisions: int
  v2b_collisions: int
  dcr_v2v: float
  dcr_v2b: float
  v2v_collision_free: bool
  v2b_collision_free: bool
  n_episodes: int = 0
  aborted_episodes: int = 0
  spawned: int = 0
  completed: int = 0
  off_map: int = 0
  alive: int = 0
  per_episode: List[Dict] = field(default_factory=list)

  def to_dict(self) -> Dict:
    return dataclasses.asdict(self)


def path_length(path) -> float:
  path = np.asarray(path, dtype=np.float64)
  if path.shape[0] < 2:
    return 0.0
  return float(np.linalg.norm(np.diff(path, axis=0), axis=-1).sum())


def dcr(episodes: Sequence[EpisodeOutcome]) -> OnlineReport:
  """Distance-collision ratio pooled over episodes.

  Distances and collision counts are summed over all episodes and divided
  once. A class with no collisions reports the total distance and sets its
  collision_free flag.
  """
  per_episode = []
  total = 0.0
  v2v = v2b = 0
  for index, ep in enumerate(episodes):
    distance = ep.distance
    total += distance
    v2v += ep.v2v_collisions
    v2b += ep.v2b_collisions
    per_episode.append({
        "episode": index,
        "distance": distance,
        "v2v_collisions": ep.v2v_collisions,
        "v2b_collisions": ep.v2b_collisions,
        "aborted": ep.aborted,
        "spawned": ep.spawned,
        "completed": ep.completed,
        "off_map": ep.off_map,
        "alive": ep.alive,
    })
  return OnlineReport(
      total_distance=total,
      v2v_collisions=v2v,
      v2b_collisions=v2b,
      dcr_v2v=total / v2v if v2v else total,
      dcr_v2b=total / v2b if v2b else total,
      v2v_collision_free=v2v == 0,
      v2b_collision_free=v2b == 0,
      n_episodes=len(episodes),
      aborted_episodes=sum(1 for ep in episodes if ep.aborted),
      spawned=sum(ep.spawned for ep in episodes),
      completed=sum(ep.completed for ep in episodes),
      off_map=sum(ep.off_map for ep in episodes),
      alive=sum(ep.alive for ep in episodes),
      per_episode=per_episode,
  )
