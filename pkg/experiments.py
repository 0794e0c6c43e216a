"""
Ablation runs: train every variant on the same scenes, score it on held-out
scenes and optionally in closed loop, then check how the variants rank.

A variant is a name plus overrides merged into the base training config, e.g.
{"name": "no_collision_cost", "overrides": {"collision_weight": 0.0}}.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from simulator import SimConfig, closed_loop_eval
from trainer import TrainConfig, evaluate_offline, train
from util.configuration import ConfigError, from_dict, to_dict
from util.scene import Scene
from util.trajectory_metrics import OfflineReport, OnlineReport

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["variant", "ade", "fde", "mr", "cr", "mr_plus_cr", "dcr_v2v", "dcr_v2b", "v2v_collisions",
                  "v2b_collisions", "final_train_loss"]


@dataclass(frozen=True)
class Variant:
    name: str
    overrides: Dict[str, Any] = field(default_factory=dict)


DEFAULT_VARIANTS = (
    Variant("full"),
    Variant("no_collision_cost", {"collision_weight": 0.0}),
    Variant("no_aggregation", {"disable_aggregation": True}),
    Variant("no_augmentation", {"augmentation": {"enabled": False}}),
)


@dataclass
class VariantResult:
    name: str
    offline: OfflineReport
    online: Optional[OnlineReport] = None
    final_train_loss: float = math.nan

    def row(self) -> Dict[str, Any]:
        row = {"variant": self.name, "final_train_loss": self.final_train_loss}
        row.update({k: getattr(self.offline, k) for k in ("ade", "fde", "mr", "cr", "mr_plus_cr")})
        if self.online is not None:
            row.update({"dcr_v2v": self.online.dcr_v2v, "dcr_v2b": self.online.dcr_v2b,
                        "v2v_collisions": self.online.v2v_collisions,
                        "v2b_collisions": self.online.v2b_collisions})
        return row


def load_variants(path: Union[str, Path]) -> List[Variant]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"variants file {path} does not exist")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    entries = data.get("variants") if isinstance(data, dict) else None
    if not entries:
        raise ConfigError(f"{path}: expected a non-empty 'variants' list")
    variants = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigError(f"{path}: variant {i} needs a name")
        unknown = sorted(set(entry) - {"name", "overrides"})
        if unknown:
            raise ConfigError(f"{path}: variant {entry['name']!r} has unknown key(s) {', '.join(unknown)}")
        variants.append(Variant(str(entry["name"]), dict(entry.get("overrides") or {})))
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ConfigError(f"{path}: duplicate variant names {names}")
    return variants


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def variant_config(base: TrainConfig, variant: Variant) -> TrainConfig:
    return from_dict(TrainConfig, _merge(to_dict(base), variant.overrides), variant.name)


def run_ablations(train_scenes: Sequence[Scene], test_scenes: Sequence[Scene], base: TrainConfig,
                  variants: Sequence[Variant] = DEFAULT_VARIANTS, sim: Optional[SimConfig] = None,
                  online_episodes: int = 0, out_dir: Optional[Union[str, Path]] = None, workers: int = 1,
                  progress: bool = False) -> List[VariantResult]:
    """Train and score each variant in order. Checkpoints go to `out_dir/<variant>` when given."""
    if online_episodes and sim is None:
        raise ConfigError("online evaluation needs a simulation config")
    results = []
    for variant in variants:
        cfg = variant_config(base, variant)
        logger.info(f"Variant {variant.name}: training on {len(train_scenes)} scenes")
        target = Path(out_dir) / variant.name if out_dir is not None else None
        trained = train(train_scenes, cfg, target, workers, progress)
        offline, _ = evaluate_offline(trained.net, test_scenes, cfg.miss_threshold, cfg.safety_distance)
        online = None
        if online_episodes:
            sim_cfg = replace(sim, dataset=replace(sim.dataset, horizon=trained.net.horizon,
                                                   dt=trained.net.config.dt))
            online, _ = closed_loop_eval(trained.net, sim_cfg, online_episodes, workers=workers, progress=progress)
        last = trained.history[-1]["train_loss"] if trained.history else math.nan
        results.append(VariantResult(variant.name, offline, online, last))
        logger.info(f"Variant {variant.name}: ADE {offline.ade:.3f} MR+CR {offline.mr_plus_cr:.3f}")
    return results


def _dcr_key(report: OnlineReport, kind: str) -> float:
    if getattr(report, f"{kind}_collision_free"):
        return math.inf
    return getattr(report, f"dcr_{kind}")


def check_orderings(results: Sequence[VariantResult]) -> Dict[str, Optional[bool]]:
    """Expected rankings between the named variants; None when a variant or its online run is missing.

    Comparisons are strict. A collision-free DCR ranks above any finite one.
    """
    by_name = {r.name: r for r in results}

    def offline(*names):
        if not all(n in by_name for n in names):
            return None
        return [by_name[n].offline for n in names]

    def online(*names):
        if not all(n in by_name and by_name[n].online is not None for n in names):
            return None
        return [by_name[n].online for n in names]

    checks: Dict[str, Optional[bool]] = {}
    reports = offline("full", "no_collision_cost", "no_aggregation")
    checks["offline_mr_cr"] = None if reports is None else \
        reports[0].mr_plus_cr < reports[1].mr_plus_cr < reports[2].mr_plus_cr
    reports = offline("full", "no_aggregation")
    checks["offline_ade"] = None if reports is None else reports[0].ade < reports[1].ade
    for other, kind in (("no_collision_cost", "v2v"), ("no_aggregation", "v2v"), ("no_augmentation", "v2b")):
        reports = online("full", other)
        checks[f"online_{kind}_vs_{other}"] = None if reports is None else \
            _dcr_key(reports[0], kind) > _dcr_key(reports[1], kind)
    return checks


def write_results(out_dir: Union[str, Path], results: Sequence[VariantResult],
                  checks: Dict[str, Optional[bool]]) -> List[Path]:
    out_dir = Path(out_dir)
    json_path = out_dir / "experiments.json"
    csv_path = out_dir / "experiments.csv"
    payload = {
        "variants": [{"name": r.name, "offline": r.offline.to_dict(),
                      "online": None if r.online is None else _online_summary(r.online),
                      "final_train_loss": r.final_train_loss} for r in results],
        "orderings": checks,
    }
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for r in results:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row().items()})
    return [json_path, csv_path]


def _online_summary(report: OnlineReport) -> Dict[str, Any]:
    summary = report.to_dict()
    summary.pop("per_episode")
    return summary