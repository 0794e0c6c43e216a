import json
import logging
import csv
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Type, TypeVar, Union

import numpy as np

from experiments import DEFAULT_VARIANTS, check_orderings, load_variants, run_ablations, write_results
from mtp_net import load_params
from simulator import (ExpertPredictor, SimConfig, ScenarioConfig, ZeroPredictor, closed_loop_eval,
                       export_trajectories_csv, read_episode_logs, rollout_expert, write_episode_logs)
from trainer import TrainConfig, check_compatible, evaluate_offline, split_by_episode, train
from util.configuration import ConfigError, config_digest, from_dict, to_dict
from util.intersection_map import IntersectionMap
from util.scene import Scene, SceneError, TrackColumns, load_tracks, read_scenes, slice_scenes, write_scenes

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"
SCENES_FILE = "scenes.ndjson"
EPISODES_FILE = "episodes.ndjson"
MANIFEST_FILE = "manifest.json"

C = TypeVar("C")


def load_config(path: Optional[Union[str, Path]], cls: Type[C]) -> C:
    """Defaults of `cls` overridden by the JSON file at `path` (if any)."""
    if path is None:
        return cls()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return from_dict(cls, data, path.stem)


def atomic_write_json(path: Path, data: Dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


@dataclass
class RunManifest:
    subcommand: str
    argv: List[str]
    config_path: Optional[str]
    seed: Optional[int]
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    tool_version: str = TOOL_VERSION
    config_digest: str = ""

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST_FILE
        atomic_write_json(path, asdict(self))
        return path


class GroundTruthPredictor:
    """Offline oracle: returns each scene's recorded futures."""

    def predict(self, scene: Scene, world=None) -> np.ndarray:
        return scene.future_array()


def resolve_scenes_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / SCENES_FILE
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} does not exist")
    return path


class MtpCore:
    """One method per subcommand; each writes its outputs plus a manifest into `args.out`."""

    def __init__(self, argv: Sequence[str], workers: int = 1, progress: bool = False):
        self.argv = list(argv)
        self.workers = workers
        self.progress = progress

    def _out_dir(self, out) -> Path:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        return out_dir

    def _manifest(self, subcommand, config_path, seed, inputs, outputs, digest) -> RunManifest:
        return RunManifest(subcommand, self.argv, None if config_path is None else str(config_path), seed,
                           [str(p) for p in inputs], [str(p) for p in outputs], TOOL_VERSION, digest)

    def sim_config(self, config_path, scenario_path=None, seed=None) -> SimConfig:
        cfg = load_config(config_path, SimConfig)
        if scenario_path is not None:
            overrides = _read_json(scenario_path)
            merged = {**to_dict(cfg.scenario), **overrides}
            cfg = replace(cfg, scenario=from_dict(ScenarioConfig, merged, Path(scenario_path).stem))
        if seed is not None:
            cfg = replace(cfg, scenario=replace(cfg.scenario, seed=seed))
        return cfg

    # ------------------------------------------------------------ gen-data

    def gen_data(self, args) -> Dict[str, Any]:
        cfg = self.sim_config(args.config, seed=args.seed)
        out_dir = self._out_dir(args.out)
        scenes_path = out_dir / SCENES_FILE
        outputs = [scenes_path]
        inputs = []
        if args.tracks:
            scenes = []
            columns = TrackColumns()
            for episode, track_file in enumerate(args.tracks):
                sequences = load_tracks(track_file, columns, args.heading_unit, episode)
                scenes += slice_scenes(sequences, cfg.dataset.t_stride, cfg.dataset.horizon, cfg.dataset.dt,
                                       args.frame_step)
                inputs.append(track_file)
        else:
            scenes, logs = rollout_expert(cfg, args.episodes, cfg.scenario.seed, self.workers, self.progress)
            episodes_path = out_dir / EPISODES_FILE
            write_episode_logs(episodes_path, logs)
            outputs.append(episodes_path)
        write_scenes(scenes_path, scenes, cfg.dataset.horizon, cfg.dataset.dt)
        self._manifest("gen-data", args.config, cfg.scenario.seed, inputs, outputs, config_digest(cfg)).write(out_dir)
        return {"scenes": len(scenes), "out": str(out_dir)}

    # ------------------------------------------------------------ train

    def train(self, args) -> Dict[str, Any]:
        cfg = load_config(args.config, TrainConfig)
        overrides = {}
        if args.epochs is not None:
            overrides["epochs"] = args.epochs
        if args.batch_size is not None:
            overrides["batch_size"] = args.batch_size
        if args.lr is not None:
            overrides["learning_rate"] = args.lr
        if args.collision_weight is not None:
            overrides["collision_weight"] = args.collision_weight
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.no_aggregation:
            overrides["disable_aggregation"] = True
        if args.no_augmentation:
            overrides["augmentation"] = replace(cfg.augmentation, enabled=False)
        try:
            cfg = replace(cfg, **overrides)
        except ValueError as e:
            raise ConfigError(str(e)) from None

        scenes_path = resolve_scenes_path(args.data)
        header, scenes = read_scenes(scenes_path)
        if header["horizon"] != cfg.network.horizon or abs(header["dt"] - cfg.network.dt) > 1e-12:
            cfg = replace(cfg, network=replace(cfg.network, horizon=header["horizon"], dt=header["dt"]))
            logger.info(f"Network horizon/dt taken from the dataset: T={header['horizon']} dt={header['dt']}")
        out_dir = self._out_dir(args.out)
        result = train(scenes, cfg, out_dir, self.workers, self.progress)
        outputs = [out_dir / "metrics.csv", out_dir / "final.mtp"]
        self._manifest("train", args.config, cfg.seed, [scenes_path], outputs, config_digest(cfg)).write(out_dir)
        last = result.history[-1] if result.history else {}
        return {"train_scenes": result.train_scenes, "val_scenes": result.val_scenes,
                "final_train_loss": last.get("train_loss"), "checkpoint": str(out_dir / "final.mtp")}

    # ------------------------------------------------------------ eval-offline

    def eval_offline(self, args) -> Dict[str, Any]:
        scenes_path = resolve_scenes_path(args.data)
        header, scenes = read_scenes(scenes_path)
        if not scenes:
            raise SceneError(f"{scenes_path}: no scenes")
        inputs = [scenes_path]
        if args.predictor == "oracle":
            predictor = GroundTruthPredictor()
        else:
            if args.checkpoint is None:
                raise ConfigError("eval-offline needs --checkpoint unless --predictor oracle")
            predictor, _ = load_params(args.checkpoint, expected_horizon=header["horizon"])
            check_compatible(predictor, scenes)
            inputs.append(args.checkpoint)
        report, rows = evaluate_offline(predictor, scenes, args.miss_threshold, args.safety_distance)

        out_dir = self._out_dir(args.out)
        report_path = out_dir / "offline_report.json"
        rows_path = out_dir / "per_scene.csv"
        atomic_write_json(report_path, report.to_dict())
        _write_rows(rows_path, rows, ["scene_id", "n_vehicles", "ade", "fde", "mr", "cr"])
        digest = config_digest({"miss_threshold": args.miss_threshold, "safety_distance": args.safety_distance,
                                "predictor": args.predictor})
        self._manifest("eval-offline", None, None, inputs, [report_path, rows_path], digest).write(out_dir)
        return report.to_dict()

    # ------------------------------------------------------------ eval-online

    def eval_online(self, args) -> Dict[str, Any]:
        cfg = self.sim_config(args.config, args.scenario, args.seed)
        inputs = [p for p in (args.config, args.scenario) if p is not None]
        if args.predictor == "net":
            if args.checkpoint is None:
                raise ConfigError("eval-online needs --checkpoint unless --predictor oracle/zero")
            predictor, _ = load_params(args.checkpoint)
            cfg = replace(cfg, dataset=replace(cfg.dataset, horizon=predictor.horizon, dt=predictor.config.dt))
            inputs.append(args.checkpoint)
        elif args.predictor == "oracle":
            predictor = ExpertPredictor(cfg, IntersectionMap(cfg.map))
        else:
            predictor = ZeroPredictor(cfg.dataset.horizon)
        report, logs = closed_loop_eval(predictor, cfg, args.episodes, cfg.scenario.seed, self.workers, self.progress)

        out_dir = self._out_dir(args.out)
        report_path = out_dir / "online_report.json"
        episodes_path = out_dir / EPISODES_FILE
        atomic_write_json(report_path, report.to_dict())
        write_episode_logs(episodes_path, logs)
        outputs = [report_path, episodes_path]
        if args.export_traj:
            export_trajectories_csv(logs, args.export_traj)
            outputs.append(args.export_traj)
        self._manifest("eval-online", args.config, cfg.scenario.seed, inputs, outputs,
                       config_digest(cfg)).write(out_dir)
        summary = report.to_dict()
        summary.pop("per_episode")
        return summary

    # ------------------------------------------------------------ experiments

    def experiments(self, args) -> Dict[str, Any]:
        base = load_config(args.config, TrainConfig)
        overrides = {}
        if args.epochs is not None:
            overrides["epochs"] = args.epochs
        if args.seed is not None:
            overrides["seed"] = args.seed
        try:
            base = replace(base, **overrides)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        variants = DEFAULT_VARIANTS if args.variants is None else load_variants(args.variants)

        scenes_path = resolve_scenes_path(args.data)
        header, scenes = read_scenes(scenes_path)
        inputs = [scenes_path]
        if args.test_data is not None:
            test_path = resolve_scenes_path(args.test_data)
            _, test_scenes = read_scenes(test_path)
            train_scenes = scenes
            inputs.append(test_path)
        else:
            train_scenes, test_scenes = split_by_episode(scenes, args.test_fraction, base.seed)
        if not train_scenes or not test_scenes:
            raise SceneError(f"{scenes_path}: need both training and test scenes "
                             f"({len(train_scenes)} train, {len(test_scenes)} test)")
        base = replace(base, network=replace(base.network, horizon=header["horizon"], dt=header["dt"]))

        sim = None
        if args.online_episodes:
            sim = self.sim_config(args.sim_config, seed=args.seed)
            inputs += [p for p in (args.sim_config,) if p is not None]
        out_dir = self._out_dir(args.out)
        results = run_ablations(train_scenes, test_scenes, base, variants, sim, args.online_episodes, out_dir,
                                self.workers, self.progress)
        checks = check_orderings(results)
        outputs = write_results(out_dir, results, checks)
        digest = config_digest({"train": to_dict(base), "variants": [to_dict(v) for v in variants],
                                "online_episodes": args.online_episodes})
        self._manifest("experiments", args.config, base.seed, inputs, outputs, digest).write(out_dir)
        failed = [name for name, ok in checks.items() if ok is False]
        if args.require_orderings and failed:
            raise RuntimeError(f"ordering check(s) failed: {', '.join(failed)}")
        return {"variants": [r.row() for r in results], "orderings": checks}

    # ------------------------------------------------------------ export-traj

    def export_traj(self, args) -> Dict[str, Any]:
        path = Path(args.episodes_log)
        if path.is_dir():
            path = path / EPISODES_FILE
        if not path.exists():
            raise FileNotFoundError(f"episode log {path} does not exist")
        rows = export_trajectories_csv(read_episode_logs(path), args.out)
        return {"rows": rows, "out": str(args.out)}


def _read_json(path) -> Dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _write_rows(path: Path, rows: List[Dict], columns: List[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
