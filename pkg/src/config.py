"""
Run configuration for VisionGuard.

A JSON file merged over ``default_config`` section by section, overridden by
command-line flags, and validated into the typed configs the modules consume.
Every command writes the resolved result to ``run_config.json``.
"""
import copy
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .attacks import AttackConfig
from .classifier import TrainConfig
from .detector import DetectorConfig, decode_tau, encode_tau
from .errors import ConfigError, VisionGuardError
from .image_codec import TransformSpec, format_transform, parse_transform

__all__ = ['RunConfig', 'EvalOptions', 'SyntheticOptions', 'SNAPSHOT_NAME', 'DEFAULT_CONFIG']

SNAPSHOT_NAME = "run_config.json"

DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "out_dir": "runs/latest",
    "train": {
        "epochs": 20,
        "batch_size": 64,
        "learning_rate": 0.05,
        "momentum": 0.9,
        "hidden_dims": [64, 64],
    },
    # One entry per attack run; keys are AttackConfig fields
    "attacks": [
        {"kind": "fgsm", "epsilon": 0.1},
    ],
    "detector": {
        "transform": "jpeg92",
        "tau": 0.0,
        "prob_floor": 1e-12,
    },
    "evaluation": {
        "transforms": ["jpeg92"],
        "calibration_fraction": 0.5,
        "mixture": False,
        "noise_sigma": 0.1,
        "noise_target_drop": 0.01,
        "noise_grid": [0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
        "kde_bandwidths": [0.1, 0.5, 1.0, 2.0, 5.0],
        "kde_validation_fraction": 0.1,
        "limit": None,
    },
    "synthetic": {
        "n_per_class": 20,
        "num_classes": 10,
        "shape": [8, 8, 1],
        "separation": 2.0,
        "noise": 0.1,
    },
}

_SECTIONS = ("train", "detector", "evaluation", "synthetic")


@dataclass(frozen=True)
class EvalOptions:
    transforms: Tuple[TransformSpec, ...]
    calibration_fraction: float = 0.5
    mixture: bool = False
    noise_sigma: Optional[float] = 0.1
    noise_target_drop: float = 0.01
    noise_grid: Tuple[float, ...] = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3)
    kde_bandwidths: Tuple[float, ...] = (0.1, 0.5, 1.0, 2.0, 5.0)
    kde_validation_fraction: float = 0.1
    limit: Optional[int] = None


@dataclass(frozen=True)
class SyntheticOptions:
    n_per_class: int = 20
    num_classes: int = 10
    shape: Tuple[int, ...] = (8, 8, 1)
    separation: float = 2.0
    noise: float = 0.1


class RunConfig:
    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.default_config = copy.deepcopy(DEFAULT_CONFIG)
        self.config_file = Path(path) if path is not None else None
        self.config = self.load_config()

    def load_config(self) -> Dict[str, Any]:
        """Merge the JSON file over the defaults, one section at a time."""
        merged = copy.deepcopy(self.default_config)
        if self.config_file is None:
            return merged
        if not self.config_file.exists():
            raise ConfigError(f"config file {self.config_file} does not exist")
        try:
            loaded = json.loads(self.config_file.read_text())
        except (json.JSONDecodeError, OSError) as e:
            raise ConfigError(f"cannot read config file {self.config_file}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"{self.config_file}: top level must be a JSON object")
        unknown = set(loaded) - set(merged)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key, value in loaded.items():
            if key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                extra = set(value) - set(merged[key]) - ({"seed"} if key == "train" else set())
                if extra:
                    raise ConfigError(f"unknown keys in {key!r}: {', '.join(sorted(extra))}")
                merged[key] = {**merged[key], **value}
            else:
                merged[key] = value
        return merged

    def get(self, key: str, default=None):
        """Dotted lookup, e.g. ``get("detector.tau")``."""
        node: Any = self.config
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def set(self, key: str, value: Any):
        """Dotted assignment; ``None`` leaves the current value alone so unset flags don't override."""
        if value is None:
            return
        parts = key.split(".")
        node = self.config
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section {part!r}")
            node = node[part]
        if parts[-1] not in node and not (parts[:-1] == ["train"] and parts[-1] == "seed"):
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value

    def override_attacks(self, kinds: Sequence[str] = (), epsilon: Optional[float] = None):
        """``--attack`` replaces the attack list; ``--epsilon`` applies to every entry."""
        if kinds:
            self.config["attacks"] = [{"kind": kind} for kind in kinds]
        if epsilon is not None:
            self.config["attacks"] = [{**entry, "epsilon": epsilon} for entry in self.config["attacks"]]

    @property
    def seed(self) -> int:
        seed = self.config["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        return seed

    @property
    def out_dir(self) -> Path:
        return Path(self.config["out_dir"])

    def train_config(self) -> TrainConfig:
        section = dict(self.config["train"])
        section.setdefault("seed", self.seed)
        section["hidden_dims"] = tuple(section["hidden_dims"])
        return self._build(TrainConfig, section, "train")

    def attack_configs(self) -> List[AttackConfig]:
        entries = self.config["attacks"]
        if not isinstance(entries, list):
            raise ConfigError("'attacks' must be a list of objects")
        configs = []
        for i, entry in enumerate(entries):
            if not isinstance(entry, dict):
                raise ConfigError(f"attacks[{i}] must be an object")
            configs.append(self._build(AttackConfig, {"seed": self.seed, **entry}, f"attacks[{i}]"))
        return configs

    def detector_config(self) -> DetectorConfig:
        section = dict(self.config["detector"])
        section["transform"] = self._transform(section.get("transform"), "detector.transform")
        try:
            section["tau"] = decode_tau(section.get("tau"))
        except VisionGuardError as e:
            raise ConfigError(f"detector.tau: {e}") from e
        return self._build(DetectorConfig, section, "detector")

    def eval_options(self) -> EvalOptions:
        section = dict(self.config["evaluation"])
        names = section.get("transforms") or []
        if isinstance(names, str):
            names = [names]
        section["transforms"] = tuple(self._transform(n, "evaluation.transforms") for n in names)
        if not section["transforms"]:
            raise ConfigError("evaluation.transforms must name at least one transform")
        section["noise_grid"] = tuple(float(s) for s in section["noise_grid"])
        section["kde_bandwidths"] = tuple(float(h) for h in section["kde_bandwidths"])
        options = self._build(EvalOptions, section, "evaluation")
        if not 0.0 < options.calibration_fraction < 1.0 or not 0.0 < options.kde_validation_fraction < 1.0:
            raise ConfigError("evaluation fractions must lie in (0, 1)")
        if options.limit is not None and options.limit < 1:
            raise ConfigError(f"evaluation.limit must be positive, got {options.limit}")
        if any(h <= 0 for h in options.kde_bandwidths) or not options.kde_bandwidths:
            raise ConfigError("evaluation.kde_bandwidths must be positive")
        return options

    def synthetic_options(self) -> SyntheticOptions:
        section = dict(self.config["synthetic"])
        section["shape"] = tuple(section["shape"])
        return self._build(SyntheticOptions, section, "synthetic")

    def validate(self) -> "RunConfig":
        """Build every typed section once so a bad file fails before any work starts."""
        self.seed
        self.train_config()
        self.attack_configs()
        self.detector_config()
        self.eval_options()
        self.synthetic_options()
        return self

    def resolved(self) -> Dict[str, Any]:
        detector = self.detector_config()
        return {
            "seed": self.seed,
            "out_dir": str(self.out_dir),
            "train": dataclasses.asdict(self.train_config()),
            "attacks": [c.snapshot() for c in self.attack_configs()],
            "detector": {
                "transform": format_transform(detector.transform),
                "tau": encode_tau(detector.tau),
                "prob_floor": detector.prob_floor,
            },
            "evaluation": {
                **self.config["evaluation"],
                "transforms": [format_transform(t) for t in self.eval_options().transforms],
            },
            "synthetic": dataclasses.asdict(self.synthetic_options()),
        }

    def save_config(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.resolved(), indent=2, sort_keys=True) + "\n")
        except OSError as e:
            raise IOError(f"Failed to write config at {path}: {e}") from e
        return path

    def save_snapshot(self, out_dir: Optional[Union[str, Path]] = None) -> Path:
        return self.save_config(Path(out_dir or self.out_dir) / SNAPSHOT_NAME)

    @staticmethod
    def _transform(value: Any, where: str) -> TransformSpec:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a transform string, got {value!r}")
        try:
            return parse_transform(value)
        except VisionGuardError as e:
            raise ConfigError(f"{where}: {e}") from e

    @staticmethod
    def _build(cls, values: Dict[str, Any], where: str):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown keys in {where}: {', '.join(sorted(unknown))}")
        try:
            return cls(**values)
        except (VisionGuardError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid {where}: {e}") from e
