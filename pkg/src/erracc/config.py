"""Experiment configuration: JSON files, presets and command-line overrides.

A config is a JSON object::

    {
      "system": "l63",
      "preset": "desk",
      "data": {"protocol": "l63-desk", "seed": 0, "path": "data/l63"},
      "out_dir": "runs/l63",
      "roster": ["cts", "gen", "gen-ours"],
      "train": {"cts": {...TrainConfig fields...}, "gen": {...}},
      "eval": {...EvalConfig fields...},
      "seed": 0
    }

Missing sections are filled from the preset. ``--set a.b=value`` style
overrides are applied last; values are parsed as JSON when possible.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .training import TrainConfig

ROSTER = (
    "cts",
    "gen",
    "gen-rollout",
    "gen-noise",
    "gen-penalty",
    "gen-ours",
    "random-walk",
    "climatology",
)
TRAINED = ("cts", "gen", "gen-rollout", "gen-noise", "gen-penalty", "gen-ours")
# models that need a trained CTS before they can be fitted
NEEDS_CTS = ("gen-penalty", "gen-ours")

SYSTEM_VARIABLES = {
    "l63": ("x", "y"),
    "l96": tuple(f"X{k + 1}" for k in range(8)),
}


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    n_ics: int = 400
    n_members: int = 40
    horizon: int = 300
    replicates: int = 100
    level: float = 0.95
    histogram_bins: int = 30
    aggregate: str = "mean"  # how per-dimension KLs are combined into one curve
    per_variable: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_ics < 2:
            raise ConfigError("n_ics must be >= 2")
        if self.n_members < 2:
            raise ConfigError("n_members must be >= 2")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.aggregate not in ("mean", "sum"):
            raise ConfigError("aggregate must be 'mean' or 'sum'")


@dataclass
class ExperimentConfig:
    system: str
    data: dict
    out_dir: str
    roster: list[str]
    train: dict[str, TrainConfig]
    eval: EvalConfig
    preset: str = "desk"
    seed: int = 0
    random_walk_std: float = 1.0
    random_walk_units: str = "standardized"
    climatology: dict = field(default_factory=lambda: {"loc": 2.5, "scale": 6.25})

    def __post_init__(self):
        if self.system not in SYSTEM_VARIABLES:
            raise ConfigError(f"unknown system {self.system!r}")
        if not self.roster:
            raise ConfigError("roster must not be empty")
        bad = [m for m in self.roster if m not in ROSTER]
        if bad:
            raise ConfigError(f"unknown model kinds {bad}; choose from {list(ROSTER)}")
        if self.random_walk_units not in ("standardized", "raw"):
            raise ConfigError("random_walk_units must be 'standardized' or 'raw'")

    @property
    def variables(self) -> tuple[str, ...]:
        return SYSTEM_VARIABLES[self.system]

    @property
    def dataset_path(self) -> Path:
        return Path(self.data.get("path") or Path(self.out_dir) / "data" / self.system)

    def checkpoint(self, kind: str) -> Path:
        return Path(self.out_dir) / "models" / f"{kind}.ckpt"

    def train_config(self, kind: str) -> TrainConfig:
        if kind not in self.train:
            raise ConfigError(f"no training config for {kind!r}")
        return self.train[kind]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = {k: asdict(v) for k, v in self.train.items()}
        d["eval"] = asdict(self.eval)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            d["train"] = {k: v if isinstance(v, TrainConfig) else TrainConfig.from_dict(v) for k, v in d["train"].items()}
            d["eval"] = d["eval"] if isinstance(d["eval"], EvalConfig) else EvalConfig(**d["eval"])
            return cls(**d)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------------
# presets


def _l63_train(preset: str) -> dict[str, dict]:
    paper = preset == "paper"
    steps = None if paper else 3000
    gen = dict(epochs=20, lr=3e-4, depth=3, width=32, steps_per_epoch=steps)
    # sigma-head rate drops and noise starts at the midpoint of training
    half = dict(sigma_lr=1e-7, sigma_lr_drop_epoch=10)
    noise = dict(noise_fraction=0.3, noise_start_epoch=10, noise_slope=0.003, noise_intercept=0.0, noise_units="raw", horizon=150)
    penalty = dict(lam=5.0, horizon=150)
    return {
        "cts": dict(epochs=10, lr=1e-4, depth=5, width=32, t_max=200, policy="freeze", steps_per_epoch=None if paper else 6000),
        "gen": gen,
        "gen-rollout": {**gen, "rollout_k": 2},
        "gen-noise": {**gen, **half, **noise},
        "gen-penalty": {**gen, **half, **penalty},
        "gen-ours": {**gen, **half, **noise, **penalty},
    }


def _l96_train(preset: str) -> dict[str, dict]:
    paper = preset == "paper"
    epochs = 50 if paper else 20
    half = epochs // 2
    steps = None if paper else 1500
    gen = dict(epochs=epochs, lr=1e-4, depth=8, width=64, steps_per_epoch=steps)
    drop = dict(sigma_lr=1e-7, sigma_lr_drop_epoch=half)
    noise = dict(noise_fraction=0.2, noise_start_epoch=half, noise_slope=14e-6, noise_intercept=0.0042, horizon=500)
    penalty = dict(lam=5.0, horizon=500)
    return {
        "cts": dict(
            epochs=epochs,
            lr=3e-5,
            depth=8,
            width=256,
            t_max=500,
            policy="reanchor",
            steps_per_epoch=steps,
        ),
        "gen": gen,
        "gen-rollout": {**gen, "rollout_k": 2},
        "gen-noise": {**gen, **drop, **noise},
        "gen-penalty": {**gen, **drop, **penalty},
        "gen-ours": {**gen, **drop, **noise, **penalty},
    }


def preset_dict(system: str, preset: str = "desk", out_dir: str | None = None) -> dict:
    if preset not in ("desk", "paper"):
        raise ConfigError(f"unknown preset {preset!r}; choose 'desk' or 'paper'")
    if system == "l63":
        train = _l63_train(preset)
        ev = dict(n_ics=400, n_members=40, horizon=300)
        roster = ["cts", "gen", "gen-ours"]
    elif system == "l96":
        train = _l96_train(preset)
        # 5 model time units at 0.005 per saved row
        ev = dict(n_ics=500, n_members=40, horizon=1000)
        roster = ["cts", "gen", "gen-noise", "gen-penalty", "gen-ours"]
    else:
        raise ConfigError(f"unknown system {system!r}")
    protocol = system if preset == "paper" else f"{system}-desk"
    return {
        "system": system,
        "preset": preset,
        "data": {"protocol": protocol, "seed": 0, "path": None},
        "out_dir": out_dir or f"runs/{system}-{preset}",
        "roster": roster,
        "train": train,
        "eval": ev,
        "seed": 0,
    }


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(d: dict, overrides) -> dict:
    d = copy.deepcopy(d)
    for text in overrides or ():
        path, value = parse_override(text)
        node = d
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {'.'.join(path)}: {part} is not a section")
        node[path[-1]] = value
    return d


def _propagate_seed(d: dict) -> dict:
    """Derive model and evaluation seeds from the run seed unless set explicitly.

    All autoregressive variants share one seed, so they start from the same
    weights and see the same window stream; only their objectives differ.
    """
    seed = int(d.get("seed", 0))
    for kind, cfg in d.get("train", {}).items():
        if "seed" not in cfg:
            cfg["seed"] = seed * 1000 + (1 if kind == "cts" else 2)
    d.setdefault("eval", {}).setdefault("seed", seed * 1000 + 99)
    d.setdefault("data", {}).setdefault("seed", seed)
    return d


def load_config(
    path: str | Path | None = None,
    system: str | None = None,
    preset: str | None = None,
    overrides=None,
    seed: int | None = None,
) -> ExperimentConfig:
    """Build a config from an optional JSON file, a preset and overrides.

    The seed comes from ``seed``, else the file, else ``RUN_SEED``, else 0.
    """
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
    system = system or user.get("system")
    if system is None:
        raise ConfigError("no system given (config 'system' key or command-line argument)")
    preset = preset or user.get("preset", "desk")
    d = _merge(preset_dict(system, preset), user)
    d["system"], d["preset"] = system, preset
    d = apply_overrides(d, overrides)
    if seed is not None:
        d["seed"] = seed
    elif "seed" not in user and not any(o.startswith("seed=") for o in overrides or ()):
        env = os.environ.get("RUN_SEED")
        if env is not None:
            try:
                d["seed"] = int(env)
            except ValueError as exc:
                raise ConfigError(f"RUN_SEED must be an integer, got {env!r}") from exc
    d = _propagate_seed(d)
    return ExperimentConfig.from_dict(d)
