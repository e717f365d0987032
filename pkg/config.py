"""
Run configuration: dataset presets, flat key/value files and overrides.

Every setting of a run is addressable by one flat key (``lr``, ``neighbor_cap``,
``mask_frac``, ...). Resolution order is defaults, preset, config file,
command-line flags, then ``--set key=value`` pairs.
"""

import json
import os
import tomllib
from dataclasses import dataclass, field, fields, replace

from dotenv import load_dotenv

from batcher import MepConfig, SamplingConfig
from errors import ConfigError
from evaluator import EvalConfig
from logger import get_logger
from model import HitterConfig
from trainer import TrainConfig

load_dotenv()

logger = get_logger(__name__)

# Dataset-specific values; everything else keeps the dataclass defaults.
PRESETS = {
    "fb15k237": {
        "neighbor_cap": 50,
        "train_keep_frac": 0.7,
        "select_prob": 1.0,
        "mask_frac": 0.5,
        "replace_frac": 0.0,
        "keep_frac": 0.5,
        "use_aux_loss": False,
    },
    "wn18rr": {
        "neighbor_cap": 12,
        "train_keep_frac": 0.5,
        "select_prob": 0.8,
        "mask_frac": 0.6,
        "replace_frac": 0.12,
        "keep_frac": 0.28,
        "use_aux_loss": True,
    },
    "custom": {},
}

# Section fields derived from run-level keys instead of being set directly.
_DERIVED = {
    "model": ("context_enabled", "mep_aux_enabled"),
    "train": ("seed", "progress"),
    "eval": ("progress",),
}

_SECTIONS = {
    "model": HitterConfig,
    "train": TrainConfig,
    "mep": MepConfig,
    "sampling": SamplingConfig,
    "eval": EvalConfig,
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _default_output_dir():
    return os.getenv("HITTER_OUTPUT_DIR", "runs")


def _default_eval():
    return EvalConfig(workers=int(os.getenv("HITTER_WORKERS", "1")))


@dataclass(frozen=True)
class RunConfig:
    """
    Everything needed to reproduce a run.

    Attributes:
        dataset_dir (str): directory with train.txt / valid.txt / test.txt
        preset (str): "fb15k237", "wn18rr" or "custom"
        output_dir (str): where checkpoints, ledgers and reports go
        seed (int): seeds initialisation, batching and dropout
        no_context (bool): train the context-independent baseline
        no_mep (bool): disable source-entity perturbation and its auxiliary loss
        progress (bool): show progress bars
    """

    dataset_dir: str = ""
    preset: str = "custom"
    output_dir: str = field(default_factory=_default_output_dir)
    seed: int = 0
    no_context: bool = False
    no_mep: bool = False
    progress: bool = True
    model: HitterConfig = field(default_factory=HitterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mep: MepConfig = field(default_factory=MepConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    eval: EvalConfig = field(default_factory=_default_eval)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}, expected one of {sorted(PRESETS)}")

    # derived configurations with the ablation switches applied

    def model_config(self):
        return replace(
            self.model,
            context_enabled=not self.no_context,
            mep_aux_enabled=self.mep.use_aux_loss and not (self.no_mep or self.no_context),
        )

    def mep_config(self):
        if self.no_mep or self.no_context:
            return MepConfig()
        return self.mep

    def train_config(self):
        return replace(self.train, seed=self.seed, progress=self.progress)

    def eval_config(self):
        return replace(self.eval, progress=self.progress)

    def to_flat(self):
        flat = {key: getattr(self, key) for key in RUN_KEYS}
        for section, cls in _SECTIONS.items():
            value = getattr(self, section)
            for f in fields(cls):
                if f.name not in _DERIVED.get(section, ()):
                    flat[f.name] = getattr(value, f.name)
        return flat

    def to_json(self):
        """Canonical JSON echo; feeding it back through ``--config`` reproduces the run."""
        return json.dumps(self.to_flat(), sort_keys=True, indent=2)


RUN_KEYS = ("dataset_dir", "preset", "output_dir", "seed", "no_context", "no_mep", "progress")


def _key_table():
    """Flat key -> (section or None, expected type)."""
    table = {}
    run_fields = {f.name: f for f in fields(RunConfig)}
    for key in RUN_KEYS:
        table[key] = (None, run_fields[key].type)
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            if f.name in _DERIVED.get(section, ()):
                continue
            if f.name in table:
                raise ConfigError(f"config key {f.name!r} is defined twice")
            table[f.name] = (section, f.type)
    return table


KEYS = _key_table()


def coerce_value(key, value):
    """Convert a raw value (string from the command line or TOML scalar) to the key's type."""
    if key not in KEYS:
        raise ConfigError(f"unknown config key: {key}")
    expected = KEYS[key][1]
    if isinstance(value, str) and expected is not str:
        text = value.strip()
        if expected is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        try:
            return expected(text)
        except ValueError:
            raise ConfigError(f"{key}: expected {expected.__name__}, got {value!r}") from None
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
        raise ConfigError(f"{key}: expected {expected.__name__}, got {value!r}")
    return value


def parse_set_pairs(pairs):
    """Parse ``key=value`` strings into a dict of raw string values."""
    overrides = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        overrides[key.strip()] = value
    return overrides


def read_config_file(path):
    """
    Read a flat config file: TOML, or JSON when the name ends in ``.json``
    (the resolved-config echo).
    """
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.endswith(".json"):
            with open(path, "r", encoding="utf-8") as handle:
                payload = json.load(handle)
        else:
            with open(path, "rb") as handle:
                payload = tomllib.load(handle)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from None
    nested = [key for key, value in payload.items() if isinstance(value, dict)]
    if nested:
        raise ConfigError(f"{path}: config files are flat, found tables {nested}")
    return payload


def resolve_config(file_values=None, overrides=None):
    """
    Build a RunConfig from layered flat values.

    Args:
        file_values (dict, optional): values from a config file
        overrides (dict, optional): command-line values, applied last

    Returns:
        RunConfig
    """
    layers = [dict(file_values or {}), dict(overrides or {})]
    unknown = sorted({key for layer in layers for key in layer if key not in KEYS})
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    merged = {}
    for layer in layers:
        merged.update({key: coerce_value(key, value) for key, value in layer.items()})
    preset = merged.get("preset", "custom")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
    values = {**PRESETS[preset], **merged}

    run_kwargs = {key: values[key] for key in RUN_KEYS if key in values}
    base = RunConfig()
    for section in _SECTIONS:
        section_values = {key: v for key, v in values.items() if KEYS[key][0] == section}
        if section_values:
            run_kwargs[section] = replace(getattr(base, section), **section_values)
    config = RunConfig(**run_kwargs)
    logger.debug(f"Resolved config: {config.to_json()}")
    return config


def write_config(config, output_dir):
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, "config.json")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(config.to_json() + "\n")
    return path
