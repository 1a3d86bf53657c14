"""
Run Configuration

One schema for every tunable setting. Values are merged as

    schema defaults  <-  config file  <-  command-line flags

The config file is flat `key = value` text with `#` comments (parsed with
python-dotenv). Its path comes from --config, or from the PPAD_CONFIG
environment variable, which may itself be set in a `.env` file.

Also home of the seeding helpers: every random draw in the toolkit comes from
a numpy Generator built by make_rng(seed, *keys).
"""

try:
    from dotenv import dotenv_values
except ModuleNotFoundError:
    raise RuntimeError(
        "Missing dependency: python-dotenv\n"
        "Install it by running: pip install -r requirements.txt"
    )

import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, Mapping, Optional, Tuple, Union

import numpy as np

from errors import ConfigError

CONFIG_ENV_VAR = "PPAD_CONFIG"


# ============================================================================
# SEEDING
# ============================================================================

def _key_to_int(key: Union[int, str]) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"Seed keys must be non-negative, got {key}")
        return int(key)
    return int.from_bytes(str(key).encode("utf-8"), "little")


def derive_seed(seed: int, *keys: Union[int, str]) -> int:
    """
    Derive an independent 64-bit seed from a root seed and a path of keys.

    derive_seed(7, "epoch", 3) is stable across runs and platforms.
    """
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    state = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)
    return int(state[0])


def make_rng(seed: int, *keys: Union[int, str]) -> np.random.Generator:
    """A PCG64 generator seeded from derive_seed(seed, *keys)."""
    return np.random.default_rng(derive_seed(seed, *keys))


# ============================================================================
# VALUE PARSERS
# ============================================================================

def _int_at_least(low: int) -> Callable[[str], int]:
    def parse(text: str) -> int:
        value = int(str(text).strip())
        if value < low:
            raise ValueError(f"must be >= {low}")
        return value
    return parse


def _positive_float(text: str) -> float:
    value = float(str(text).strip())
    if not np.isfinite(value) or value <= 0:
        raise ValueError("must be a positive number")
    return value


def _nonneg_float(text: str) -> float:
    value = float(str(text).strip())
    if not np.isfinite(value) or value < 0:
        raise ValueError("must be a non-negative number")
    return value


def _finite_float(text: str) -> float:
    value = float(str(text).strip())
    if not np.isfinite(value):
        raise ValueError("must be a finite number")
    return value


def _probability(text: str) -> float:
    value = float(str(text).strip())
    if not 0.0 <= value <= 1.0:
        raise ValueError("must lie in [0, 1]")
    return value


def _open_unit(text: str) -> float:
    value = float(str(text).strip())
    if not 0.0 < value < 1.0:
        raise ValueError("must lie strictly between 0 and 1")
    return value


def _fraction(text: str) -> float:
    value = float(str(text).strip())
    if not 0.0 < value <= 1.0:
        raise ValueError("must lie in (0, 1]")
    return value


def _weights(text: str) -> Tuple[float, ...]:
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ValueError("needs at least one weight")
    values = tuple(float(p) for p in parts)
    for w in values:
        if not np.isfinite(w) or w <= -1.0:
            raise ValueError(f"weight {w} violates w > -1")
    return values


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        value = str(text).strip()
        if value not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return value
    return parse


def _format_weights(values) -> str:
    return ",".join(repr(float(v)) for v in values)


# ============================================================================
# SCHEMA
# ============================================================================

@dataclass(frozen=True)
class Setting:
    """
    One configurable key.

    Attributes:
        name: Key as written in config files and --set
        parse: Text -> typed value; raises ValueError on bad input
        default: Typed default value
        help: One-line description
        format: Typed value -> text (must round-trip through parse)
    """
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    format: Callable[[Any], str] = repr


PROMPT_MODES = ("zero_shot", "text", "position_text", "position_text_image")

SETTINGS: Dict[str, Setting] = {s.name: s for s in [
    # training
    Setting("shots", _int_at_least(1), 64, "normal images sampled for few-shot training"),
    Setting("epochs", _int_at_least(1), 100, "passes over the sampled shots"),
    Setting("learning_rate", _nonneg_float, 0.05, "plain SGD step size"),
    Setting("eta", _open_unit, 0.8, "max/mean aggregation threshold"),
    Setting("seed", _int_at_least(0), 0, "root seed for every random draw"),
    Setting("prompt_mode", _choice(*PROMPT_MODES), "position_text_image", "prompt ablation variant", str),
    # frozen encoder / architecture
    Setting("encoder_seed", _int_at_least(0), 0, "seed of the frozen stand-in encoder weights"),
    Setting("image_size", _int_at_least(1), 224, "working resolution (square)"),
    Setting("patch_size", _int_at_least(1), 32, "patch side in pixels"),
    Setting("embed_dim", _int_at_least(1), 64, "token/patch embedding width d"),
    Setting("feature_dim", _int_at_least(1), 64, "encoder output width f"),
    Setting("text_prompt_length", _int_at_least(0), 4, "rows of the learnable text prompt L_t"),
    Setting("prompt_init_std", _nonneg_float, 0.02, "std of the Gaussian prompt initialization"),
    Setting("logit_scale", _positive_float, 10.0, "fixed softmax temperature"),
    Setting("patch_activation", _choice("gelu", "linear"), "gelu", "frozen activation after patch projection", str),
    Setting("patch_bias", _finite_float, -2.0, "frozen bias added before the patch activation"),
    Setting("pixel_mean", float, 0.5, "pixel normalization mean"),
    Setting("pixel_std", _positive_float, 0.25, "pixel normalization std"),
    # synthesis
    Setting("weight_choices", _weights, (-0.999, -0.99, 2.0, 3.0), "gamma weights w (comma separated)", _format_weights),
    Setting("apply_probability", _probability, 0.5, "probability of synthesizing an anomaly per step"),
    Setting("mask_shape", _choice("irregular", "rectangle"), "irregular", "anomaly mask geometry", str),
    Setting("num_points", _int_at_least(3), 10, "points sampled per irregular mask"),
    Setting("bezier_probability", _probability, 0.5, "per-edge Bezier replacement probability"),
    Setting("control_offset_fraction", _nonneg_float, 0.5, "max control displacement / edge length"),
    Setting("area_min", _fraction, 0.02, "minimum mask area / region area"),
    Setting("area_max", _fraction, 0.25, "maximum mask area / region area"),
    Setting("grid_cells", _int_at_least(1), 4, "Perlin lattice cells per side"),
]}


class RunConfig(Mapping):
    """
    Validated, immutable mapping of every schema key to a typed value.

    Build one with RunConfig.defaults(), load_run_config(...) or
    RunConfig.from_text(...).
    """

    def __init__(self, values: Mapping[str, Any]):
        missing = [k for k in SETTINGS if k not in values]
        if missing:
            raise ConfigError(f"Missing settings: {', '.join(missing)}")
        unknown = [k for k in values if k not in SETTINGS]
        if unknown:
            raise ConfigError(f"Unknown settings: {', '.join(unknown)}")
        self._values = dict(values)
        if not self._values["area_min"] < self._values["area_max"]:
            raise ConfigError("area_min must be smaller than area_max")
        image_size, patch_size = self._values["image_size"], self._values["patch_size"]
        if patch_size > image_size or image_size % patch_size != 0:
            raise ConfigError(f"image_size {image_size} is not a multiple of patch_size {patch_size}")

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({name: s.default for name, s in SETTINGS.items()})

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def __repr__(self) -> str:
        return f"RunConfig({self._values!r})"

    def updated(self, overrides: Mapping[str, Any], source: str = "override") -> "RunConfig":
        """
        Return a copy with some keys replaced.

        String values are parsed through the schema; typed values are
        formatted and re-parsed so they get the same validation.
        """
        values = dict(self._values)
        for key, raw in overrides.items():
            values[key] = parse_setting(key, raw, source)
        return RunConfig(values)

    def to_text(self) -> str:
        """Serialize as `key = value` lines, in schema order."""
        return "".join(f"{k} = {SETTINGS[k].format(self._values[k])}\n" for k in SETTINGS)

    @classmethod
    def from_text(cls, text: str, source: str = "<text>") -> "RunConfig":
        return cls.defaults().updated(_read_pairs(dotenv_values(stream=io.StringIO(text)), source), source)


def parse_setting(key: str, raw: Any, source: str = "override") -> Any:
    """Parse one value against the schema, raising ConfigError with context."""
    setting = SETTINGS.get(key)
    if setting is None:
        raise ConfigError(f"Unknown config key '{key}' ({source})")
    text = raw if isinstance(raw, str) else setting.format(raw)
    try:
        return setting.parse(text)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Bad value for '{key}' ({source}): {text!r} {e}") from e


def _read_pairs(pairs: Mapping[str, Optional[str]], source: str) -> Dict[str, str]:
    out = {}
    for key, value in pairs.items():
        if value is None:
            raise ConfigError(f"Key '{key}' has no value ({source})")
        out[key.strip()] = value
    return out


def resolve_config_path(explicit: Optional[str] = None) -> Optional[Path]:
    """--config wins; otherwise fall back to $PPAD_CONFIG."""
    if explicit:
        return Path(explicit)
    env_path = os.getenv(CONFIG_ENV_VAR)
    return Path(env_path) if env_path else None


def read_config_file(path: Path) -> Dict[str, str]:
    """Raw key -> text pairs of one config file."""
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    return _read_pairs(dotenv_values(path), str(path))


def load_run_config(
    config_path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """
    Merge defaults, the config file (if any) and flag overrides.

    Args:
        config_path: Explicit config file (else PPAD_CONFIG is consulted)
        overrides: key -> value from the command line (highest precedence)

    Raises:
        ConfigError: Unknown key, bad value, or unreadable config file
    """
    config = RunConfig.defaults()
    path = resolve_config_path(config_path)
    if path is not None:
        config = config.updated(read_config_file(path), str(path))
    if overrides:
        config = config.updated(overrides, "command line")
    return config
