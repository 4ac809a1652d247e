import copy
import json
import logging
import os

from ftkd.lib.errors import ConfigurationError
from ftkd.train.utils import HParams, write_json

DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "default.json")
ENV_PREFIX = "FTKD_"
RUN_CONFIG_NAME = "config.json"

logger = logging.getLogger(__name__)


def load_default_config():
    with open(DEFAULT_CONFIG_PATH, "r") as f:
        return json.load(f)


def parse_value(text):
    """Interpret a string as a JSON literal, falling back to the raw string."""
    if not isinstance(text, str):
        return text
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_path(config, dotted, value, source="override"):
    """
    Assign config["section"]["key"] (or a top-level key) from a dotted path.

    Unknown sections and keys are rejected so typos never pass silently.
    """
    parts = [p for p in dotted.split(".") if p]
    if not parts or len(parts) > 2:
        raise ConfigurationError(f"{source}: '{dotted}' is not of the form key or section.key")
    node = config
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigurationError(f"{source}: unknown config section '{part}'")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigurationError(f"{source}: unknown config key '{dotted}'")
    if isinstance(node[parts[-1]], dict):
        raise ConfigurationError(f"{source}: '{dotted}' is a section, not a value")
    node[parts[-1]] = value


def merge_config(base, update, source="config file", prefix=""):
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigurationError(f"{source}: unknown config key '{dotted}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"{source}: '{dotted}' must be an object")
            merge_config(base[key], value, source, prefix=f"{dotted}.")
        else:
            base[key] = value
    return base


def is_config_key(config, dotted):
    node = config
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return False
        node = node[part]
    return not isinstance(node, dict)


def env_overrides(environ, config=None):
    """
    Collect FTKD_SECTION__KEY=value pairs as dotted overrides.

    Variables that name no config key (FTKD_HOME, FTKD_CACHE, ...) belong to
    other tools and are skipped with a warning.
    """
    config = config if config is not None else load_default_config()
    overrides = {}
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX):].lower().replace("__", ".")
        if not is_config_key(config, dotted):
            logger.warning(f"Ignoring {name}: no config key {dotted}")
            continue
        overrides[dotted] = parse_value(value)
    return overrides


def parse_set_arguments(items):
    """Turn ["train.lr_init=1e-3", ...] into dotted overrides."""
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects section.key=value, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = parse_value(value.strip())
    return overrides


def load_run_config(config_path=None, overrides=None, environ=None):
    """
    Build the run configuration.

    Precedence, lowest first: defaults, config file, CLI overrides, environment.

    Args:
        config_path (str, optional): JSON file with a partial or full config.
        overrides (dict, optional): Dotted keys to values, e.g. {"train.lr_init": 1e-3}.
        environ (Mapping, optional): Environment to read FTKD_* variables from. Defaults to os.environ.
    """
    config = load_default_config()

    if config_path:
        if not os.path.isfile(config_path):
            raise ConfigurationError(f"Config file not found: {config_path}")
        try:
            with open(config_path, "r") as f:
                file_config = json.load(f)
        except json.JSONDecodeError as error:
            raise ConfigurationError(f"{config_path}: invalid JSON ({error})") from error
        merge_config(config, file_config, source=config_path)

    for dotted, value in (overrides or {}).items():
        set_path(config, dotted, value, source="command line")

    environ = os.environ if environ is None else environ
    for dotted, value in env_overrides(environ, config).items():
        set_path(config, dotted, value, source="environment")

    hps = HParams(**copy.deepcopy(config))
    validate_run_config(hps)
    return hps


def validate_run_config(hps):
    """Build every typed view once so invalid values fail before any work starts."""
    from ftkd.lib.algorithm.ftjnf import ModelConfig
    from ftkd.lib.algorithm.stft import StftConfig
    from ftkd.train.losses import GRAM_BLOCKS, KD_METHODS, TAP_NAMES
    from ftkd.train.simulate.scene import ArrayGeometry, SceneConfig
    from ftkd.train.train import TrainConfig

    try:
        StftConfig.from_hparams(hps.stft)
        geometry = ArrayGeometry.from_hparams(hps.geometry)
        SceneConfig.from_hparams(hps.scene)
        model_cfg = ModelConfig.from_hparams(hps.model)
        TrainConfig.from_hparams(hps.train, seed=hps.seed)
        ModelConfig.from_preset(hps.kd.teacher_preset, num_mics=model_cfg.num_mics)
    except (ValueError, TypeError, KeyError) as error:
        raise ConfigurationError(str(error)) from error

    if geometry.num_mics != model_cfg.num_mics:
        raise ConfigurationError(
            f"geometry has {geometry.num_mics} microphones but the model expects {model_cfg.num_mics}"
        )
    if hps.kd.method not in (*KD_METHODS, "none"):
        raise ConfigurationError(f"Unknown KD method: {hps.kd.method}")
    if hps.kd.gram_block not in GRAM_BLOCKS:
        raise ConfigurationError(f"kd.gram_block must be one of {', '.join(GRAM_BLOCKS)}")
    unknown_taps = set(hps.kd.enabled_taps) - set(TAP_NAMES)
    if unknown_taps:
        raise ConfigurationError(f"Unknown taps in kd.enabled_taps: {', '.join(sorted(unknown_taps))}")
    if not isinstance(hps.seed, int):
        raise ConfigurationError(f"seed must be an integer, got {hps.seed!r}")


def save_run_config(hps, out_dir):
    path = os.path.join(out_dir, RUN_CONFIG_NAME)
    write_json(path, hps.to_dict())
    return path
