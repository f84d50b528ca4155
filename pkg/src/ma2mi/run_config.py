"""
Run Configuration

Loads JSON config files on top of the default tree, applies dotted-key
overrides, validates cross-field rules and computes the config content hash
every artifact embeds.
"""

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

from loguru import logger

from . import config
from .exceptions import ConfigError
from .utils import content_hash, read_json

# Keys whose value may legitimately change type (count or explicit id list).
FLEXIBLE_KEYS = {"corpus.subjects_pretrain", "corpus.subjects_finetune"}


@dataclass
class RunConfig:
    """
    Resolved configuration of one command invocation.

    Attributes:
    -----------
    tree : dict
        Full configuration tree (defaults merged with file and overrides)
    seed : int
        Resolved seed
    output_dir : Path
        Directory receiving every artifact of the run
    config_hash : str
        Content hash of the tree, output_dir excluded
    """
    tree: Dict[str, Any]
    seed: int
    output_dir: Path
    config_hash: str

    def section(self, name: str) -> Dict[str, Any]:
        return self.tree[name]

    def get(self, dotted_key: str) -> Any:
        node: Any = self.tree
        for part in dotted_key.split("."):
            node = node[part]
        return node


def flatten_keys(tree: Dict[str, Any], prefix: str = "") -> List[Tuple[str, Any]]:
    """
    List (dotted_key, default_value) pairs of a config tree, depth-first.

    Examples:
    ---------
    >>> flatten_keys({"a": {"b": 1}, "c": 2})
    [('a.b', 1), ('c', 2)]
    """
    items = []
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            items.extend(flatten_keys(value, prefix=f"{dotted}."))
        else:
            items.append((dotted, value))
    return items


def describe_keys() -> str:
    """Help text enumerating every config key with its type and default."""
    lines = ["config keys (type = default):"]
    for key, value in flatten_keys(config.DEFAULT_CONFIG):
        type_name = "any" if value is None else type(value).__name__
        lines.append(f"  {key} ({type_name}) = {json.dumps(value)}")
    return "\n".join(lines)


def _check_type(dotted: str, default: Any, value: Any) -> Any:
    """Coerce or reject an override value against the default's type."""
    if default is None or value is None or dotted in FLEXIBLE_KEYS:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{dotted} expects a boolean, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(default, list) and isinstance(value, list):
        return value
    if type(value) is not type(default):
        raise ConfigError(
            f"{dotted} expects {type(default).__name__}, got {type(value).__name__} ({value!r})"
        )
    return value


def _unknown_key(dotted: str) -> ConfigError:
    valid = ", ".join(key for key, _ in flatten_keys(config.DEFAULT_CONFIG))
    return ConfigError(f"unknown config key {dotted!r}; valid keys: {valid}")


def merge_tree(base: Dict[str, Any], update: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """
    Deep-merge update into a copy of base, rejecting keys base does not know.

    Parameters:
    -----------
    base : dict
        Tree providing the schema and defaults
    update : dict
        Partial tree read from a config file

    Returns:
    --------
    dict
        Merged tree
    """
    merged = copy.deepcopy(base)
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in merged:
            raise _unknown_key(dotted)
        if isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted} is a section; expected an object")
            merged[key] = merge_tree(merged[key], value, prefix=f"{dotted}.")
        else:
            merged[key] = _check_type(dotted, merged[key], value)
    return merged


def parse_override(text: str) -> Tuple[str, Any]:
    """
    Parse one `a.b=c` override; the value is read as JSON when possible.

    Examples:
    ---------
    >>> parse_override("optim.lr=0.0004")
    ('optim.lr', 0.0004)
    >>> parse_override("model.preset=tiny")
    ('model.preset', 'tiny')
    """
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(tree: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply dotted-key overrides in order, validating each key and type."""
    tree = copy.deepcopy(tree)
    for text in overrides:
        dotted, value = parse_override(text)
        node = tree
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise _unknown_key(dotted)
            node = node[part]
        leaf = parts[-1]
        if leaf not in node or isinstance(node[leaf], dict):
            raise _unknown_key(dotted)
        node[leaf] = _check_type(dotted, node[leaf], value)
        logger.debug(f"Override {dotted} = {value!r}")
    return tree


def validate_tree(tree: Dict[str, Any]) -> None:
    """
    Check cross-field rules that would otherwise fail late inside training.

    Raises:
    -------
    ConfigError
        On any violated rule
    """
    lo, hi = tree["data"]["delta_range"]
    if not (1 <= lo <= hi):
        raise ConfigError(f"data.delta_range must satisfy 1 <= a <= b, got {[lo, hi]}")

    if tree["model"]["preset"] not in ("tiny", "resnet18"):
        raise ConfigError(f"model.preset must be 'tiny' or 'resnet18', got {tree['model']['preset']!r}")
    if tree["model"]["fusion"] not in ("sum", "concat", "gated"):
        raise ConfigError(f"model.fusion must be sum, concat or gated, got {tree['model']['fusion']!r}")

    loss = tree["loss"]
    for name in loss["l3_transforms"]:
        if name not in ("identity", "hflip", "translate", "rotate"):
            raise ConfigError(f"loss.l3_transforms: {name!r} is not representable on the feature grid")
    if not (0.0 <= loss["l3_max_rotation_deg"] <= config.L3_MAX_ROTATION_DEG):
        raise ConfigError(
            f"loss.l3_max_rotation_deg must lie in [0, {config.L3_MAX_ROTATION_DEG}]"
        )
    if loss["rec_reduction"] not in ("mean", "sum"):
        raise ConfigError("loss.rec_reduction must be 'mean' or 'sum'")
    if loss["l3_reduction"] not in ("norm", "rms"):
        raise ConfigError("loss.l3_reduction must be 'norm' or 'rms'")

    codec = tree["codec"]
    if codec["kind"] not in ("conv-ae", "identity"):
        raise ConfigError(f"codec.kind must be 'conv-ae' or 'identity', got {codec['kind']!r}")
    factor = 1 if codec["kind"] == "identity" else codec["downsample"]
    if factor < 1 or factor & (factor - 1):
        raise ConfigError("codec.downsample must be a power of two")
    image_size = tree["data"]["image_size"]
    if image_size % factor:
        raise ConfigError(f"data.image_size {image_size} not divisible by codec downsample {factor}")
    latent_size = image_size // factor
    patch = tree["reconstructor"]["patch_size"]
    if latent_size % patch:
        raise ConfigError(
            f"latent grid {latent_size} not divisible by reconstructor.patch_size {patch}"
        )
    if tree["reconstructor"]["dim"] % tree["reconstructor"]["heads"]:
        raise ConfigError("reconstructor.dim must be divisible by reconstructor.heads")

    if tree["pretrain"]["mode"] not in ("ma2mi", "maer"):
        raise ConfigError("pretrain.mode must be 'ma2mi' or 'maer'")
    if tree["evaluate"]["protocol"] not in ("LOSO", "KFOLD"):
        raise ConfigError("evaluate.protocol must be 'LOSO' or 'KFOLD'")


def load_run_config(
    path: Optional[str] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
    output_dir: Optional[str] = None
) -> RunConfig:
    """
    Resolve the configuration of a command.

    Parameters:
    -----------
    path : str, optional
        JSON config file merged onto the defaults
    overrides : iterable of str
        `a.b=c` overrides applied after the file
    seed : int, optional
        Seed override (--seed)
    output_dir : str, optional
        Output directory override (--out)

    Returns:
    --------
    RunConfig
        Validated configuration with its content hash

    Raises:
    -------
    ConfigError
        Missing file, unknown key, type mismatch or violated rule
    """
    tree = config.default_config()
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"config file not found: {config_path}")
        try:
            data = read_json(config_path)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {config_path} is not valid JSON: {e}") from e
        tree = merge_tree(tree, data)

    tree = apply_overrides(tree, overrides)
    if seed is not None:
        tree["seed"] = int(seed)
    if output_dir is not None:
        tree["output_dir"] = str(output_dir)

    validate_tree(tree)
    return RunConfig(
        tree=tree,
        seed=int(tree["seed"]),
        output_dir=Path(tree["output_dir"]),
        config_hash=content_hash({k: v for k, v in tree.items() if k != "output_dir"})
    )
