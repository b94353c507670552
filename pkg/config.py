"""
Configuration for the IPU toolkit

Recipe configs are single JSON documents; `--set a.b=value` overrides are
applied before validation. Runtime settings (worker threads, log level) come
from the command line, else from the environment or a local .env file.
"""

import copy
import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from dotenv import load_dotenv

from utils.errors import ValidationError, raise_if_problems
from utils.training import (
    DATA_DEFAULTS,
    DECODER_DEFAULTS,
    OPTIMIZER_DEFAULTS,
    SAMPLER_DEFAULTS,
    RecipeConfig,
    validate_recipe,
)

load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
REQUIRED_KEYS = ("recipe", "model", "loss")
SCALAR_KEYS = {
    "recipe": str,
    "seed": int,
    "epochs": int,
    "scale_factor": (int, float),
    "n_models": int,
    "patch_size": int,
    "channels": int,
}
SECTION_DEFAULTS = {
    "optimizer": OPTIMIZER_DEFAULTS,
    "data": DATA_DEFAULTS,
    "sampler": SAMPLER_DEFAULTS,
    "decoder": DECODER_DEFAULTS,
}
TOP_LEVEL_KEYS = set(SCALAR_KEYS) | set(SECTION_DEFAULTS) | {"model", "loss"}


def parse_override(text: str):
    """Split `a.b=value` into (["a", "b"], value), reading value as JSON when possible"""
    if "=" not in text:
        raise ValidationError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    path = key.strip().split(".")
    if not all(path):
        raise ValidationError(f"override key {key!r} is malformed")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(document: Dict, overrides: Sequence[str]) -> Dict:
    """Return a copy of `document` with every dotted override applied in order"""
    result = copy.deepcopy(document)
    for text in overrides:
        path, value = parse_override(text)
        node = result
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ValidationError(f"override {text!r} descends into non-object key {part!r}")
            node = child
        node[path[-1]] = value
    return result


def validate_recipe_config(document: Dict) -> List[str]:
    """Return the list of problems with a recipe config document"""
    if not isinstance(document, dict):
        return ["recipe config must be a JSON object"]
    problems = []
    unknown = set(document) - TOP_LEVEL_KEYS
    if unknown:
        problems.append(f"unknown config keys: {sorted(unknown)}")
    for key in REQUIRED_KEYS:
        if key not in document:
            problems.append(f"missing required key {key!r}")
    for key, kind in SCALAR_KEYS.items():
        if key in document and (not isinstance(document[key], kind) or isinstance(document[key], bool)):
            problems.append(f"{key} has the wrong type")
    for section, defaults in SECTION_DEFAULTS.items():
        value = document.get(section, {})
        if not isinstance(value, dict):
            problems.append(f"{section} must be an object")
            continue
        extra = set(value) - set(defaults)
        if extra:
            problems.append(f"unknown {section} keys: {sorted(extra)}")
    if problems:
        return problems
    return validate_recipe(recipe_config_from_dict(document))


def recipe_config_from_dict(document: Dict) -> RecipeConfig:
    """Merge section defaults into a RecipeConfig; no validation"""
    scalars = {key: document[key] for key in SCALAR_KEYS if key in document}
    sections = {
        section: {**defaults, **document.get(section, {})}
        for section, defaults in SECTION_DEFAULTS.items()
    }
    return RecipeConfig(model=document["model"], loss=document["loss"], **scalars, **sections)


def load_recipe_config(path, overrides: Sequence[str] = ()) -> RecipeConfig:
    """Read, override and validate one JSON recipe config"""
    try:
        document = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path} is not valid JSON: {e}")
    document = apply_overrides(document, overrides)
    raise_if_problems(validate_recipe_config(document))
    return recipe_config_from_dict(document)


def get_thread_count(cli_value: Optional[int] = None) -> int:
    """Worker threads: --threads, else IPU_THREADS, else every available CPU"""
    value = cli_value if cli_value is not None else os.environ.get("IPU_THREADS")
    if value is None or value == "":
        return os.cpu_count() or 1
    try:
        count = int(value)
    except ValueError:
        raise ValidationError(f"thread count {value!r} is not an integer")
    if count < 1:
        raise ValidationError("thread count must be at least 1")
    return count


def get_log_level(cli_value: Optional[str] = None) -> str:
    level = (cli_value or os.environ.get("IPU_LOG_LEVEL") or "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise ValidationError(f"unknown log level {level!r}")
    return level


def configure_logging(level: str = "INFO"):
    logging.basicConfig(level=level, format=LOG_FORMAT)
