"""Run configuration: an INI file of ``[section]`` ``key = value`` lines merged
with command-line overrides and validated as one model."""

import configparser
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable

import pydantic

from pynexus.data import DataConfig, SplitConfig
from pynexus.model import NexusConfig
from pynexus.synth import SynthConfig
from pynexus.tensor import ConfigurationError
from pynexus.training import TrainConfig


logger = logging.getLogger("pynexus.settings")

SECTIONS = ("model", "train", "synth", "split", "data")
RUN_SECTION = "run"


class RunConfig(pydantic.BaseSettings):
    seed: int = 0
    out_dir: Path = Path("out")
    data_dir: Path | None = None
    debug: bool = False
    model: NexusConfig = NexusConfig()
    train: TrainConfig = TrainConfig()
    synth: SynthConfig = SynthConfig()
    split: SplitConfig = SplitConfig()
    data: DataConfig = DataConfig()

    class Config:
        env_prefix = "pynexus_"
        extra = "forbid"

    @pydantic.root_validator(skip_on_failure=True)
    def propagate_seed(cls, values: dict) -> dict:
        seed = values["seed"]
        values["train"] = values["train"].copy(update={"seed": seed})
        values["synth"] = values["synth"].copy(update={"seed": seed})
        return values

    @property
    def prepared_dir(self) -> Path:
        return self.data_dir or self.out_dir


def parse_value(text: str) -> Any:
    """JSON scalars and lists, anything else as a plain string."""
    try:
        return json.loads(text)
    except ValueError:
        return text


def format_value(value: Any) -> str:
    if isinstance(value, datetime):
        return value.isoformat()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, list, tuple, dict)) or value is None:
        return json.dumps(value)
    return repr(value) if isinstance(value, float) else str(value)


def read_ini(path: Path) -> dict[str, Any]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # type: ignore[assignment]
    try:
        with open(path) as fd:
            parser.read_file(fd)
    except (OSError, configparser.Error) as e:
        raise ConfigurationError(f"Cannot read config {path}: {e}") from e
    values: dict[str, Any] = {}
    for section in parser.sections():
        items = {key: parse_value(raw) for key, raw in parser.items(section)}
        if section == RUN_SECTION:
            values.update(items)
        else:
            values.setdefault(section, {}).update(items)
    return values


def apply_overrides(values: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` (or ``key=value`` for run keys) overrides."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"Override {item!r} should be KEY=VALUE")
        section, dot, name = key.partition(".")
        if not dot or section == RUN_SECTION:
            values[name or section] = parse_value(raw)
        else:
            values.setdefault(section, {})[name] = parse_value(raw)
    return values


def load_run_config(
    path: Path | None = None,
    overrides: Iterable[str] = (),
    **options: Any,
) -> RunConfig:
    """Config file, then ``--set`` overrides, then explicit command options."""
    values = read_ini(path) if path else {}
    apply_overrides(values, overrides)
    for key, value in options.items():
        if value is not None:
            values[key] = value
    config = RunConfig(**values)
    logger.debug(f"Effective config: {config.json()}")
    return config


def render_ini(config: RunConfig) -> str:
    """Sorted sections and keys; unset optional keys are left out."""
    sections = {RUN_SECTION: config.dict(exclude=set(SECTIONS))}
    sections.update({name: getattr(config, name).dict() for name in SECTIONS})
    lines: list[str] = []
    for name in sorted(sections):
        lines.append(f"[{name}]")
        lines += [
            f"{key} = {format_value(value)}"
            for key, value in sorted(sections[name].items())
            if value is not None
        ]
        lines.append("")
    return "\n".join(lines)


def write_config_ini(config: RunConfig, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.ini"
    path.write_text(render_ini(config))
    return path


def setup_logging(debug: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if debug else logging.INFO)
