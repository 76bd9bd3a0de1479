"""config.ini / .env loading."""
import configparser
import json
import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Tuple

from dotenv import load_dotenv

from consistency_ft.errors import ConfigurationError
from consistency_ft.ft_orchestrator import FtConfig, FtMode
from consistency_ft.logic import TaskKind
from consistency_ft.proxy_miner import as_fraction
from consistency_ft.scenario import ScenarioConfig
from consistency_ft.temporal_filter import DEFAULT_BUFFER_K

logger = logging.getLogger(__name__)

CONFIG_FILE = 'config.ini'
ENV_CONFIG = 'CONSISTENCY_FT_CONFIG'
ENV_LOG_LEVEL = 'CONSISTENCY_FT_LOG_LEVEL'


@dataclass(frozen=True)
class Settings:
    log_file: Optional[str] = None
    log_level: str = "INFO"
    threshold: Fraction = Fraction(9, 10)
    mining_task: TaskKind = TaskKind.MAIN
    ft: FtConfig = field(default_factory=FtConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    buffer_k: int = DEFAULT_BUFFER_K


def _optional(section: configparser.SectionProxy, key: str, default, convert):
    raw = section.get(key, fallback=None)
    if raw is None:
        return default
    raw = raw.strip()
    if raw == "":
        return None
    try:
        return convert(raw)
    except ValueError:
        raise ConfigurationError(f"[{section.name}] {key} = {raw!r} is not valid") from None


def settings_from_parser(config: configparser.ConfigParser) -> Settings:
    defaults = Settings()
    for name in ('Logging', 'Mining', 'FineTuning', 'Scenario', 'TemporalFilter'):
        if not config.has_section(name):
            config.add_section(name)
    try:
        log = config['Logging']
        mining = config['Mining']
        ft_section = config['FineTuning']
        sc = config['Scenario']
        base_ft, base_sc = defaults.ft, defaults.scenario
        ft = FtConfig(
            mode=FtMode.parse(ft_section.get('mode', fallback=base_ft.mode.value)),
            batch_size=ft_section.getint('batch_size', fallback=base_ft.batch_size),
            max_iterations=ft_section.getint('max_iterations', fallback=base_ft.max_iterations),
            time_budget=_optional(ft_section, 'time_budget', base_ft.time_budget, float),
            improvement_epsilon=_optional(ft_section, 'improvement_epsilon', base_ft.improvement_epsilon, float),
            seed=ft_section.getint('seed', fallback=base_ft.seed),
            no_aux=ft_section.getboolean('no_aux', fallback=base_ft.no_aux),
        )
        scenario = ScenarioConfig(
            noise=sc.getfloat('noise', fallback=base_sc.noise),
            initial_accuracy=sc.getfloat('initial_accuracy', fallback=base_sc.initial_accuracy),
            learning_rate=sc.getfloat('learning_rate', fallback=base_sc.learning_rate),
            forgetting=sc.getfloat('forgetting', fallback=base_sc.forgetting),
            examples_per_step=_optional(sc, 'examples_per_step', base_sc.examples_per_step, float),
            accuracy_spread=sc.getboolean('accuracy_spread', fallback=base_sc.accuracy_spread),
            ftd_per_class=sc.getint('ftd_per_class', fallback=base_sc.ftd_per_class),
            ftd_background=sc.getint('ftd_background', fallback=base_sc.ftd_background),
            ed_per_class=sc.getint('ed_per_class', fallback=base_sc.ed_per_class),
            test_per_class=sc.getint('test_per_class', fallback=base_sc.test_per_class),
            eval_batch_size=sc.getint('eval_batch_size', fallback=base_sc.eval_batch_size),
            clutter_objects=sc.getint('clutter_objects', fallback=base_sc.clutter_objects),
        )
        threshold = as_fraction(mining.get('threshold', fallback=str(defaults.threshold)))
        if not 0 < threshold <= 1:
            raise ConfigurationError(f"[Mining] threshold must lie in (0, 1], got {threshold}")
        return Settings(
            log_file=log.get('log_file', fallback='').strip() or None,
            log_level=os.environ.get(ENV_LOG_LEVEL) or log.get('level', fallback=defaults.log_level),
            threshold=threshold,
            mining_task=TaskKind(mining.get('task', fallback=defaults.mining_task.value)),
            ft=ft,
            scenario=scenario,
            buffer_k=config['TemporalFilter'].getint('buffer_k', fallback=defaults.buffer_k),
        )
    except ValueError as e:
        raise ConfigurationError(f"Invalid configuration value: {e}") from None


def load_config(path: Optional[str] = None) -> Settings:
    """Read settings; a missing default config.ini means built-in defaults, a missing named file is an error."""
    load_dotenv()
    explicit = path is not None or bool(os.environ.get(ENV_CONFIG))
    path = path or os.environ.get(ENV_CONFIG) or CONFIG_FILE
    config = configparser.ConfigParser()
    try:
        found = config.read(path, encoding='utf-8')
    except configparser.Error as e:
        raise ConfigurationError(f"Config file '{path}' is invalid: {e}") from None
    if not found:
        if explicit:
            raise ConfigurationError(f"Config file '{path}' not found")
        logger.debug(f"No {path}; using built-in defaults")
    return settings_from_parser(config)


def load_run_config(path: str, settings: Settings) -> Tuple[FtConfig, ScenarioConfig]:
    """FtConfig (and optionally scenario parameters) from a .json or .ini file given on the command line."""
    if Path(path).suffix.lower() != '.json':
        loaded = load_config(path)
        return loaded.ft, loaded.scenario
    try:
        data = json.loads(Path(path).read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read run config {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"Run config {path} must hold a JSON object")
    if 'ft' in data or 'scenario' in data:
        ft = FtConfig.from_dict({**settings.ft.to_dict(), **data.get('ft', {})})
        scenario = ScenarioConfig.from_dict({**settings.scenario.to_dict(), **data.get('scenario', {})})
        return ft, scenario
    return FtConfig.from_dict({**settings.ft.to_dict(), **data}), settings.scenario
