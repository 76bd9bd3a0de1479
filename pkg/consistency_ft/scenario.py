"""Default simulation scenario: eight traffic classes, one shared starting accuracy, busy background traffic."""
import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, Mapping, Optional, Tuple

from consistency_ft.consistency_engine import ProxyPair
from consistency_ft.logic import TaskKind
from consistency_ft.recognizer_sim import (RecognizerProfile, SimulatedDataset, SimulatedRecognizer,
                                           generate_dataset)
from consistency_ft.rules_dsl import RulesDb, fixture_path, load_rules

logger = logging.getLogger(__name__)

SCENARIO_RULES = "scenario.rules"

# Optional spread: collision classes weak, everyday traffic strong; shifted to the configured mean.
BASE_ACCURACY = {1: 0.35, 2: 0.30, 3: 0.30, 4: 0.35, 5: 0.80, 6: 0.95, 7: 0.85, 8: 0.90}
CONFUSABLE_PAIRS = ((1, 4), (2, 3))
PAIR_ERROR_SHARE = 0.8
BACKGROUND_CLASS = 6


@dataclass(frozen=True)
class ScenarioConfig:
    noise: float = 0.05
    initial_accuracy: float = 0.6
    learning_rate: float = 0.25
    forgetting: float = 0.01
    examples_per_step: Optional[float] = None
    accuracy_spread: bool = False
    # FTD is mostly uneventful traffic, so random batches rarely reach the rare classes.
    ftd_per_class: int = 20
    ftd_background: int = 1200
    ed_per_class: int = 20
    test_per_class: int = 60
    eval_batch_size: int = 20
    clutter_objects: int = 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class Scenario:
    rules: RulesDb
    proxies: ProxyPair
    dataset: SimulatedDataset
    main: SimulatedRecognizer
    aux: SimulatedRecognizer
    rules_text: str


def initial_accuracies(classes: Iterable[int], mean: float, spread: bool = False) -> Dict[int, float]:
    """Starting accuracy per class: ``mean`` everywhere, or the shifted spread for classes it names."""
    classes = list(classes)
    if not spread:
        return {c: mean for c in classes}
    shift = mean - sum(BASE_ACCURACY.values()) / len(BASE_ACCURACY)
    return {c: min(1.0, max(0.0, BASE_ACCURACY[c] + shift)) if c in BASE_ACCURACY else mean for c in classes}


def confusion_rows(classes: Iterable[int]) -> Dict[int, Dict[int, float]]:
    classes = list(classes)
    rows = {}
    for a, b in CONFUSABLE_PAIRS:
        if a not in classes or b not in classes:
            continue
        for src, dst in ((a, b), (b, a)):
            others = [c for c in classes if c not in (src, dst)]
            if not others:
                rows[src] = {dst: 1.0}
                continue
            row = {c: (1.0 - PAIR_ERROR_SHARE) / len(others) for c in others}
            row[dst] = PAIR_ERROR_SHARE
            rows[src] = row
    return rows


def scenario_rules() -> Tuple[RulesDb, str]:
    path = fixture_path(SCENARIO_RULES)
    return load_rules(path), path.read_text(encoding="utf-8")


def build_profiles(rules: RulesDb, cfg: ScenarioConfig, seed: int) -> Tuple[RecognizerProfile, RecognizerProfile]:
    profiles = []
    for offset, kind in enumerate((TaskKind.MAIN, TaskKind.AUX)):
        classes = rules.task_spec.class_ids(kind)
        profiles.append(RecognizerProfile(
            kind, initial_accuracies(classes, cfg.initial_accuracy, cfg.accuracy_spread), confusion_rows(classes),
            cfg.learning_rate, cfg.forgetting, seed * 2 + offset, cfg.examples_per_step))
    return profiles[0], profiles[1]


def build_scenario(seed: int, cfg: Optional[ScenarioConfig] = None, rules: Optional[RulesDb] = None,
                   rules_text: Optional[str] = None) -> Scenario:
    cfg = cfg or ScenarioConfig()
    if rules is None:
        rules, rules_text = scenario_rules()
    proxies = ProxyPair.from_rules(rules)
    classes = rules.task_spec.class_ids(TaskKind.MAIN)
    ftd_counts = {c: cfg.ftd_background if c == BACKGROUND_CLASS else cfg.ftd_per_class for c in classes}
    dataset = generate_dataset(
        rules, ftd_counts, cfg.noise, seed,
        ed_counts={c: cfg.ed_per_class for c in classes},
        test_counts={c: cfg.test_per_class for c in classes},
        eval_batch_size=cfg.eval_batch_size, proxies=proxies, clutter_objects=cfg.clutter_objects)
    main, aux = build_profiles(rules, cfg, seed)
    logger.debug(f"scenario seed {seed}: mean initial accuracy {main.mean_accuracy():.3f}")
    return Scenario(rules, proxies, dataset, SimulatedRecognizer(main), SimulatedRecognizer(aux), rules_text or "")
