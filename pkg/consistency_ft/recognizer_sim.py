"""Seeded stand-ins for the main and auxiliary recognizers and the grounding channel.

A recognizer is a per-class accuracy table: it returns the true class with
that probability and otherwise a wrong class drawn from its confusion row.
Fine-tuning moves targeted accuracies toward 1 along an exponential curve
while every other class forgets a little.
"""
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Set, Tuple

import numpy as np

from consistency_ft.consistency_engine import ProxyPair
from consistency_ft.errors import ConfigurationError, GenerationError
from consistency_ft.logic import GroundAtom, GroundingSet, TaskKind
from consistency_ft.rules_dsl import RulesDb
from consistency_ft.temporal_filter import FrameObservation

logger = logging.getLogger(__name__)


def label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def make_stream(*parts) -> np.random.Generator:
    """Independent generator keyed by ints and strings, so each phase of a run owns its draws."""
    entropy = [p if isinstance(p, int) else label_key(str(p)) for p in parts]
    return np.random.default_rng([e & 0xFFFFFFFFFFFFFFFF for e in entropy])


@dataclass(frozen=True)
class NoiseOp:
    kind: str  # "drop" or "insert"
    atom: str


@dataclass(frozen=True)
class SimulatedSegment:
    segment_id: str
    true_main: int
    true_aux: int
    grounding: GroundingSet
    noise_ops: Tuple[NoiseOp, ...] = ()

    def label(self, kind: TaskKind) -> int:
        return self.true_main if kind == TaskKind.MAIN else self.true_aux


@dataclass(frozen=True)
class EvalBatch:
    batch_id: str
    segments: Tuple[SimulatedSegment, ...]


@dataclass(frozen=True)
class SimulatedDataset:
    ftd: Tuple[SimulatedSegment, ...]
    ed: Tuple[EvalBatch, ...]
    test: Tuple[SimulatedSegment, ...]

    @property
    def ed_segments(self) -> List[SimulatedSegment]:
        return [s for b in self.ed for s in b.segments]


@dataclass(frozen=True)
class RecognizerProfile:
    task_kind: TaskKind
    per_class_accuracy: Mapping[int, float]
    confusion_bias: Mapping[int, Mapping[int, float]] = field(default_factory=dict)
    learning_rate: float = 0.25
    forgetting: float = 0.01
    seed: int = 0
    examples_per_step: Optional[float] = None

    def __post_init__(self):
        if not self.per_class_accuracy:
            raise ConfigurationError("Recognizer profile has no classes")
        for class_id, acc in self.per_class_accuracy.items():
            if not 0.0 <= acc <= 1.0:
                raise ConfigurationError(f"Accuracy for class {class_id} outside [0, 1]: {acc}")
        if not 0.0 < self.learning_rate < 1.0:
            raise ConfigurationError(f"Learning rate must lie in (0, 1), got {self.learning_rate}")
        if not 0.0 <= self.forgetting < 1.0:
            raise ConfigurationError(f"Forgetting factor must lie in [0, 1), got {self.forgetting}")
        if self.examples_per_step is not None and self.examples_per_step <= 0:
            raise ConfigurationError("examples_per_step must be positive")
        for class_id, row in self.confusion_bias.items():
            for wrong, weight in row.items():
                if weight < 0:
                    raise ConfigurationError(f"Negative confusion weight {class_id}->{wrong}")
                if wrong == class_id or wrong not in self.per_class_accuracy:
                    raise ConfigurationError(f"Confusion row of class {class_id} names invalid class {wrong}")

    @property
    def classes(self) -> List[int]:
        return sorted(self.per_class_accuracy)

    def accuracy(self, class_id: int) -> float:
        try:
            return self.per_class_accuracy[class_id]
        except KeyError:
            raise ConfigurationError(
                f"Class {class_id} unknown to the {self.task_kind.value} recognizer") from None

    def mean_accuracy(self) -> float:
        return float(np.mean([self.per_class_accuracy[c] for c in self.classes]))

    def to_dict(self) -> dict:
        return {
            "task": self.task_kind.value,
            "perClassAccuracy": {str(c): self.per_class_accuracy[c] for c in self.classes},
            "confusionBias": {str(c): {str(w): v for w, v in sorted(row.items())}
                              for c, row in sorted(self.confusion_bias.items())},
            "learningRate": self.learning_rate,
            "forgetting": self.forgetting,
            "seed": self.seed,
            "examplesPerStep": self.examples_per_step,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RecognizerProfile":
        try:
            return cls(TaskKind(data["task"]),
                       {int(c): float(a) for c, a in data["perClassAccuracy"].items()},
                       {int(c): {int(w): float(v) for w, v in row.items()}
                        for c, row in data.get("confusionBias", {}).items()},
                       float(data.get("learningRate", 0.25)), float(data.get("forgetting", 0.01)),
                       int(data.get("seed", 0)), data.get("examplesPerStep"))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"Malformed recognizer profile: {e}") from None


def infer(profile: RecognizerProfile, seg: SimulatedSegment, stream: np.random.Generator) -> int:
    """One prediction. Always consumes two uniforms so paired runs stay aligned on the stream."""
    true_class = seg.label(profile.task_kind)
    accuracy = profile.accuracy(true_class)
    hit, pick = stream.random(2)
    if hit < accuracy:
        return true_class
    wrong = [c for c in profile.classes if c != true_class]
    if not wrong:
        return true_class
    row = profile.confusion_bias.get(true_class, {})
    weights = np.array([row.get(c, 0.0) for c in wrong], dtype=float)
    if weights.sum() <= 0:
        weights = np.ones(len(wrong))
    cumulative = np.cumsum(weights) / weights.sum()
    index = int(np.searchsorted(cumulative, pick, side="right"))
    return wrong[min(index, len(wrong) - 1)]


def fine_tune(profile: RecognizerProfile, batch: Sequence[SimulatedSegment],
              target_classes: Iterable[int]) -> RecognizerProfile:
    if not batch:
        raise ConfigurationError("Cannot fine-tune on an empty batch")
    targets = set(target_classes)
    counts: Dict[int, int] = {}
    for seg in batch:
        label = seg.label(profile.task_kind)
        counts[label] = counts.get(label, 0) + 1
    eta, phi = profile.learning_rate, profile.forgetting
    updated = {}
    for class_id, acc in profile.per_class_accuracy.items():
        n = counts.get(class_id, 0)
        if class_id in targets:
            if n == 0:
                updated[class_id] = acc
            elif profile.examples_per_step:
                updated[class_id] = 1.0 - (1.0 - acc) * (1.0 - eta) ** (n / profile.examples_per_step)
            else:
                updated[class_id] = acc + eta * (1.0 - acc)
            updated[class_id] = min(1.0, updated[class_id])
        else:
            updated[class_id] = acc * (1.0 - phi)
    return replace(profile, per_class_accuracy=updated)


class Recognizer(Protocol):
    """What the fine-tuning loop needs from a recognizer backend."""
    task_kind: TaskKind
    # keys the recognizer's own prediction draws
    seed: int

    def infer(self, seg: SimulatedSegment, stream: np.random.Generator) -> int:
        ...

    def fine_tune(self, batch: Sequence[SimulatedSegment], target_classes: Iterable[int]) -> "Recognizer":
        ...

    def accuracies(self) -> Dict[int, float]:
        ...


class SimulatedRecognizer:
    def __init__(self, profile: RecognizerProfile):
        self.profile = profile
        self.task_kind = profile.task_kind
        self.seed = profile.seed

    def infer(self, seg: SimulatedSegment, stream: np.random.Generator) -> int:
        return infer(self.profile, seg, stream)

    def fine_tune(self, batch: Sequence[SimulatedSegment], target_classes: Iterable[int]) -> "SimulatedRecognizer":
        return SimulatedRecognizer(fine_tune(self.profile, batch, target_classes))

    def accuracies(self) -> Dict[int, float]:
        return dict(self.profile.per_class_accuracy)

    def __repr__(self):
        return f"SimulatedRecognizer({self.task_kind.value}, mean={self.profile.mean_accuracy():.3f})"


def _instantiate_segment(segment_id: str, main_class: int, aux_class: int, required: Sequence[str],
                         rules: RulesDb, noise: float, clutter_objects: int,
                         clutter_predicates: Sequence[str], seed: int) -> SimulatedSegment:
    rng = make_stream(seed, "segment", segment_id)
    positive, negative = set(), set()
    counter = 0

    def fresh() -> str:
        nonlocal counter
        counter += 1
        return f"obj{counter}"

    for assertion_id in sorted(required):
        template = rules.assertions[assertion_id]
        assignment = {v: fresh() for v in template.vars}
        for atom in template.instantiate(assignment):
            (positive if atom.polarity else negative).add(atom)
    universe = {a for atom in positive | negative for a in atom.args}

    clutter = [fresh() for _ in range(clutter_objects)]
    universe.update(clutter)
    for name in clutter_predicates:
        decl = rules.predicates.get(name)
        if decl is None or decl.arity != 2:
            continue
        for left, right in zip(clutter, clutter[1:]):
            positive.add(GroundAtom(name, (left, right)))

    ops: List[NoiseOp] = []
    if noise > 0:
        for atom in sorted(positive):
            if rng.random() < noise:
                positive.discard(atom)
                ops.append(NoiseOp("drop", str(atom)))
        objects = sorted(universe)
        decls = [d for _, d in sorted(rules.predicates.items()) if d.arity <= len(objects)]
        for _ in range(int(rng.binomial(len(positive) + len(ops), noise))):
            decl = decls[int(rng.integers(len(decls)))]
            args = tuple(objects[i] for i in rng.choice(len(objects), size=decl.arity, replace=False))
            atom = GroundAtom(decl.name, args)
            if atom in positive or GroundAtom(decl.name, args, False) in negative:
                continue
            positive.add(atom)
            ops.append(NoiseOp("insert", str(atom)))
    grounding = GroundingSet(frozenset(positive), frozenset(universe), frozenset(negative))
    return SimulatedSegment(segment_id, main_class, aux_class, grounding, tuple(ops))


def generate_dataset(rules: RulesDb, counts: Mapping[int, int], noise: float, seed: int, *,
                     ed_counts: Optional[Mapping[int, int]] = None,
                     test_counts: Optional[Mapping[int, int]] = None,
                     eval_batch_size: int = 20,
                     proxies: Optional[ProxyPair] = None,
                     clutter_objects: int = 0,
                     clutter_predicates: Sequence[str] = ("move_same_dirn",)) -> SimulatedDataset:
    """Build disjoint FTD, ED and TEST splits whose groundings satisfy the true classes' proxy sets.

    ``counts`` sizes the FTD per main class; ED and TEST default to the same
    counts. ED is cut into batches of ``eval_batch_size`` after interleaving
    classes round-robin, so every class lands in at least one batch.
    """
    if not 0.0 <= noise < 1.0:
        raise GenerationError(f"Noise level must lie in [0, 1), got {noise}")
    if eval_batch_size < 1:
        raise GenerationError("Eval batch size must be positive")
    if proxies is None:
        proxies = ProxyPair.from_rules(rules)
    main_ids = rules.task_spec.class_ids(TaskKind.MAIN)
    ed_counts = dict(counts) if ed_counts is None else dict(ed_counts)
    test_counts = dict(counts) if test_counts is None else dict(test_counts)

    required: Dict[int, Set[str]] = {}
    for class_id in main_ids:
        if not rules.task_spec.corresponds(class_id, class_id):
            raise GenerationError(f"Main class {class_id} has no auxiliary counterpart")
        needed = set(proxies.main.per_class.get(class_id, ())) | set(proxies.aux.per_class.get(class_id, ()))
        if not needed:
            raise GenerationError(f"Class {class_id} has no proxy assertions to instantiate")
        required[class_id] = needed

    for name, split in (("FTD", counts), ("ED", ed_counts), ("TEST", test_counts)):
        unknown = sorted(set(split) - set(main_ids))
        if unknown:
            raise GenerationError(f"{name} counts name unknown class(es) {unknown}")
        empty = [c for c in main_ids if split.get(c, 0) < 1]
        if empty:
            raise GenerationError(f"{name} requests no segments for class(es) {empty}")

    def build(prefix: str, class_id: int, n: int) -> List[SimulatedSegment]:
        return [_instantiate_segment(f"{prefix}-{class_id}-{k:04d}", class_id, class_id, sorted(required[class_id]),
                                     rules, noise, clutter_objects, clutter_predicates, seed)
                for k in range(n)]

    ftd = [s for c in main_ids for s in build("ftd", c, counts[c])]
    test = [s for c in main_ids for s in build("test", c, test_counts[c])]
    per_class = {c: build("ed", c, ed_counts[c]) for c in main_ids}
    interleaved = []
    for k in range(max(len(v) for v in per_class.values())):
        interleaved += [per_class[c][k] for c in main_ids if k < len(per_class[c])]
    ed = [EvalBatch(f"eval-{i // eval_batch_size:03d}", tuple(interleaved[i:i + eval_batch_size]))
          for i in range(0, len(interleaved), eval_batch_size)]
    logger.info(f"Generated {len(ftd)} FTD, {len(interleaved)} ED ({len(ed)} batches), {len(test)} TEST segments")
    return SimulatedDataset(tuple(ftd), tuple(ed), tuple(test))


def synthesize_frames(seg: SimulatedSegment, n_frames: int, stream: np.random.Generator, *,
                      categories: Sequence[str] = ("motorcycle", "pedestrian"),
                      default_category: str = "car",
                      flip_rate: float = 0.0,
                      dropout_rate: float = 0.0,
                      min_gap: int = 5) -> List[Tuple[FrameObservation, List[GroundAtom]]]:
    """Per-frame detections for a segment, with isolated category flips and dropouts.

    A disturbance never hits the first ``min_gap`` frames and never recurs for
    the same object within ``min_gap`` frames, so a majority window of that
    length restores the segment grounding exactly.
    """
    category_of = {}
    relations = []
    for atom in sorted(seg.grounding.atoms):
        if atom.predicate in categories and len(atom.args) == 1:
            category_of[atom.args[0]] = atom.predicate
        else:
            relations.append(atom)
    relations += sorted(seg.grounding.negated)
    objects = sorted(seg.grounding.universe)
    labels = sorted(set(categories) | {default_category})
    last_disturbed = {o: -min_gap for o in objects}
    frames = []
    for t in range(n_frames):
        tracks = {}
        for obj in objects:
            category = category_of.get(obj, default_category)
            roll = stream.random()
            can_disturb = t >= min_gap and t - last_disturbed[obj] >= min_gap
            if can_disturb and roll < dropout_rate:
                last_disturbed[obj] = t
                continue
            if can_disturb and roll < dropout_rate + flip_rate:
                others = [c for c in labels if c != category]
                category = others[int(stream.integers(len(others)))]
                last_disturbed[obj] = t
            tracks[obj] = category
        frames.append((FrameObservation(t, tracks), list(relations)))
    return frames


def perfect_profile(kind: TaskKind, classes: Iterable[int], seed: int = 0) -> RecognizerProfile:
    return RecognizerProfile(kind, {c: 1.0 for c in classes}, seed=seed)


def empirical_accuracy(profile: RecognizerProfile, segments: Sequence[SimulatedSegment],
                       stream: np.random.Generator) -> float:
    hits = sum(1 for s in segments if infer(profile, s, stream) == s.label(profile.task_kind))
    return hits / len(segments) if segments else math.nan
