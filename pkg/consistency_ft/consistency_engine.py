"""Agreement and proxy-satisfaction checks over one segment's recognizer outputs.

Condition A: the main and auxiliary predictions name corresponding classes.
Condition B: every proxy assertion required by the main prediction holds.
Condition C: every proxy assertion required by the auxiliary prediction holds.
"""
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

from consistency_ft.errors import ConfigurationError
from consistency_ft.logic import (AssertionTemplate, GroundAtom, GroundingSet, Implication, ImplicationResult,
                                  SatisfactionResult, TaskKind, check_implication)
from consistency_ft.proxy_miner import ProxyMap, proxy_map_from_rules
from consistency_ft.rules_dsl import RulesDb, parse_groundings
from consistency_ft.temporal_filter import DEFAULT_BUFFER_K, FrameObservation, TemporalBuffer, push_and_smooth

logger = logging.getLogger(__name__)

JUSTIFICATION_SCHEMA = "consistency-ft/justification"
JUSTIFICATION_VERSION = 1
FRAMES_SCHEMA = "consistency-ft/frames"
FRAMES_VERSION = 1

ClassRef = Tuple[TaskKind, int]
Frame = Tuple[FrameObservation, List[GroundAtom]]


@dataclass(frozen=True)
class ProxyPair:
    main: ProxyMap
    aux: ProxyMap

    @classmethod
    def from_rules(cls, rules: RulesDb) -> "ProxyPair":
        return cls(proxy_map_from_rules(rules, TaskKind.MAIN), proxy_map_from_rules(rules, TaskKind.AUX))


@dataclass(frozen=True)
class SegmentEvaluation:
    segment_id: str
    main_prediction: int
    aux_prediction: Optional[int]
    grounding: GroundingSet


@dataclass(frozen=True)
class ConsistencyVerdict:
    segment_id: str
    condition_a: bool
    condition_b: bool
    condition_c: bool
    offending_main: FrozenSet[str]
    offending_aux: FrozenSet[str]
    implicated: FrozenSet[ClassRef]
    main_result: Optional[ImplicationResult] = field(default=None, compare=False, repr=False)
    aux_result: Optional[ImplicationResult] = field(default=None, compare=False, repr=False)

    @property
    def consistent(self) -> bool:
        return self.condition_a and self.condition_b and self.condition_c

    def to_dict(self) -> dict:
        return {
            "segmentId": self.segment_id,
            "consistent": self.consistent,
            "conditionA": self.condition_a,
            "conditionB": self.condition_b,
            "conditionC": self.condition_c,
            "offendingMain": sorted(self.offending_main),
            "offendingAux": sorted(self.offending_aux),
            "implicated": [[k.value, c] for k, c in sorted(self.implicated)],
        }


def _check_class(rules: RulesDb, kind: TaskKind, class_id: int) -> None:
    valid = rules.task_spec.class_ids(kind)
    if class_id not in valid:
        raise ConfigurationError(
            f"Unknown {kind.value} class {class_id}; valid ids: {', '.join(map(str, sorted(valid)))}")


def _check_proxies(pm: ProxyMap, kind: TaskKind, class_id: int, g: GroundingSet,
                   rules: RulesDb) -> ImplicationResult:
    required = pm.assertions_for(class_id)
    if not required:
        # Nothing mined for the class: the condition holds over the empty set.
        logger.debug(f"{kind.value} class {class_id} has no proxy assertions")
        return ImplicationResult(True, frozenset())
    return check_implication(Implication(class_id, kind, required), g, rules)


def check_segment(ev: SegmentEvaluation, rules: RulesDb, proxies: ProxyPair) -> ConsistencyVerdict:
    if ev.aux_prediction is None:
        raise ConfigurationError(f"Segment {ev.segment_id} has no auxiliary prediction")
    i, j = ev.main_prediction, ev.aux_prediction
    _check_class(rules, TaskKind.MAIN, i)
    _check_class(rules, TaskKind.AUX, j)
    main_res = _check_proxies(proxies.main, TaskKind.MAIN, i, ev.grounding, rules)
    aux_res = _check_proxies(proxies.aux, TaskKind.AUX, j, ev.grounding, rules)
    cond_a = rules.task_spec.corresponds(i, j)
    implicated = set()
    if not (cond_a and main_res.holds):
        implicated.add((TaskKind.MAIN, i))
    if not (cond_a and aux_res.holds):
        implicated.add((TaskKind.AUX, j))
    return ConsistencyVerdict(ev.segment_id, cond_a, main_res.holds, aux_res.holds, main_res.offending,
                              aux_res.offending, frozenset(implicated), main_res, aux_res)


def check_segment_no_aux(ev: SegmentEvaluation, rules: RulesDb, proxies: ProxyPair) -> ConsistencyVerdict:
    """Main-only check: conditions A and C hold vacuously."""
    i = ev.main_prediction
    _check_class(rules, TaskKind.MAIN, i)
    main_res = _check_proxies(proxies.main, TaskKind.MAIN, i, ev.grounding, rules)
    implicated = frozenset() if main_res.holds else frozenset({(TaskKind.MAIN, i)})
    return ConsistencyVerdict(ev.segment_id, True, main_res.holds, True, main_res.offending, frozenset(),
                              implicated, main_res, None)


def check_batch(evaluations: Sequence[SegmentEvaluation], rules: RulesDb, proxies: ProxyPair,
                no_aux: bool = False, workers: int = 1) -> List[ConsistencyVerdict]:
    """Verdicts for a batch, ordered by segment id whatever the worker count."""
    check = check_segment_no_aux if no_aux else check_segment
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            verdicts = list(pool.map(lambda ev: check(ev, rules, proxies), evaluations))
    else:
        verdicts = [check(ev, rules, proxies) for ev in evaluations]
    return sorted(verdicts, key=lambda v: v.segment_id)


_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


def render_assertion(template: AssertionTemplate, result: SatisfactionResult) -> str:
    mapping = result.mapping
    if template.description:
        return _PLACEHOLDER.sub(lambda m: mapping.get(m.group(1), m.group(0)), template.description)
    if result.satisfied:
        return " & ".join(str(atom) for atom in template.instantiate(mapping))
    return str(template)


@dataclass(frozen=True)
class AssertionReport:
    assertion_id: str
    task: TaskKind
    satisfied: bool
    witness: Optional[Tuple[Tuple[str, str], ...]]
    text: str

    def to_dict(self) -> dict:
        witness = [list(pair) for pair in self.witness] if self.witness is not None else None
        return {"assertion": self.assertion_id, "task": self.task.value, "satisfied": self.satisfied,
                "witness": witness, "text": self.text}

    @classmethod
    def from_dict(cls, data: dict) -> "AssertionReport":
        witness = data.get("witness")
        return cls(data["assertion"], TaskKind(data["task"]), bool(data["satisfied"]),
                   tuple((v, o) for v, o in witness) if witness is not None else None, data["text"])


@dataclass(frozen=True)
class Justification:
    segment_id: str
    main_class: int
    main_description: str
    aux_class: Optional[int]
    aux_description: Optional[str]
    no_aux: bool
    condition_a: bool
    condition_b: bool
    condition_c: bool
    implicated: Tuple[Tuple[str, int], ...]
    assertions: Tuple[AssertionReport, ...]

    @property
    def reliable(self) -> bool:
        return self.condition_a and self.condition_b and self.condition_c

    def report_lines(self) -> List[str]:
        lines = [f"segment {self.segment_id}",
                 f"main prediction: class {self.main_class} ({self.main_description})"]
        if self.no_aux:
            lines.append("auxiliary recognizer not used; conditions A and C hold vacuously")
        else:
            lines.append(f"aux prediction: class {self.aux_class} ({self.aux_description})")
            if self.condition_a:
                lines.append("condition A: ok, predictions correspond")
            else:
                lines.append(f"condition A: FAILED, '{self.main_description}' does not correspond to "
                             f"'{self.aux_description}'")
        for name, ok, kind in (("B", self.condition_b, TaskKind.MAIN), ("C", self.condition_c, TaskKind.AUX)):
            if self.no_aux and kind == TaskKind.AUX:
                continue
            lines.append(f"condition {name}: {'ok' if ok else 'FAILED'}")
            for report in self.assertions:
                if report.task == kind:
                    mark = "holds" if report.satisfied else "offending"
                    lines.append(f"  [{mark}] {report.assertion_id}: {report.text}")
        if self.implicated:
            lines.append("implicated: " + ", ".join(f"{k} {c}" for k, c in self.implicated))
        lines.append(f"reliable: {'yes' if self.reliable else 'no'} "
                     f"({'consistent' if self.reliable else 'inconsistent'})")
        return lines

    def to_text(self) -> str:
        return "\n".join(self.report_lines()) + "\n"

    def to_dict(self) -> dict:
        return {
            "schema": JUSTIFICATION_SCHEMA,
            "version": JUSTIFICATION_VERSION,
            "segmentId": self.segment_id,
            "mainClass": self.main_class,
            "mainDescription": self.main_description,
            "auxClass": self.aux_class,
            "auxDescription": self.aux_description,
            "noAux": self.no_aux,
            "conditionA": self.condition_a,
            "conditionB": self.condition_b,
            "conditionC": self.condition_c,
            "implicated": [list(item) for item in self.implicated],
            "assertions": [a.to_dict() for a in self.assertions],
            "reliable": self.reliable,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Justification":
        if data.get("schema") != JUSTIFICATION_SCHEMA or data.get("version") != JUSTIFICATION_VERSION:
            raise ConfigurationError(f"Unsupported justification document {data.get('schema')!r} "
                                     f"v{data.get('version')!r}")
        return cls(data["segmentId"], data["mainClass"], data["mainDescription"], data["auxClass"],
                   data["auxDescription"], data["noAux"], data["conditionA"], data["conditionB"],
                   data["conditionC"], tuple((k, c) for k, c in data["implicated"]),
                   tuple(AssertionReport.from_dict(a) for a in data["assertions"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Justification":
        return cls.from_dict(json.loads(text))


def _assertion_reports(result: Optional[ImplicationResult], kind: TaskKind, rules: RulesDb) -> List[AssertionReport]:
    if result is None:
        return []
    reports = []
    for assertion_id, sat in result.results:
        text = render_assertion(rules.assertions[assertion_id], sat)
        reports.append(AssertionReport(assertion_id, kind, sat.satisfied, sat.witness, text))
    return reports


def justify(ev: SegmentEvaluation, rules: RulesDb, proxies: ProxyPair, no_aux: bool = False) -> Justification:
    verdict = check_segment_no_aux(ev, rules, proxies) if no_aux else check_segment(ev, rules, proxies)
    spec = rules.task_spec
    reports = _assertion_reports(verdict.main_result, TaskKind.MAIN, rules)
    reports += _assertion_reports(verdict.aux_result, TaskKind.AUX, rules)
    justification = Justification(
        ev.segment_id, ev.main_prediction, spec.description(TaskKind.MAIN, ev.main_prediction),
        None if no_aux else ev.aux_prediction,
        None if no_aux else spec.description(TaskKind.AUX, ev.aux_prediction),
        no_aux, verdict.condition_a, verdict.condition_b, verdict.condition_c,
        tuple((k.value, c) for k, c in sorted(verdict.implicated)), tuple(reports))
    logger.debug(f"justified {ev.segment_id}: reliable={justification.reliable}")
    return justification


class SegmentGrounder:
    """Reduces a segment's frame stream to one grounding.

    Each frame's detections pass through the temporal filter; categories that
    name a declared unary predicate become atoms, and relation atoms survive
    only when their objects are present after correction. The segment
    grounding is the union over frames, positive atoms taking precedence over
    negated ones seen in other frames.
    """

    def __init__(self, rules: RulesDb, buffer_k: int = DEFAULT_BUFFER_K):
        self.rules = rules
        self.buffer_k = buffer_k
        self.logger = logging.getLogger(__name__)

    def reduce(self, frames: Iterable[Tuple[FrameObservation, Iterable[GroundAtom]]]) -> GroundingSet:
        buf = TemporalBuffer(self.buffer_k)
        positive, negative, universe = set(), set(), set()
        tracked = set()
        for obs, relations in frames:
            buf, corrected = push_and_smooth(buf, obs)
            tracked.update(obs.tracks)
            present = set(corrected.tracks)
            universe.update(present)
            for obj, category in corrected.tracks.items():
                decl = self.rules.predicates.get(category)
                if decl is not None and decl.arity == 1:
                    positive.add(GroundAtom(category, (obj,)))
            for atom in relations:
                if any(a in tracked and a not in present for a in atom.args):
                    continue
                universe.update(atom.args)
                (positive if atom.polarity else negative).add(atom)
        negative = {a for a in negative if a.positive() not in positive}
        self.logger.debug(f"reduced stream to {len(positive)} atoms over {len(universe)} objects")
        return GroundingSet(frozenset(positive), frozenset(universe), frozenset(negative))


def reduce_frames(frames: Iterable[Tuple[FrameObservation, Iterable[GroundAtom]]], rules: RulesDb,
                  buffer_k: int = DEFAULT_BUFFER_K) -> GroundingSet:
    return SegmentGrounder(rules, buffer_k).reduce(frames)


def frames_to_dict(segment_id: str, frames: Iterable[Tuple[FrameObservation, Iterable[GroundAtom]]]) -> dict:
    records = []
    for obs, relations in frames:
        record = {"frame": obs.frame_index, "tracks": dict(sorted(obs.tracks.items())),
                  "relations": [str(a) for a in relations]}
        if obs.presence is not None:
            record["presence"] = dict(sorted(obs.presence.items()))
        records.append(record)
    return {"schema": FRAMES_SCHEMA, "version": FRAMES_VERSION, "segmentId": segment_id, "frames": records}


def frames_from_dict(data: dict, rules: RulesDb) -> Tuple[str, List[Frame]]:
    """Frame stream of one segment; relation strings use the groundings-file atom syntax."""
    if not isinstance(data, dict) or data.get("schema") != FRAMES_SCHEMA:
        raise ConfigurationError("Not a frame-stream document")
    frames = []
    try:
        for record in data["frames"]:
            g = parse_groundings("".join(f"{r}\n" for r in record.get("relations", [])), rules)
            presence = record.get("presence")
            obs = FrameObservation(int(record["frame"]), {str(o): str(c) for o, c in record["tracks"].items()},
                                   None if presence is None else {str(o): bool(p) for o, p in presence.items()})
            frames.append((obs, sorted(g.atoms) + sorted(g.negated)))
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ConfigurationError(f"Malformed frame record: {e}") from None
    return str(data.get("segmentId", "")), frames


def save_frames(path: Union[str, Path], segment_id: str,
                frames: Iterable[Tuple[FrameObservation, Iterable[GroundAtom]]]) -> None:
    Path(path).write_text(json.dumps(frames_to_dict(segment_id, frames), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_frames(path: Union[str, Path], rules: RulesDb) -> Tuple[str, List[Frame]]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read frame stream {path}: {e}") from None
    segment_id, frames = frames_from_dict(data, rules)
    return segment_id or Path(path).name.split(".")[0], frames
