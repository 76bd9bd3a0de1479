"""Frequency-threshold mining of per-class proxy assertion sets."""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

from consistency_ft.errors import ConfigurationError, MissingClassError
from consistency_ft.logic import AssertionTemplate, GroundingSet, Implication, TaskKind, satisfy
from consistency_ft.rules_dsl import RulesDb, load_groundings

logger = logging.getLogger(__name__)

PROXY_MAP_SCHEMA = "consistency-ft/proxy-map"
MANIFEST_SCHEMA = "consistency-ft/manifest"
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class LabeledSegmentRecord:
    segment_id: str
    class_label: int
    grounding: GroundingSet


@dataclass(frozen=True)
class ManifestEntry:
    segment_id: str
    main_label: int
    aux_label: int
    groundings_file: str
    eval_batch: Optional[int] = None
    frames_file: Optional[str] = None

    def to_dict(self) -> dict:
        data = {"segmentId": self.segment_id, "mainLabel": self.main_label, "auxLabel": self.aux_label,
                "groundingsFile": self.groundings_file}
        if self.eval_batch is not None:
            data["evalBatch"] = self.eval_batch
        if self.frames_file is not None:
            data["framesFile"] = self.frames_file
        return data


def as_fraction(value: Union[str, float, int, Fraction]) -> Fraction:
    """Exact reading of a threshold; floats go through their shortest repr so 0.9 is 9/10."""
    if isinstance(value, Fraction):
        return value
    try:
        return Fraction(str(value).strip())
    except (ValueError, ZeroDivisionError):
        raise ConfigurationError(f"Not a number: {value!r}") from None


@dataclass(frozen=True)
class ProxyMap:
    per_class: Dict[int, FrozenSet[str]]
    threshold: Fraction = Fraction(1)
    task_kind: TaskKind = TaskKind.MAIN
    frequencies: Dict[int, Dict[str, Fraction]] = field(default_factory=dict, compare=False)

    def assertions_for(self, class_id: int) -> FrozenSet[str]:
        """The mapped set for a class, possibly empty; a class the map never saw is an error."""
        if class_id not in self.per_class:
            raise ConfigurationError(
                f"No proxy entry for {self.task_kind.value} class {class_id}; "
                f"known classes: {', '.join(str(c) for c in sorted(self.per_class))}")
        return self.per_class[class_id]

    def to_dict(self) -> dict:
        return {
            "schema": PROXY_MAP_SCHEMA,
            "version": SCHEMA_VERSION,
            "task": self.task_kind.value,
            "threshold": str(self.threshold),
            "perClass": {str(c): sorted(ids) for c, ids in sorted(self.per_class.items())},
            "frequencies": {str(c): {a: str(f) for a, f in sorted(freqs.items())}
                            for c, freqs in sorted(self.frequencies.items())},
        }

    @classmethod
    def from_dict(cls, data: dict, rules: Optional[RulesDb] = None) -> "ProxyMap":
        if data.get("schema") != PROXY_MAP_SCHEMA:
            raise ConfigurationError(f"Not a proxy map document (schema {data.get('schema')!r})")
        try:
            per_class = {int(c): frozenset(ids) for c, ids in data["perClass"].items()}
            frequencies = {int(c): {a: Fraction(f) for a, f in freqs.items()}
                           for c, freqs in data.get("frequencies", {}).items()}
            pm = cls(per_class, Fraction(data["threshold"]), TaskKind(data.get("task", "main")), frequencies)
        except (KeyError, ValueError, TypeError) as e:
            raise ConfigurationError(f"Malformed proxy map: {e}") from None
        if rules is not None:
            unknown = sorted({a for ids in per_class.values() for a in ids} - set(rules.assertions))
            if unknown:
                raise ConfigurationError(f"Proxy map references unknown assertion(s): {', '.join(unknown)}")
        return pm

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path], rules: Optional[RulesDb] = None) -> "ProxyMap":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read proxy map {path}: {e}") from None
        return cls.from_dict(data, rules)


def _mine_class(class_id: int, records: Sequence[LabeledSegmentRecord], candidates: Sequence[AssertionTemplate],
                threshold: Fraction, rules: RulesDb) -> Tuple[int, FrozenSet[str], Dict[str, Fraction]]:
    freqs = {}
    for template in candidates:
        hits = sum(1 for r in records if satisfy(template, r.grounding, rules.predicates).satisfied)
        freqs[template.id] = Fraction(hits, len(records))
    mined = frozenset(a for a, f in freqs.items() if f >= threshold)
    logger.debug(f"class {class_id}: {len(records)} records, mined {sorted(mined)}")
    return class_id, mined, freqs


def mine_proxies(dataset: Sequence[LabeledSegmentRecord], candidates: Sequence[AssertionTemplate],
                 threshold: Union[str, float, Fraction], rules: RulesDb,
                 task_kind: TaskKind = TaskKind.MAIN, workers: int = 1) -> ProxyMap:
    """Keep, per class, the candidates holding in at least ``threshold`` of that class's records."""
    threshold = as_fraction(threshold)
    if not (0 < threshold <= 1):
        raise ConfigurationError(f"Threshold must lie in (0, 1], got {threshold}")
    if not candidates:
        raise ConfigurationError("Empty candidate assertion list")
    if not dataset:
        raise ConfigurationError("Empty dataset")
    class_ids = rules.task_spec.class_ids(task_kind)
    by_class: Dict[int, List[LabeledSegmentRecord]] = {c: [] for c in class_ids}
    for record in dataset:
        if record.class_label not in by_class:
            raise ConfigurationError(
                f"Record {record.segment_id} has label {record.class_label}, not a {task_kind.value} class")
        by_class[record.class_label].append(record)

    # extra aux classes have no main partner, so paired datasets never label them
    missing = []
    for class_id, recs in by_class.items():
        if recs:
            continue
        if task_kind == TaskKind.AUX and rules.task_spec.is_extra(class_id):
            logger.warning(f"aux class {class_id} is extra and has no records; its proxy set stays empty")
        else:
            missing.append(class_id)
    if missing:
        raise MissingClassError(missing)

    work = [(c, recs) for c, recs in sorted(by_class.items()) if recs]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda item: _mine_class(item[0], item[1], candidates, threshold, rules), work))
    else:
        results = [_mine_class(c, recs, candidates, threshold, rules) for c, recs in work]

    per_class = {c: frozenset() for c in class_ids}
    frequencies = {}
    for class_id, mined, freqs in sorted(results, key=lambda r: r[0]):
        per_class[class_id] = mined
        frequencies[class_id] = freqs
    logger.info(f"Mined {task_kind.value} proxies at threshold {threshold} for {len(work)} classes")
    return ProxyMap(per_class, threshold, task_kind, frequencies)


def proxy_map_to_implications(pm: ProxyMap, task_kind: Optional[TaskKind] = None) -> Tuple[List[Implication], List[int]]:
    """Package mined sets as implications; returns them with the ids of classes whose sets came out empty."""
    kind = task_kind or pm.task_kind
    implications, omitted = [], []
    for class_id, ids in sorted(pm.per_class.items()):
        if ids:
            implications.append(Implication(class_id, kind, frozenset(ids)))
        else:
            omitted.append(class_id)
    if omitted:
        logger.warning(f"No {kind.value} proxies mined for class(es) {', '.join(map(str, omitted))}; omitted")
    return implications, omitted


def proxy_map_from_rules(rules: RulesDb, task_kind: TaskKind) -> ProxyMap:
    """Proxy map taken directly from the implications declared in the rules database."""
    per_class = {c: frozenset() for c in rules.task_spec.class_ids(task_kind)}
    for imp in rules.implications:
        if imp.task_kind == task_kind:
            per_class[imp.class_id] = imp.required
    return ProxyMap(per_class, Fraction(1), task_kind)


def write_manifest(path: Union[str, Path], split: str, entries: Iterable[ManifestEntry],
                   extra: Optional[dict] = None) -> None:
    doc = {"schema": MANIFEST_SCHEMA, "version": SCHEMA_VERSION, "split": split,
           "records": [e.to_dict() for e in entries]}
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read manifest {path}: {e}") from None
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ConfigurationError(f"{path} is not a dataset manifest")
    try:
        return [ManifestEntry(r["segmentId"], int(r["mainLabel"]), int(r["auxLabel"]), r["groundingsFile"],
                              r.get("evalBatch"), r.get("framesFile")) for r in doc["records"]]
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigurationError(f"Malformed manifest record in {path}: {e}") from None


def load_labeled_records(manifest: Union[str, Path], rules: RulesDb,
                         task_kind: TaskKind = TaskKind.MAIN) -> List[LabeledSegmentRecord]:
    """Read a manifest and its groundings files, labelling each record from the requested task column."""
    base = Path(manifest).resolve().parent
    records = []
    for entry in read_manifest(manifest):
        grounding = load_groundings(base / entry.groundings_file, rules)
        label = entry.main_label if task_kind == TaskKind.MAIN else entry.aux_label
        records.append(LabeledSegmentRecord(entry.segment_id, label, grounding))
    return records
