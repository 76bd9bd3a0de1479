"""The consistency-driven fine-tuning loop and its seed sweeps."""
import hashlib
import json
import logging
import time
from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import TYPE_CHECKING, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from consistency_ft.consistency_engine import (ConsistencyVerdict, ProxyPair, SegmentEvaluation, check_segment,
                                               check_segment_no_aux)
from consistency_ft.errors import ConfigurationError, UndefinedCifError
from consistency_ft.logic import TaskKind
from consistency_ft.recognizer_sim import EvalBatch, Recognizer, SimulatedSegment, make_stream
from consistency_ft.rules_dsl import RulesDb
from consistency_ft.scenario import ScenarioConfig, build_scenario

if TYPE_CHECKING:
    from consistency_ft.run_ledger import RunLedger

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "consistency-ft/ft-report"
SWEEP_SCHEMA = "consistency-ft/sweep"
SCHEMA_VERSION = 1

ClassKey = Union[int, Tuple[TaskKind, int]]


class FtMode(str, Enum):
    DIRECTED = "directed"
    UNDIRECTED = "undirected"
    ACCURACY_DRIVEN = "accuracy-driven"

    @classmethod
    def parse(cls, value: str) -> "FtMode":
        aliases = {"accuracydriven": cls.ACCURACY_DRIVEN, "accuracy_driven": cls.ACCURACY_DRIVEN}
        key = str(value).strip().lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ConfigurationError(
                f"Unknown mode {value!r}; expected one of {', '.join(m.value for m in cls)}") from None


class StopReason(str, Enum):
    EXHAUSTED_FTD = "exhaustedFTD"
    EXHAUSTED_ED = "exhaustedED"
    TIME_BUDGET = "timeBudget"
    STALLED = "stalled"
    MAX_ITERATIONS = "maxIterations"


@dataclass(frozen=True)
class FtConfig:
    mode: FtMode = FtMode.DIRECTED
    batch_size: int = 20
    max_iterations: int = 4
    time_budget: Optional[float] = None
    improvement_epsilon: Optional[float] = 0.01
    seed: int = 0
    no_aux: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")
        if self.max_iterations < 1:
            raise ConfigurationError(f"max_iterations must be at least 1, got {self.max_iterations}")
        if self.time_budget is not None and self.time_budget <= 0:
            raise ConfigurationError(f"time_budget must be positive, got {self.time_budget}")
        if self.improvement_epsilon is not None and self.improvement_epsilon < 0:
            raise ConfigurationError("improvement_epsilon must be non-negative")

    @property
    def label(self) -> str:
        return f"{self.mode.value}+noAux" if self.no_aux else self.mode.value

    def to_dict(self) -> dict:
        data = asdict(self)
        data["mode"] = self.mode.value
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "FtConfig":
        known = {"mode", "batch_size", "max_iterations", "time_budget", "improvement_epsilon", "seed", "no_aux"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unknown FtConfig field(s): {', '.join(unknown)}")
        values = dict(data)
        if "mode" in values:
            values["mode"] = FtMode.parse(values["mode"])
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigurationError(f"Malformed FtConfig: {e}") from None

    def digest(self) -> str:
        """Digest of everything but the seed; runs sharing it are comparable across seeds."""
        data = self.to_dict()
        data.pop("seed")
        return hashlib.sha1(json.dumps(data, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class FtSelection:
    segments: Tuple[SimulatedSegment, ...]
    allocation: Dict[int, int]
    fallback: int


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    eval_batch_id: str
    inconsistency_count: int
    mismatch_count: int
    implicated: Tuple[Tuple[str, int, int], ...]
    selected_ft_batch: Tuple[str, ...]
    fallback: int
    post_accuracy_main: Dict[int, float]
    post_accuracy_aux: Dict[int, float]
    ed_consistency_rate: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "evalBatchId": self.eval_batch_id,
            "inconsistencyCount": self.inconsistency_count,
            "mismatchCount": self.mismatch_count,
            "implicatedClasses": [list(item) for item in self.implicated],
            "selectedFtBatch": list(self.selected_ft_batch),
            "fallbackSegments": self.fallback,
            "postAccuracyPerClass": {"main": _rounded(self.post_accuracy_main),
                                     "aux": _rounded(self.post_accuracy_aux)},
            "edConsistencyRate": None if self.ed_consistency_rate is None else round(self.ed_consistency_rate, 6),
        }


def _rounded(accuracies: Mapping[int, float]) -> Dict[str, float]:
    return {str(c): round(a, 6) for c, a in sorted(accuracies.items())}


@dataclass
class FtReport:
    config: FtConfig
    fixture_hash: str
    n_b: int
    n_e: int
    stop_reason: StopReason
    iterations: List[IterationRecord] = field(default_factory=list)
    pruned_batches: List[str] = field(default_factory=list)
    test_accuracy_main: float = 0.0
    test_accuracy_aux: float = 0.0
    initial_test_accuracy_main: float = 0.0
    initial_test_accuracy_aux: float = 0.0
    ed_size: int = 0

    @property
    def noop(self) -> bool:
        return self.n_b == 0

    @property
    def cif(self) -> Optional[Fraction]:
        return None if self.noop else compute_cif(self.n_b, self.n_e)

    @property
    def ft_segments_consumed(self) -> int:
        return sum(len(it.selected_ft_batch) for it in self.iterations)

    def to_dict(self) -> dict:
        cif = self.cif
        return {
            "schema": REPORT_SCHEMA,
            "version": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "mode": self.config.label,
            "accuracyDriven": self.config.mode == FtMode.ACCURACY_DRIVEN,
            "seed": self.config.seed,
            "fixtureHash": self.fixture_hash,
            "noop": self.noop,
            "nB": self.n_b,
            "nE": self.n_e,
            "edSize": self.ed_size,
            "cif": None if cif is None else str(cif),
            "cifValue": None if cif is None else round(float(cif), 6),
            "stopReason": self.stop_reason.value,
            "iterations": [it.to_dict() for it in self.iterations],
            "prunedBatches": list(self.pruned_batches),
            "ftSegmentsConsumed": self.ft_segments_consumed,
            "fallbackSegments": sum(it.fallback for it in self.iterations),
            "testAccuracyMain": round(self.test_accuracy_main, 6),
            "testAccuracyAux": round(self.test_accuracy_aux, 6),
            "initialTestAccuracyMain": round(self.initial_test_accuracy_main, 6),
            "initialTestAccuracyAux": round(self.initial_test_accuracy_aux, 6),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def fixture_hash(text: Union[str, bytes]) -> str:
    """Git blob id of the fixture contents."""
    data = text.encode("utf-8") if isinstance(text, str) else text
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def compute_cif(n_b: int, n_e: int) -> Fraction:
    if n_b <= 0:
        raise UndefinedCifError()
    return Fraction(n_b - n_e, n_b)


def _per_class(implicated: Mapping[ClassKey, int]) -> Counter:
    counts = Counter()
    for key, n in implicated.items():
        counts[key[1] if isinstance(key, tuple) else key] += n
    return counts


def select_ft_batch(mode: FtMode, implicated: Mapping[ClassKey, int], ftd_remaining: List[SimulatedSegment],
                    batch_size: int, stream: np.random.Generator) -> FtSelection:
    """Draw the next fine-tuning batch and remove it from ``ftd_remaining``.

    Directed modes split the batch across implicated classes in proportion to
    their counts (floor shares, remainder to the largest count, ties to the
    smaller class id); whatever the implicated classes cannot supply is drawn
    at random and reported as fallback.
    """
    if not ftd_remaining:
        raise ConfigurationError("FTD is exhausted")
    want = min(batch_size, len(ftd_remaining))
    chosen: List[int] = []
    allocation: Dict[int, int] = {}
    if mode != FtMode.UNDIRECTED:
        counts = _per_class(implicated)
        total = sum(counts.values())
        if total > 0:
            allocation = {c: batch_size * n // total for c, n in counts.items()}
            top = min(counts, key=lambda c: (-counts[c], c))
            allocation[top] += batch_size - sum(allocation.values())
        taken = set()
        for class_id in sorted(allocation):
            pool = [i for i, s in enumerate(ftd_remaining)
                    if (s.true_main == class_id or s.true_aux == class_id) and i not in taken]
            k = min(allocation[class_id], len(pool), want - len(chosen))
            if k > 0:
                picks = [pool[j] for j in sorted(stream.choice(len(pool), size=k, replace=False))]
                taken.update(picks)
                chosen += picks
    fallback = 0
    shortfall = want - len(chosen)
    if shortfall > 0:
        taken = set(chosen)
        rest = [i for i in range(len(ftd_remaining)) if i not in taken]
        chosen += [rest[j] for j in sorted(stream.choice(len(rest), size=shortfall, replace=False))]
        if mode != FtMode.UNDIRECTED:
            fallback = shortfall
            logger.warning(f"Directed selection short by {shortfall} segment(s); filled at random")
    selected = tuple(ftd_remaining[i] for i in chosen)
    for i in sorted(chosen, reverse=True):
        del ftd_remaining[i]
    return FtSelection(selected, allocation, fallback)


def _predict(recognizer: Recognizer, seg: SimulatedSegment, seed: int, phase: str) -> int:
    return recognizer.infer(seg, make_stream(seed, phase, seg.segment_id, recognizer.task_kind.value,
                                             recognizer.seed))


def evaluate_segments(recognizers: Tuple[Recognizer, Recognizer], segments: Iterable[SimulatedSegment],
                      rules: RulesDb, proxies: ProxyPair, seed: int, phase: str,
                      no_aux: bool = False) -> List[Tuple[SimulatedSegment, SegmentEvaluation, ConsistencyVerdict]]:
    main, aux = recognizers
    results = []
    for seg in segments:
        ev = SegmentEvaluation(seg.segment_id, _predict(main, seg, seed, phase),
                               None if no_aux else _predict(aux, seg, seed, phase), seg.grounding)
        verdict = check_segment_no_aux(ev, rules, proxies) if no_aux else check_segment(ev, rules, proxies)
        logger.debug(f"{phase} {seg.segment_id}: main {ev.main_prediction} aux {ev.aux_prediction} "
                     f"consistent={verdict.consistent}")
        results.append((seg, ev, verdict))
    return results


def count_inconsistencies(recognizers: Tuple[Recognizer, Recognizer], segments: Sequence[SimulatedSegment],
                          rules: RulesDb, proxies: ProxyPair, seed: int, no_aux: bool = False) -> int:
    return sum(1 for _, _, v in evaluate_segments(recognizers, segments, rules, proxies, seed, "ed-census", no_aux)
               if not v.consistent)


def evaluate_test_accuracy(recognizers: Tuple[Recognizer, Recognizer], test: Sequence[SimulatedSegment],
                           seed: int = 0) -> Tuple[float, float]:
    if not test:
        raise ConfigurationError("TEST split is empty")
    main, aux = recognizers
    main_hits = sum(1 for s in test if _predict(main, s, seed, "test") == s.true_main)
    aux_hits = sum(1 for s in test if _predict(aux, s, seed, "test") == s.true_aux)
    return main_hits / len(test), aux_hits / len(test)


def run_ft_loop(cfg: FtConfig, rules: RulesDb, proxies: ProxyPair, recognizers: Tuple[Recognizer, Recognizer],
                ftd: Sequence[SimulatedSegment], ed: Sequence[EvalBatch], test: Sequence[SimulatedSegment], *,
                fixture: str = "", clock: Callable[[], float] = time.monotonic) -> FtReport:
    if not ed or not any(b.segments for b in ed):
        raise ConfigurationError("ED is empty; nothing to evaluate")
    if not ftd:
        raise ConfigurationError("FTD is empty; nothing to fine-tune on")
    if cfg.batch_size > len(ftd):
        raise ConfigurationError(f"batch_size {cfg.batch_size} exceeds the FTD size {len(ftd)}")
    main, aux = recognizers
    ed_all = [s for b in ed for s in b.segments]
    init_main, init_aux = evaluate_test_accuracy((main, aux), test, cfg.seed)
    n_b = count_inconsistencies((main, aux), ed_all, rules, proxies, cfg.seed, cfg.no_aux)
    report = FtReport(cfg, fixture, n_b, n_b, StopReason.EXHAUSTED_ED, ed_size=len(ed_all),
                      initial_test_accuracy_main=init_main, initial_test_accuracy_aux=init_aux,
                      test_accuracy_main=init_main, test_accuracy_aux=init_aux)
    logger.info(f"[{cfg.label} seed {cfg.seed}] n_b = {n_b} of {len(ed_all)} ED segments")
    if n_b == 0:
        logger.info(f"[{cfg.label} seed {cfg.seed}] nothing inconsistent; no-op run")
        return report

    queue = deque(b for b in ed if b.segments)
    pool = list(ftd)
    prev_rate = 1.0 - n_b / len(ed_all)
    started = clock()
    visits = 0
    while True:
        if len(report.iterations) >= cfg.max_iterations:
            report.stop_reason = StopReason.MAX_ITERATIONS
            break
        if not queue:
            report.stop_reason = StopReason.EXHAUSTED_ED
            break
        if not pool:
            report.stop_reason = StopReason.EXHAUSTED_FTD
            break
        if cfg.time_budget is not None and clock() - started >= cfg.time_budget:
            report.stop_reason = StopReason.TIME_BUDGET
            break

        batch = queue.popleft()
        results = evaluate_segments((main, aux), batch.segments, rules, proxies, cfg.seed, f"eval-{visits}",
                                    cfg.no_aux)
        visits += 1
        implicated: Counter = Counter()
        inconsistent = mismatches = 0
        for seg, ev, verdict in results:
            if not verdict.consistent:
                inconsistent += 1
                if cfg.mode != FtMode.ACCURACY_DRIVEN:
                    implicated.update(verdict.implicated)
            wrong = []
            if ev.main_prediction != seg.true_main:
                wrong.append((TaskKind.MAIN, seg.true_main))
            if not cfg.no_aux and ev.aux_prediction != seg.true_aux:
                wrong.append((TaskKind.AUX, seg.true_aux))
            mismatches += bool(wrong)
            if cfg.mode == FtMode.ACCURACY_DRIVEN:
                implicated.update(wrong)

        trigger = mismatches if cfg.mode == FtMode.ACCURACY_DRIVEN else inconsistent
        if not trigger:
            report.pruned_batches.append(batch.batch_id)
            logger.info(f"[{cfg.label} seed {cfg.seed}] {batch.batch_id} fully consistent; removed from ED")
            continue

        iteration = len(report.iterations) + 1
        selection = select_ft_batch(cfg.mode, implicated, pool, cfg.batch_size,
                                    make_stream(cfg.seed, "ft-select", iteration))
        main = main.fine_tune(selection.segments, {s.true_main for s in selection.segments})
        if not cfg.no_aux:
            aux = aux.fine_tune(selection.segments, {s.true_aux for s in selection.segments})
        queue.append(batch)

        rate = None
        if cfg.improvement_epsilon is not None and iteration < cfg.max_iterations:
            rate = 1.0 - count_inconsistencies((main, aux), ed_all, rules, proxies, cfg.seed, cfg.no_aux) / len(ed_all)
        report.iterations.append(IterationRecord(
            iteration, batch.batch_id, inconsistent, mismatches,
            tuple((k.value, c, n) for (k, c), n in sorted(implicated.items())),
            tuple(s.segment_id for s in selection.segments), selection.fallback,
            main.accuracies(), aux.accuracies(), rate))
        logger.info(f"[{cfg.label} seed {cfg.seed}] iteration {iteration}: {batch.batch_id} had {inconsistent} "
                    f"inconsistent, fine-tuned on {len(selection.segments)} segments")
        if rate is not None:
            if rate - prev_rate < cfg.improvement_epsilon:
                report.stop_reason = StopReason.STALLED
                break
            prev_rate = rate

    report.n_e = count_inconsistencies((main, aux), ed_all, rules, proxies, cfg.seed, cfg.no_aux)
    report.test_accuracy_main, report.test_accuracy_aux = evaluate_test_accuracy((main, aux), test, cfg.seed)
    logger.info(f"[{cfg.label} seed {cfg.seed}] stopped ({report.stop_reason.value}): n_b={report.n_b} "
                f"n_e={report.n_e} cif={float(report.cif):.3f} test accuracy {report.test_accuracy_main:.3f}")
    return report


@dataclass
class SweepResult:
    seeds: List[int]
    runs: Dict[str, List[dict]]

    def summary(self) -> Dict[str, dict]:
        return summarize(self.runs)

    def to_dict(self) -> dict:
        return {"schema": SWEEP_SCHEMA, "version": SCHEMA_VERSION, "seeds": list(self.seeds),
                "runs": self.runs, "summary": self.summary()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _mean_std(values: Sequence[float]) -> Tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=float)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return round(float(arr.mean()), 6), round(std, 6)


def summarize(runs: Mapping[str, Sequence[dict]]) -> Dict[str, dict]:
    summary = {}
    for label, reports in sorted(runs.items()):
        cifs = [r["cifValue"] for r in reports if not r["noop"]]
        cif_mean, cif_std = _mean_std(cifs)
        acc_mean, acc_std = _mean_std([r["testAccuracyMain"] for r in reports])
        aux_mean, aux_std = _mean_std([r["testAccuracyAux"] for r in reports])
        summary[label] = {"runs": len(reports), "noopRuns": len(reports) - len(cifs),
                          "cifMean": cif_mean, "cifStd": cif_std,
                          "testAccuracyMainMean": acc_mean, "testAccuracyMainStd": acc_std,
                          "testAccuracyAuxMean": aux_mean, "testAccuracyAuxStd": aux_std}
    return summary


def run_sweep(configs: Sequence[FtConfig], seeds: Sequence[int], scenario_cfg: Optional[ScenarioConfig] = None, *,
              workers: int = 1, ledger: Optional["RunLedger"] = None, rules: Optional[RulesDb] = None,
              rules_text: Optional[str] = None) -> SweepResult:
    """Run every config on every seed of the default scenario; reports are merged in seed order.

    Configs sharing a seed share that seed's dataset and initial recognizers.
    With a ledger, runs already recorded under the same fixture and config
    digest are reused instead of recomputed.
    """
    scenario_cfg = scenario_cfg or ScenarioConfig()
    scenario_digest = hashlib.sha1(json.dumps(scenario_cfg.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()

    def one_seed(seed: int) -> List[dict]:
        scenario = build_scenario(seed, scenario_cfg, rules, rules_text)
        fixture = fixture_hash(scenario.rules_text)
        reports = []
        for base in configs:
            cfg = replace(base, seed=seed)
            digest = f"{cfg.digest()}:{scenario_digest}"
            if ledger is not None and ledger.is_recorded(cfg.label, seed, fixture, digest):
                logger.warning(f"[{cfg.label} seed {seed}] reusing recorded run from the ledger")
                reports.append(ledger.get_report(cfg.label, seed, fixture, digest))
                continue
            report = run_ft_loop(cfg, scenario.rules, scenario.proxies, (scenario.main, scenario.aux),
                                 scenario.dataset.ftd, scenario.dataset.ed, scenario.dataset.test, fixture=fixture)
            data = report.to_dict()
            if ledger is not None:
                ledger.add_run(cfg.label, seed, fixture, digest, data)
            reports.append(data)
        return reports

    seeds = list(seeds)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(one_seed, seeds))
    else:
        per_seed = [one_seed(s) for s in seeds]
    runs: Dict[str, List[dict]] = {cfg.label: [] for cfg in configs}
    for reports in per_seed:
        for cfg, data in zip(configs, reports):
            runs[cfg.label].append(data)
    return SweepResult(seeds, runs)
