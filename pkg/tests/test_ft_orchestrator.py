import itertools
import json
import sqlite3
from collections import Counter
from dataclasses import replace
from fractions import Fraction

import pytest

from consistency_ft.consistency_engine import ProxyPair
from consistency_ft.errors import ConfigurationError, UndefinedCifError
from consistency_ft.ft_orchestrator import (FtConfig, FtMode, FtReport, StopReason, compute_cif, evaluate_segments,
                                            evaluate_test_accuracy, fixture_hash, run_ft_loop, run_sweep, select_ft_batch)
from consistency_ft.logic import TaskKind
from consistency_ft.recognizer_sim import (EvalBatch, RecognizerProfile, SimulatedRecognizer, generate_dataset,
                                           make_stream, perfect_profile)
from consistency_ft.run_ledger import RunLedger
from consistency_ft.scenario import ScenarioConfig, build_profiles, build_scenario, confusion_rows

CLASSES = list(range(1, 9))
TINY = ScenarioConfig(ftd_per_class=10, ftd_background=40, ed_per_class=5, test_per_class=10, eval_batch_size=10)


@pytest.fixture(scope="module")
def scenario():
    return build_scenario(3)


@pytest.fixture(scope="module")
def small_setup(small_db):
    """Class 1 is never recognized by the main task, everything else is perfect."""
    dataset = generate_dataset(small_db, {1: 20, 2: 20, 3: 20}, 0.0, 0)
    ed = dataset.ed_segments
    clean = EvalBatch("clean", tuple(s for s in ed if s.true_main == 2))
    dirty = EvalBatch("dirty", tuple(s for s in ed if s.true_main == 1))
    main = SimulatedRecognizer(RecognizerProfile(TaskKind.MAIN, {1: 0.0, 2: 1.0, 3: 1.0}))
    aux = SimulatedRecognizer(perfect_profile(TaskKind.AUX, [1, 2, 3]))
    return small_db, ProxyPair.from_rules(small_db), (main, aux), dataset.ftd, (clean, dirty), dataset.test


def run_small(small_setup, cfg, **kwargs):
    rules, proxies, recognizers, ftd, ed, test = small_setup
    return run_ft_loop(cfg, rules, proxies, recognizers, ftd, ed, test, **kwargs)


@pytest.mark.parametrize("n_b, n_e, expected", [(20, 5, Fraction(3, 4)), (10, 10, Fraction(0)),
                                                (8, 10, Fraction(-1, 4)), (7, 0, Fraction(1))])
def test_cif(n_b, n_e, expected):
    assert compute_cif(n_b, n_e) == expected


def test_cif_undefined_without_inconsistencies():
    with pytest.raises(UndefinedCifError):
        compute_cif(0, 0)


def test_fixture_hash_is_a_git_blob_id():
    assert fixture_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert fixture_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


@pytest.fixture
def pool(scenario_db):
    return list(generate_dataset(scenario_db, {c: 20 for c in CLASSES}, 0.0, 0).ftd)


def test_directed_selection_is_proportional(pool):
    selection = select_ft_batch(FtMode.DIRECTED, {(TaskKind.MAIN, 1): 4, (TaskKind.MAIN, 3): 1}, pool, 20,
                                make_stream(0, "sel"))
    assert selection.allocation == {1: 16, 3: 4}
    assert Counter(s.true_main for s in selection.segments) == {1: 16, 3: 4}
    assert selection.fallback == 0
    assert len(pool) == 140
    assert not set(selection.segments) & set(pool)


def test_remainder_goes_to_smallest_top_class(pool):
    implicated = {(TaskKind.MAIN, 5): 1, (TaskKind.MAIN, 2): 1, (TaskKind.AUX, 7): 1}
    selection = select_ft_batch(FtMode.DIRECTED, implicated, pool, 20, make_stream(0, "sel"))
    assert selection.allocation == {2: 8, 5: 6, 7: 6}


def test_main_and_aux_counts_merge_per_class(pool):
    selection = select_ft_batch(FtMode.DIRECTED, {(TaskKind.MAIN, 1): 2, (TaskKind.AUX, 1): 2}, pool, 20,
                                make_stream(0, "sel"))
    assert selection.allocation == {1: 20}
    assert all(s.true_main == 1 for s in selection.segments)


def test_shortfall_is_filled_at_random(pool, caplog):
    few = [s for s in pool if s.true_main == 1][:5] + [s for s in pool if s.true_main != 1][:40]
    selection = select_ft_batch(FtMode.DIRECTED, {(TaskKind.MAIN, 1): 3}, few, 20, make_stream(1, "sel"))
    assert len(selection.segments) == 20
    assert sum(s.true_main == 1 for s in selection.segments) == 5
    assert selection.fallback == 15
    assert "short by 15" in caplog.text


def test_undirected_selection_follows_ftd_frequencies(scenario_db):
    base = list(generate_dataset(scenario_db, {c: 50 for c in CLASSES}, 0.0, 0).ftd)
    counts = Counter()
    for trial in range(500):
        selection = select_ft_batch(FtMode.UNDIRECTED, {(TaskKind.MAIN, 1): 9}, list(base), 20,
                                    make_stream(trial, "undirected"))
        assert selection.allocation == {} and selection.fallback == 0
        counts.update(s.true_main for s in selection.segments)
    for c in CLASSES:
        assert abs(counts[c] / 10_000 - 1 / 8) < 0.03


def test_selection_takes_what_is_left(pool):
    rest = pool[:3]
    selection = select_ft_batch(FtMode.UNDIRECTED, {}, rest, 20, make_stream(0, "sel"))
    assert len(selection.segments) == 3
    assert rest == []
    with pytest.raises(ConfigurationError, match="exhausted"):
        select_ft_batch(FtMode.UNDIRECTED, {}, rest, 20, make_stream(0, "sel"))


def test_perfect_recognizers_make_a_noop_run(small_db):
    dataset = generate_dataset(small_db, {1: 10, 2: 10, 3: 10}, 0.0, 4, eval_batch_size=6)
    recognizers = (SimulatedRecognizer(perfect_profile(TaskKind.MAIN, [1, 2, 3])),
                   SimulatedRecognizer(perfect_profile(TaskKind.AUX, [1, 2, 3])))
    report = run_ft_loop(FtConfig(batch_size=5), small_db, ProxyPair.from_rules(small_db), recognizers,
                         dataset.ftd, dataset.ed, dataset.test)
    assert report.noop
    assert report.cif is None
    assert report.iterations == []
    assert report.stop_reason == StopReason.EXHAUSTED_ED
    data = report.to_dict()
    assert data["cif"] is None and data["noop"] is True
    assert (data["testAccuracyMain"], data["testAccuracyAux"]) == (1.0, 1.0)


def test_consistent_batches_are_pruned(small_setup):
    report = run_small(small_setup, FtConfig(batch_size=5, max_iterations=2, improvement_epsilon=None))
    assert report.pruned_batches == ["clean"]
    assert [it.eval_batch_id for it in report.iterations] == ["dirty", "dirty"]
    assert report.stop_reason == StopReason.MAX_ITERATIONS
    assert report.iterations[0].inconsistency_count == 20


def test_accuracy_driven_targets_misrecognized_classes(small_setup):
    cfg = FtConfig(FtMode.ACCURACY_DRIVEN, batch_size=5, max_iterations=1, improvement_epsilon=None)
    report = run_small(small_setup, cfg)
    assert report.pruned_batches == ["clean"]
    first = report.iterations[0]
    assert first.implicated == (("main", 1, 20),)
    assert all(seg_id.startswith("ftd-1-") for seg_id in first.selected_ft_batch)
    assert first.fallback == 0
    assert report.to_dict()["accuracyDriven"] is True


def test_time_budget_stops_before_fine_tuning(small_setup):
    ticks = itertools.count(0.0, 10.0)
    report = run_small(small_setup, FtConfig(batch_size=5, time_budget=5.0), clock=lambda: next(ticks))
    assert report.stop_reason == StopReason.TIME_BUDGET
    assert report.iterations == []
    assert report.n_e == report.n_b
    assert report.cif == 0


def test_stalled_improvement_stops_the_loop(small_setup):
    report = run_small(small_setup, FtConfig(batch_size=5, max_iterations=4, improvement_epsilon=1.0))
    assert report.stop_reason == StopReason.STALLED
    assert len(report.iterations) == 1
    assert report.iterations[0].ed_consistency_rate is not None


def test_ftd_runs_out(small_setup):
    rules, proxies, recognizers, ftd, ed, test = small_setup
    report = run_ft_loop(FtConfig(batch_size=5, max_iterations=50, improvement_epsilon=None), rules, proxies,
                         recognizers, ftd[:12], ed, test)
    assert report.stop_reason in (StopReason.EXHAUSTED_FTD, StopReason.EXHAUSTED_ED)
    assert report.ft_segments_consumed <= 12


@pytest.mark.parametrize("ftd_size, ed, message", [
    (0, None, "FTD is empty"),
    (3, None, "exceeds the FTD size"),
    (60, (), "ED is empty"),
])
def test_loop_precondition_errors(small_setup, ftd_size, ed, message):
    rules, proxies, recognizers, ftd, default_ed, test = small_setup
    with pytest.raises(ConfigurationError, match=message):
        run_ft_loop(FtConfig(batch_size=5), rules, proxies, recognizers, ftd[:ftd_size],
                    default_ed if ed is None else ed, test)


def test_max_iterations_bounds_the_loop(scenario):
    cfg = FtConfig(FtMode.DIRECTED, improvement_epsilon=None, seed=3)
    report = run_ft_loop(cfg, scenario.rules, scenario.proxies, (scenario.main, scenario.aux),
                         scenario.dataset.ftd, scenario.dataset.ed, scenario.dataset.test)
    assert report.stop_reason == StopReason.MAX_ITERATIONS
    assert [it.iteration for it in report.iterations] == [1, 2, 3, 4]
    assert report.n_b > 0
    assert report.ed_size == 160


@pytest.mark.parametrize("mode", list(FtMode))
def test_modes_consume_the_same_budget(scenario, mode):
    cfg = FtConfig(mode, improvement_epsilon=None, seed=3)
    report = run_ft_loop(cfg, scenario.rules, scenario.proxies, (scenario.main, scenario.aux),
                         scenario.dataset.ftd, scenario.dataset.ed, scenario.dataset.test)
    assert report.ft_segments_consumed == 80


def test_runs_are_reproducible(scenario):
    cfg = FtConfig(FtMode.UNDIRECTED, seed=3)
    args = (scenario.rules, scenario.proxies, (scenario.main, scenario.aux),
            scenario.dataset.ftd, scenario.dataset.ed, scenario.dataset.test)
    before = scenario.main.accuracies()
    first = run_ft_loop(cfg, *args, fixture="abc").to_json()
    assert run_ft_loop(cfg, *args, fixture="abc").to_json() == first
    assert scenario.main.accuracies() == before
    assert json.loads(first)["fixtureHash"] == "abc"


def test_test_accuracy_of_perfect_recognizers(scenario):
    perfect = (SimulatedRecognizer(perfect_profile(TaskKind.MAIN, CLASSES)),
               SimulatedRecognizer(perfect_profile(TaskKind.AUX, CLASSES)))
    assert evaluate_test_accuracy(perfect, scenario.dataset.test) == (1.0, 1.0)
    with pytest.raises(ConfigurationError):
        evaluate_test_accuracy(perfect, [])


def test_default_scenario_starts_every_class_equal(scenario):
    for recognizer in (scenario.main, scenario.aux):
        assert recognizer.profile.examples_per_step is None
        assert set(recognizer.accuracies().values()) == {0.6}
    ftd = Counter(s.true_main for s in scenario.dataset.ftd)
    assert ftd[6] == 1200
    assert all(ftd[c] == 20 for c in CLASSES if c != 6)


def test_accuracy_spread_is_opt_in(scenario_db):
    main, aux = build_profiles(scenario_db, ScenarioConfig(accuracy_spread=True, examples_per_step=5.0), 0)
    acc = main.per_class_accuracy
    assert main.mean_accuracy() == pytest.approx(0.6)
    assert acc[2] < acc[6]
    assert main.examples_per_step == 5.0
    assert aux.seed == 1


def test_confusion_rows_skip_pairs_the_rules_lack():
    rows = confusion_rows([1, 2, 3])
    assert sorted(rows) == [2, 3]
    assert rows[2] == pytest.approx({3: 0.8, 1: 0.2})
    assert confusion_rows([2, 3]) == {2: {3: 1.0}, 3: {2: 1.0}}
    assert confusion_rows([5, 6]) == {}


def test_scenario_on_other_rules(small_db):
    scenario = build_scenario(0, TINY, rules=small_db)
    assert scenario.main.profile.confusion_bias == {2: pytest.approx({3: 0.8, 1: 0.2}),
                                                   3: pytest.approx({2: 0.8, 1: 0.2})}
    report = run_ft_loop(FtConfig(max_iterations=2, improvement_epsilon=None), scenario.rules, scenario.proxies,
                         (scenario.main, scenario.aux), scenario.dataset.ftd, scenario.dataset.ed,
                         scenario.dataset.test)
    assert report.ed_size == 15


@pytest.mark.parametrize("kwargs", [{"batch_size": 0}, {"max_iterations": 0}, {"time_budget": 0},
                                    {"improvement_epsilon": -0.1}])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigurationError):
        FtConfig(**kwargs)


@pytest.mark.parametrize("text, mode", [("directed", FtMode.DIRECTED), ("Undirected", FtMode.UNDIRECTED),
                                        ("accuracy_driven", FtMode.ACCURACY_DRIVEN),
                                        ("accuracydriven", FtMode.ACCURACY_DRIVEN)])
def test_mode_parse(text, mode):
    assert FtMode.parse(text) == mode


def test_unknown_mode():
    with pytest.raises(ConfigurationError):
        FtMode.parse("sideways")


def test_config_dict_round_trip():
    cfg = FtConfig(FtMode.UNDIRECTED, batch_size=10, time_budget=30.0, seed=4, no_aux=True)
    assert FtConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.label == "undirected+noAux"
    assert cfg.digest() == replace(cfg, seed=99).digest()
    assert cfg.digest() != replace(cfg, batch_size=11).digest()
    with pytest.raises(ConfigurationError, match="colour"):
        FtConfig.from_dict({"mode": "directed", "colour": "red"})


def test_report_serialization():
    report = FtReport(FtConfig(seed=2), "f", 20, 5, StopReason.MAX_ITERATIONS, ed_size=40)
    data = json.loads(report.to_json())
    assert data["cif"] == "3/4"
    assert data["cifValue"] == 0.75
    assert data["mode"] == "directed"
    assert data["stopReason"] == "maxIterations"
    assert data["schema"] == "consistency-ft/ft-report"


def test_sweep_groups_runs_by_mode(tmp_path):
    configs = [FtConfig(FtMode.DIRECTED, max_iterations=2, improvement_epsilon=None),
               FtConfig(FtMode.UNDIRECTED, max_iterations=2, improvement_epsilon=None)]
    ledger = RunLedger(str(tmp_path / "runs.db"))
    result = run_sweep(configs, [0, 1], TINY, ledger=ledger)
    assert sorted(result.runs) == ["directed", "undirected"]
    assert [r["seed"] for r in result.runs["directed"]] == [0, 1]
    summary = result.summary()
    assert summary["directed"]["runs"] == 2
    assert len(ledger.get_all_runs()) == 4

    assert run_sweep(configs, [0, 1], TINY, workers=2).to_json() == result.to_json()
    assert run_sweep(configs, [0, 1], TINY, ledger=ledger).to_json() == result.to_json()
    assert json.loads(result.to_json())["schema"] == "consistency-ft/sweep"


def test_sweep_reuses_recorded_runs(tmp_path):
    configs = [FtConfig(FtMode.DIRECTED, max_iterations=2, improvement_epsilon=None)]
    path = str(tmp_path / "runs.db")
    run_sweep(configs, [0], TINY, ledger=RunLedger(path))
    with sqlite3.connect(path) as conn:
        conn.execute("UPDATE ft_runs SET report_json = ? WHERE mode = 'directed' AND seed = 0",
                     (json.dumps({"seed": 0, "marker": "stored", "noop": True, "testAccuracyMain": 0.0,
                                  "testAccuracyAux": 0.0}),))
    rerun = run_sweep(configs, [0], TINY, ledger=RunLedger(path))
    assert rerun.runs["directed"][0]["marker"] == "stored"
    assert "marker" not in run_sweep(configs, [0], TINY).runs["directed"][0]


def test_profile_seed_keys_predictions(scenario):
    segments = scenario.dataset.test

    def predictions(seed):
        main = SimulatedRecognizer(replace(scenario.main.profile, seed=seed))
        aux = SimulatedRecognizer(replace(scenario.aux.profile, seed=seed))
        return [ev.main_prediction for _, ev, _ in evaluate_segments(
            (main, aux), segments, scenario.rules, scenario.proxies, 0, "test")]

    assert predictions(4) == predictions(4)
    assert predictions(4) != predictions(5)
