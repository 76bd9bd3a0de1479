from collections import Counter

import numpy as np
import pytest

from consistency_ft.consistency_engine import ProxyPair
from consistency_ft.errors import ConfigurationError, GenerationError
from consistency_ft.logic import GroundingSet, Implication, TaskKind, check_implication
from consistency_ft.recognizer_sim import (RecognizerProfile, SimulatedRecognizer, SimulatedSegment,
                                           empirical_accuracy, fine_tune, generate_dataset, infer, make_stream,
                                           perfect_profile)
from consistency_ft.rules_dsl import parse_rules

CLASSES = list(range(1, 9))


def segment(label, segment_id="s"):
    return SimulatedSegment(segment_id, label, label, GroundingSet.empty())


def profile(accuracy, **kwargs):
    acc = accuracy if isinstance(accuracy, dict) else {c: accuracy for c in CLASSES}
    return RecognizerProfile(TaskKind.MAIN, acc, **kwargs)


def test_perfect_recognizer_is_always_right():
    p = perfect_profile(TaskKind.MAIN, CLASSES)
    stream = make_stream(0, "t")
    assert all(infer(p, segment(c), stream) == c for c in CLASSES for _ in range(200))


def test_uniform_confusion():
    p = profile(0.0)
    stream = make_stream(42, "uniform")
    seg = segment(1)
    counts = Counter(infer(p, seg, stream) for _ in range(100_000))
    assert set(counts) == set(range(2, 9))
    for c in range(2, 9):
        assert abs(counts[c] / 100_000 - 1 / 7) < 0.02


def test_confusion_row_biases_errors():
    p = profile(0.0, confusion_bias={1: {4: 1.0}})
    stream = make_stream(1, "bias")
    assert {infer(p, segment(1), stream) for _ in range(500)} == {4}


@pytest.mark.parametrize("accuracy", [0.3, 0.6, 0.85])
def test_empirical_accuracy_matches_profile(accuracy):
    p = profile(accuracy)
    segs = [segment(c, f"s{k}") for k in range(1250) for c in CLASSES]
    assert abs(empirical_accuracy(p, segs[:10_000], make_stream(5, "emp")) - accuracy) < 0.02


def test_inference_is_deterministic():
    p = profile(0.5)
    segs = [segment(c, f"s{c}") for c in CLASSES]
    first = [infer(p, s, make_stream(9, "phase", s.segment_id)) for s in segs]
    second = [infer(p, s, make_stream(9, "phase", s.segment_id)) for s in segs]
    assert first == second


def test_unknown_class():
    with pytest.raises(ConfigurationError):
        infer(profile(0.5), segment(12), make_stream(0))


def test_fine_tune_examples():
    p = profile({1: 0.6, 2: 1.0, 3: 0.8}, learning_rate=0.25, forgetting=0.01)
    tuned = fine_tune(p, [segment(1), segment(2)], {1, 2})
    assert tuned.per_class_accuracy[1] == pytest.approx(0.7)
    assert tuned.per_class_accuracy[2] == 1.0
    assert tuned.per_class_accuracy[3] == pytest.approx(0.792)
    assert p.per_class_accuracy[1] == 0.6


def test_target_without_examples_is_unchanged():
    p = profile({1: 0.6, 2: 0.5})
    assert fine_tune(p, [segment(2)], {1, 2}).per_class_accuracy[1] == 0.6


def test_examples_per_step_scales_with_batch_share():
    p = profile({1: 0.6, 2: 0.5}, examples_per_step=5.0)
    tuned = fine_tune(p, [segment(1, f"s{k}") for k in range(10)], {1})
    assert tuned.per_class_accuracy[1] == pytest.approx(1 - 0.4 * 0.75 ** 2)


def test_fine_tune_never_lowers_targets():
    rng = np.random.default_rng(3)
    for _ in range(200):
        acc = {c: float(rng.random()) for c in CLASSES}
        p = profile(acc, examples_per_step=float(rng.integers(1, 10)) if rng.random() < 0.5 else None)
        batch = [segment(int(c), f"s{k}") for k, c in enumerate(rng.choice(CLASSES, size=20))]
        targets = {s.true_main for s in batch}
        tuned = fine_tune(p, batch, targets)
        for c in targets:
            assert acc[c] <= tuned.per_class_accuracy[c] <= 1.0
        for c in set(CLASSES) - targets:
            assert tuned.per_class_accuracy[c] <= acc[c]


def test_fine_tune_empty_batch():
    with pytest.raises(ConfigurationError):
        fine_tune(profile(0.5), [], {1})


@pytest.mark.parametrize("kwargs", [
    {"learning_rate": 0.0}, {"learning_rate": 1.0}, {"forgetting": 1.0}, {"examples_per_step": 0},
    {"confusion_bias": {1: {1: 1.0}}}, {"confusion_bias": {1: {2: -1.0}}},
])
def test_invalid_profiles(kwargs):
    with pytest.raises(ConfigurationError):
        profile(0.5, **kwargs)


def test_profile_dict_round_trip():
    p = profile(0.4, confusion_bias={1: {4: 0.8, 2: 0.2}}, seed=7, examples_per_step=5.0)
    assert RecognizerProfile.from_dict(p.to_dict()) == p


def test_simulated_recognizer_returns_new_instance():
    r = SimulatedRecognizer(profile(0.5))
    tuned = r.fine_tune([segment(1)], {1})
    assert tuned is not r
    assert tuned.accuracies()[1] > r.accuracies()[1]


def test_zero_noise_segments_satisfy_their_implications(tu_dat):
    proxies = ProxyPair.from_rules(tu_dat)
    dataset = generate_dataset(tu_dat, {c: 5 for c in range(1, 7)}, 0.0, 1, clutter_objects=3)
    for seg in list(dataset.ftd) + dataset.ed_segments + list(dataset.test):
        for kind, label in ((TaskKind.MAIN, seg.true_main), (TaskKind.AUX, seg.true_aux)):
            imp = Implication(label, kind, getattr(proxies, kind.value).assertions_for(label))
            assert check_implication(imp, seg.grounding, tu_dat).holds
        assert not seg.noise_ops


def test_eval_batches_cover_every_class(small_db):
    dataset = generate_dataset(small_db, {1: 10, 2: 10, 3: 10}, 0.0, 0, eval_batch_size=5)
    for class_id in (1, 2, 3):
        assert any(s.true_main == class_id for s in dataset.ed[0].segments)
    assert all(len(b.segments) == 5 for b in dataset.ed)
    assert [b.batch_id for b in dataset.ed] == [f"eval-{i:03d}" for i in range(6)]


def test_splits_are_disjoint(scenario_db):
    dataset = generate_dataset(scenario_db, {c: 4 for c in CLASSES}, 0.1, 2)
    ids = [s.segment_id for s in dataset.ftd] + [s.segment_id for s in dataset.ed_segments] + \
          [s.segment_id for s in dataset.test]
    assert len(ids) == len(set(ids)) == 96


def test_generation_is_deterministic(scenario_db):
    a = generate_dataset(scenario_db, {c: 3 for c in CLASSES}, 0.2, 5, clutter_objects=2)
    b = generate_dataset(scenario_db, {c: 3 for c in CLASSES}, 0.2, 5, clutter_objects=2)
    assert a == b
    c = generate_dataset(scenario_db, {c: 3 for c in CLASSES}, 0.2, 6, clutter_objects=2)
    assert a != c


def test_noise_is_recorded(scenario_db):
    dataset = generate_dataset(scenario_db, {c: 10 for c in CLASSES}, 0.3, 8)
    kinds = {op.kind for s in dataset.ftd for op in s.noise_ops}
    assert kinds == {"drop", "insert"}


@pytest.mark.parametrize("counts, noise", [
    ({1: 1, 2: 1, 3: 1}, 1.0),
    ({1: 1, 2: 1, 3: 1}, -0.1),
    ({1: 1, 2: 1}, 0.0),
    ({1: 1, 2: 1, 3: 1, 4: 1}, 0.0),
])
def test_generation_errors(small_db, counts, noise):
    with pytest.raises(GenerationError):
        generate_dataset(small_db, counts, noise, 0)


def test_class_without_proxies():
    text = 'pred p/1\nclass main 1 "a"\nclass aux 1 "a"\n'
    with pytest.raises(GenerationError, match="no proxy"):
        generate_dataset(parse_rules(text), {1: 1}, 0.0, 0)
