"""
Tests for labelling, ROC/AUC, threshold selection and the evaluation protocols.
"""
import csv
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from src import classifier as clf
from src.attacks import AttackConfig, AttackRecord, generate_adversarial_set
from src.dataset_io import Dataset
from src.detector import DetectorConfig, detector_state
from src.errors import DegenerateInputError, IntegrityError, InvalidInputError
from src.evaluation import (
    LabeledScores, Provenance, RocCurve, auc, benchmark, build_labels, calibrate_and_evaluate,
    calibrate_noise_sigma, choose_threshold, detector_state_bytes, evaluate_detector, evaluate_kde,
    group_records, latency_scaling, noise_robustness_eval, operating_point, roc_from_arrays,
    select_threshold, write_results_csv, write_roc_csv,
)
from src.image_codec import DEFAULT_POOL, JpegQuality
from src.kde_baseline import kde_fit, save_kde


def _pairwise_auc(scores, positive):
    pos, neg = scores[positive], scores[~positive]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def _random_problem(rng):
    n = int(rng.integers(4, 40))
    positive = rng.random(n) < 0.5
    positive[0], positive[1] = True, False
    # coarse rounding so ties show up often
    scores = np.round(rng.normal(positive * 0.5, 1.0), 1)
    return scores, positive


@pytest.fixture(scope="module")
def fgsm_records(model, blobs_test):
    return generate_adversarial_set(model, blobs_test, [AttackConfig(kind="fgsm", epsilon=0.2)]).records


def test_auc_matches_pairwise_count(rng):
    for _ in range(100):
        scores, positive = _random_problem(rng)
        assert auc(roc_from_arrays(scores, positive)) == pytest.approx(_pairwise_auc(scores, positive), abs=1e-9)


def test_auc_matches_sklearn(rng):
    for _ in range(20):
        scores, positive = _random_problem(rng)
        expected = roc_auc_score(positive.astype(int), scores)
        assert auc(roc_from_arrays(scores, positive)) == pytest.approx(expected, abs=1e-9)


def test_auc_of_negated_scores_is_complementary(rng):
    scores, positive = _random_problem(rng)
    assert auc(roc_from_arrays(scores, positive)) + auc(roc_from_arrays(-scores, positive)) == pytest.approx(1.0)


def test_curve_shape(rng):
    scores, positive = _random_problem(rng)
    curve = roc_from_arrays(scores, positive)
    assert curve.thresholds[0] == np.inf and curve.thresholds[-1] == -np.inf
    assert np.all(np.diff(curve.thresholds) < 0)
    assert (curve.fpr[0], curve.tpr[0]) == (0.0, 0.0) and (curve.fpr[-1], curve.tpr[-1]) == (1.0, 1.0)
    for fpr, tpr, tau in zip(curve.fpr, curve.tpr, curve.thresholds):
        assert operating_point(scores, positive, tau) == pytest.approx((tpr, fpr))


def test_perfect_separation():
    scores = np.array([0.1, 0.2, 0.3, 0.7, 0.8, 0.9])
    positive = np.array([False, False, False, True, True, True])
    curve = roc_from_arrays(scores, positive)
    assert auc(curve) == pytest.approx(1.0)
    choice = choose_threshold(curve)
    assert choice.distance == 0.0 and choice.tau == pytest.approx(0.7)


def test_hand_built_curve_threshold():
    curve = RocCurve(
        fpr=np.array([0.0, 0.1, 0.2, 0.5, 1.0]),
        tpr=np.array([0.0, 0.6, 0.9, 0.95, 1.0]),
        thresholds=np.array([np.inf, 4.0, 3.0, 2.0, -np.inf]),
    )
    choice = choose_threshold(curve)
    assert (choice.fpr, choice.tpr, choice.tau) == (0.2, 0.9, 3.0)
    assert choice.distance == pytest.approx(0.2236, abs=1e-4)


def test_all_tied_scores_pick_the_origin():
    curve = roc_from_arrays(np.full(6, 0.3), np.array([True, False] * 3))
    assert auc(curve) == pytest.approx(0.5)
    assert select_threshold(curve) == np.inf


def test_invalid_curves_are_rejected():
    with pytest.raises(InvalidInputError):
        RocCurve(np.array([0.0, 0.5]), np.array([0.0, 1.0]), np.array([np.inf, -np.inf]))
    with pytest.raises(InvalidInputError):
        RocCurve(np.array([0.0, 0.6, 0.4, 1.0]), np.array([0.0, 0.5, 0.6, 1.0]), np.zeros(4))
    with pytest.raises(InvalidInputError):
        roc_from_arrays([np.nan, 1.0], [True, False])
    with pytest.raises(DegenerateInputError):
        roc_from_arrays([0.1, 0.2], [True, True])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=25), st.randoms())
def test_selected_threshold_is_closest_and_order_free(pairs, random):
    scores = np.array([s for s, _ in pairs], dtype=np.float64)
    positive = np.array([p for _, p in pairs])
    if positive.all() or not positive.any():
        with pytest.raises(DegenerateInputError):
            roc_from_arrays(scores, positive)
        return
    choice = choose_threshold(roc_from_arrays(scores, positive))
    candidates = itertools.chain([np.inf, -np.inf], np.unique(scores))
    best = min(np.hypot(fpr, 1 - tpr) for tpr, fpr in (operating_point(scores, positive, t) for t in candidates))
    assert choice.distance == pytest.approx(best)
    tpr, fpr = operating_point(scores, positive, choice.tau)
    assert np.hypot(fpr, 1 - tpr) == pytest.approx(best)
    order = list(range(len(pairs)))
    random.shuffle(order)
    assert select_threshold(roc_from_arrays(scores[order], positive[order])) == choice.tau


def test_build_labels_partition(model, blobs_test, fgsm_records):
    labeled = build_labels(model, blobs_test, fgsm_records)
    n = len(blobs_test)
    assert len(labeled) == 2 * n
    assert np.all(np.isnan(labeled.scores))
    correct = clf.predict(model, blobs_test.images) == blobs_test.labels
    assert labeled.n_negative == int(correct.sum())
    assert all(labeled.positive[n:])
    assert labeled.sources[0] == ("clean", 0) and labeled.sources[n] == ("attack", 0)
    for prov, ok in zip(labeled.provenance[:n], correct):
        assert prov is (Provenance.CLEAN_CORRECT if ok else Provenance.CLEAN_MISCLASSIFIED)
    for prov, record in zip(labeled.provenance[n:], fgsm_records):
        assert prov is (Provenance.ATTACKED_SUCCESS if record.success else Provenance.ATTACKED_FAIL)
    np.testing.assert_array_equal(labeled.images(blobs_test, fgsm_records)[n + 3], fgsm_records[3].adversarial)


def test_build_labels_rejects_dangling_records(model, blobs_test):
    stray = AttackRecord(len(blobs_test), np.zeros((4, 4, 1)), True, True, 0.0, {"kind": "fgsm"})
    with pytest.raises(IntegrityError):
        build_labels(model, blobs_test, [stray])


def test_build_labels_without_attacks_on_a_perfect_model(model, blobs_test):
    relabeled = Dataset(blobs_test.images, clf.predict(model, blobs_test.images), blobs_test.num_classes)
    labeled = build_labels(model, relabeled, [])
    assert len(labeled) == len(relabeled)
    assert labeled.n_positive == 0
    assert set(labeled.provenance) == {Provenance.CLEAN_CORRECT}


def test_build_labels_negatives_only_come_from_clean_images(model, blobs_test):
    # failed attacks stay positive: the input was still tampered with
    records = [
        AttackRecord(i, img, True, i % 2 == 0, 0.0, {"kind": "fgsm"}) for i, img in enumerate(blobs_test.images)
    ]
    labeled = build_labels(model, blobs_test, records)
    negatives = [source for source, ok in zip(labeled.sources, labeled.positive) if not ok]
    assert negatives and all(kind == "clean" for kind, _ in negatives)
    misclassified = int((clf.predict(model, blobs_test.images) != blobs_test.labels).sum())
    assert labeled.n_positive == len(records) + misclassified


def test_calibrate_and_evaluate():
    scores = np.concatenate([np.linspace(0.0, 0.4, 10), np.linspace(0.6, 1.0, 10)])
    positive = np.repeat([False, True], 10)
    data = LabeledScores(scores, positive, tuple(Provenance.CLEAN_CORRECT for _ in scores),
                         tuple(("clean", i) for i in range(20)))
    report = calibrate_and_evaluate(data, seed=3)
    assert report.calibration_auc == pytest.approx(1.0) and report.heldout_auc == pytest.approx(1.0)
    assert report.calibration_tpr == 1.0 and report.calibration_fpr == 0.0 and report.distance == 0.0
    assert report.heldout_fpr == 0.0
    assert calibrate_and_evaluate(data, seed=3) == report
    with pytest.raises(DegenerateInputError):
        calibrate_and_evaluate(data.take([0, 10, 11, 12]), seed=0)


def test_group_records_keeps_order():
    def record(kind, **params):
        return AttackRecord(0, np.zeros((1, 1, 1)), True, True, 0.0, {"kind": kind, **params})

    records = [record("pgd", epsilon=0.1), record("cw", cw_constant=2.0, epsilon=0.1), record("pgd", epsilon=0.1)]
    groups = group_records(records)
    assert list(groups) == [("pgd", 0.1), ("cw", 2.0)]
    assert len(groups[("pgd", 0.1)]) == 2


def test_evaluate_detector_row(model, blobs_test, fgsm_records):
    row, curve = evaluate_detector(model, blobs_test, fgsm_records, JpegQuality(92), "fgsm", 0.2, seed=1)
    assert row.attack == "fgsm" and row.parameter == 0.2 and row.transform == "jpeg92"
    assert row.auc == pytest.approx(auc(curve))
    assert 0.0 <= row.auc <= 1.0 and 0.0 <= row.tpr <= 1.0 and 0.0 <= row.fpr <= 1.0
    assert row.mean_ms >= 0.0
    again, _ = evaluate_detector(model, blobs_test, fgsm_records, JpegQuality(92), "fgsm", 0.2, seed=1)
    assert (again.auc, again.tau, again.tpr, again.fpr) == (row.auc, row.tau, row.tpr, row.fpr)


def test_evaluate_kde_row(model, blobs, blobs_test, fgsm_records):
    kde = kde_fit(model, blobs, 0.5)
    row, curve = evaluate_kde(kde, model, blobs_test, fgsm_records, "fgsm", 0.2)
    assert row.transform == "kde"
    assert row.auc == pytest.approx(auc(curve))


def test_pooled_transform_rows_are_seeded(model, blobs_test, fgsm_records):
    first, _ = evaluate_detector(model, blobs_test, fgsm_records, DEFAULT_POOL, "fgsm", 0.2, seed=5)
    again, _ = evaluate_detector(model, blobs_test, fgsm_records, DEFAULT_POOL, "fgsm", 0.2, seed=5)
    assert first.transform.startswith("pool:jpeg75,jpeg92,jpeg98,median3")
    assert first.auc == again.auc and first.tau == again.tau
    assert 0.0 <= first.auc <= 1.0


def test_noise_without_noise_is_chance(model, blobs_test):
    report = noise_robustness_eval(model, DetectorConfig(), blobs_test, sigma=0.0, seed=0)
    assert report.auc == pytest.approx(0.5)
    assert report.accuracy_drop == 0.0
    assert report.positives == report.negatives


def test_noise_report(model, blobs_test):
    report = noise_robustness_eval(model, DetectorConfig(), blobs_test, sigma=0.2, seed=0)
    assert 0.0 <= report.auc <= 1.0
    assert report.positives == int(round(report.clean_accuracy * len(blobs_test)))


def test_calibrate_noise_sigma(model, blobs_test):
    grid = (0.3, 0.1, 0.2)
    assert calibrate_noise_sigma(model, blobs_test, target_drop=2.0, grid=grid) == 0.3
    assert calibrate_noise_sigma(model, blobs_test, target_drop=-1.0, grid=grid) == 0.1


def test_detector_state_is_a_few_fields():
    for config in (DetectorConfig(), DetectorConfig(transform=DEFAULT_POOL, tau=0.25), DetectorConfig(tau=np.inf)):
        size = detector_state_bytes(config)
        assert size == len(json.dumps(detector_state(config), sort_keys=True))
        assert 0 < size < 200
    assert detector_state_bytes(DetectorConfig(transform=DEFAULT_POOL)) > detector_state_bytes(DetectorConfig())


def test_benchmark(tmp_path, model, blobs, blobs_test):
    path = save_kde(kde_fit(model, blobs, 0.5), tmp_path / "kde.bin")
    report = benchmark(model, DetectorConfig(), blobs_test, kde_path=path)
    assert report.images == len(blobs_test)
    assert report.mean_seconds > 0 and report.median_seconds > 0
    assert report.vg_state_bytes == detector_state_bytes(DetectorConfig())
    assert report.kde_state_bytes > 90 * 8 * 8 > 10 * report.vg_state_bytes
    assert benchmark(model, DetectorConfig(), blobs_test).kde_state_bytes is None


def test_latency_scaling():
    points = latency_scaling(shapes=((4, 4, 1), (8, 8, 3)), images=2, hidden_dims=(4,))
    assert [p.pixels for p in points] == [16, 192]
    assert all(p.mean_seconds > 0 for p in points)


def test_csv_writers(tmp_path, model, blobs_test, fgsm_records):
    row, curve = evaluate_detector(model, blobs_test, fgsm_records, JpegQuality(92), "fgsm", 0.2)
    write_results_csv([row], tmp_path / "results.csv")
    write_roc_csv(curve, tmp_path / "roc.csv")
    with open(tmp_path / "results.csv") as f:
        results = list(csv.reader(f))
    assert results[0] == ["attack", "parameter", "transform", "auc", "tau", "tpr", "fpr", "mean_ms"]
    assert results[1][:3] == ["fgsm", "0.2", "jpeg92"]
    with open(tmp_path / "roc.csv") as f:
        roc = list(csv.reader(f))
    assert roc[0] == ["fpr", "tpr", "tau"] and len(roc) == len(curve) + 1
    assert roc[1] == ["0", "0", "inf"] and roc[-1] == ["1", "1", "-inf"]
