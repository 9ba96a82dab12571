"""
Tests for the consistency detector: KL scoring, verdicts, pools and reports.
"""
import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src import classifier as clf
from src.detector import (
    DetectorConfig, decode_tau, detection_lines, detector_state, encode_tau, kl_divergence, load_threshold,
    save_threshold, score_batch, symmetric_min_kl, transform_score_stats, vg_detect, vg_detect_randomized, vg_score,
    write_detection_report,
)
from src.errors import FormatError, InvalidArgumentError, InvalidInputError
from src.image_codec import DEFAULT_POOL, JpegQuality, Median, RandomPool, jpeg_round_trip

probability_vectors = st.lists(st.floats(0.0, 1.0), min_size=2, max_size=8).filter(lambda v: sum(v) > 1e-3)


def test_kl_is_asymmetric():
    p, q = [0.5, 0.5], [0.9, 0.1]
    assert kl_divergence(p, q) == pytest.approx(0.5108, abs=1e-3)
    assert kl_divergence(q, p) == pytest.approx(0.3681, abs=1e-3)
    assert symmetric_min_kl(p, q) == pytest.approx(0.3681, abs=1e-3)


def test_kl_worked_example():
    p = [0.7, 0.2, 0.1]
    q = [0.4, 0.4, 0.2]
    forward = 0.7 * np.log(1.75) + 0.3 * np.log(0.5)
    backward = 0.4 * np.log(0.4 / 0.7) + 0.6 * np.log(2.0)
    assert kl_divergence(p, q) == pytest.approx(forward, abs=1e-9)
    assert kl_divergence(q, p) == pytest.approx(backward, abs=1e-9)
    assert symmetric_min_kl(p, q) == pytest.approx(0.183787, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(probability_vectors, st.data())
def test_kl_is_nonnegative_and_j_is_symmetric(raw_p, data):
    raw_q = data.draw(st.lists(st.floats(0.0, 1.0), min_size=len(raw_p), max_size=len(raw_p))
                      .filter(lambda v: sum(v) > 1e-3))
    p = np.array(raw_p) / sum(raw_p)
    q = np.array(raw_q) / sum(raw_q)
    assert kl_divergence(p, q) >= 0.0
    assert symmetric_min_kl(p, q) == symmetric_min_kl(q, p)
    assert symmetric_min_kl(p, p) == pytest.approx(0.0, abs=1e-12)


def test_zero_probabilities_stay_finite():
    assert np.isfinite(symmetric_min_kl([1.0, 0.0], [0.0, 1.0]))
    with pytest.raises(InvalidInputError):
        kl_divergence([0.5, 0.5], [1.0, 0.0, 0.0])


def test_vg_score_uses_the_transformed_image(model, blobs_test):
    x = blobs_test.images[0]
    score, transformed = vg_score(model, x, JpegQuality(75))
    np.testing.assert_array_equal(transformed, jpeg_round_trip(x, 75))
    assert score == pytest.approx(symmetric_min_kl(clf.forward(model, x), clf.forward(model, transformed)))


def test_zero_tau_flags_everything(model, blobs_test):
    config = DetectorConfig(transform=JpegQuality(92), tau=0.0)
    assert all(vg_detect(model, x, config).verdict == 1 for x in blobs_test.images[:10])


def test_verdict_is_score_against_tau(model, blobs_test):
    x = blobs_test.images[2]
    result = vg_detect(model, x, DetectorConfig(transform=Median(3)))
    assert result.transform == Median(3)
    assert result.prediction == int(np.argmax(result.probs))
    assert vg_detect(model, x, DetectorConfig(transform=Median(3), tau=result.score)).verdict == 1
    assert vg_detect(model, x, DetectorConfig(transform=Median(3), tau=result.score + 1e-6)).verdict == 0


def test_detection_leaves_the_model_untouched(model, blobs_test):
    before = clf.checksum(model)
    vg_detect(model, blobs_test.images[0], DetectorConfig())
    assert clf.checksum(model) == before


def test_score_batch_matches_single_scores(model, blobs_test):
    images = blobs_test.images[:8]
    batch = score_batch(model, images, JpegQuality(92))
    for i, x in enumerate(images):
        assert batch[i] == pytest.approx(vg_score(model, x, JpegQuality(92))[0], abs=1e-12)
    assert score_batch(model, np.zeros((0, 4, 4, 1)), JpegQuality(92)).shape == (0,)


def test_pool_scores_are_seeded_per_image(model, blobs_test):
    images = blobs_test.images[:8]
    first = score_batch(model, images, DEFAULT_POOL, seed=11)
    np.testing.assert_array_equal(first, score_batch(model, images, DEFAULT_POOL, seed=11))
    for i, x in enumerate(images):
        assert first[i] == pytest.approx(vg_score(model, x, DEFAULT_POOL, seed=11 + i)[0], abs=1e-12)


def test_randomized_detection(model, blobs_test):
    x = blobs_test.images[0]
    pool = [JpegQuality(75), Median(3)]
    a = vg_detect_randomized(model, x, pool, tau=0.0, seed=3)
    b = vg_detect_randomized(model, x, RandomPool(tuple(pool)), tau=0.0, seed=3)
    assert a.transform == b.transform and a.transform in pool
    assert a.score == b.score
    with pytest.raises(InvalidArgumentError):
        vg_detect_randomized(model, x, [], tau=0.0, seed=0)


def test_transform_stats(model, blobs_test):
    stats = transform_score_stats(model, blobs_test.images, [JpegQuality(92), Median(3)])
    assert set(stats) == {"jpeg92", "median3"}
    assert all(mean >= 0 and var >= 0 for mean, var in stats.values())
    scores = score_batch(model, blobs_test.images, Median(3))
    assert stats["median3"] == pytest.approx((scores.mean(), scores.var()))


def test_detector_config_validation():
    with pytest.raises(InvalidArgumentError):
        DetectorConfig(tau=-0.1)
    with pytest.raises(InvalidArgumentError):
        DetectorConfig(prob_floor=0.0)
    with pytest.raises(InvalidArgumentError):
        DetectorConfig(prob_floor=1e-3)
    with pytest.raises(InvalidArgumentError):
        DetectorConfig(transform="jpeg92")


def test_detection_report(tmp_path, model, blobs_test):
    rows = [(f"img{i}", vg_detect(model, blobs_test.images[i], DetectorConfig(tau=0.5))) for i in range(3)]
    path = write_detection_report(rows, 0.5, tmp_path / "detections.csv")
    with open(path) as f:
        table = list(csv.reader(f))
    assert table[0] == ["image_id", "score", "tau", "verdict", "transform", "milliseconds"]
    assert [r[0] for r in table[1:]] == ["img0", "img1", "img2"]
    assert all(r[4] == "jpeg92" for r in table[1:])
    lines = detection_lines(rows, 0.5)
    assert lines[0].split(",")[:4] == table[1][:4]


def test_threshold_file_is_strict_json_for_infinite_tau(tmp_path):
    config = DetectorConfig(transform=DEFAULT_POOL, tau=np.inf)
    path = save_threshold(config, tmp_path / "threshold.json", {"auc": 0.5})
    text = path.read_text()
    assert "Infinity" not in text and "NaN" not in text
    assert json.loads(text)["tau"] == "inf"
    assert load_threshold(path) == config


def test_threshold_round_trip(tmp_path):
    config = DetectorConfig(transform=Median(3), tau=0.0375, prob_floor=1e-9)
    path = save_threshold(config, tmp_path / "threshold.json", {"fpr": 0.1, "tpr": 0.9})
    assert load_threshold(path) == config
    payload = json.loads(path.read_text())
    assert payload["fpr"] == 0.1 and payload == {**payload, **detector_state(config)}


@pytest.mark.parametrize("content", ['{"tau": Infinity', '[1, 2]', '{"transform": "jpeg92", "tau": "huge"}',
                                     '{"transform": "blur3", "tau": 0.1}', '{"transform": "jpeg92", "tau": -1}'])
def test_bad_threshold_files(tmp_path, content):
    path = tmp_path / "threshold.json"
    path.write_text(content)
    with pytest.raises(FormatError):
        load_threshold(path)


def test_tau_encoding():
    assert encode_tau(np.inf) == "inf" and encode_tau(0.25) == 0.25
    assert decode_tau("inf") == np.inf and decode_tau(" Infinity ") == np.inf and decode_tau(2) == 2.0
    for bad in ("-inf", True, None, [0.1]):
        with pytest.raises(InvalidArgumentError):
            decode_tau(bad)
