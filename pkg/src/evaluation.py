"""
Evaluation module for VisionGuard.

Turns detector scores into ROC curves, AUC values and calibrated thresholds,
following the labelling protocol: every attacked image (successful or not)
and every misclassified clean image is a positive, correctly classified clean
images are negatives. Also hosts the Gaussian-noise robustness check and the
latency / storage benchmarks.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import classifier as clf
from .attacks import CW_KINDS, attack_group_name
from .classifier import Mlp
from .detector import DetectorConfig, detector_state, score_batch, vg_detect
from .errors import DegenerateInputError, IntegrityError, InvalidArgumentError, InvalidInputError
from .image_codec import RandomPool, TransformSpec, add_gaussian_noise, format_transform
from .kde_baseline import KdeModel, kde_score_batch, kde_storage_bytes

if TYPE_CHECKING:
    from .attacks import AttackRecord
    from .dataset_io import Dataset

__all__ = [
    'Provenance', 'LabeledScores', 'RocCurve', 'ThresholdChoice', 'CalibrationReport', 'ResultRow',
    'NoiseReport', 'BenchmarkReport', 'LatencyPoint', 'build_labels', 'roc_curve', 'roc_from_arrays',
    'auc', 'select_threshold', 'choose_threshold', 'operating_point', 'calibrate_and_evaluate',
    'group_records', 'evaluate_detector', 'evaluate_kde', 'noise_robustness_eval',
    'calibrate_noise_sigma', 'detector_state_bytes', 'benchmark', 'latency_scaling',
    'write_results_csv', 'write_roc_csv', 'RESULT_COLUMNS',
]

logger = logging.getLogger(__name__)


class Provenance(str, Enum):
    CLEAN_CORRECT = "clean-correct"
    CLEAN_MISCLASSIFIED = "clean-misclassified"
    ATTACKED_SUCCESS = "attacked-success"
    ATTACKED_FAIL = "attacked-fail"

    @property
    def positive(self) -> bool:
        return self is not Provenance.CLEAN_CORRECT


@dataclass(frozen=True)
class LabeledScores:
    """Parallel arrays of score, positive label and provenance.

    ``sources`` tells where each entry's image lives: ("clean", i) is row i of
    the clean dataset, ("attack", k) is the k-th adversarial record.
    """

    scores: np.ndarray
    positive: np.ndarray
    provenance: Tuple[Provenance, ...]
    sources: Tuple[Tuple[str, int], ...]

    def __len__(self) -> int:
        return len(self.positive)

    @property
    def n_positive(self) -> int:
        return int(np.count_nonzero(self.positive))

    @property
    def n_negative(self) -> int:
        return len(self) - self.n_positive

    def with_scores(self, scores) -> "LabeledScores":
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        if scores.shape != self.positive.shape:
            raise InvalidInputError(f"expected {len(self)} scores, got {scores.size}")
        return dataclasses.replace(self, scores=scores)

    def take(self, indices) -> "LabeledScores":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledScores(
            scores=self.scores[idx],
            positive=self.positive[idx],
            provenance=tuple(self.provenance[i] for i in idx),
            sources=tuple(self.sources[i] for i in idx),
        )

    def images(self, clean: "Dataset", records: Sequence["AttackRecord"]) -> np.ndarray:
        """Stack the images in entry order, ready for scoring."""
        return np.stack([
            clean.images[i] if source == "clean" else records[i].adversarial for source, i in self.sources
        ])


def build_labels(model: Mlp, clean: "Dataset", records: Sequence["AttackRecord"]) -> LabeledScores:
    """Label skeleton (scores are NaN) for the clean set followed by every record."""
    for k, record in enumerate(records):
        if not 0 <= record.index < len(clean):
            raise IntegrityError(f"record {k} references clean image {record.index}, set has {len(clean)}")
    correct = clf.predict(model, clean.images) == clean.labels if len(clean) else np.zeros(0, dtype=bool)
    provenance: List[Provenance] = [
        Provenance.CLEAN_CORRECT if ok else Provenance.CLEAN_MISCLASSIFIED for ok in correct
    ]
    provenance += [Provenance.ATTACKED_SUCCESS if r.success else Provenance.ATTACKED_FAIL for r in records]
    sources = [("clean", i) for i in range(len(clean))] + [("attack", k) for k in range(len(records))]
    return LabeledScores(
        scores=np.full(len(provenance), np.nan),
        positive=np.array([p.positive for p in provenance], dtype=bool),
        provenance=tuple(provenance),
        sources=tuple(sources),
    )


@dataclass(frozen=True)
class RocCurve:
    """(fpr, tpr, tau) points from tau = +inf down to tau = -inf."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def __post_init__(self):
        fpr = np.asarray(self.fpr, dtype=np.float64)
        tpr = np.asarray(self.tpr, dtype=np.float64)
        thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if not (fpr.shape == tpr.shape == thresholds.shape) or fpr.ndim != 1 or fpr.size < 2:
            raise InvalidInputError("fpr, tpr and thresholds must be equal-length vectors with >= 2 points")
        if fpr[0] != 0 or tpr[0] != 0 or fpr[-1] != 1 or tpr[-1] != 1:
            raise InvalidInputError("ROC curve must start at (0, 0) and end at (1, 1)")
        if np.any(np.diff(fpr) < 0) or np.any(np.diff(tpr) < 0):
            raise InvalidInputError("ROC curve must be monotone in both fpr and tpr")
        object.__setattr__(self, "fpr", fpr)
        object.__setattr__(self, "tpr", tpr)
        object.__setattr__(self, "thresholds", thresholds)

    @property
    def auc(self) -> float:
        return auc(self)

    def __len__(self) -> int:
        return len(self.fpr)


def roc_from_arrays(scores, positive) -> RocCurve:
    """ROC under the ``score >= tau`` rule, sweeping every distinct score."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positive = np.asarray(positive, dtype=bool).reshape(-1)
    if scores.shape != positive.shape:
        raise InvalidInputError("scores and labels must have equal length")
    if np.any(np.isnan(scores)):
        raise InvalidInputError("scores contain NaN; fill them before building the ROC")
    n_pos = int(np.count_nonzero(positive))
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError(f"ROC needs both classes, got {n_pos} positives and {n_neg} negatives")
    pos_sorted = np.sort(scores[positive])
    neg_sorted = np.sort(scores[~positive])
    distinct = np.unique(scores)[::-1]
    tp = n_pos - np.searchsorted(pos_sorted, distinct, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, distinct, side="left")
    thresholds = np.concatenate([[np.inf], distinct, [-np.inf]])
    tpr = np.concatenate([[0.0], tp / n_pos, [1.0]])
    fpr = np.concatenate([[0.0], fp / n_neg, [1.0]])
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds)


def roc_curve(labeled: LabeledScores) -> RocCurve:
    return roc_from_arrays(labeled.scores, labeled.positive)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve; ties between classes count one half."""
    area = np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0)
    return float(min(max(area, 0.0), 1.0))


@dataclass(frozen=True)
class ThresholdChoice:
    tau: float
    fpr: float
    tpr: float
    distance: float


def choose_threshold(curve: RocCurve) -> ThresholdChoice:
    """Curve point closest to (0, 1); ties go to lower fpr, then lower tau."""
    distance = np.sqrt(curve.fpr ** 2 + (1.0 - curve.tpr) ** 2)
    best = int(np.lexsort((curve.thresholds, curve.fpr, distance))[0])
    return ThresholdChoice(
        tau=float(curve.thresholds[best]),
        fpr=float(curve.fpr[best]),
        tpr=float(curve.tpr[best]),
        distance=float(distance[best]),
    )


def select_threshold(curve: RocCurve) -> float:
    return choose_threshold(curve).tau


def operating_point(scores, positive, tau: float) -> Tuple[float, float]:
    """(tpr, fpr) of the rule ``score >= tau``."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    flagged = scores >= tau
    n_pos = np.count_nonzero(positive)
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("operating point needs both classes")
    return (float(np.count_nonzero(flagged & positive) / n_pos),
            float(np.count_nonzero(flagged & ~positive) / n_neg))


@dataclass(frozen=True)
class CalibrationReport:
    tau: float
    calibration_auc: float
    heldout_auc: float
    calibration_tpr: float
    calibration_fpr: float
    heldout_tpr: float
    heldout_fpr: float
    distance: float


def _stratified_split(positive: np.ndarray, seed: int, fraction: float) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    first, second = [], []
    for members in (np.flatnonzero(positive), np.flatnonzero(~positive)):
        if members.size < 2:
            raise DegenerateInputError("calibration split needs at least two positives and two negatives")
        shuffled = rng.permutation(members)
        cut = min(max(int(round(fraction * members.size)), 1), members.size - 1)
        first.append(shuffled[:cut])
        second.append(shuffled[cut:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def calibrate_and_evaluate(labeled: LabeledScores, seed: int, fraction: float = 0.5) -> CalibrationReport:
    """Pick tau on a seeded stratified half, report the operating point on the other half."""
    if not 0.0 < fraction < 1.0:
        raise InvalidArgumentError(f"fraction must lie in (0, 1), got {fraction}")
    calib_idx, held_idx = _stratified_split(labeled.positive, seed, fraction)
    calib, held = labeled.take(calib_idx), labeled.take(held_idx)
    calib_curve = roc_curve(calib)
    choice = choose_threshold(calib_curve)
    held_tpr, held_fpr = operating_point(held.scores, held.positive, choice.tau)
    return CalibrationReport(
        tau=choice.tau,
        calibration_auc=auc(calib_curve),
        heldout_auc=auc(roc_curve(held)),
        calibration_tpr=choice.tpr,
        calibration_fpr=choice.fpr,
        heldout_tpr=held_tpr,
        heldout_fpr=held_fpr,
        distance=choice.distance,
    )


RESULT_COLUMNS = ["attack", "parameter", "transform", "auc", "tau", "tpr", "fpr", "mean_ms"]


@dataclass(frozen=True)
class ResultRow:
    attack: str
    parameter: float
    transform: str
    auc: float
    tau: float
    tpr: float
    fpr: float
    mean_ms: float

    def as_list(self) -> list:
        return [self.attack, f"{self.parameter:g}", self.transform, f"{self.auc:.6f}", f"{self.tau:.10g}",
                f"{self.tpr:.6f}", f"{self.fpr:.6f}", f"{self.mean_ms:.3f}"]


def group_records(records: Sequence["AttackRecord"]) -> "OrderedDict[Tuple[str, float], List[AttackRecord]]":
    """Group records by (attack name, headline parameter), keeping first-seen order."""
    groups: "OrderedDict[Tuple[str, float], List[AttackRecord]]" = OrderedDict()
    for record in records:
        kind = record.config.get("kind", "unknown")
        parameter = record.config.get("cw_constant" if kind in CW_KINDS else "epsilon", 0.0)
        name = attack_group_name(kind, record.config.get("cw_scale", "linear"))
        groups.setdefault((name, float(parameter)), []).append(record)
    return groups


def _finish_row(labeled: LabeledScores, attack: str, parameter: float, transform: str, seconds: float,
                seed: int, fraction: float) -> Tuple[ResultRow, RocCurve]:
    curve = roc_curve(labeled)
    report = calibrate_and_evaluate(labeled, seed, fraction)
    row = ResultRow(
        attack=attack, parameter=parameter, transform=transform, auc=auc(curve), tau=report.tau,
        tpr=report.heldout_tpr, fpr=report.heldout_fpr, mean_ms=1000.0 * seconds / max(len(labeled), 1),
    )
    logger.info("%s[%g] / %s: AUC %.4f, tau %.4g (held-out TPR %.3f, FPR %.3f)",
                attack, parameter, transform, row.auc, row.tau, row.tpr, row.fpr)
    return row, curve


def evaluate_detector(model: Mlp, clean: "Dataset", records: Sequence["AttackRecord"], transform: TransformSpec,
                      attack: str, parameter: float, seed: int = 0,
                      fraction: float = 0.5) -> Tuple[ResultRow, RocCurve]:
    """VisionGuard AUC and held-out operating point for one attack group and transform."""
    labeled = build_labels(model, clean, records)
    images = labeled.images(clean, records)
    start = time.perf_counter()
    scores = score_batch(model, images, transform, seed=seed if isinstance(transform, RandomPool) else None)
    seconds = time.perf_counter() - start
    return _finish_row(labeled.with_scores(scores), attack, parameter, format_transform(transform), seconds, seed,
                       fraction)


def evaluate_kde(kde: KdeModel, model: Mlp, clean: "Dataset", records: Sequence["AttackRecord"], attack: str,
                 parameter: float, seed: int = 0, fraction: float = 0.5) -> Tuple[ResultRow, RocCurve]:
    """KDE baseline on the same protocol; scores are negated log-likelihoods (high = adversarial)."""
    labeled = build_labels(model, clean, records)
    images = labeled.images(clean, records)
    start = time.perf_counter()
    scores = -kde_score_batch(kde, model, images)
    seconds = time.perf_counter() - start
    return _finish_row(labeled.with_scores(scores), attack, parameter, "kde", seconds, seed, fraction)


@dataclass(frozen=True)
class NoiseReport:
    auc: float
    sigma: float
    clean_accuracy: float
    noisy_accuracy: float
    positives: int
    negatives: int

    @property
    def accuracy_drop(self) -> float:
        return self.clean_accuracy - self.noisy_accuracy


def _noisy_copy(dataset: "Dataset", sigma: float, seed: int) -> np.ndarray:
    return np.stack([add_gaussian_noise(img, sigma, seed + i) for i, img in enumerate(dataset.images)])


def noise_robustness_eval(model: Mlp, config: DetectorConfig, clean: "Dataset", sigma: float,
                          seed: int) -> NoiseReport:
    """Positives: clean correctly classified images; negatives: noisy correctly classified images."""
    if sigma < 0:
        raise InvalidArgumentError(f"sigma must be non-negative, got {sigma}")
    if len(clean) == 0:
        raise DegenerateInputError("noise evaluation needs a non-empty dataset")
    noisy = _noisy_copy(clean, sigma, seed)
    clean_ok = clf.predict(model, clean.images) == clean.labels
    noisy_ok = clf.predict(model, noisy) == clean.labels
    transform_seed = seed if isinstance(config.transform, RandomPool) else None
    clean_scores = score_batch(model, clean.images[clean_ok], config.transform, transform_seed, config.prob_floor)
    noisy_scores = score_batch(model, noisy[noisy_ok], config.transform, transform_seed, config.prob_floor)
    scores = np.concatenate([clean_scores, noisy_scores])
    positive = np.concatenate([np.ones(clean_scores.size, bool), np.zeros(noisy_scores.size, bool)])
    report = NoiseReport(
        auc=auc(roc_from_arrays(scores, positive)),
        sigma=sigma,
        clean_accuracy=float(np.mean(clean_ok)),
        noisy_accuracy=float(np.mean(noisy_ok)),
        positives=int(clean_scores.size),
        negatives=int(noisy_scores.size),
    )
    logger.info("noise sigma %.3g: AUC %.4f, accuracy %.4f -> %.4f", sigma, report.auc,
                report.clean_accuracy, report.noisy_accuracy)
    return report


def calibrate_noise_sigma(model: Mlp, dataset: "Dataset", target_drop: float = 0.01,
                          grid: Sequence[float] = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3), seed: int = 0) -> float:
    """Smallest sigma on the grid whose clean-accuracy drop reaches ``target_drop``."""
    if len(dataset) == 0:
        raise InvalidInputError("sigma calibration needs data")
    base = clf.accuracy(model, dataset)
    for sigma in sorted(grid):
        noisy = _noisy_copy(dataset, sigma, seed)
        drop = base - float(np.mean(clf.predict(model, noisy) == dataset.labels))
        logger.debug("sigma %.3g: accuracy drop %.4f", sigma, drop)
        if drop >= target_drop:
            return float(sigma)
    return float(max(grid))


def detector_state_bytes(config: DetectorConfig) -> int:
    """Size of the serialized detector state: transform, tau and floor, nothing fitted to data."""
    return len(json.dumps(detector_state(config), sort_keys=True).encode("utf-8"))


@dataclass(frozen=True)
class BenchmarkReport:
    images: int
    mean_seconds: float
    median_seconds: float
    vg_state_bytes: int
    kde_state_bytes: Optional[int]


def benchmark(model: Mlp, config: DetectorConfig, dataset: "Dataset",
              kde_path: Optional[Union[str, Path]] = None, seed: int = 0) -> BenchmarkReport:
    """Per-image detection latency and on-disk detector state."""
    if len(dataset) == 0:
        raise InvalidInputError("benchmark needs at least one image")
    seconds = []
    for i, img in enumerate(dataset.images):
        start = time.perf_counter()
        vg_detect(model, img, config, seed=seed + i)
        seconds.append(time.perf_counter() - start)
    return BenchmarkReport(
        images=len(dataset),
        mean_seconds=float(np.mean(seconds)),
        median_seconds=float(np.median(seconds)),
        vg_state_bytes=detector_state_bytes(config),
        kde_state_bytes=kde_storage_bytes(kde_path) if kde_path is not None else None,
    )


@dataclass(frozen=True)
class LatencyPoint:
    shape: Tuple[int, int, int]
    pixels: int
    mean_seconds: float


def latency_scaling(shapes: Sequence[Tuple[int, int, int]] = ((28, 28, 1), (224, 224, 3)),
                    config: Optional[DetectorConfig] = None, images: int = 20,
                    hidden_dims: Sequence[int] = (64, 64), seed: int = 0) -> List[LatencyPoint]:
    """Mean detection time on random models and synthetic inputs of each shape."""
    config = config or DetectorConfig()
    rng = np.random.default_rng(seed)
    points = []
    for shape in shapes:
        shape = tuple(int(s) for s in shape)
        pixels = int(np.prod(shape))
        model = clf.init_mlp((pixels,) + tuple(hidden_dims) + (10,), seed)
        batch = rng.uniform(0.0, 1.0, size=(images,) + shape)
        vg_detect(model, batch[0], config, seed=seed)
        start = time.perf_counter()
        for i, img in enumerate(batch):
            vg_detect(model, img, config, seed=seed + i)
        points.append(LatencyPoint(shape, pixels, (time.perf_counter() - start) / images))
        logger.debug("latency %s: %.6f s/image", shape, points[-1].mean_seconds)
    return points


def write_results_csv(rows: Sequence[ResultRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(RESULT_COLUMNS)
            for row in rows:
                writer.writerow(row.as_list())
    except OSError as e:
        raise IOError(f"Failed to write results at {path}: {e}") from e
    return path


def write_roc_csv(curve: RocCurve, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["fpr", "tpr", "tau"])
            for fpr, tpr, tau in zip(curve.fpr, curve.tpr, curve.thresholds):
                writer.writerow([f"{fpr:.10g}", f"{tpr:.10g}", f"{tau:.10g}"])
    except OSError as e:
        raise IOError(f"Failed to write ROC points at {path}: {e}") from e
    return path

