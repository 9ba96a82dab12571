"""
Detector module for VisionGuard.

Feed x to the classifier, feed a lossily transformed x' to the classifier,
and flag x as adversarial when J(x, x') = min(KL(g(x) || g(x')), KL(g(x') || g(x)))
reaches the threshold tau. The classifier is only queried, never altered.
"""
import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import classifier as clf
from .classifier import Mlp
from .errors import FormatError, InvalidArgumentError, InvalidInputError
from .image_codec import (
    JpegQuality, Median, RandomPool, TransformSpec, apply_transform, format_transform, parse_transform,
    resolve_transform,
)

__all__ = [
    'DEFAULT_PROB_FLOOR', 'DetectorConfig', 'DetectionResult', 'kl_divergence', 'symmetric_min_kl',
    'vg_score', 'vg_detect', 'vg_detect_randomized', 'score_batch', 'transform_score_stats',
    'write_detection_report', 'detection_lines', 'encode_tau', 'decode_tau', 'detector_state',
    'save_threshold', 'load_threshold',
]

logger = logging.getLogger(__name__)

DEFAULT_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DetectorConfig:
    """Transform, nat-scale threshold and KL smoothing floor; holds no dataset-derived state."""

    transform: TransformSpec = JpegQuality(92)
    tau: float = 0.0
    prob_floor: float = DEFAULT_PROB_FLOOR

    def __post_init__(self):
        if not self.tau >= 0:
            raise InvalidArgumentError(f"tau must be non-negative, got {self.tau}")
        if not 0 < self.prob_floor <= 1e-6:
            raise InvalidArgumentError(f"prob_floor must lie in (0, 1e-6], got {self.prob_floor}")
        if not isinstance(self.transform, (JpegQuality, Median, RandomPool)):
            raise InvalidArgumentError(f"unknown transform {self.transform!r}")


@dataclass(frozen=True)
class DetectionResult:
    score: float
    verdict: int
    transform: Union[JpegQuality, Median]
    probs: np.ndarray
    probs_transformed: np.ndarray
    prediction: int
    seconds: float = 0.0


def _smooth(p: np.ndarray, floor: float) -> np.ndarray:
    p = np.maximum(np.asarray(p, dtype=np.float64), floor)
    return p / p.sum(axis=-1, keepdims=True)


def kl_divergence(p, q, prob_floor: float = DEFAULT_PROB_FLOOR) -> float:
    """D_KL(p || q) in nats after flooring both arguments at prob_floor and renormalising."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise InvalidInputError(f"probability vectors must have equal length, got {p.shape} and {q.shape}")
    ps, qs = _smooth(p, prob_floor), _smooth(q, prob_floor)
    return float(max(np.sum(ps * np.log(ps / qs)), 0.0))


def symmetric_min_kl(p, q, prob_floor: float = DEFAULT_PROB_FLOOR) -> float:
    """J = min of the two KL directions."""
    return min(kl_divergence(p, q, prob_floor), kl_divergence(q, p, prob_floor))


def _batch_scores(P: np.ndarray, Q: np.ndarray, prob_floor: float) -> np.ndarray:
    ps, qs = _smooth(P, prob_floor), _smooth(Q, prob_floor)
    log_ratio = np.log(ps / qs)
    forward = np.maximum(np.sum(ps * log_ratio, axis=1), 0.0)
    backward = np.maximum(np.sum(-qs * log_ratio, axis=1), 0.0)
    return np.minimum(forward, backward)


def vg_score(model: Mlp, x, transform: TransformSpec, seed: Optional[int] = None,
             prob_floor: float = DEFAULT_PROB_FLOOR) -> Tuple[float, np.ndarray]:
    """Return (J(x, x'), x') for the resolved transform."""
    x = np.asarray(x, dtype=np.float64)
    transformed = apply_transform(x, transform, seed)
    score = symmetric_min_kl(clf.forward(model, x), clf.forward(model, transformed), prob_floor)
    return score, transformed


def _detect(model: Mlp, x, concrete: Union[JpegQuality, Median], tau: float, prob_floor: float) -> DetectionResult:
    start = time.perf_counter()
    x = np.asarray(x, dtype=np.float64)
    probs = clf.forward(model, x)
    transformed = apply_transform(x, concrete)
    probs_transformed = clf.forward(model, transformed)
    score = symmetric_min_kl(probs, probs_transformed, prob_floor)
    return DetectionResult(
        score=score,
        verdict=int(score >= tau),
        transform=concrete,
        probs=probs,
        probs_transformed=probs_transformed,
        prediction=int(np.argmax(probs)),
        seconds=time.perf_counter() - start,
    )


def vg_detect(model: Mlp, x, config: DetectorConfig, seed: Optional[int] = None) -> DetectionResult:
    """Verdict 1 iff J(x, x') >= tau."""
    return _detect(model, x, resolve_transform(config.transform, seed), config.tau, config.prob_floor)


def vg_detect_randomized(model: Mlp, x, pool: Union[RandomPool, Sequence[Union[JpegQuality, Median]]],
                         tau: float, seed: int, prob_floor: float = DEFAULT_PROB_FLOOR) -> DetectionResult:
    """Draw one transform uniformly from the pool with ``seed``, then detect."""
    if not isinstance(pool, RandomPool):
        if not pool:
            raise InvalidArgumentError("randomized detection needs a non-empty pool")
        pool = RandomPool(tuple(pool), seed=seed)
    if not tau >= 0:
        raise InvalidArgumentError(f"tau must be non-negative, got {tau}")
    return _detect(model, x, resolve_transform(pool, seed), tau, prob_floor)


def score_batch(model: Mlp, images, transform: TransformSpec, seed: Optional[int] = None,
                prob_floor: float = DEFAULT_PROB_FLOOR) -> np.ndarray:
    """J for every image; a RandomPool is resolved per image with seed + index."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        return np.zeros(0)
    base = (transform.seed if isinstance(transform, RandomPool) else 0) if seed is None else seed
    transformed = np.stack([
        apply_transform(img, transform, base + i if isinstance(transform, RandomPool) else None)
        for i, img in enumerate(images)
    ])
    return _batch_scores(clf.predict_proba(model, images), clf.predict_proba(model, transformed), prob_floor)


def transform_score_stats(model: Mlp, images, transforms: Sequence[TransformSpec], seed: Optional[int] = None,
                          prob_floor: float = DEFAULT_PROB_FLOOR) -> Dict[str, Tuple[float, float]]:
    """Mean and variance of J over ``images`` for each transform."""
    stats = {}
    for spec in transforms:
        scores = score_batch(model, images, spec, seed if isinstance(spec, RandomPool) else None, prob_floor)
        stats[format_transform(spec)] = (float(np.mean(scores)), float(np.var(scores)))
        logger.debug("%s: mean J %.4f, var %.4f", format_transform(spec), *stats[format_transform(spec)])
    return stats


REPORT_COLUMNS = ["image_id", "score", "tau", "verdict", "transform", "milliseconds"]


def write_detection_report(rows: Sequence[Tuple[str, DetectionResult]], tau: float,
                           path: Union[str, Path]) -> Path:
    """One CSV line per image: id, J, tau, verdict, transform, milliseconds."""
    path = Path(path)
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(REPORT_COLUMNS)
            for image_id, result in rows:
                writer.writerow([
                    image_id, f"{result.score:.10g}", f"{tau:.10g}", result.verdict,
                    format_transform(result.transform), f"{result.seconds * 1000.0:.3f}",
                ])
    except OSError as e:
        raise IOError(f"Failed to write detection report at {path}: {e}") from e
    return path


def detection_lines(rows: Sequence[Tuple[str, DetectionResult]], tau: float) -> List[str]:
    return [
        f"{image_id},{r.score:.10g},{tau:.10g},{r.verdict},{format_transform(r.transform)},{r.seconds * 1000.0:.3f}"
        for image_id, r in rows
    ]


def encode_tau(tau: float) -> Union[float, str]:
    """JSON-safe tau: the +inf sentinel becomes the string "inf"."""
    return "inf" if tau == np.inf else float(tau)


def decode_tau(value: Any) -> float:
    if isinstance(value, str):
        if value.strip().lower() not in ("inf", "+inf", "infinity"):
            raise InvalidArgumentError(f"tau must be a number or \"inf\", got {value!r}")
        return np.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidArgumentError(f"tau must be a number or \"inf\", got {value!r}")
    return float(value)


def detector_state(config: DetectorConfig) -> Dict[str, Any]:
    """Everything a deployed detector needs besides the classifier."""
    return {
        "transform": format_transform(config.transform),
        "tau": encode_tau(config.tau),
        "prob_floor": config.prob_floor,
    }


def save_threshold(config: DetectorConfig, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write the calibrated detector as strict JSON (no NaN or Infinity literals)."""
    path = Path(path)
    payload = {**(extra or {}), **detector_state(config)}
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")
    except OSError as e:
        raise IOError(f"Failed to write threshold at {path}: {e}") from e
    return path


def load_threshold(path: Union[str, Path]) -> DetectorConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(payload, dict) or "transform" not in payload or "tau" not in payload:
        raise FormatError(f"{path}: expected an object with transform and tau")
    try:
        return DetectorConfig(
            transform=parse_transform(str(payload["transform"])),
            tau=decode_tau(payload["tau"]),
            prob_floor=float(payload.get("prob_floor", DEFAULT_PROB_FLOOR)),
        )
    except (InvalidArgumentError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: {e}") from e
