"""
KDE baseline detector for VisionGuard comparisons.

Class-conditional Gaussian kernel density over last-hidden-layer embeddings of
the training set. An input is scored by the log-density of its embedding under
the training embeddings of the class the network predicts; low likelihood means
adversarial.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp, softmax

from . import classifier as clf
from .classifier import Mlp
from .errors import BadMagicError, FitError, IntegrityError, InvalidArgumentError, InvalidInputError, TruncatedFileError

if TYPE_CHECKING:
    from .dataset_io import Dataset

__all__ = [
    'KdeModel', 'DEFAULT_BANDWIDTH_GRID', 'kde_fit', 'log_density', 'log_density_and_grad', 'kde_score',
    'kde_score_batch', 'kde_detect', 'select_bandwidth', 'save_kde', 'load_kde', 'kde_storage_bytes',
]

logger = logging.getLogger(__name__)

DEFAULT_BANDWIDTH_GRID = (0.1, 0.5, 1.0, 2.0, 5.0)
KDE_MAGIC = b"VGKDE1"


@dataclass(frozen=True)
class KdeModel:
    embeddings: Tuple[np.ndarray, ...]
    bandwidth: float
    model_checksum: str = ""

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise InvalidArgumentError(f"bandwidth must be positive, got {self.bandwidth}")
        arrays = []
        for c, emb in enumerate(self.embeddings):
            emb = np.array(emb, dtype=np.float64)
            if emb.ndim != 2 or emb.shape[0] == 0:
                raise FitError(f"class {c} has no embeddings", class_index=c)
            emb.setflags(write=False)
            arrays.append(emb)
        if len({a.shape[1] for a in arrays}) > 1:
            raise InvalidArgumentError("all classes must share one embedding dimension")
        object.__setattr__(self, "embeddings", tuple(arrays))

    @property
    def num_classes(self) -> int:
        return len(self.embeddings)

    @property
    def dim(self) -> int:
        return self.embeddings[0].shape[1]

    @property
    def class_sizes(self) -> Tuple[int, ...]:
        return tuple(e.shape[0] for e in self.embeddings)

    @property
    def payload_bytes(self) -> int:
        return sum(e.size for e in self.embeddings) * 8


def kde_fit(model: Mlp, dataset: "Dataset", bandwidth: float) -> KdeModel:
    """Store training embeddings grouped by true label."""
    embeddings = clf.embed_batch(model, dataset.images) if len(dataset) else np.zeros((0, model.embedding_dim))
    groups = []
    for c in range(model.num_classes):
        members = embeddings[dataset.labels == c]
        if members.shape[0] == 0:
            raise FitError(f"class {c} has no training samples", class_index=c)
        groups.append(members)
    kde = KdeModel(tuple(groups), bandwidth, clf.checksum(model))
    logger.info("KDE fitted on %d embeddings (dim %d), %d bytes of embeddings",
                sum(kde.class_sizes), kde.dim, kde.payload_bytes)
    return kde


def _log_density_rows(points: np.ndarray, stored: np.ndarray, bandwidth: float) -> np.ndarray:
    """Gaussian-kernel log-density of each row of ``points`` under ``stored``."""
    sq = cdist(points, stored, metric="sqeuclidean")
    dim = stored.shape[1]
    norm = -0.5 * dim * np.log(2.0 * np.pi * bandwidth ** 2) - np.log(stored.shape[0])
    return logsumexp(-sq / (2.0 * bandwidth ** 2), axis=1) + norm


def log_density(kde: KdeModel, cls: int, embedding: np.ndarray) -> float:
    if not 0 <= cls < kde.num_classes:
        raise InvalidArgumentError(f"class {cls} outside [0, {kde.num_classes})")
    point = np.asarray(embedding, dtype=np.float64).reshape(1, -1)
    if point.shape[1] != kde.dim:
        raise InvalidInputError(f"embedding has dimension {point.shape[1]}, KDE expects {kde.dim}")
    return float(_log_density_rows(point, kde.embeddings[cls], kde.bandwidth)[0])


def log_density_and_grad(kde: KdeModel, cls: int, embedding: np.ndarray) -> Tuple[float, np.ndarray]:
    """Log-density and its gradient w.r.t. the embedding."""
    value = log_density(kde, cls, embedding)
    stored = kde.embeddings[cls]
    point = np.asarray(embedding, dtype=np.float64).reshape(-1)
    sq = np.sum((stored - point) ** 2, axis=1)
    weights = softmax(-sq / (2.0 * kde.bandwidth ** 2))
    grad = weights @ (stored - point) / kde.bandwidth ** 2
    return value, grad


def kde_score(kde: KdeModel, model: Mlp, x) -> float:
    """Log-likelihood of x's embedding under its predicted class; higher is more legitimate."""
    cls = int(np.argmax(clf.forward(model, x)))
    return log_density(kde, cls, clf.penultimate_embedding(model, x))


def kde_score_batch(kde: KdeModel, model: Mlp, images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        return np.zeros(0)
    predicted = clf.predict(model, images)
    embeddings = clf.embed_batch(model, images)
    scores = np.empty(len(images))
    for cls in np.unique(predicted):
        rows = predicted == cls
        scores[rows] = _log_density_rows(embeddings[rows], kde.embeddings[int(cls)], kde.bandwidth)
    return scores


def kde_detect(kde: KdeModel, model: Mlp, x, tau: float) -> int:
    """1 (adversarial) iff the log-likelihood is below tau."""
    return int(kde_score(kde, model, x) < tau)


def select_bandwidth(model: Mlp, train: "Dataset", validation: "Dataset",
                     grid: Sequence[float] = DEFAULT_BANDWIDTH_GRID) -> float:
    """Bandwidth maximising mean held-out log-likelihood under the true class."""
    if len(validation) == 0:
        raise InvalidInputError("bandwidth selection needs validation data")
    base = kde_fit(model, train, grid[0])
    embeddings = clf.embed_batch(model, validation.images)
    best_h, best_ll = grid[0], -np.inf
    for h in grid:
        total = 0.0
        for cls in np.unique(validation.labels):
            rows = validation.labels == cls
            total += float(np.sum(_log_density_rows(embeddings[rows], base.embeddings[int(cls)], h)))
        mean_ll = total / len(validation)
        logger.debug("bandwidth %.3g: mean held-out log-likelihood %.4f", h, mean_ll)
        if mean_ll > best_ll:
            best_h, best_ll = h, mean_ll
    logger.info("selected KDE bandwidth %.3g (mean held-out log-likelihood %.4f)", best_h, best_ll)
    return float(best_h)


def _header_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_kde(kde: KdeModel, path: Union[str, Path]) -> Path:
    """Binary embedding matrices (little-endian float64) plus a JSON header."""
    path = Path(path)
    header = {
        "bandwidth": kde.bandwidth,
        "class_sizes": list(kde.class_sizes),
        "dim": kde.dim,
        "model_checksum": kde.model_checksum,
    }
    parts = [KDE_MAGIC, struct.pack("<II", kde.num_classes, kde.dim)]
    parts += [np.ascontiguousarray(e, dtype="<f8").tobytes() for e in kde.embeddings]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(parts))
        _header_path(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise IOError(f"Failed to write KDE store at {path}: {e}") from e
    return path


def load_kde(path: Union[str, Path], expected_checksum: Optional[str] = None) -> KdeModel:
    path = Path(path)
    try:
        data = path.read_bytes()
        header = json.loads(_header_path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IOError(f"Failed to read KDE store at {path}: {e}") from e
    if not data.startswith(KDE_MAGIC):
        raise BadMagicError(f"{path} is not a VGKDE1 store")
    if expected_checksum is not None and header.get("model_checksum") != expected_checksum:
        raise IntegrityError(f"{path} was fitted on a different model")
    pos = len(KDE_MAGIC)
    num_classes, dim = struct.unpack_from("<II", data, pos)
    pos += 8
    groups = []
    for size in header["class_sizes"][:num_classes]:
        count = size * dim
        if len(data) < pos + 8 * count:
            raise TruncatedFileError(f"{path}: truncated embeddings")
        groups.append(np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(size, dim))
        pos += 8 * count
    return KdeModel(tuple(groups), float(header["bandwidth"]), header.get("model_checksum", ""))


def kde_storage_bytes(path: Union[str, Path]) -> int:
    """On-disk footprint of a saved store: payload plus header."""
    path = Path(path)
    return path.stat().st_size + _header_path(path).stat().st_size
