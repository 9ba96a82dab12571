"""
Dataset I/O module for VisionGuard.

MNIST IDX parsing, seeded synthetic datasets, and persistence of model
checkpoints and adversarial-set archives.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .classifier import Mlp, checksum
from .errors import (
    BadMagicError, CountMismatchError, IntegrityError, InvalidArgumentError, InvalidInputError,
    TruncatedFileError,
)

if TYPE_CHECKING:
    from .attacks import AttackRecord

__all__ = [
    'Dataset', 'IDX_IMAGES_MAGIC', 'IDX_LABELS_MAGIC', 'load_idx', 'write_idx', 'load_mnist_split',
    'synthetic_dataset', 'split_dataset', 'subset', 'save_checkpoint', 'load_checkpoint',
    'sidecar_path', 'AdversarialArchive', 'save_archive', 'load_archive',
]

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CHECKPOINT_MAGIC = b"VGMLP1"
ARCHIVE_MAGIC = b"VGADV1"
ARCHIVE_MANIFEST = "manifest.json"
ARCHIVE_PAYLOAD = "images.bin"

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Dataset:
    """Images (N, H, W, C) in [0, 1] with integer labels below num_classes."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim == 3:
            images = images[..., None]
        labels = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if images.ndim != 4:
            raise InvalidInputError(f"images must have shape (N, H, W, C), got {images.shape}")
        if len(images) != len(labels):
            raise InvalidInputError(f"{len(images)} images but {len(labels)} labels")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise InvalidInputError("pixel values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InvalidInputError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def _read_exact(f, size: int, path: PathLike) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise TruncatedFileError(f"{path}: expected {size} bytes, found {len(data)}")
    return data


def _read_idx(path: PathLike, expected_magic: int) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            (magic,) = struct.unpack(">I", _read_exact(f, 4, path))
            if magic != expected_magic:
                raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
            ndim = magic & 0xFF
            dims = struct.unpack(f">{ndim}I", _read_exact(f, 4 * ndim, path))
            count = int(np.prod(dims))
            payload = _read_exact(f, count, path)
    except OSError as e:
        raise IOError(f"Failed to read IDX file at {path}: {e}") from e
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path: PathLike, labels_path: PathLike, name: Optional[str] = None,
             num_classes: int = 10) -> Dataset:
    """Parse an IDX image/label pair; pixel bytes are scaled by 1/255."""
    raw_images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    raw_labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise CountMismatchError(
            f"{images_path} holds {raw_images.shape[0]} images but {labels_path} holds {raw_labels.shape[0]} labels"
        )
    if raw_labels.size and raw_labels.max() >= num_classes:
        raise InvalidInputError(f"{labels_path}: label {raw_labels.max()} outside [0, {num_classes})")
    images = raw_images.astype(np.float64)[..., None] / 255.0
    logger.debug("loaded %d images of %s from %s", len(images), images.shape[1:], images_path)
    return Dataset(images, raw_labels, num_classes, name or Path(images_path).name)


def write_idx(dataset: Dataset, images_path: PathLike, labels_path: PathLike) -> None:
    """Write a grayscale dataset as an IDX pair (pixels rounded to bytes)."""
    if dataset.images.shape[-1] != 1:
        raise InvalidInputError("IDX export supports single-channel images only")
    n, height, width, _ = dataset.images.shape
    pixels = np.clip(np.round(dataset.images[..., 0] * 255.0), 0, 255).astype(np.uint8)
    try:
        with open(images_path, "wb") as f:
            f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, height, width) + pixels.tobytes())
        with open(labels_path, "wb") as f:
            f.write(struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())
    except OSError as e:
        raise IOError(f"Failed to write IDX files at {images_path}: {e}") from e


_MNIST_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist_split(directory: PathLike, split: str) -> Dataset:
    """Load ``train`` or ``test`` from a directory holding the official file names."""
    if split not in _MNIST_NAMES:
        raise InvalidArgumentError(f"split must be one of {sorted(_MNIST_NAMES)}, got {split!r}")
    directory = Path(directory)
    images_name, labels_name = _MNIST_NAMES[split]
    return load_idx(directory / images_name, directory / labels_name, name=f"mnist-{split}")


def synthetic_dataset(n_per_class: int, num_classes: int, shape: Sequence[int], separation: float,
                      seed: int, noise: float = 0.1) -> Dataset:
    """Gaussian blobs whose class means are ``separation`` apart (Euclidean).

    Class c raises a disjoint block of m = dims // num_classes coordinates by
    a = separation / sqrt(2 m) above a 0.3 baseline, so every pair of means is
    exactly ``separation`` apart. Samples are clamped to [0, 1].
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        shape = shape + (1,)
    if n_per_class < 1 or num_classes < 1 or len(shape) != 3 or min(shape) < 1:
        raise InvalidArgumentError("n_per_class, num_classes and shape must be positive")
    if separation < 0 or noise < 0:
        raise InvalidArgumentError("separation and noise must be non-negative")
    dims = int(np.prod(shape))
    block = dims // num_classes
    if block == 0 or (separation > 0 and separation / np.sqrt(2 * block) > 0.4):
        raise InvalidArgumentError(
            f"{dims} dimensions cannot hold {num_classes} classes {separation} apart inside [0, 1]"
        )
    offset = separation / np.sqrt(2 * block) if separation > 0 else 0.0
    means = np.full((num_classes, dims), 0.3)
    for c in range(num_classes):
        means[c, c * block:(c + 1) * block] += offset
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    samples = means[labels] + rng.normal(0.0, noise, size=(len(labels), dims))
    order = rng.permutation(len(labels))
    images = np.clip(samples[order], 0.0, 1.0).reshape((len(labels),) + shape)
    return Dataset(images, labels[order], num_classes, name=f"synthetic-{num_classes}x{n_per_class}")


def subset(dataset: Dataset, indices: Sequence[int]) -> Dataset:
    idx = np.asarray(indices, dtype=np.int64)
    return Dataset(dataset.images[idx], dataset.labels[idx], dataset.num_classes, dataset.name)


def split_dataset(dataset: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Seeded random split; the first part holds round(fraction * N) examples."""
    if not 0.0 < fraction < 1.0:
        raise InvalidArgumentError(f"fraction must lie in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(round(fraction * len(dataset)))
    return subset(dataset, order[:cut]), subset(dataset, order[cut:])


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _dump_json(payload: Dict[str, Any]) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def save_checkpoint(model: Mlp, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Write the VGMLP1 binary plus a JSON sidecar with training metadata.

    Layout (little-endian): magic, uint32 dim count, uint32 dims, then for each
    layer the float64 weight matrix (row-major, in x out) followed by its bias.
    """
    path = Path(path)
    meta = dict(metadata or {})
    meta["checksum"] = checksum(model)
    meta["layer_dims"] = list(model.layer_dims)
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(model.layer_dims))]
    parts.append(struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims))
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(parts))
        sidecar_path(path).write_text(_dump_json(meta))
    except OSError as e:
        raise IOError(f"Failed to write checkpoint at {path}: {e}") from e
    return path


def load_checkpoint(path: PathLike) -> Tuple[Mlp, Dict[str, Any]]:
    """Inverse of :func:`save_checkpoint`; verifies the sidecar checksum when present."""
    path = Path(path)
    try:
        data = path.read_bytes()
        sidecar = sidecar_path(path)
        meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    except (OSError, json.JSONDecodeError) as e:
        raise IOError(f"Failed to read checkpoint at {path}: {e}") from e
    if not data.startswith(CHECKPOINT_MAGIC):
        raise BadMagicError(f"{path} is not a VGMLP1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    if len(data) < pos + 4:
        raise TruncatedFileError(f"{path}: truncated header")
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + 4 * count:
        raise TruncatedFileError(f"{path}: truncated layer dims")
    dims = struct.unpack_from(f"<{count}I", data, pos)
    pos += 4 * count
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        need = 8 * (fan_in * fan_out + fan_out)
        if len(data) < pos + need:
            raise TruncatedFileError(f"{path}: truncated parameters")
        w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=pos).reshape(fan_in, fan_out)
        pos += 8 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=pos)
        pos += 8 * fan_out
        weights.append(w)
        biases.append(b)
    if pos != len(data):
        raise InvalidInputError(f"{path}: {len(data) - pos} trailing bytes after parameters")
    model = Mlp(tuple(dims), tuple(weights), tuple(biases))
    expected = meta.get("checksum")
    if expected is not None and expected != checksum(model):
        raise IntegrityError(f"{path}: parameters do not match the checksum recorded in the sidecar")
    return model, meta


@dataclass
class AdversarialArchive:
    records: List["AttackRecord"]
    summaries: List[Dict[str, Any]]
    model_checksum: str
    dataset_name: str
    dataset_size: int


def save_archive(directory: PathLike, records: Sequence["AttackRecord"], model_checksum: str,
                 dataset_name: str, dataset_size: int,
                 summaries: Optional[Sequence[Dict[str, Any]]] = None) -> Path:
    """Write ``manifest.json`` and the ``images.bin`` payload into ``directory``.

    Payload layout (little-endian): magic VGADV1, uint32 record count, then per
    record uint32 height, width, channels followed by the float64 pixels.
    """
    directory = Path(directory)
    parts = [ARCHIVE_MAGIC, struct.pack("<I", len(records))]
    entries = []
    for record in records:
        image = np.ascontiguousarray(record.adversarial, dtype="<f8")
        parts.append(struct.pack("<III", *image.shape))
        parts.append(image.tobytes())
        entries.append({
            "index": int(record.index),
            "attacked": bool(record.attacked),
            "success": bool(record.success),
            "seconds": float(record.seconds),
            "config": record.config,
            "error": record.error,
        })
    manifest = {
        "model_checksum": model_checksum,
        "dataset": {"name": dataset_name, "size": int(dataset_size)},
        "summaries": list(summaries or []),
        "records": entries,
    }
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / ARCHIVE_PAYLOAD).write_bytes(b"".join(parts))
        (directory / ARCHIVE_MANIFEST).write_text(_dump_json(manifest))
    except OSError as e:
        raise IOError(f"Failed to write archive at {directory}: {e}") from e
    return directory


def load_archive(directory: PathLike, expected_checksum: Optional[str] = None) -> AdversarialArchive:
    """Read an archive; rejects it when ``expected_checksum`` names a different model."""
    from .attacks import AttackRecord

    directory = Path(directory)
    try:
        manifest = json.loads((directory / ARCHIVE_MANIFEST).read_text())
        data = (directory / ARCHIVE_PAYLOAD).read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise IOError(f"Failed to read archive at {directory}: {e}") from e
    if expected_checksum is not None and manifest.get("model_checksum") != expected_checksum:
        raise IntegrityError(
            f"{directory} was generated against model {manifest.get('model_checksum')}, not {expected_checksum}"
        )
    if not data.startswith(ARCHIVE_MAGIC):
        raise BadMagicError(f"{directory / ARCHIVE_PAYLOAD} is not a VGADV1 payload")
    pos = len(ARCHIVE_MAGIC)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    entries = manifest.get("records", [])
    if count != len(entries):
        raise CountMismatchError(f"{directory}: payload holds {count} images, manifest lists {len(entries)}")
    records = []
    for entry in entries:
        if len(data) < pos + 12:
            raise TruncatedFileError(f"{directory}: truncated payload")
        shape = struct.unpack_from("<III", data, pos)
        pos += 12
        size = int(np.prod(shape))
        if len(data) < pos + 8 * size:
            raise TruncatedFileError(f"{directory}: truncated payload")
        image = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        records.append(AttackRecord(
            index=entry["index"], adversarial=image, attacked=entry["attacked"], success=entry["success"],
            seconds=entry["seconds"], config=entry["config"], error=entry.get("error"),
        ))
    dataset = manifest.get("dataset", {})
    return AdversarialArchive(
        records=records,
        summaries=manifest.get("summaries", []),
        model_checksum=manifest.get("model_checksum", ""),
        dataset_name=dataset.get("name", ""),
        dataset_size=int(dataset.get("size", 0)),
    )
