"""
Image codec module for VisionGuard.

Lossy transforms applied before re-classification: a JPEG-style round trip
(level shift, 8x8 block DCT-II, quality-scaled quantization, inverse DCT) and a
median filter, plus the Gaussian-noise corruption used for robustness checks.

Images are float64 numpy arrays of shape (height, width, channels) with values
in [0, 1]; channels is 1 (grayscale) or 3 (RGB). Flattening is row-major with
channels interleaved, i.e. plain ``img.reshape(-1)``.
"""
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

from .errors import InvalidArgumentError, InvalidInputError, FormatError

__all__ = [
    'JpegQuality', 'Median', 'RandomPool', 'TransformSpec', 'DEFAULT_POOL',
    'as_image', 'quant_tables', 'block_dct', 'block_idct', 'jpeg_round_trip', 'median_filter',
    'add_gaussian_noise', 'resolve_transform', 'apply_transform', 'parse_transform',
    'format_transform', 'mse', 'psnr', 'write_pnm', 'read_pnm',
]

logger = logging.getLogger(__name__)

BLOCK = 8

# ITU-T T.81 Annex K, tables K.1 and K.2
LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMINANCE_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)

# T.871 full-range conversion
_RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCBCR_TO_RGB = np.array([
    [1.0, 0.0, 1.402],
    [1.0, -0.344136, -0.714136],
    [1.0, 1.772, 0.0],
])
_CHROMA_OFFSET = np.array([0.0, 128.0, 128.0])


@dataclass(frozen=True)
class JpegQuality:
    q: int

    def __post_init__(self):
        if not isinstance(self.q, (int, np.integer)) or not 1 <= self.q <= 100:
            raise InvalidArgumentError(f"JPEG quality must be an integer in [1, 100], got {self.q!r}")


@dataclass(frozen=True)
class Median:
    k: int

    def __post_init__(self):
        if not isinstance(self.k, (int, np.integer)) or self.k < 3 or self.k % 2 == 0:
            raise InvalidArgumentError(f"median kernel must be an odd integer >= 3, got {self.k!r}")


@dataclass(frozen=True)
class RandomPool:
    """Transform drawn uniformly from ``specs`` at detection time."""

    specs: Tuple[Union[JpegQuality, Median], ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        if not self.specs:
            raise InvalidArgumentError("RandomPool must contain at least one transform")
        for spec in self.specs:
            if not isinstance(spec, (JpegQuality, Median)):
                raise InvalidArgumentError(f"RandomPool members must be concrete transforms, got {spec!r}")


TransformSpec = Union[JpegQuality, Median, RandomPool]

DEFAULT_POOL = RandomPool((JpegQuality(75), JpegQuality(92), JpegQuality(98), Median(3)))


def as_image(img) -> np.ndarray:
    """Validate and normalise an image to a float64 (H, W, C) array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise InvalidInputError(f"image must have shape (height, width, channels), got {arr.shape}")
    height, width, channels = arr.shape
    if height < 1 or width < 1:
        raise InvalidInputError(f"image must be at least 1x1, got {height}x{width}")
    if channels not in (1, 3):
        raise InvalidInputError(f"image must have 1 or 3 channels, got {channels}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidInputError("image values must lie in [0, 1]")
    return arr


def quant_tables(q: int) -> Tuple[np.ndarray, np.ndarray]:
    """Luminance and chrominance tables scaled to quality ``q``."""
    JpegQuality(q)
    scale = 5000 // q if q < 50 else 200 - 2 * q
    tables = []
    for base in (LUMINANCE_TABLE, CHROMINANCE_TABLE):
        tables.append(np.clip(np.floor((base * scale + 50) / 100), 1, 255))
    return tables[0], tables[1]


def _to_blocks(plane: np.ndarray) -> np.ndarray:
    """Edge-pad a 2-D plane to multiples of 8 and view it as (rows, cols, 8, 8)."""
    height, width = plane.shape
    pad_h = -height % BLOCK
    pad_w = -width % BLOCK
    padded = np.pad(plane, ((0, pad_h), (0, pad_w)), mode="edge")
    rows, cols = padded.shape[0] // BLOCK, padded.shape[1] // BLOCK
    return padded.reshape(rows, BLOCK, cols, BLOCK).transpose(0, 2, 1, 3)


def _from_blocks(blocks: np.ndarray, height: int, width: int) -> np.ndarray:
    rows, cols = blocks.shape[:2]
    plane = blocks.transpose(0, 2, 1, 3).reshape(rows * BLOCK, cols * BLOCK)
    return plane[:height, :width]


def block_dct(blocks: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II over the last two axes."""
    return dctn(blocks, type=2, norm="ortho", axes=(-2, -1))


def block_idct(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`block_dct`."""
    return idctn(coeffs, type=2, norm="ortho", axes=(-2, -1))


def _quantize_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    height, width = plane.shape
    coeffs = block_dct(_to_blocks(plane - 128.0))
    restored = block_idct(np.round(coeffs / table) * table) + 128.0
    return _from_blocks(restored, height, width)


def jpeg_round_trip(img, q: int) -> np.ndarray:
    """Compress and decompress ``img`` at quality ``q`` (entropy coding omitted)."""
    img = as_image(img)
    luma, chroma = quant_tables(q)
    pixels = np.round(img * 255.0)
    if img.shape[2] == 1:
        out = _quantize_plane(pixels[:, :, 0], luma)[:, :, None]
    else:
        ycc = pixels @ _RGB_TO_YCBCR.T + _CHROMA_OFFSET
        planes = [_quantize_plane(ycc[:, :, 0], luma)]
        planes += [_quantize_plane(ycc[:, :, c], chroma) for c in (1, 2)]
        out = (np.stack(planes, axis=-1) - _CHROMA_OFFSET) @ _YCBCR_TO_RGB.T
    return np.clip(np.round(out), 0, 255) / 255.0


def median_filter(img, k: int) -> np.ndarray:
    """Per-channel k x k median with replicate borders."""
    Median(k)
    img = as_image(img)
    return ndimage.median_filter(img, size=(k, k, 1), mode="nearest")


def add_gaussian_noise(img, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise and clamp to [0, 1]."""
    if sigma < 0:
        raise InvalidArgumentError(f"sigma must be non-negative, got {sigma}")
    img = as_image(img)
    if sigma == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)


def resolve_transform(spec: TransformSpec, seed: Optional[int] = None) -> Union[JpegQuality, Median]:
    """Turn a RandomPool into one of its members; concrete specs pass through."""
    if isinstance(spec, RandomPool):
        rng = np.random.default_rng(spec.seed if seed is None else seed)
        chosen = spec.specs[int(rng.integers(len(spec.specs)))]
        logger.debug("resolved pool transform to %s", format_transform(chosen))
        return chosen
    if isinstance(spec, (JpegQuality, Median)):
        return spec
    raise InvalidArgumentError(f"unknown transform {spec!r}")


def apply_transform(img, spec: TransformSpec, seed: Optional[int] = None) -> np.ndarray:
    concrete = resolve_transform(spec, seed)
    if isinstance(concrete, JpegQuality):
        return jpeg_round_trip(img, concrete.q)
    return median_filter(img, concrete.k)


_ATOM = re.compile(r"^(jpeg|median):?(\d+)$")


def _parse_atom(text: str) -> Union[JpegQuality, Median]:
    match = _ATOM.match(text.strip().lower())
    if not match:
        raise InvalidArgumentError(f"cannot parse transform {text!r} (expected e.g. jpeg:92 or median:3)")
    kind, value = match.group(1), int(match.group(2))
    return JpegQuality(value) if kind == "jpeg" else Median(value)


def parse_transform(text: str) -> TransformSpec:
    """Parse ``jpeg:92``, ``median3`` or ``pool:jpeg75,jpeg92[@seed]``."""
    text = text.strip()
    if text.lower().startswith("pool:"):
        body = text[5:]
        seed = 0
        if "@" in body:
            body, seed_text = body.rsplit("@", 1)
            try:
                seed = int(seed_text)
            except ValueError as e:
                raise InvalidArgumentError(f"bad pool seed in {text!r}") from e
        members = [part for part in body.split(",") if part.strip()]
        return RandomPool(tuple(_parse_atom(part) for part in members), seed=seed)
    return _parse_atom(text)


def format_transform(spec: TransformSpec) -> str:
    if isinstance(spec, JpegQuality):
        return f"jpeg{spec.q}"
    if isinstance(spec, Median):
        return f"median{spec.k}"
    return "pool:" + ",".join(format_transform(s) for s in spec.specs) + f"@{spec.seed}"


def mse(a, b) -> float:
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; inf when identical."""
    err = mse(a, b)
    if err == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / err))


def write_pnm(img, path: Union[str, Path]) -> None:
    """Dump an image as binary PGM (P5) or PPM (P6), maxval 255."""
    img = as_image(img)
    height, width, channels = img.shape
    magic = b"P5" if channels == 1 else b"P6"
    payload = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).tobytes()
    try:
        with open(path, "wb") as f:
            f.write(magic + f"\n{width} {height}\n255\n".encode("ascii") + payload)
    except OSError as e:
        raise IOError(f"Failed to write image at {path}: {e}") from e


def read_pnm(path: Union[str, Path]) -> np.ndarray:
    """Read a binary PGM/PPM written by :func:`write_pnm` (maxval <= 255)."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IOError(f"Failed to read image at {path}: {e}") from e
    # header: magic, width, height, maxval separated by whitespace, comments allowed
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"truncated PNM header in {path}")
        tokens.append(data[start:pos])
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path} is not a binary PGM/PPM file")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError(f"16-bit PNM is not supported ({path})")
    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    if len(data) - pos < count:
        raise FormatError(f"truncated PNM payload in {path}")
    raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=pos)
    return raw.reshape(height, width, channels).astype(np.float64) / maxval

