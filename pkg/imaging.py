import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from errors import (
    DegenerateFrame,
    IoFailure,
    MalformedHeader,
    OutOfBounds,
    TruncatedPayload,
    UnsupportedMaxval,
)

logger = logging.getLogger(__name__)

MIN_FRAME_SIDE = 32
_WHITESPACE = b" \t\r\n\v\f"


@dataclass(frozen=True)
class PixelPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite pixel point ({self.x}, {self.y})")

    def distance(self, other: "PixelPoint") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit grayscale frame, row-major, pixels[row, col]."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError(f"expected a non-empty 2D pixel grid, got shape {pixels.shape}")
        if pixels.dtype != np.uint8:
            if np.any(pixels < 0) or np.any(pixels > 255):
                raise ValueError("pixel intensities must lie in [0, 255]")
            pixels = pixels.astype(np.uint8)
        pixels = np.array(pixels, dtype=np.uint8, copy=True)
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, GrayImage) and np.array_equal(self.pixels, other.pixels)

    def __hash__(self) -> int:
        return hash((self.width, self.height, self.pixels.tobytes()))

    def to_bytes(self) -> bytes:
        return self.pixels.tobytes()


def require_pipeline_frame(img: GrayImage) -> GrayImage:
    if img.width < MIN_FRAME_SIDE or img.height < MIN_FRAME_SIDE:
        raise DegenerateFrame(
            f"frame {img.width}x{img.height} is below {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}",
            {"width": img.width, "height": img.height},
        )
    return img


def _read_header(data: bytes) -> Tuple[Tuple[int, int, int], int]:
    """Returns ((width, height, maxval), payload offset)."""
    if data[:2] != b"P5":
        raise MalformedHeader(f"expected binary PGM magic P5, found {data[:2]!r}")
    pos = 2
    tokens = []
    while len(tokens) < 3:
        if pos >= len(data):
            raise MalformedHeader("header ended before width, height and maxval")
        byte = data[pos:pos + 1]
        if byte == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        if byte in _WHITESPACE:
            pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1] not in _WHITESPACE and data[pos:pos + 1] != b"#":
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise MalformedHeader(f"header token {token!r} is not a decimal integer")
        tokens.append(int(token))
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(data) or data[pos:pos + 1] not in _WHITESPACE:
        raise MalformedHeader("missing whitespace after maxval")
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise MalformedHeader(f"non-positive dimensions {width}x{height}")
    return (width, height, maxval), pos + 1


def load_pgm(path: Union[str, Path]) -> GrayImage:
    try:
        data = Path(path).read_bytes()
    except OSError as ex:
        raise IoFailure(f"cannot read {path}: {ex}", {"path": str(path)})
    (width, height, maxval), offset = _read_header(data)
    if maxval != 255:
        raise UnsupportedMaxval(f"maxval {maxval} is not supported, only 255", {"path": str(path)})
    expected = width * height
    payload = data[offset:offset + expected]
    if len(payload) < expected:
        raise TruncatedPayload(
            f"{path} declares {width}x{height} but holds {len(payload)} of {expected} payload bytes",
            {"path": str(path), "expected": expected, "found": len(payload)},
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return GrayImage(pixels)


def encode_pgm(img: GrayImage) -> bytes:
    return f"P5\n{img.width} {img.height}\n255\n".encode("ascii") + img.to_bytes()


def save_pgm(img: GrayImage, path: Union[str, Path]) -> None:
    try:
        Path(path).write_bytes(encode_pgm(img))
    except OSError as ex:
        raise IoFailure(f"cannot write {path}: {ex}", {"path": str(path)})


def bilinear_sample_many(img: GrayImage, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized bilinear sampling. Returns (values, inside) where inside marks
    points with 0 <= x <= width-1 and 0 <= y <= height-1; values outside are 0.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = (xs >= 0.0) & (xs <= img.width - 1) & (ys >= 0.0) & (ys <= img.height - 1)
    xc = np.where(inside, xs, 0.0)
    yc = np.where(inside, ys, 0.0)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, img.width - 1)
    y1 = np.minimum(y0 + 1, img.height - 1)
    fx = xc - x0
    fy = yc - y0
    grid = img.pixels.astype(np.float64)
    top = grid[y0, x0] * (1.0 - fx) + grid[y0, x1] * fx
    bottom = grid[y1, x0] * (1.0 - fx) + grid[y1, x1] * fx
    values = top * (1.0 - fy) + bottom * fy
    return np.where(inside, values, 0.0), inside


def bilinear_sample(img: GrayImage, p: PixelPoint) -> float:
    if not (0.0 <= p.x <= img.width - 1 and 0.0 <= p.y <= img.height - 1):
        raise OutOfBounds(
            f"({p.x}, {p.y}) outside [0, {img.width - 1}] x [0, {img.height - 1}]",
            {"x": p.x, "y": p.y},
        )
    values, _ = bilinear_sample_many(img, np.array([p.x]), np.array([p.y]))
    return float(values[0])


def mask_to_image(bits: np.ndarray) -> GrayImage:
    """Ground-truth mask as PGM content: 255 = iris, 0 = background."""
    return GrayImage(np.where(np.asarray(bits, dtype=bool), 255, 0).astype(np.uint8))


def image_to_mask(img: GrayImage) -> np.ndarray:
    return img.pixels >= 128
