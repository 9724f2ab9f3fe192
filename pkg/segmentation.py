import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from config import SegmentationParams
from errors import DimensionMismatch, InvalidGeometry, NoLimbusFound, NoPupilFound
from imaging import GrayImage, PixelPoint, bilinear_sample_many, require_pipeline_frame

logger = logging.getLogger(__name__)

DEFAULT_PARAMS = SegmentationParams()


@dataclass(frozen=True)
class Circle:
    center: PixelPoint
    radius: float

    def __post_init__(self):
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ValueError(f"circle radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class IrisGeometry:
    pupil: Circle
    limbus: Circle
    frame_width: int
    frame_height: int

    def validate(self) -> "IrisGeometry":
        if self.pupil.radius >= self.limbus.radius:
            raise InvalidGeometry(
                f"pupil radius {self.pupil.radius:.2f} is not inside limbus radius {self.limbus.radius:.2f}"
            )
        offset = self.pupil.center.distance(self.limbus.center)
        if offset > 0.5 * self.limbus.radius:
            raise InvalidGeometry(f"pupil and limbus centres are {offset:.2f} px apart")
        for circle in (self.pupil, self.limbus):
            c = circle.center
            if not (0 <= c.x <= self.frame_width - 1 and 0 <= c.y <= self.frame_height - 1):
                raise InvalidGeometry(f"circle centre ({c.x:.1f}, {c.y:.1f}) lies outside the frame")
        return self


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """bits[row, col] is True for the iris class."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)


def _pixel_grid(width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width]
    return xs.astype(np.float64), ys.astype(np.float64)


def annulus_bits(pupil: Circle, limbus: Circle, width: int, height: int) -> np.ndarray:
    xs, ys = _pixel_grid(width, height)
    d_pupil = np.hypot(xs - pupil.center.x, ys - pupil.center.y)
    d_limbus = np.hypot(xs - limbus.center.x, ys - limbus.center.y)
    return (d_limbus <= limbus.radius) & (d_pupil > pupil.radius)


def geometry_to_mask(geom: IrisGeometry) -> BinaryMask:
    return BinaryMask(annulus_bits(geom.pupil, geom.limbus, geom.frame_width, geom.frame_height))


def dice_score(pred: BinaryMask, truth: BinaryMask) -> float:
    if pred.bits.shape != truth.bits.shape:
        raise DimensionMismatch(f"mask shapes differ: {pred.bits.shape} vs {truth.bits.shape}")
    total = pred.area + truth.area
    if total == 0:
        return 1.0
    overlap = int(np.count_nonzero(pred.bits & truth.bits))
    return 2.0 * overlap / total


def _refine_pupil_radius(img: GrayImage, cx: float, cy: float, r0: float, params: SegmentationParams) -> float:
    """One pass of radial edge search: strongest dark-to-bright step along each ray."""
    angles = np.linspace(0.0, 2.0 * np.pi, params.edge_rays, endpoint=False)
    steps = np.arange(0.5 * r0, 1.5 * r0 + 1e-9, 0.25)
    xs = cx + steps[None, :] * np.cos(angles)[:, None]
    ys = cy + steps[None, :] * np.sin(angles)[:, None]
    values, inside = bilinear_sample_many(img, xs, ys)
    usable = inside.all(axis=1)
    if not usable.any():
        return r0
    gradient = np.diff(values[usable], axis=1)
    edges = steps[np.argmax(gradient, axis=1)] + 0.125
    refined = float(np.median(edges))
    if abs(refined - r0) > 0.25 * r0:
        logger.debug(f"Edge refinement {refined:.2f} disagrees with area radius {r0:.2f}, keeping area radius")
        return r0
    return refined


def detect_pupil(img: GrayImage, cfg: Optional[SegmentationParams] = None) -> Circle:
    cfg = cfg or DEFAULT_PARAMS
    require_pipeline_frame(img)
    dark = img.pixels < cfg.pupil_threshold
    labels, count = ndimage.label(dark)
    if count == 0:
        raise NoPupilFound(f"no pixel darker than {cfg.pupil_threshold}")
    areas = ndimage.sum_labels(dark, labels, index=np.arange(1, count + 1))
    best = int(np.argmax(areas)) + 1
    area = float(areas[best - 1])
    if area < cfg.min_pupil_area:
        raise NoPupilFound(
            f"largest dark component has {area:.0f} px, below {cfg.min_pupil_area}",
            {"area": area},
        )
    cy, cx = ndimage.center_of_mass(labels == best)
    r0 = math.sqrt(area / math.pi)
    radius = _refine_pupil_radius(img, float(cx), float(cy), r0, cfg)
    return Circle(PixelPoint(float(cx), float(cy)), radius)


def _radial_contrast(
    img: GrayImage,
    cxs: np.ndarray,
    cys: np.ndarray,
    radii: np.ndarray,
    cfg: SegmentationParams,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Smoothed radial derivative of the mean circle intensity for every
    candidate centre. Returns (edge positions, contrast[centre, position]).
    """
    angles = np.linspace(0.0, 2.0 * np.pi, cfg.limbus_angles, endpoint=False)
    cos, sin = np.cos(angles), np.sin(angles)
    xs = cxs[:, None, None] + radii[None, :, None] * cos[None, None, :]
    ys = cys[:, None, None] + radii[None, :, None] * sin[None, None, :]
    values, inside = bilinear_sample_many(img, xs, ys)
    visible = inside.sum(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(
            visible >= cfg.min_visible_fraction * cfg.limbus_angles,
            (values * inside).sum(axis=2) / np.maximum(visible, 1),
            np.nan,
        )
    derivative = np.diff(means, axis=1)
    # 3-tap boxcar over radius
    smoothed = (derivative[:, :-2] + derivative[:, 1:-1] + derivative[:, 2:]) / 3.0
    positions = radii[1:-2] + 0.5
    return positions, smoothed


def detect_limbus(img: GrayImage, pupil: Circle, cfg: Optional[SegmentationParams] = None) -> Circle:
    cfg = cfg or DEFAULT_PARAMS
    require_pipeline_frame(img)
    px, py = pupil.center.x, pupil.center.y
    low = max(1, int(math.floor(cfg.rmin_factor * pupil.radius)) - 1)
    high = int(math.ceil(cfg.rmax_factor * pupil.radius)) + 2
    radii = np.arange(low, high + 1, dtype=np.float64)

    # coarse: radius sweep at the pupil centre
    positions, contrast = _radial_contrast(img, np.array([px]), np.array([py]), radii, cfg)
    if np.all(np.isnan(contrast)):
        raise NoLimbusFound("no limbus candidate circle is sufficiently inside the frame")
    coarse = float(positions[int(np.nanargmax(contrast[0]))])

    # fine: centre grid around the pupil centre, narrow radius band
    offsets = np.arange(-cfg.center_search_px, cfg.center_search_px + 1, dtype=np.float64)
    dx, dy = np.meshgrid(offsets, offsets)
    cxs, cys = px + dx.ravel(), py + dy.ravel()
    band = np.arange(math.floor(coarse) - 5, math.floor(coarse) + 7, dtype=np.float64)
    band = band[band >= 1]
    positions, contrast = _radial_contrast(img, cxs, cys, band, cfg)
    if np.all(np.isnan(contrast)):
        raise NoLimbusFound("limbus band left the frame during the centre search")
    flat = int(np.nanargmax(contrast))
    ci, ri = np.unravel_index(flat, contrast.shape)
    best = float(contrast[ci, ri])
    if best < cfg.min_limbus_contrast:
        raise NoLimbusFound(
            f"strongest radial contrast {best:.2f} is below {cfg.min_limbus_contrast}",
            {"contrast": best},
        )
    return Circle(PixelPoint(float(cxs[ci]), float(cys[ci])), float(positions[ri]))


def segment(img: GrayImage, cfg: Optional[SegmentationParams] = None) -> IrisGeometry:
    pupil = detect_pupil(img, cfg)
    limbus = detect_limbus(img, pupil, cfg)
    return IrisGeometry(pupil, limbus, img.width, img.height).validate()
