import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from errors import DegenerateTexture, InvalidGeometry, IoFailure, MalformedHeader, TruncatedPayload
from imaging import GrayImage, bilinear_sample_many
from segmentation import IrisGeometry, annulus_bits

logger = logging.getLogger(__name__)

TEXTURE_MAGIC = b"PTEX"
DEFAULT_RADIAL_RES = 64
DEFAULT_ANGULAR_RES = 512


@dataclass(frozen=True, eq=False)
class PolarTexture:
    """
    Rubber-sheet grid: row i is normalized radius i/(radial_res-1),
    column j is angle 2*pi*j/angular_res.
    """

    intensities: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        intensities = np.array(self.intensities, dtype=np.float64, copy=True)
        valid = np.array(self.valid, dtype=bool, copy=True)
        if intensities.ndim != 2 or intensities.shape != valid.shape:
            raise ValueError(f"texture grid {intensities.shape} and validity {valid.shape} must be equal 2D shapes")
        if intensities.shape[0] < 2:
            raise ValueError("a texture needs at least two radial samples")
        intensities.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "intensities", intensities)
        object.__setattr__(self, "valid", valid)

    @property
    def radial_res(self) -> int:
        return self.intensities.shape[0]

    @property
    def angular_res(self) -> int:
        return self.intensities.shape[1]

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())

    def valid_stats(self):
        values = self.intensities[self.valid]
        return float(values.mean()), float(values.std())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PolarTexture)
            and np.array_equal(self.intensities, other.intensities)
            and np.array_equal(self.valid, other.valid)
        )


@dataclass(frozen=True)
class SwapResult:
    image: GrayImage
    written: int
    annulus: int

    @property
    def fill_ratio(self) -> float:
        return self.written / self.annulus if self.annulus else 1.0


def sample_points(geom: IrisGeometry, radial_res: int, angular_res: int):
    """Homogeneous rubber sheet: (1 - r)*P(theta) + r*L(theta)."""
    theta = 2.0 * np.pi * np.arange(angular_res) / angular_res
    rhat = np.arange(radial_res) / (radial_res - 1)
    cos, sin = np.cos(theta), np.sin(theta)
    p, l = geom.pupil, geom.limbus
    px = p.center.x + p.radius * cos
    py = p.center.y + p.radius * sin
    lx = l.center.x + l.radius * cos
    ly = l.center.y + l.radius * sin
    xs = (1.0 - rhat)[:, None] * px[None, :] + rhat[:, None] * lx[None, :]
    ys = (1.0 - rhat)[:, None] * py[None, :] + rhat[:, None] * ly[None, :]
    return xs, ys


def unwrap(
    img: GrayImage,
    geom: IrisGeometry,
    radial_res: int = DEFAULT_RADIAL_RES,
    angular_res: int = DEFAULT_ANGULAR_RES,
) -> PolarTexture:
    geom.validate()
    if (img.width, img.height) != (geom.frame_width, geom.frame_height):
        raise InvalidGeometry(
            f"geometry is for {geom.frame_width}x{geom.frame_height}, frame is {img.width}x{img.height}"
        )
    xs, ys = sample_points(geom, radial_res, angular_res)
    values, inside = bilinear_sample_many(img, xs, ys)

    # a cell is usable only when all four source pixels are iris pixels
    annulus = annulus_bits(geom.pupil, geom.limbus, img.width, img.height)
    x0 = np.clip(np.floor(xs), 0, img.width - 1).astype(np.intp)
    y0 = np.clip(np.floor(ys), 0, img.height - 1).astype(np.intp)
    x1 = np.minimum(x0 + 1, img.width - 1)
    y1 = np.minimum(y0 + 1, img.height - 1)
    in_annulus = annulus[y0, x0] & annulus[y0, x1] & annulus[y1, x0] & annulus[y1, x1]
    return PolarTexture(values, inside & in_annulus)


def _limbus_distance(geom: IrisGeometry, ux: np.ndarray, uy: np.ndarray) -> np.ndarray:
    """Distance from the pupil centre to the limbus circle along unit rays (ux, uy)."""
    ox = geom.pupil.center.x - geom.limbus.center.x
    oy = geom.pupil.center.y - geom.limbus.center.y
    b = ux * ox + uy * oy
    disc = b * b - (ox * ox + oy * oy) + geom.limbus.radius ** 2
    return -b + np.sqrt(np.maximum(disc, 0.0))


def polar_coordinates(geom: IrisGeometry, xs: np.ndarray, ys: np.ndarray):
    """(rhat, theta) of pixels relative to the geometry, measured along rays from the pupil centre."""
    dx = xs - geom.pupil.center.x
    dy = ys - geom.pupil.center.y
    d = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), 2.0 * np.pi)
    safe = np.where(d > 0, d, 1.0)
    d_limbus = _limbus_distance(geom, dx / safe, dy / safe)
    span = np.maximum(d_limbus - geom.pupil.radius, 1e-9)
    rhat = np.clip((d - geom.pupil.radius) / span, 0.0, 1.0)
    return rhat, theta


def sample_texture(tex: PolarTexture, rhat: np.ndarray, theta: np.ndarray):
    """Bilinear lookup with angular wraparound. Returns (values, usable)."""
    rows = rhat * (tex.radial_res - 1)
    cols = theta / (2.0 * np.pi) * tex.angular_res
    r0 = np.minimum(np.floor(rows).astype(np.intp), tex.radial_res - 2)
    fr = rows - r0
    cf = np.floor(cols)
    fc = cols - cf
    c0 = cf.astype(np.intp) % tex.angular_res
    c1 = (c0 + 1) % tex.angular_res
    grid, ok = tex.intensities, tex.valid
    top = grid[r0, c0] * (1.0 - fc) + grid[r0, c1] * fc
    bottom = grid[r0 + 1, c0] * (1.0 - fc) + grid[r0 + 1, c1] * fc
    values = top * (1.0 - fr) + bottom * fr
    usable = ok[r0, c0] & ok[r0, c1] & ok[r0 + 1, c0] & ok[r0 + 1, c1]
    return values, usable


def match_intensity(victim: PolarTexture, target_mean: float, target_std: float) -> PolarTexture:
    values = victim.intensities[victim.valid]
    if values.size < 2 or float(values.std()) == 0.0:
        raise DegenerateTexture("texture has fewer than two valid cells or zero variance")
    mean, std = float(values.mean()), float(values.std())
    remapped = (victim.intensities - mean) / std * target_std + target_mean
    out = np.where(victim.valid, np.clip(remapped, 0.0, 255.0), victim.intensities)
    return PolarTexture(out, victim.valid)


def swap_iris(
    attacker: GrayImage,
    geom: IrisGeometry,
    victim: PolarTexture,
    match: bool = False,
) -> SwapResult:
    """
    Write the victim texture into the attacker's iris annulus through the
    inverse rubber sheet. Pixels outside the annulus are never touched;
    annulus pixels whose victim cells are invalid keep the attacker value.
    """
    geom.validate()
    if (attacker.width, attacker.height) != (geom.frame_width, geom.frame_height):
        raise InvalidGeometry("geometry does not belong to the attacker frame")
    if match:
        mean, std = unwrap(attacker, geom, victim.radial_res, victim.angular_res).valid_stats()
        victim = match_intensity(victim, mean, std)

    annulus = annulus_bits(geom.pupil, geom.limbus, attacker.width, attacker.height)
    rows, cols = np.nonzero(annulus)
    rhat, theta = polar_coordinates(geom, cols.astype(np.float64), rows.astype(np.float64))
    values, usable = sample_texture(victim, rhat, theta)

    out = np.array(attacker.pixels, copy=True)
    out[rows[usable], cols[usable]] = np.clip(np.rint(values[usable]), 0, 255).astype(np.uint8)
    result = SwapResult(GrayImage(out), int(usable.sum()), int(rows.size))
    if result.fill_ratio < 1.0:
        logger.debug(f"Swap filled {result.fill_ratio:.3f} of the annulus, rest kept from the attacker")
    return result


def save_texture(tex: PolarTexture, path: Union[str, Path]) -> None:
    header = TEXTURE_MAGIC + np.array([tex.radial_res, tex.angular_res], dtype="<u4").tobytes()
    body = tex.intensities.astype("<f4").tobytes() + np.packbits(tex.valid.ravel()).tobytes()
    try:
        Path(path).write_bytes(header + body)
    except OSError as ex:
        raise IoFailure(f"cannot write texture {path}: {ex}", {"path": str(path)})


def load_texture(path: Union[str, Path]) -> PolarTexture:
    try:
        data = Path(path).read_bytes()
    except OSError as ex:
        raise IoFailure(f"cannot read texture {path}: {ex}", {"path": str(path)})
    if data[:4] != TEXTURE_MAGIC or len(data) < 12:
        raise MalformedHeader(f"{path} is not a polar texture file")
    radial_res, angular_res = (int(v) for v in np.frombuffer(data[4:12], dtype="<u4"))
    cells = radial_res * angular_res
    n_float = 4 * cells
    n_bits = (cells + 7) // 8
    if len(data) < 12 + n_float + n_bits:
        raise TruncatedPayload(f"{path} is shorter than its {radial_res}x{angular_res} header declares")
    intensities = np.frombuffer(data[12:12 + n_float], dtype="<f4").reshape(radial_res, angular_res)
    bits = np.unpackbits(np.frombuffer(data[12 + n_float:12 + n_float + n_bits], dtype=np.uint8))[:cells]
    return PolarTexture(intensities.astype(np.float64), bits.reshape(radial_res, angular_res).astype(bool))
