import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from config import GaborParams, RubberSheetParams
from errors import (
    GeometryMismatch,
    InsufficientMask,
    IoFailure,
    MalformedHeader,
    TextureTooSmall,
    TruncatedPayload,
)
from imaging import GrayImage
from rubbersheet import PolarTexture, unwrap
from segmentation import IrisGeometry

logger = logging.getLogger(__name__)

TEMPLATE_MAGIC = b"ITPL"
DEFAULT_GABOR = GaborParams()


@dataclass(frozen=True, eq=False)
class IrisTemplate:
    """
    Two phase bits per (band, angular position). code[b, p] = (Re >= 0, Im >= 0);
    mask marks usable bits.
    """

    code: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        code = np.array(self.code, dtype=bool, copy=True)
        mask = np.array(self.mask, dtype=bool, copy=True)
        if code.ndim != 3 or code.shape[2] != 2 or code.shape != mask.shape:
            raise ValueError(f"code {code.shape} and mask {mask.shape} must both be (bands, positions, 2)")
        code.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "code", code)
        object.__setattr__(self, "mask", mask)

    @property
    def bands(self) -> int:
        return self.code.shape[0]

    @property
    def angular_positions(self) -> int:
        return self.code.shape[1]

    @property
    def n_bits(self) -> int:
        return self.code.size

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())

    def packed(self) -> Tuple[bytes, bytes]:
        return np.packbits(self.code.ravel()).tobytes(), np.packbits(self.mask.ravel()).tobytes()

    def complement(self) -> "IrisTemplate":
        return IrisTemplate(~self.code, self.mask)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, IrisTemplate)
            and np.array_equal(self.code, other.code)
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(frozen=True)
class Authentication:
    accepted: bool
    hd: float
    threshold: float

    @property
    def decision(self) -> str:
        return "accept" if self.accepted else "reject"

    def to_dict(self) -> dict:
        return {"hd": self.hd, "decision": self.decision, "threshold": self.threshold}


@lru_cache(maxsize=16)
def _kernel(wavelength: float, sigma_ratio: float, radial_sigma: float, truncate: float):
    sigma_a = sigma_ratio * wavelength
    half_a = int(math.ceil(truncate * sigma_a))
    half_r = int(math.ceil(truncate * radial_sigma))
    dr = np.arange(-half_r, half_r + 1, dtype=np.float64)
    dc = np.arange(-half_a, half_a + 1, dtype=np.float64)
    envelope = np.exp(-dr[:, None] ** 2 / (2 * radial_sigma ** 2) - dc[None, :] ** 2 / (2 * sigma_a ** 2))
    phase = 2.0 * np.pi * dc[None, :] / wavelength
    real = envelope * np.cos(phase)
    imag = envelope * np.sin(phase)
    # remove the DC response of the even part so constant texture gives zero
    real = real - envelope * (real.sum() / envelope.sum())
    norm = envelope.sum()
    return half_r, half_a, real / norm, imag / norm


def band_rows(radial_res: int, params: GaborParams) -> np.ndarray:
    half_r, _, _, _ = _kernel(params.wavelength, params.sigma_ratio, params.radial_sigma, params.truncate)
    usable = radial_res - 1 - 2 * half_r
    if usable < params.bands - 1:
        raise TextureTooSmall(f"{radial_res} rows cannot hold {params.bands} bands with a {2 * half_r + 1}-row filter")
    margin = half_r + min(params.band_margin, (usable - (params.bands - 1)) // 2)
    return np.round(np.linspace(margin, radial_res - 1 - margin, params.bands)).astype(np.intp)


def encode(tex: PolarTexture, params: Optional[GaborParams] = None) -> IrisTemplate:
    params = params or DEFAULT_GABOR
    half_r, half_a, real, imag = _kernel(params.wavelength, params.sigma_ratio, params.radial_sigma, params.truncate)
    if tex.angular_res < 2 * half_a + 1 or tex.angular_res < params.angular_positions:
        raise TextureTooSmall(
            f"{tex.angular_res} angular samples are fewer than the {2 * half_a + 1}-sample filter "
            f"or {params.angular_positions} positions"
        )
    rows = band_rows(tex.radial_res, params)
    cols = (np.arange(params.angular_positions) * tex.angular_res) // params.angular_positions
    taps = np.arange(-half_a, half_a + 1)
    gather = (cols[:, None] + taps[None, :]) % tex.angular_res

    re = np.zeros((params.bands, params.angular_positions))
    im = np.zeros((params.bands, params.angular_positions))
    usable = np.ones((params.bands, params.angular_positions), dtype=bool)
    for k, dr in enumerate(range(-half_r, half_r + 1)):
        patch = tex.intensities[rows + dr][:, gather]
        re += (patch * real[k]).sum(axis=-1)
        im += (patch * imag[k]).sum(axis=-1)
        usable &= tex.valid[rows + dr][:, gather].all(axis=-1)

    valid_values = tex.intensities[tex.valid]
    dynamic = float(valid_values.max() - valid_values.min()) if valid_values.size else 0.0
    floor = params.min_magnitude * max(dynamic, 1.0)
    usable &= np.hypot(re, im) >= floor

    code = np.stack([re >= 0.0, im >= 0.0], axis=-1)
    mask = np.repeat(usable[:, :, None], 2, axis=2)
    return IrisTemplate(code, mask)


def encode_frame(
    img: GrayImage,
    geom: IrisGeometry,
    sheet: Optional[RubberSheetParams] = None,
    params: Optional[GaborParams] = None,
) -> IrisTemplate:
    sheet = sheet or RubberSheetParams()
    return encode(unwrap(img, geom, sheet.radial_res, sheet.angular_res), params)


def hamming_distance(
    a: IrisTemplate,
    b: IrisTemplate,
    max_shift: int = DEFAULT_GABOR.max_shift,
    min_coverage: float = DEFAULT_GABOR.min_coverage,
) -> float:
    if a.code.shape != b.code.shape:
        raise GeometryMismatch(f"template shapes differ: {a.code.shape} vs {b.code.shape}")
    for name, tmpl in (("first", a), ("second", b)):
        if tmpl.coverage < min_coverage:
            raise InsufficientMask(f"{name} template has only {tmpl.coverage:.2%} usable bits")
    needed = min_coverage * a.n_bits
    best = None
    for shift in range(-max_shift, max_shift + 1):
        code = np.roll(b.code, shift, axis=1)
        mask = np.roll(b.mask, shift, axis=1)
        joint = a.mask & mask
        n = int(np.count_nonzero(joint))
        if n == 0 or n < needed:
            continue
        hd = np.count_nonzero((a.code ^ code) & joint) / n
        if best is None or hd < best:
            best = hd
    if best is None:
        raise InsufficientMask(f"no shift within +/-{max_shift} leaves {min_coverage:.0%} jointly usable bits")
    return float(best)


def decide(hd: float, threshold: float = DEFAULT_GABOR.threshold) -> bool:
    return hd < threshold


def authenticate(
    presented: IrisTemplate,
    enrolled: IrisTemplate,
    threshold: float = DEFAULT_GABOR.threshold,
    max_shift: int = DEFAULT_GABOR.max_shift,
) -> Authentication:
    hd = hamming_distance(presented, enrolled, max_shift)
    return Authentication(decide(hd, threshold), hd, threshold)


def compare_sequences(
    presented: Sequence[IrisTemplate],
    enrolled: Sequence[IrisTemplate],
    max_shift: int = DEFAULT_GABOR.max_shift,
) -> List[float]:
    """HD of each presented template against the enrolled template at the same position (same frame number)."""
    if len(presented) != len(enrolled):
        raise GeometryMismatch(f"{len(presented)} presented templates against {len(enrolled)} enrolled templates")
    return [hamming_distance(p, e, max_shift) for p, e in zip(presented, enrolled)]


def save_template(tmpl: IrisTemplate, path: Union[str, Path]) -> None:
    code, mask = tmpl.packed()
    header = TEMPLATE_MAGIC + np.array([tmpl.bands, tmpl.angular_positions], dtype="<u4").tobytes()
    try:
        Path(path).write_bytes(header + code + mask)
    except OSError as ex:
        raise IoFailure(f"cannot write template {path}: {ex}", {"path": str(path)})


def load_template(path: Union[str, Path]) -> IrisTemplate:
    try:
        data = Path(path).read_bytes()
    except OSError as ex:
        raise IoFailure(f"cannot read template {path}: {ex}", {"path": str(path)})
    if data[:4] != TEMPLATE_MAGIC or len(data) < 12:
        raise MalformedHeader(f"{path} is not an iris template file")
    bands, positions = (int(v) for v in np.frombuffer(data[4:12], dtype="<u4"))
    n_bits = 2 * bands * positions
    n_bytes = (n_bits + 7) // 8
    if len(data) < 12 + 2 * n_bytes:
        raise TruncatedPayload(f"{path} is shorter than its {bands}x{positions} header declares")
    raw = np.frombuffer(data[12:12 + 2 * n_bytes], dtype=np.uint8)
    code = np.unpackbits(raw[:n_bytes])[:n_bits].reshape(bands, positions, 2)
    mask = np.unpackbits(raw[n_bytes:])[:n_bits].reshape(bands, positions, 2)
    return IrisTemplate(code.astype(bool), mask.astype(bool))
