import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import GazeParams, Mode, ScanpathParams
from errors import (
    DegenerateDesign,
    IoFailure,
    NonMonotonicTime,
    NoValidationSamples,
    TooFewPoints,
)
from imaging import PixelPoint

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["t", "h_deg", "v_deg", "confidence"]
SCHEDULE_COLUMNS = ["h_deg", "v_deg", "onset_s", "offset_s"]
MIN_CALIBRATION_POINTS = 6


@dataclass(frozen=True)
class GazeSample:
    t: float
    h: float
    v: float
    confidence: float = 1.0


@dataclass(frozen=True, eq=False)
class GazeTrace:
    """Column-oriented gaze samples; timestamps strictly increasing."""

    t: np.ndarray
    h: np.ndarray
    v: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        columns = []
        for name in ("t", "h", "v", "confidence"):
            column = np.array(getattr(self, name), dtype=np.float64, copy=True).reshape(-1)
            column.setflags(write=False)
            columns.append(column)
            object.__setattr__(self, name, column)
        if len({c.size for c in columns}) != 1:
            raise ValueError("gaze trace columns must have equal lengths")
        if self.t.size > 1 and np.any(np.diff(self.t) <= 0):
            raise NonMonotonicTime("gaze trace timestamps are not strictly increasing")

    @classmethod
    def from_samples(cls, samples: Iterable[GazeSample]) -> "GazeTrace":
        samples = list(samples)
        return cls(
            [s.t for s in samples],
            [s.h for s in samples],
            [s.v for s in samples],
            [s.confidence for s in samples],
        )

    def __len__(self) -> int:
        return int(self.t.size)

    def __eq__(self, other) -> bool:
        return isinstance(other, GazeTrace) and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in ("t", "h", "v", "confidence")
        )

    def samples(self) -> List[GazeSample]:
        return [GazeSample(*map(float, row)) for row in zip(self.t, self.h, self.v, self.confidence)]

    def subset(self, indices: Sequence[int]) -> "GazeTrace":
        idx = np.asarray(indices, dtype=np.intp)
        return GazeTrace(self.t[idx], self.h[idx], self.v[idx], self.confidence[idx])

    @property
    def sampling_rate(self) -> float:
        if len(self) < 2:
            return 0.0
        return float((len(self) - 1) / (self.t[-1] - self.t[0]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.t, "h_deg": self.h, "v_deg": self.v, "confidence": self.confidence})

    def to_csv(self, path: Union[str, Path]) -> None:
        _write_csv(self.to_frame(), path)

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "GazeTrace":
        frame = _read_csv(path, TRACE_COLUMNS)
        return cls(frame["t"], frame["h_deg"], frame["v_deg"], frame["confidence"])


@dataclass(frozen=True)
class Target:
    h: float
    v: float
    onset: float
    offset: float

    @property
    def dwell(self) -> float:
        return self.offset - self.onset


@dataclass(frozen=True)
class TargetSchedule:
    """Calibration targets first, then validation targets, back to back in time."""

    targets: Tuple[Target, ...]
    calibration_count: int = 5

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if not 0 <= self.calibration_count <= len(self.targets):
            raise ValueError(f"calibration_count {self.calibration_count} outside 0..{len(self.targets)}")
        previous = -np.inf
        for target in self.targets:
            if target.offset <= target.onset:
                raise ValueError(f"target interval [{target.onset}, {target.offset}) is empty")
            if target.onset < previous:
                raise ValueError("target intervals overlap or are not chronological")
            previous = target.offset

    @property
    def calibration(self) -> Tuple[Target, ...]:
        return self.targets[: self.calibration_count]

    @property
    def validation(self) -> Tuple[Target, ...]:
        return self.targets[self.calibration_count:]

    @property
    def span(self) -> float:
        return self.targets[-1].offset if self.targets else 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(t.h, t.v, t.onset, t.offset) for t in self.targets],
            columns=SCHEDULE_COLUMNS,
        )

    def to_csv(self, path: Union[str, Path]) -> None:
        _write_csv(self.to_frame(), path)

    @classmethod
    def read_csv(cls, path: Union[str, Path], calibration_count: int = 5) -> "TargetSchedule":
        frame = _read_csv(path, SCHEDULE_COLUMNS)
        targets = [Target(*map(float, row)) for row in frame[SCHEDULE_COLUMNS].itertuples(index=False)]
        return cls(tuple(targets), calibration_count)


def _write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> None:
    try:
        frame.to_csv(path, index=False)
    except OSError as ex:
        raise IoFailure(f"cannot write {path}: {ex}", {"path": str(path)})


def _read_csv(path: Union[str, Path], columns: List[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as ex:
        raise IoFailure(f"cannot read {path}: {ex}", {"path": str(path)})
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise IoFailure(f"{path} lacks columns {missing}", {"path": str(path)})
    return frame


def default_schedule(
    params: Optional[ScanpathParams] = None,
    mode: Mode = "offline",
    seed: Union[int, Sequence[int]] = 0,
) -> TargetSchedule:
    """Offline dwell is fixed; online dwell is drawn per target."""
    params = params or ScanpathParams()
    rng = np.random.default_rng(seed)
    positions = list(params.calibration_targets) + list(params.validation_targets)
    targets = []
    onset = 0.0
    for h, v in positions:
        if mode == "online":
            dwell = float(rng.uniform(params.online_dwell_min_s, params.online_dwell_max_s))
        else:
            dwell = params.offline_dwell_s
        targets.append(Target(float(h), float(v), onset, onset + dwell))
        onset += dwell
    return TargetSchedule(tuple(targets), len(params.calibration_targets))


@dataclass(frozen=True, eq=False)
class CalibrationModel:
    """
    h and v as second-order polynomials in the normalized pupil centre,
    terms [1, x, y, xy, x^2, y^2].
    """

    coef_h: np.ndarray
    coef_v: np.ndarray
    center: Tuple[float, float] = (0.0, 0.0)
    scale: Tuple[float, float] = (1.0, 1.0)
    residual_rms: float = 0.0

    @classmethod
    def zero(cls) -> "CalibrationModel":
        return cls(np.zeros(6), np.zeros(6))

    def predict(self, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        design = _design(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64), self.center, self.scale)
        return design @ self.coef_h, design @ self.coef_v


def _design(xs: np.ndarray, ys: np.ndarray, center, scale) -> np.ndarray:
    x = (xs - center[0]) / scale[0]
    y = (ys - center[1]) / scale[1]
    return np.stack([np.ones_like(x), x, y, x * y, x * x, y * y], axis=-1)


def fit_calibration(
    points: Sequence[Tuple[PixelPoint, Tuple[float, float]]],
    max_condition: float = GazeParams().max_condition,
) -> CalibrationModel:
    if not points:
        raise TooFewPoints("no calibration points")
    xs = np.array([p.x for p, _ in points], dtype=np.float64)
    ys = np.array([p.y for p, _ in points], dtype=np.float64)
    targets = np.array([angle for _, angle in points], dtype=np.float64)

    affine = np.stack([np.ones_like(xs), xs, ys], axis=1)
    if np.linalg.matrix_rank(affine) < 3:
        raise DegenerateDesign("calibration pupils are collinear or coincident", {"points": len(points)})
    if len(points) < MIN_CALIBRATION_POINTS:
        raise TooFewPoints(f"{len(points)} calibration points, at least {MIN_CALIBRATION_POINTS} needed")

    center = (float(xs.mean()), float(ys.mean()))
    scale = (max(float(xs.std()), 1e-12), max(float(ys.std()), 1e-12))
    design = _design(xs, ys, center, scale)
    normal = design.T @ design
    condition = float(np.linalg.cond(normal))
    if not np.isfinite(condition) or condition > max_condition:
        raise DegenerateDesign(
            f"calibration design condition number {condition:.3g} exceeds {max_condition:.3g}",
            {"condition": condition},
        )
    coef = np.linalg.solve(normal, design.T @ targets)
    fitted = design @ coef
    residual = float(np.sqrt(np.mean(np.sum((fitted - targets) ** 2, axis=1))))
    logger.debug(f"Calibration fitted on {len(points)} points, residual RMS {residual:.4f} deg")
    return CalibrationModel(coef[:, 0], coef[:, 1], center, scale, residual)


def estimate_gaze(model: CalibrationModel, pupil: PixelPoint, t: float, confidence: float = 1.0) -> GazeSample:
    h, v = model.predict(np.array([pupil.x]), np.array([pupil.y]))
    return GazeSample(float(t), float(h[0]), float(v[0]), float(confidence))


def estimate_trace(
    model: CalibrationModel,
    times: np.ndarray,
    pupils: np.ndarray,
    confidence: Optional[np.ndarray] = None,
) -> GazeTrace:
    """pupils is an (n, 2) array of pupil centres (x, y) in pixels."""
    pupils = np.asarray(pupils, dtype=np.float64).reshape(-1, 2)
    h, v = model.predict(pupils[:, 0], pupils[:, 1])
    if confidence is None:
        confidence = np.ones(len(pupils))
    return GazeTrace(times, h, v, confidence)


def _window_mask(t: np.ndarray, target: Target, onset_trim: float) -> np.ndarray:
    return (t >= target.onset + onset_trim) & (t < target.offset)


def calibration_points(
    times: np.ndarray,
    pupils: np.ndarray,
    schedule: TargetSchedule,
    onset_trim: float = GazeParams().onset_trim_s,
) -> List[Tuple[PixelPoint, Tuple[float, float]]]:
    """Pupil centres seen while a calibration target was fixated, paired with that target."""
    times = np.asarray(times, dtype=np.float64)
    pupils = np.asarray(pupils, dtype=np.float64).reshape(-1, 2)
    points = []
    for target in schedule.calibration:
        for i in np.nonzero(_window_mask(times, target, onset_trim))[0]:
            points.append((PixelPoint(float(pupils[i, 0]), float(pupils[i, 1])), (target.h, target.v)))
    return points


def _validation_windows(trace: GazeTrace, schedule: TargetSchedule, onset_trim: float):
    usable = trace.confidence > 0
    for target in schedule.validation:
        selected = _window_mask(trace.t, target, onset_trim) & usable
        yield target, trace.h[selected], trace.v[selected]


def accuracy(trace: GazeTrace, schedule: TargetSchedule, onset_trim: float = GazeParams().onset_trim_s) -> float:
    """Mean angular offset (deg) of validation samples from their targets."""
    errors = [
        np.hypot(h - target.h, v - target.v)
        for target, h, v in _validation_windows(trace, schedule, onset_trim)
        if h.size
    ]
    if not errors:
        raise NoValidationSamples("no gaze sample falls inside a trimmed validation window")
    return float(np.concatenate(errors).mean())


def precision(trace: GazeTrace, schedule: TargetSchedule, onset_trim: float = GazeParams().onset_trim_s) -> float:
    """RMS of successive-sample distances inside each validation window, averaged over windows."""
    per_window = [
        float(np.sqrt(np.mean(np.diff(h) ** 2 + np.diff(v) ** 2)))
        for _, h, v in _validation_windows(trace, schedule, onset_trim)
        if h.size >= 2
    ]
    if not per_window:
        raise NoValidationSamples("no trimmed validation window holds two gaze samples")
    return float(np.mean(per_window))
