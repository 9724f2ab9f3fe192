import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
import pandas as pd
from scipy.signal import lfilter
from tqdm import tqdm

from config import (
    ExperimentConfig,
    FrameDropParams,
    Mode,
    ProfileParams,
    RenderParams,
    ScanpathParams,
    config_hash,
)
from errors import GazeOutOfFrame, IoFailure
from gaze import GazeTrace, TargetSchedule, default_schedule
from imaging import GrayImage, PixelPoint, save_pgm
from rubbersheet import DEFAULT_ANGULAR_RES, DEFAULT_RADIAL_RES, PolarTexture, polar_coordinates, sample_texture
from segmentation import BinaryMask, Circle, IrisGeometry, geometry_to_mask

logger = logging.getLogger(__name__)

Seed = Union[int, Sequence[int]]

# independent random streams derived from one experiment seed
PROFILE_STREAM = 1
TEXTURE_STREAM = 2
SCHEDULE_STREAM = 3
SCANPATH_STREAM = 4
FRAME_STREAM = 5
DROP_STREAM = 6
STATIC_STREAM = 7
MODE_INDEX = {"offline": 0, "online": 1}
GEOMETRY_COLUMNS = ["frame", "pupil_x", "pupil_y", "pupil_r", "limbus_x", "limbus_y", "limbus_r"]

_BASE_ANGULAR_CELLS = 12
_STREAK_CELLS = 48


def subject_seed(base_seed: int, subject_id: int) -> int:
    return int(np.random.SeedSequence([base_seed, subject_id]).generate_state(1)[0])


@dataclass(frozen=True)
class SubjectProfile:
    seed: int
    pupil_radius: float
    limbus_radius: float
    pupillometry_noise: float
    gain_px_per_deg: float
    jitter_sigma_deg: float
    jitter_tau_s: float
    octaves: int
    streak_density: float
    brightness_offset: float

    @classmethod
    def from_seed(cls, seed: int, params: Optional[ProfileParams] = None) -> "SubjectProfile":
        params = params or ProfileParams()
        rng = np.random.default_rng([seed, PROFILE_STREAM])
        return cls(
            seed=seed,
            pupil_radius=float(rng.uniform(*params.pupil_radius_range)),
            limbus_radius=float(rng.uniform(*params.limbus_radius_range)),
            pupillometry_noise=params.pupillometry_noise,
            gain_px_per_deg=params.gain_px_per_deg,
            jitter_sigma_deg=params.jitter_sigma_deg,
            jitter_tau_s=params.jitter_tau_s,
            octaves=params.octaves,
            streak_density=params.streak_density,
            brightness_offset=float(rng.uniform(-params.brightness_jitter, params.brightness_jitter)),
        )


def _periodic_value_noise(
    rng: np.random.Generator,
    radial_cells: int,
    angular_cells: int,
    radial_res: int,
    angular_res: int,
) -> np.ndarray:
    """Bilinear upsampling of a random grid; wraps around in angle."""
    grid = rng.standard_normal((radial_cells, angular_cells))
    u = np.linspace(0.0, radial_cells - 1, radial_res)
    r0 = np.minimum(np.floor(u).astype(np.intp), radial_cells - 2)
    fr = (u - r0)[:, None]
    rows = grid[r0] * (1.0 - fr) + grid[r0 + 1] * fr
    c = np.arange(angular_res) * angular_cells / angular_res
    c0 = np.floor(c).astype(np.intp)
    fc = c - c0
    c1 = (c0 + 1) % angular_cells
    return rows[:, c0] * (1.0 - fc) + rows[:, c1] * fc


def generate_subject_texture(
    seed: int,
    params: Optional[ProfileParams] = None,
    radial_res: int = DEFAULT_RADIAL_RES,
    angular_res: int = DEFAULT_ANGULAR_RES,
) -> PolarTexture:
    """Multi-octave value noise plus radial streaks, mapped into the iris intensity band."""
    params = params or ProfileParams()
    profile = SubjectProfile.from_seed(seed, params)
    rng = np.random.default_rng([seed, TEXTURE_STREAM])
    field = np.zeros((radial_res, angular_res))
    for octave in range(profile.octaves):
        field += 0.5 ** octave * _periodic_value_noise(
            rng, 2 ** (octave + 1) + 1, _BASE_ANGULAR_CELLS * 2 ** octave, radial_res, angular_res
        )
    streaks = _periodic_value_noise(rng, 2, _STREAK_CELLS, 1, angular_res)[0]
    field += 0.5 * profile.streak_density * streaks[None, :]

    low, high = params.iris_low, params.iris_high
    span = float(field.max() - field.min())
    scaled = (field - field.min()) / span if span > 0 else np.zeros_like(field)
    values = np.clip(low + scaled * (high - low) + profile.brightness_offset, 0.0, 255.0)
    return PolarTexture(values, np.ones_like(values, dtype=bool))


@dataclass(frozen=True)
class Saccade:
    onset: float
    duration: float
    amplitude: float
    peak_velocity: float


def saccade_duration(amplitude: float, params: Optional[ScanpathParams] = None) -> float:
    params = params or ScanpathParams()
    return (params.duration_slope_ms * amplitude + params.duration_intercept_ms) / 1000.0


def peak_velocity(amplitude: float, params: Optional[ScanpathParams] = None) -> float:
    params = params or ScanpathParams()
    return params.peak_velocity_max * (1.0 - math.exp(-amplitude / params.peak_velocity_scale))


def saccade_timing(amplitude: float, params: Optional[ScanpathParams] = None) -> Tuple[float, float, float]:
    """
    (duration s, fill ratio c, peak velocity). c = amplitude / (peak * duration)
    fixes the flat-top share of the velocity profile; when the main sequence
    asks for an impossible c the duration gives way.
    """
    duration = saccade_duration(amplitude, params)
    peak = peak_velocity(amplitude, params)
    fill = amplitude / (peak * duration)
    if 0.5 <= fill <= 1.0:
        return duration, fill, peak
    fill = 0.9 if fill > 1.0 else 0.5
    return amplitude / (peak * fill), fill, peak


def saccade_progress(u: np.ndarray, fill: float) -> np.ndarray:
    """
    Fraction of the amplitude covered at normalized time u for a flat-top
    raised-cosine velocity profile whose mean/peak ratio is fill.
    """
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
    taper = 2.0 * (1.0 - fill)
    if taper <= 0.0:
        return u
    half = taper / 2.0
    area = 1.0 - half

    def rise(x):
        return 0.5 * (x - taper / (2.0 * np.pi) * np.sin(2.0 * np.pi * x / taper))

    covered = np.where(
        u < half,
        rise(u),
        np.where(u <= 1.0 - half, taper / 4.0 + (u - half), area - rise(1.0 - u)),
    )
    return covered / area


def fixation_jitter(rng: np.random.Generator, n: int, sigma: float, tau: float, rate: float) -> np.ndarray:
    """Stationary Gaussian AR(1) drift, marginal std sigma, correlation time tau."""
    if n == 0 or sigma == 0.0:
        return np.zeros(n)
    rho = math.exp(-1.0 / (rate * tau))
    drive = rng.standard_normal(n) * sigma
    drive[1:] *= math.sqrt(1.0 - rho * rho)
    return lfilter([1.0], [1.0, -rho], drive)


@dataclass(frozen=True, eq=False)
class Scanpath:
    """Dense ground-truth gaze at camera rate."""

    t: np.ndarray
    h: np.ndarray
    v: np.ndarray
    saccades: Tuple[Saccade, ...] = ()

    def __len__(self) -> int:
        return int(self.t.size)

    def to_trace(self) -> GazeTrace:
        return GazeTrace(self.t, self.h, self.v, np.ones_like(self.t))


def generate_scanpath(
    schedule: TargetSchedule,
    profile: SubjectProfile,
    seed: Seed,
    params: Optional[ScanpathParams] = None,
    rate: Optional[float] = None,
) -> Scanpath:
    params = params or ScanpathParams()
    rate = rate or params.camera_rate
    rng = np.random.default_rng(seed)
    n = int(round(schedule.span * rate))
    t = np.arange(n) / rate
    position = np.zeros((n, 2))
    if not schedule.targets:
        return Scanpath(t, position[:, 0], position[:, 1])

    current = np.array([schedule.targets[0].h, schedule.targets[0].v])
    position[:] = current
    saccades: List[Saccade] = []
    for i, target in enumerate(schedule.targets):
        end = schedule.targets[i + 1].onset if i + 1 < len(schedule.targets) else np.inf
        segment = (t >= target.onset) & (t < end)
        goal = np.array([target.h, target.v])
        latency = float(rng.uniform(params.latency_min_s, params.latency_max_s))
        amplitude = float(np.hypot(*(goal - current)))
        if amplitude < params.min_saccade_deg:
            position[segment] = current
            continue
        duration, fill, peak = saccade_timing(amplitude, params)
        start = target.onset + latency
        progress = saccade_progress((t[segment] - start) / duration, fill)
        position[segment] = current + progress[:, None] * (goal - current)
        saccades.append(Saccade(start, duration, amplitude, peak))
        current = goal

    for axis in range(2):
        position[:, axis] += fixation_jitter(rng, n, profile.jitter_sigma_deg, profile.jitter_tau_s, rate)
    return Scanpath(t, position[:, 0], position[:, 1], tuple(saccades))


@dataclass(frozen=True)
class RenderedFrame:
    image: GrayImage
    geometry: IrisGeometry
    mask: BinaryMask


def render_frame(
    h: float,
    v: float,
    profile: SubjectProfile,
    texture: PolarTexture,
    noise_seed: Seed,
    params: Optional[RenderParams] = None,
    allow_clipping: bool = False,
    pupil_radius: Optional[float] = None,
) -> RenderedFrame:
    params = params or RenderParams()
    rng = np.random.default_rng(noise_seed)
    cx = params.width / 2.0 + profile.gain_px_per_deg * h
    cy = params.height / 2.0 - profile.gain_px_per_deg * v
    if not (0.0 <= cx <= params.width - 1 and 0.0 <= cy <= params.height - 1):
        raise GazeOutOfFrame(f"gaze ({h:.2f}, {v:.2f}) puts the pupil centre outside the frame", {"h": h, "v": v})
    rl = profile.limbus_radius
    if not allow_clipping and (
        cx - rl < 0 or cx + rl > params.width - 1 or cy - rl < 0 or cy + rl > params.height - 1
    ):
        raise GazeOutOfFrame(f"gaze ({h:.2f}, {v:.2f}) pushes the limbus out of the frame", {"h": h, "v": v})

    scale = 1.0 + profile.pupillometry_noise * rng.standard_normal()
    radius = pupil_radius if pupil_radius is not None else profile.pupil_radius * scale
    center = PixelPoint(cx, cy)
    geometry = IrisGeometry(Circle(center, radius), Circle(center, rl), params.width, params.height)
    mask = geometry_to_mask(geometry)

    ys, xs = np.mgrid[0:params.height, 0:params.width]
    canvas = np.full((params.height, params.width), params.sclera_level, dtype=np.float64)
    canvas[np.hypot(xs - cx, ys - cy) <= radius] = params.pupil_level
    rows, cols = np.nonzero(mask.bits)
    rhat, theta = polar_coordinates(geometry, cols.astype(np.float64), rows.astype(np.float64))
    values, _ = sample_texture(texture, rhat, theta)
    canvas[rows, cols] = values
    canvas += rng.normal(0.0, params.noise_sigma, canvas.shape)
    image = GrayImage(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))
    return RenderedFrame(image, geometry, mask)


def simulate_frame_drops(
    n_frames: int,
    camera_rate: float,
    mode: Mode,
    seed: Seed,
    params: Optional[FrameDropParams] = None,
) -> np.ndarray:
    """Kept frame indices. Online keeps every k-th frame, k bounded by the minimum output rate."""
    params = params or FrameDropParams()
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    if mode == "offline":
        return np.arange(n_frames)
    rng = np.random.default_rng(seed)
    max_factor = max(1, int(math.floor(camera_rate / params.min_rate_hz)))

    def draw() -> int:
        k = params.force_factor if params.force_factor is not None else int(round(rng.normal(params.mean_factor, params.std_factor)))
        return int(min(max(k, 1), max_factor))

    if not params.per_frame_jitter:
        return np.arange(0, n_frames, draw())
    kept = [0]
    while True:
        nxt = kept[-1] + draw()
        if nxt >= n_frames:
            break
        kept.append(nxt)
    return np.array(kept, dtype=np.intp)


def generate_static_trace(
    times: np.ndarray,
    gaze: Tuple[float, float],
    noise_deg: float,
    seed: Seed,
) -> GazeTrace:
    """Gaze of a static artefact (printout, eye patch): fixed point plus measurement noise."""
    rng = np.random.default_rng(seed)
    times = np.asarray(times, dtype=np.float64)
    h = gaze[0] + rng.normal(0.0, noise_deg, times.size)
    v = gaze[1] + rng.normal(0.0, noise_deg, times.size)
    return GazeTrace(times, h, v, np.ones_like(times))


def experiment_schedule(cfg: ExperimentConfig, mode: Mode) -> TargetSchedule:
    return default_schedule(cfg.scanpath, mode, [cfg.seed, MODE_INDEX[mode], SCHEDULE_STREAM])


class SyntheticSubject:
    """One simulated participant recorded under one mode; frames render on demand."""

    def __init__(self, cfg: ExperimentConfig, subject_id: int, mode: Mode, schedule: Optional[TargetSchedule] = None):
        self.cfg = cfg
        self.subject_id = subject_id
        self.mode = mode
        self.schedule = schedule or experiment_schedule(cfg, mode)
        self.seed = subject_seed(cfg.seed, subject_id)
        self.profile = SubjectProfile.from_seed(self.seed, cfg.profile)
        self.texture = generate_subject_texture(
            self.seed, cfg.profile, cfg.rubbersheet.radial_res, cfg.rubbersheet.angular_res
        )
        self.scanpath = generate_scanpath(
            self.schedule,
            self.profile,
            [cfg.seed, subject_id, MODE_INDEX[mode], SCANPATH_STREAM],
            cfg.scanpath,
        )

    @property
    def n_frames(self) -> int:
        return len(self.scanpath)

    @property
    def timestamps(self) -> np.ndarray:
        return self.scanpath.t

    def frame(self, index: int) -> RenderedFrame:
        return render_frame(
            float(self.scanpath.h[index]),
            float(self.scanpath.v[index]),
            self.profile,
            self.texture,
            [self.cfg.seed, self.subject_id, MODE_INDEX[self.mode], FRAME_STREAM, index],
            self.cfg.render,
        )

    def write(self, directory: Path) -> None:
        frames_dir = directory / "frames"
        try:
            frames_dir.mkdir(parents=True, exist_ok=True)
        except OSError as ex:
            raise IoFailure(f"cannot create {frames_dir}: {ex}", {"path": str(frames_dir)})
        geometry_rows = []
        for index in range(self.n_frames):
            rendered = self.frame(index)
            save_pgm(rendered.image, frames_dir / frame_name(index))
            p, l = rendered.geometry.pupil, rendered.geometry.limbus
            geometry_rows.append((index, p.center.x, p.center.y, p.radius, l.center.x, l.center.y, l.radius))
        pd.DataFrame({"frame": np.arange(self.n_frames), "t": self.timestamps}).to_csv(
            directory / "timestamps.csv", index=False
        )
        self.scanpath.to_trace().to_csv(directory / "truth_gaze.csv")
        pd.DataFrame(geometry_rows, columns=GEOMETRY_COLUMNS).to_csv(directory / "truth_geometry.csv", index=False)


def frame_name(index: int) -> str:
    return f"frame_{index:05d}.pgm"


def write_dataset(cfg: ExperimentConfig, out_dir: Union[str, Path], mode: Mode) -> Path:
    """Render every subject (victim included) of one mode into the dataset directory layout."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as ex:
        raise IoFailure(f"cannot create {out_dir}: {ex}", {"path": str(out_dir)})
    schedule = experiment_schedule(cfg, mode)
    schedule.to_csv(out_dir / "schedule.csv")
    frames = {}
    for subject_id in tqdm(range(cfg.subjects + 1), desc=f"synth {mode}", unit="subject"):
        subject = SyntheticSubject(cfg, subject_id, mode, schedule)
        subject.write(out_dir / f"subject_{subject_id}")
        frames[str(subject_id)] = subject.n_frames
    manifest = {
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "mode": mode,
        "victim_id": cfg.victim_id,
        "camera_rate": cfg.scanpath.camera_rate,
        "calibration_count": schedule.calibration_count,
        "frames": frames,
    }
    (out_dir / "manifest.json").write_bytes(orjson.dumps(manifest, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))
    logger.info(f"Wrote {len(frames)} subjects to {out_dir}")
    return out_dir
