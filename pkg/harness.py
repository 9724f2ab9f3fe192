import hashlib
import logging
import math
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import orjson
import pandas as pd
from pydantic import BaseModel
from tqdm import tqdm

from config import ExperimentConfig, Mode, config_hash
from errors import (
    ExperimentError,
    IoFailure,
    IrisSwapError,
    RecoverableError,
    TooFewSubjects,
)
from gaze import (
    GazeTrace,
    TargetSchedule,
    accuracy,
    calibration_points,
    estimate_trace,
    fit_calibration,
    precision,
)
from imaging import GrayImage, load_pgm, save_pgm
from iriscode import IrisTemplate, compare_sequences, decide, encode_frame
from liveness import (
    LABEL_NAMES,
    LABEL_VALUES,
    LstmModel,
    REAL,
    SPOOF,
    VelocityWindow,
    attack_success_rate,
    compute_velocity,
    majority_vote,
    make_windows,
    preprocess,
    save_windows,
    train,
    window_predictions,
)
from rubbersheet import PolarTexture, save_texture, swap_iris, unwrap
from segmentation import detect_pupil, segment
from synth import (
    DROP_STREAM,
    MODE_INDEX,
    STATIC_STREAM,
    SyntheticSubject,
    experiment_schedule,
    frame_name,
    generate_static_trace,
    simulate_frame_drops,
)

logger = logging.getLogger(__name__)

HD_STREAM = 11
SPLIT_STREAM = 12
TRAIN_STREAM = 13
CONDITIONS = ("irisswap", "static")
PREDICTION_COLUMNS = ["mode", "condition", "split", "subject", "label", "window_index", "probability", "predicted"]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SplitPlan:
    train: Tuple[int, ...]
    validation: Tuple[int, ...]
    test: Tuple[int, ...]
    seed: Tuple[int, ...] = ()

    def all_subjects(self) -> Set[int]:
        return set(self.train) | set(self.validation) | set(self.test)


def split_subjects(
    subject_ids: Sequence[int],
    seed,
    test_fraction: float = 0.4,
    validation_fraction: float = 0.3,
    test_count: Optional[int] = None,
) -> SplitPlan:
    """Subject-disjoint train / validation / test partition, deterministic in seed."""
    ids = sorted(set(int(s) for s in subject_ids))
    n = len(ids)
    if n < 5:
        raise TooFewSubjects(f"{n} subjects, at least 5 are needed")
    pool = n - test_count if test_count is not None else _round_half_up((1.0 - test_fraction) * n)
    pool = min(max(pool, 2), n - 1)
    n_val = min(max(_round_half_up(validation_fraction * pool), 1), pool - 1)
    order = np.random.default_rng(seed).permutation(ids)
    test = tuple(sorted(int(s) for s in order[: n - pool]))
    validation = tuple(sorted(int(s) for s in order[n - pool: n - pool + n_val]))
    train_ids = tuple(sorted(int(s) for s in order[n - pool + n_val:]))
    seed_key = tuple(int(s) for s in np.atleast_1d(seed))
    return SplitPlan(train_ids, validation, test, seed_key)


class Recording(ABC):
    """A subject's frame sequence with timestamps."""

    subject_id: int

    @property
    @abstractmethod
    def timestamps(self) -> np.ndarray:
        ...

    @abstractmethod
    def frame(self, index: int) -> GrayImage:
        ...

    @property
    def n_frames(self) -> int:
        return int(len(self.timestamps))


class DiskRecording(Recording):
    """subject_<id>/ directory with frames/ and timestamps.csv."""

    def __init__(self, directory: Union[str, Path], subject_id: Optional[int] = None):
        self.directory = Path(directory)
        stamps = self.directory / "timestamps.csv"
        try:
            table = pd.read_csv(stamps)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as ex:
            raise IoFailure(f"cannot read {stamps}: {ex}", {"path": str(stamps)})
        self._frames = table["frame"].to_numpy(dtype=np.intp)
        self._timestamps = table["t"].to_numpy(dtype=np.float64)
        if subject_id is None:
            name = self.directory.name
            subject_id = int(name.split("_", 1)[1]) if name.startswith("subject_") else 0
        self.subject_id = subject_id

    @property
    def timestamps(self) -> np.ndarray:
        return self._timestamps

    def frame(self, index: int) -> GrayImage:
        return load_pgm(self.directory / "frames" / frame_name(int(self._frames[index])))


class SyntheticRecording(Recording):
    """Renders frames on demand instead of reading them from disk."""

    def __init__(self, subject: SyntheticSubject):
        self.subject = subject
        self.subject_id = subject.subject_id

    @property
    def timestamps(self) -> np.ndarray:
        return self.subject.timestamps

    def frame(self, index: int) -> GrayImage:
        return self.subject.frame(index).image


def load_schedule(dataset_dir: Union[str, Path]) -> TargetSchedule:
    dataset_dir = Path(dataset_dir)
    calibration_count = 5
    manifest = dataset_dir / "manifest.json"
    if manifest.is_file():
        calibration_count = int(orjson.loads(manifest.read_bytes()).get("calibration_count", 5))
    return TargetSchedule.read_csv(dataset_dir / "schedule.csv", calibration_count)


class FrameSink:
    """Fingerprints every spoofed frame; writes the ones selected to a directory."""

    def __init__(self, directory: Optional[Path] = None, keep: Optional[Set[int]] = None):
        self.directory = directory
        self.keep = keep
        self._hash = hashlib.sha256()
        self.count = 0
        if directory is not None:
            try:
                directory.mkdir(parents=True, exist_ok=True)
            except OSError as ex:
                raise IoFailure(f"cannot create {directory}: {ex}", {"path": str(directory)})

    def add(self, index: int, image: GrayImage) -> None:
        self._hash.update(int(index).to_bytes(8, "little"))
        self._hash.update(image.to_bytes())
        self.count += 1
        if self.directory is not None and (self.keep is None or index in self.keep):
            save_pgm(image, self.directory / frame_name(index))

    @property
    def digest(self) -> str:
        return self._hash.hexdigest()


@dataclass
class AttackRun:
    subject_id: int
    mode: str
    n_frames: int
    kept: np.ndarray
    unswapped: GazeTrace
    swapped: GazeTrace
    skipped_unswapped: List[int] = field(default_factory=list)
    skipped_swapped: List[int] = field(default_factory=list)
    fill_ratios: List[float] = field(default_factory=list)
    spoofed: Dict[int, GrayImage] = field(default_factory=dict)
    digest: str = ""

    @property
    def sampling_factor(self) -> float:
        return self.n_frames / max(len(self.kept), 1)

    @property
    def swapped_rate(self) -> float:
        return self.swapped.sampling_rate


def extract_victim_texture(recording: Recording, cfg: ExperimentConfig, index: int = 0) -> PolarTexture:
    """The attacker's copy of the victim iris: one victim frame, unwrapped with its detected geometry."""
    img = recording.frame(index)
    geom = segment(img, cfg.segmentation)
    return unwrap(img, geom, cfg.rubbersheet.radial_res, cfg.rubbersheet.angular_res)


def _gaze_trace(
    times: List[float],
    pupils: List[Tuple[float, float]],
    schedule: TargetSchedule,
    cfg: ExperimentConfig,
) -> GazeTrace:
    t = np.array(times, dtype=np.float64)
    p = np.array(pupils, dtype=np.float64).reshape(-1, 2)
    model = fit_calibration(calibration_points(t, p, schedule, cfg.gaze.onset_trim_s), cfg.gaze.max_condition)
    return estimate_trace(model, t, p)


def kept_frames(cfg: ExperimentConfig, subject_id: int, n_frames: int, mode: Mode) -> np.ndarray:
    return simulate_frame_drops(
        n_frames,
        cfg.scanpath.camera_rate,
        mode,
        [cfg.seed, subject_id, MODE_INDEX[mode], DROP_STREAM],
        cfg.frame_drops,
    )


def run_attack(
    recording: Recording,
    victim: PolarTexture,
    schedule: TargetSchedule,
    cfg: ExperimentConfig,
    mode: Mode,
    sink: Optional[FrameSink] = None,
    retain: Optional[Set[int]] = None,
) -> AttackRun:
    """
    Segment every frame for the unswapped stream; swap the kept frames and
    track the pupil on the spoofed images for the swapped stream.
    Per-frame recoverable failures skip the frame.
    """
    sink = sink or FrameSink()
    n = recording.n_frames
    kept = kept_frames(cfg, recording.subject_id, n, mode)
    kept_set = set(int(k) for k in kept)
    run = AttackRun(recording.subject_id, mode, n, kept, GazeTrace([], [], [], []), GazeTrace([], [], [], []))
    stamps = recording.timestamps
    times_u, pupils_u, times_s, pupils_s = [], [], [], []

    for index in range(n):
        try:
            img = recording.frame(index)
            geom = segment(img, cfg.segmentation)
        except RecoverableError as ex:
            logger.warning(f"Subject {recording.subject_id} frame {index} skipped: {ex.code} {ex}")
            run.skipped_unswapped.append(index)
            if index in kept_set:
                run.skipped_swapped.append(index)
            continue
        times_u.append(float(stamps[index]))
        pupils_u.append((geom.pupil.center.x, geom.pupil.center.y))
        if index not in kept_set:
            continue
        try:
            result = swap_iris(img, geom, victim, cfg.rubbersheet.match_intensity)
            pupil = detect_pupil(result.image, cfg.segmentation)
        except RecoverableError as ex:
            logger.warning(f"Subject {recording.subject_id} spoofed frame {index} skipped: {ex.code} {ex}")
            run.skipped_swapped.append(index)
            continue
        sink.add(index, result.image)
        run.fill_ratios.append(result.fill_ratio)
        if retain is not None and index in retain:
            run.spoofed[index] = result.image
        times_s.append(float(stamps[index]))
        pupils_s.append((pupil.center.x, pupil.center.y))

    run.unswapped = _gaze_trace(times_u, pupils_u, schedule, cfg)
    run.swapped = _gaze_trace(times_s, pupils_s, schedule, cfg)
    run.digest = sink.digest
    logger.info(
        f"Subject {recording.subject_id} {mode}: {len(times_s)} spoofed frames of {n}, "
        f"{len(run.skipped_swapped)} skipped"
    )
    return run


def track_gaze(recording: Recording, schedule: TargetSchedule, cfg: ExperimentConfig) -> Tuple[GazeTrace, List[int]]:
    """Plain eye tracking of a recording: segment, calibrate on the schedule, estimate gaze."""
    times, pupils, skipped = [], [], []
    stamps = recording.timestamps
    for index in range(recording.n_frames):
        try:
            pupil = detect_pupil(recording.frame(index), cfg.segmentation)
        except RecoverableError as ex:
            logger.warning(f"Frame {index} skipped: {ex.code} {ex}")
            skipped.append(index)
            continue
        times.append(float(stamps[index]))
        pupils.append((pupil.center.x, pupil.center.y))
    return _gaze_trace(times, pupils, schedule, cfg), skipped


def _frame_template(img: GrayImage, cfg: ExperimentConfig) -> IrisTemplate:
    return encode_frame(img, segment(img, cfg.segmentation), cfg.rubbersheet, cfg.gabor)


def compare_frames(
    presented_frame: Callable[[int], GrayImage],
    enrolled_frame: Callable[[int], GrayImage],
    candidates: Iterable[int],
    cfg: ExperimentConfig,
) -> Tuple[List[int], List[float]]:
    """
    Walk the candidate frame numbers, encode presented and enrolled frame of each,
    and compare the first hd_frames pairs that encode on both sides.
    Frames either side fails to encode are left out.
    """
    frames, presented, references = [], [], []
    for index in candidates:
        if len(frames) == cfg.hd_frames:
            break
        try:
            p = _frame_template(presented_frame(int(index)), cfg)
            e = _frame_template(enrolled_frame(int(index)), cfg)
        except RecoverableError as ex:
            logger.warning(f"Frame {index} left out of the comparison: {ex.code}")
            continue
        frames.append(int(index))
        presented.append(p)
        references.append(e)
    return frames, compare_sequences(presented, references, cfg.gabor.max_shift)


def compare_recordings(
    presented: Recording,
    enrolled: Recording,
    cfg: ExperimentConfig,
    seed=None,
) -> Tuple[List[int], List[float]]:
    """HD between equal frame numbers of two recordings over up to hd_frames randomly drawn frames."""
    seed = seed if seed is not None else [cfg.seed, HD_STREAM]
    order = np.random.default_rng(seed).permutation(min(presented.n_frames, enrolled.n_frames))
    return compare_frames(presented.frame, enrolled.frame, order, cfg)


def run_offline_attack(recording, victim, schedule, cfg, sink=None, retain=None) -> AttackRun:
    return run_attack(recording, victim, schedule, cfg, "offline", sink, retain)


def run_online_attack(recording, victim, schedule, cfg, sink=None, retain=None) -> AttackRun:
    return run_attack(recording, victim, schedule, cfg, "online", sink, retain)


class Stat(BaseModel):
    mean: Optional[float]
    std: Optional[float]
    n: int


def summarize(values: Sequence[float]) -> Stat:
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        return Stat(mean=None, std=None, n=0)
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return Stat(mean=float(values.mean()), std=std, n=int(values.size))


class SubjectReport(BaseModel):
    subject: int
    hd_frames: List[int]
    hd_values: List[float]
    hd_mean: Optional[float]
    authenticated: bool
    frames_total: int
    frames_kept: int
    skipped_unswapped: List[int]
    skipped_swapped: List[int]
    sampling_factor: float
    swapped_rate_hz: float
    accuracy_unswapped: float
    accuracy_swapped: float
    precision_unswapped: float
    precision_swapped: float
    fill_ratio_mean: float
    spoof_digest: str


class SplitReport(BaseModel):
    split: int
    train: List[int]
    validation: List[int]
    test: List[int]
    asr_window: float
    asr_user: float
    real_window_accuracy: Optional[float]
    epochs: int
    best_epoch: int


class LivenessReport(BaseModel):
    splits: List[SplitReport]
    asr_window: Stat
    asr_user: Stat


class ModeReport(BaseModel):
    subjects: List[SubjectReport]
    hd: Stat
    authenticated_fraction: float
    accuracy_unswapped: Stat
    accuracy_swapped: Stat
    precision_unswapped: Stat
    precision_swapped: Stat
    sampling_factor: Stat
    liveness: Dict[str, LivenessReport]


class AttackReport(BaseModel):
    version: str
    seed: int
    config_hash: str
    victim_id: int
    threshold: float
    modes: Dict[str, ModeReport]

    def to_json(self) -> bytes:
        return orjson.dumps(self.model_dump(mode="json"), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS)


def _hd_candidates(kept: np.ndarray, victim_frames: int, seed) -> List[int]:
    """Kept frames in a seeded random order; the first ones that encode cleanly are compared."""
    pool = [int(k) for k in kept if k < victim_frames]
    return [int(k) for k in np.random.default_rng(seed).permutation(pool)]


def _subject_windows(trace: GazeTrace, label: int, subject: int, cfg: ExperimentConfig) -> List[VelocityWindow]:
    params = cfg.liveness
    signal = preprocess(compute_velocity(trace), params.cap_deg_s, params.target_rate_hz)
    return make_windows(signal, params.window, params.step, label, subject)


@dataclass
class _SubjectOutcome:
    report: SubjectReport
    unswapped: GazeTrace
    swapped: GazeTrace


def _process_subject(
    cfg: ExperimentConfig,
    mode: Mode,
    subject_id: int,
    schedule: TargetSchedule,
    victim_texture: PolarTexture,
    victim: Recording,
    mode_dir: Path,
) -> _SubjectOutcome:
    recording = SyntheticRecording(SyntheticSubject(cfg, subject_id, mode, schedule))
    hd_seed = [cfg.seed, subject_id, MODE_INDEX[mode], HD_STREAM]
    candidates = _hd_candidates(kept_frames(cfg, subject_id, recording.n_frames, mode), victim.n_frames, hd_seed)
    candidates = candidates[: 3 * cfg.hd_frames]
    spoof_dir = mode_dir / f"subject_{subject_id}" / "spoofed"
    sink = FrameSink(spoof_dir if cfg.save_all_frames else None)
    run = run_attack(recording, victim_texture, schedule, cfg, mode, sink, set(candidates))

    frames, values = compare_frames(
        run.spoofed.__getitem__, victim.frame, [k for k in candidates if k in run.spoofed], cfg
    )
    pairs = dict(zip(frames, values))
    chosen = sorted(pairs)
    hd_values = [pairs[k] for k in chosen]
    hd_mean = float(np.mean(hd_values)) if hd_values else None
    if not cfg.save_all_frames:
        _mkdir(spoof_dir)
        for index in chosen:
            save_pgm(run.spoofed[index], spoof_dir / frame_name(index))

    gaze_dir = _mkdir(mode_dir / "gaze")
    run.unswapped.to_csv(gaze_dir / f"subject_{subject_id}_unswapped.csv")
    run.swapped.to_csv(gaze_dir / f"subject_{subject_id}_swapped.csv")

    report = SubjectReport(
        subject=subject_id,
        hd_frames=chosen,
        hd_values=hd_values,
        hd_mean=hd_mean,
        authenticated=bool(hd_values) and decide(hd_mean, cfg.gabor.threshold),
        frames_total=run.n_frames,
        frames_kept=int(len(run.kept)),
        skipped_unswapped=run.skipped_unswapped,
        skipped_swapped=run.skipped_swapped,
        sampling_factor=run.sampling_factor,
        swapped_rate_hz=run.swapped_rate,
        accuracy_unswapped=accuracy(run.unswapped, schedule, cfg.gaze.onset_trim_s),
        accuracy_swapped=accuracy(run.swapped, schedule, cfg.gaze.onset_trim_s),
        precision_unswapped=precision(run.unswapped, schedule, cfg.gaze.onset_trim_s),
        precision_swapped=precision(run.swapped, schedule, cfg.gaze.onset_trim_s),
        fill_ratio_mean=float(np.mean(run.fill_ratios)) if run.fill_ratios else 0.0,
        spoof_digest=run.digest,
    )
    return _SubjectOutcome(report, run.unswapped, run.swapped)


def evaluate_split(
    cfg: ExperimentConfig,
    windows: List[VelocityWindow],
    plan: SplitPlan,
    split: int,
    seed,
) -> Tuple[LstmModel, SplitReport, List[list]]:
    """Train a fresh model on the plan, then score its test subjects window by window and by majority vote."""
    model, history = train(windows, plan, cfg.liveness, seed)
    test = set(plan.test)
    test_windows = [w for w in windows if w.subject in test]
    predictions = window_predictions(model, test_windows, cfg.liveness.threshold)

    groups: Dict[Tuple[int, int], List[int]] = {}
    for p in predictions:
        groups.setdefault((p.subject, p.label), []).append(p.predicted)
    users = [(label, majority_vote(decisions)) for (_, label), decisions in sorted(groups.items())]
    asr_window, asr_user = attack_success_rate([(p.label, p.predicted) for p in predictions], users)
    real = [p for p in predictions if p.label == REAL]
    real_accuracy = sum(1 for p in real if p.predicted == REAL) / len(real) if real else None

    rows = [
        [split, p.subject, LABEL_NAMES[p.label], p.index, p.probability, LABEL_NAMES[p.predicted]]
        for p in predictions
    ]
    report = SplitReport(
        split=split,
        train=list(plan.train),
        validation=list(plan.validation),
        test=list(plan.test),
        asr_window=asr_window,
        asr_user=asr_user,
        real_window_accuracy=real_accuracy,
        epochs=len(history.epochs),
        best_epoch=history.best_epoch,
    )
    return model, report, rows


def _liveness(
    cfg: ExperimentConfig,
    mode: Mode,
    condition: str,
    windows: List[VelocityWindow],
    subjects: List[int],
) -> Tuple[LivenessReport, List[list]]:
    splits, rows = [], []
    for split in tqdm(range(cfg.splits), desc=f"{mode}/{condition} splits", unit="split"):
        plan = split_subjects(
            subjects,
            [cfg.seed, MODE_INDEX[mode], SPLIT_STREAM, split],
            cfg.test_fraction,
            cfg.validation_fraction,
            cfg.test_count,
        )
        if cfg.victim_id in plan.all_subjects():
            raise ExperimentError(
                f"victim {cfg.victim_id} leaked into split {split}",
                {"mode": mode, "split": split, "subject": cfg.victim_id},
            )
        try:
            _, report, split_rows = evaluate_split(
                cfg, windows, plan, split, [cfg.seed, MODE_INDEX[mode], TRAIN_STREAM, split, CONDITIONS.index(condition)]
            )
        except IrisSwapError as ex:
            raise ExperimentError(
                f"{condition} split {split} failed: {ex}",
                {"mode": mode, "split": split, "condition": condition, "cause": ex.code},
            )
        logger.info(f"{mode}/{condition} split {split}: ASR window {report.asr_window:.3f}, user {report.asr_user:.3f}")
        splits.append(report)
        rows.extend([mode, condition] + row for row in split_rows)
    return (
        LivenessReport(
            splits=splits,
            asr_window=summarize(s.asr_window for s in splits),
            asr_user=summarize(s.asr_user for s in splits),
        ),
        rows,
    )


def run_mode(cfg: ExperimentConfig, mode: Mode, out_dir: Path) -> Tuple[ModeReport, List[list]]:
    mode_dir = out_dir / mode
    schedule = experiment_schedule(cfg, mode)
    schedule.to_csv(_mkdir(mode_dir) / "schedule.csv")
    victim = SyntheticRecording(SyntheticSubject(cfg, cfg.victim_id, mode, schedule))
    try:
        victim_texture = extract_victim_texture(victim, cfg)
    except IrisSwapError as ex:
        raise ExperimentError(
            f"victim texture extraction failed: {ex}",
            {"mode": mode, "subject": cfg.victim_id, "frame": 0, "cause": ex.code},
        )
    save_texture(victim_texture, mode_dir / "victim.ptex")

    subjects = cfg.subject_ids()

    def work(subject_id: int) -> _SubjectOutcome:
        try:
            return _process_subject(cfg, mode, subject_id, schedule, victim_texture, victim, mode_dir)
        except IrisSwapError as ex:
            if isinstance(ex, ExperimentError):
                raise
            raise ExperimentError(
                f"subject {subject_id} failed in {mode} mode: {ex}",
                {"mode": mode, "subject": subject_id, "cause": ex.code, **ex.context},
            )

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        outcomes = list(tqdm(pool.map(work, subjects), total=len(subjects), desc=f"{mode} subjects", unit="subject"))

    windows: Dict[str, List[VelocityWindow]] = {c: [] for c in CONDITIONS}
    for subject_id, outcome in zip(subjects, outcomes):
        try:
            real = _subject_windows(outcome.unswapped, REAL, subject_id, cfg)
            windows["irisswap"] += real + _subject_windows(outcome.swapped, SPOOF, subject_id, cfg)
            if cfg.static_baseline:
                static = generate_static_trace(
                    outcome.unswapped.t,
                    (schedule.targets[0].h, schedule.targets[0].v),
                    cfg.static_noise_deg,
                    [cfg.seed, subject_id, MODE_INDEX[mode], STATIC_STREAM],
                )
                windows["static"] += real + _subject_windows(static, SPOOF, subject_id, cfg)
        except IrisSwapError as ex:
            raise ExperimentError(
                f"subject {subject_id} windows failed: {ex}", {"mode": mode, "subject": subject_id, "cause": ex.code}
            )

    liveness, rows = {}, []
    for condition in CONDITIONS:
        if not windows[condition]:
            continue
        save_windows(windows[condition], mode_dir / f"windows_{condition}.csv")
        liveness[condition], condition_rows = _liveness(cfg, mode, condition, windows[condition], subjects)
        rows += condition_rows

    reports = [o.report for o in outcomes]
    report = ModeReport(
        subjects=reports,
        hd=summarize(r.hd_mean for r in reports if r.hd_values),
        authenticated_fraction=sum(r.authenticated for r in reports) / len(reports),
        accuracy_unswapped=summarize(r.accuracy_unswapped for r in reports),
        accuracy_swapped=summarize(r.accuracy_swapped for r in reports),
        precision_unswapped=summarize(r.precision_unswapped for r in reports),
        precision_swapped=summarize(r.precision_swapped for r in reports),
        sampling_factor=summarize(r.sampling_factor for r in reports),
        liveness=liveness,
    )
    return report, rows


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as ex:
        raise IoFailure(f"cannot create {path}: {ex}", {"path": str(path)})
    return path


def run_experiment(cfg: ExperimentConfig) -> AttackReport:
    """Attack every subject in every mode, evaluate liveness over the splits, write report.json."""
    out_dir = _mkdir(Path(cfg.out_dir))
    logger.info(f"Experiment seed {cfg.seed}, {cfg.subjects} subjects, modes {cfg.modes}, writing to {out_dir}")
    (out_dir / "config.json").write_bytes(
        orjson.dumps(cfg.model_dump(mode="json", exclude={"out_dir", "workers"}), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS)
    )
    modes, rows = {}, []
    for mode in cfg.modes:
        modes[mode], mode_rows = run_mode(cfg, mode, out_dir)
        rows += mode_rows
    pd.DataFrame(rows, columns=PREDICTION_COLUMNS).to_csv(out_dir / "predictions.csv", index=False)
    report = AttackReport(
        version=cfg.version,
        seed=cfg.seed,
        config_hash=config_hash(cfg),
        victim_id=cfg.victim_id,
        threshold=cfg.gabor.threshold,
        modes=modes,
    )
    (out_dir / "report.json").write_bytes(report.to_json())
    logger.info(f"Report written to {out_dir / 'report.json'}")
    return report


def load_report(path: Union[str, Path]) -> AttackReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    try:
        return AttackReport.model_validate_json(path.read_bytes())
    except OSError as ex:
        raise IoFailure(f"cannot read report {path}: {ex}", {"path": str(path)})
    except ValueError as ex:
        raise IoFailure(f"{path} is not a valid report: {ex}", {"path": str(path)})


def recompute_asr(predictions: Union[str, Path, pd.DataFrame]) -> Dict[Tuple[str, str, int], Tuple[float, float]]:
    """(mode, condition, split) -> (ASR window, ASR user) rebuilt from the per-window dump."""
    frame = predictions if isinstance(predictions, pd.DataFrame) else pd.read_csv(predictions)
    out = {}
    for (mode, condition, split), group in frame.groupby(["mode", "condition", "split"], sort=True):
        labels = group["label"].map(LABEL_VALUES).to_numpy()
        predicted = group["predicted"].map(LABEL_VALUES).to_numpy()
        users = [
            (LABEL_VALUES[label], majority_vote(g["predicted"].map(LABEL_VALUES)))
            for (_, label), g in group.groupby(["subject", "label"], sort=True)
        ]
        out[(mode, condition, int(split))] = attack_success_rate(list(zip(labels, predicted)), users)
    return out


def check_report(report: AttackReport, predictions: Union[str, Path, pd.DataFrame]) -> List[str]:
    """Mismatches between the report's per-split ASR and the prediction dump; empty when consistent."""
    recomputed = recompute_asr(predictions)
    problems = []
    for mode, mode_report in report.modes.items():
        for condition, liveness in mode_report.liveness.items():
            for split in liveness.splits:
                key = (mode, condition, split.split)
                if key not in recomputed:
                    problems.append(f"{key} missing from predictions")
                elif recomputed[key] != (split.asr_window, split.asr_user):
                    problems.append(f"{key}: report {(split.asr_window, split.asr_user)} vs dump {recomputed[key]}")
    return problems
