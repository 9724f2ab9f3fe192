import numpy as np
import pytest

from config import ScanpathParams
from errors import DegenerateDesign, IoFailure, NonMonotonicTime, NoValidationSamples, TooFewPoints
from gaze import (
    CalibrationModel,
    GazeSample,
    GazeTrace,
    Target,
    TargetSchedule,
    accuracy,
    calibration_points,
    default_schedule,
    estimate_gaze,
    estimate_trace,
    fit_calibration,
    precision,
)
from imaging import PixelPoint
from synth import SyntheticSubject


def _affine(x, y):
    return 0.1 * (x - 160) + 0.02 * (y - 120), -0.01 * (x - 160) - 0.12 * (y - 120)


def _grid_points(n_side, noise=0.0, rng=None):
    points = []
    for x in np.linspace(100, 220, n_side):
        for y in np.linspace(70, 170, n_side):
            h, v = _affine(x, y)
            if noise:
                h, v = h + rng.normal(0, noise), v + rng.normal(0, noise)
            points.append((PixelPoint(float(x), float(y)), (h, v)))
    return points


def _schedule():
    positions = [(0, 0), (-10, 8), (10, 8), (10, -8), (-10, -8), (-5, 4), (5, 4), (5, -4), (-5, -4)]
    return TargetSchedule(tuple(Target(h, v, 2.0 * i, 2.0 * (i + 1)) for i, (h, v) in enumerate(positions)), 5)


def _on_target_trace(schedule, rate=30.0, offset=(0.0, 0.0)):
    t = np.arange(0, schedule.span, 1.0 / rate)
    h, v = np.zeros_like(t), np.zeros_like(t)
    for target in schedule.targets:
        inside = (t >= target.onset) & (t < target.offset)
        h[inside], v[inside] = target.h + offset[0], target.v + offset[1]
    return GazeTrace(t, h, v, np.ones_like(t))


def test_affine_map_is_recovered_exactly():
    model = fit_calibration(_grid_points(4))
    assert model.residual_rms < 1e-9
    for x, y in [(130.5, 95.25), (205.0, 160.0)]:
        h, v = model.predict(np.array([x]), np.array([y]))
        assert (h[0], v[0]) == pytest.approx(_affine(x, y), abs=1e-9)


def test_collinear_points_are_degenerate():
    points = [(PixelPoint(100 + 10 * i, 100 + 5 * i), (float(i), 0.0)) for i in range(5)]
    with pytest.raises(DegenerateDesign):
        fit_calibration(points)


def test_five_points_are_too_few():
    with pytest.raises(TooFewPoints):
        fit_calibration(_grid_points(3)[:5])
    with pytest.raises(TooFewPoints):
        fit_calibration([])


def test_noisy_calibration_generalizes():
    rng = np.random.default_rng(5)
    model = fit_calibration(_grid_points(5, noise=0.1, rng=rng))
    xs, ys = rng.uniform(105, 215, 200), rng.uniform(75, 165, 200)
    h, v = model.predict(xs, ys)
    th, tv = _affine(xs, ys)
    assert np.mean(np.hypot(h - th, v - tv)) <= 0.3


def test_zero_model():
    sample = estimate_gaze(CalibrationModel.zero(), PixelPoint(12.0, 250.0), t=1.5, confidence=0.8)
    assert sample == GazeSample(1.5, 0.0, 0.0, 0.8)


def test_estimate_at_calibration_point():
    points = _grid_points(4)
    model = fit_calibration(points)
    pupil, (h, v) = points[5]
    sample = estimate_gaze(model, pupil, 0.0)
    assert sample.h == pytest.approx(h, abs=1e-9)
    assert sample.v == pytest.approx(v, abs=1e-9)


def test_estimate_trace_matches_single_estimates():
    model = fit_calibration(_grid_points(4))
    pupils = np.array([[150.0, 110.0], [170.0, 130.0]])
    trace = estimate_trace(model, np.array([0.0, 0.1]), pupils)
    for sample, (x, y) in zip(trace.samples(), pupils):
        single = estimate_gaze(model, PixelPoint(x, y), sample.t)
        assert (sample.h, sample.v) == pytest.approx((single.h, single.v))


def test_accuracy_on_target():
    schedule = _schedule()
    assert accuracy(_on_target_trace(schedule), schedule) == 0.0


def test_accuracy_constant_offset():
    schedule = _schedule()
    assert accuracy(_on_target_trace(schedule, offset=(1.0, 0.0)), schedule) == pytest.approx(1.0)


def test_accuracy_ignores_zero_confidence():
    schedule = _schedule()
    trace = _on_target_trace(schedule, offset=(2.0, 0.0))
    muted = GazeTrace(trace.t, trace.h, trace.v, np.zeros_like(trace.t))
    with pytest.raises(NoValidationSamples):
        accuracy(muted, schedule)


def test_precision_of_constant_gaze():
    schedule = _schedule()
    assert precision(_on_target_trace(schedule), schedule) == 0.0


def test_precision_of_alternating_samples():
    schedule = _schedule()
    trace = _on_target_trace(schedule)
    h = np.array(trace.h) + np.where(np.arange(len(trace)) % 2 == 0, 0.5, -0.5)
    assert precision(GazeTrace(trace.t, h, trace.v, trace.confidence), schedule) == pytest.approx(1.0)


def test_sample_order_moves_precision_only(rng):
    schedule = _schedule()
    trace = _on_target_trace(schedule)
    t = np.asarray(trace.t)
    ramp, shuffled = np.array(trace.h), np.array(trace.h)
    for target in schedule.validation:
        inside = np.nonzero((t >= target.onset + 0.5) & (t < target.offset))[0]
        offsets = np.linspace(0.2, 0.8, inside.size)
        ramp[inside] += offsets
        shuffled[inside] += rng.permutation(offsets)
    ordered = GazeTrace(trace.t, ramp, trace.v, trace.confidence)
    scrambled = GazeTrace(trace.t, shuffled, trace.v, trace.confidence)
    assert accuracy(scrambled, schedule) == pytest.approx(accuracy(ordered, schedule))
    assert accuracy(ordered, schedule) == pytest.approx(0.5, abs=0.02)
    assert precision(scrambled, schedule) > 2 * precision(ordered, schedule)


def test_no_validation_samples():
    schedule = _schedule()
    early = GazeTrace([0.0, 0.1], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0])
    with pytest.raises(NoValidationSamples):
        accuracy(early, schedule)
    with pytest.raises(NoValidationSamples):
        precision(early, schedule)


def test_calibration_points_skip_the_onset():
    schedule = _schedule()
    times = np.arange(0, schedule.span, 0.1)
    pupils = np.column_stack([times, times])
    points = calibration_points(times, pupils, schedule, onset_trim=0.5)
    first = [p for p, angle in points if angle == (0, 0)]
    assert min(p.x for p in first) >= 0.5
    assert {angle for _, angle in points} == {(t.h, t.v) for t in schedule.calibration}


def test_trace_timestamps_must_increase():
    with pytest.raises(NonMonotonicTime):
        GazeTrace([0.0, 0.2, 0.1], [0, 0, 0], [0, 0, 0], [1, 1, 1])


def test_trace_csv_round_trip(tmp_path):
    trace = GazeTrace([0.0, 0.5, 1.0], [1.0, 2.0, 3.0], [-1.0, 0.0, 1.0], [1.0, 1.0, 0.0])
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    assert GazeTrace.read_csv(path) == trace
    assert trace.sampling_rate == pytest.approx(2.0)


def test_trace_csv_missing_columns(tmp_path):
    path = tmp_path / "broken.csv"
    path.write_text("t,h\n0,1\n")
    with pytest.raises(IoFailure):
        GazeTrace.read_csv(path)


def test_schedule_rejects_overlap():
    with pytest.raises(ValueError):
        TargetSchedule((Target(0, 0, 0.0, 2.0), Target(1, 1, 1.0, 3.0)), 1)


def test_schedule_csv_round_trip(tmp_path):
    schedule = _schedule()
    path = tmp_path / "schedule.csv"
    schedule.to_csv(path)
    assert TargetSchedule.read_csv(path, 5) == schedule


def test_default_offline_schedule():
    schedule = default_schedule(mode="offline")
    assert len(schedule.calibration) == 5
    assert len(schedule.validation) == 4
    assert all(t.dwell == 4.0 for t in schedule.targets)
    assert schedule.span == pytest.approx(36.0)


def test_default_online_schedule_draws_dwells():
    params = ScanpathParams()
    schedule = default_schedule(params, "online", seed=3)
    dwells = [t.dwell for t in schedule.targets]
    assert all(params.online_dwell_min_s <= d <= params.online_dwell_max_s for d in dwells)
    assert len(set(dwells)) > 1
    assert default_schedule(params, "online", seed=3) == schedule


@pytest.mark.slow
def test_synthetic_eye_gaze_is_recovered(small_config):
    from harness import SyntheticRecording, track_gaze

    subject = SyntheticSubject(small_config, 2, "offline")
    trace, skipped = track_gaze(SyntheticRecording(subject), subject.schedule, small_config)
    assert not skipped
    truth = subject.scanpath
    error = np.hypot(trace.h - truth.h, trace.v - truth.v)
    assert error.mean() <= 0.5
