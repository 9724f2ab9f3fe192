import filecmp
from dataclasses import replace

import numpy as np
import orjson
import pytest

from config import FrameDropParams, ProfileParams, ScanpathParams
from errors import GazeOutOfFrame
from gaze import Target, TargetSchedule
from rubbersheet import unwrap
from synth import (
    SubjectProfile,
    SyntheticSubject,
    frame_name,
    generate_scanpath,
    generate_static_trace,
    generate_subject_texture,
    peak_velocity,
    render_frame,
    saccade_duration,
    saccade_progress,
    saccade_timing,
    simulate_frame_drops,
    subject_seed,
    write_dataset,
)


def test_profile_is_seeded():
    assert SubjectProfile.from_seed(9) == SubjectProfile.from_seed(9)
    assert SubjectProfile.from_seed(9) != SubjectProfile.from_seed(10)


def test_profile_radii_follow_ranges():
    params = ProfileParams()
    for seed in range(20):
        profile = SubjectProfile.from_seed(seed, params)
        assert params.pupil_radius_range[0] <= profile.pupil_radius <= params.pupil_radius_range[1]
        assert params.limbus_radius_range[0] <= profile.limbus_radius <= params.limbus_radius_range[1]


def test_subject_seed_is_stable():
    assert subject_seed(7, 3) == subject_seed(7, 3)
    assert subject_seed(7, 3) != subject_seed(7, 4)


def test_texture_is_seeded():
    assert generate_subject_texture(4) == generate_subject_texture(4)
    assert generate_subject_texture(4) != generate_subject_texture(5)


def test_texture_stays_in_iris_band():
    params = ProfileParams()
    tex = generate_subject_texture(4, params)
    assert tex.valid.all()
    low = params.iris_low - params.brightness_jitter
    high = params.iris_high + params.brightness_jitter
    assert low <= tex.intensities.min() and tex.intensities.max() <= high


def test_texture_dynamic_range():
    for seed in range(50):
        tex = generate_subject_texture(seed)
        assert np.ptp(tex.intensities[tex.valid]) >= 80.0, seed


def test_texture_wraps_in_angle():
    tex = generate_subject_texture(4)
    seam = np.abs(tex.intensities[:, 0] - tex.intensities[:, -1]).max()
    step = np.abs(np.diff(tex.intensities, axis=1)).max()
    assert seam <= step + 1e-9


def test_main_sequence():
    assert saccade_duration(10.0) == pytest.approx(0.043)
    assert peak_velocity(10.0) == pytest.approx(500 * (1 - np.exp(-10 / 15)))


@pytest.mark.parametrize("amplitude", [1.0, 5.0, 10.0, 20.0])
def test_saccade_timing_is_consistent(amplitude):
    duration, fill, peak = saccade_timing(amplitude)
    assert 0.5 <= fill <= 1.0
    assert amplitude == pytest.approx(peak * duration * fill)


@pytest.mark.parametrize("fill", [0.5, 0.75, 0.95, 1.0])
def test_saccade_progress_shape(fill):
    u = np.linspace(0, 1, 2001)
    progress = saccade_progress(u, fill)
    assert progress[0] == pytest.approx(0.0)
    assert progress[-1] == pytest.approx(1.0)
    assert np.all(np.diff(progress) >= -1e-12)
    velocity = np.diff(progress) / np.diff(u)
    assert velocity.max() == pytest.approx(1.0 / fill, rel=1e-3)


def _two_targets(second, dwell=2.0):
    return TargetSchedule((Target(0.0, 0.0, 0.0, dwell), Target(second[0], second[1], dwell, 2 * dwell)), 1)


def test_fixation_only_stays_slow():
    profile = SubjectProfile.from_seed(2)
    schedule = TargetSchedule((Target(0.0, 0.0, 0.0, 10.0),), 1)
    path = generate_scanpath(schedule, profile, seed=1)
    assert len(path) == 300
    assert not path.saccades
    speed = np.hypot(np.diff(path.h), np.diff(path.v)) * 30.0
    assert speed.max() <= 6 * profile.jitter_sigma_deg * 30.0


def test_ten_degree_saccade_peak():
    profile = replace(SubjectProfile.from_seed(2), jitter_sigma_deg=0.0)
    path = generate_scanpath(_two_targets((10.0, 0.0)), profile, seed=1, rate=1000.0)
    assert len(path.saccades) == 1
    assert 200.0 <= path.saccades[0].peak_velocity <= 350.0
    speed = np.abs(np.diff(path.h)) * 1000.0
    assert 200.0 <= speed.max() <= 350.0
    assert path.h[-1] == pytest.approx(10.0)


def test_saccade_starts_after_latency():
    params = ScanpathParams()
    profile = replace(SubjectProfile.from_seed(2), jitter_sigma_deg=0.0)
    path = generate_scanpath(_two_targets((8.0, -6.0)), profile, seed=4, params=params)
    onset = path.saccades[0].onset
    assert 2.0 + params.latency_min_s <= onset <= 2.0 + params.latency_max_s
    assert np.all(path.h[path.t < onset] == 0.0)


def test_scanpath_is_seeded():
    profile = SubjectProfile.from_seed(2)
    schedule = _two_targets((5.0, 5.0))
    a = generate_scanpath(schedule, profile, seed=[1, 2])
    b = generate_scanpath(schedule, profile, seed=[1, 2])
    assert np.array_equal(a.h, b.h) and np.array_equal(a.v, b.v)


def test_centred_gaze_puts_pupil_in_the_middle(profile, texture):
    frame = render_frame(0.0, 0.0, profile, texture, noise_seed=0)
    assert (frame.geometry.pupil.center.x, frame.geometry.pupil.center.y) == (160.0, 120.0)


def test_gain_moves_the_pupil(profile, texture):
    frame = render_frame(5.0, 0.0, profile, texture, noise_seed=0)
    assert frame.geometry.pupil.center.x == 190.0
    up = render_frame(0.0, 5.0, profile, texture, noise_seed=0)
    assert up.geometry.pupil.center.y == 90.0


def test_render_unwrap_consistency(eye, texture):
    tex = unwrap(eye.image, eye.geometry)
    error = np.abs(tex.intensities - texture.intensities)[tex.valid]
    assert error.mean() <= 3.0


def test_render_is_seeded(profile, texture):
    a = render_frame(1.0, 2.0, profile, texture, noise_seed=[3, 4])
    b = render_frame(1.0, 2.0, profile, texture, noise_seed=[3, 4])
    assert a.image == b.image


def test_gaze_out_of_frame(profile, texture):
    with pytest.raises(GazeOutOfFrame):
        render_frame(30.0, 0.0, profile, texture, noise_seed=0)
    with pytest.raises(GazeOutOfFrame):
        render_frame(16.0, 0.0, profile, texture, noise_seed=0)


def test_offline_keeps_every_frame():
    assert np.array_equal(simulate_frame_drops(50, 30.0, "offline", 0), np.arange(50))


def test_forced_factor_ten():
    kept = simulate_frame_drops(100, 30.0, "online", 0, FrameDropParams(force_factor=10))
    assert kept.tolist() == list(range(0, 100, 10))


def test_factor_clamped_to_three_hz_floor():
    kept = simulate_frame_drops(100, 30.0, "online", 0, FrameDropParams(force_factor=15))
    assert kept.tolist() == list(range(0, 100, 10))


@pytest.mark.parametrize("seed", range(10))
def test_online_rate_stays_in_range(seed):
    kept = simulate_frame_drops(900, 30.0, "online", seed)
    factor = int(kept[1] - kept[0])
    assert 1 <= factor <= 10
    assert np.all(np.diff(kept) == factor)


def test_per_frame_jitter():
    kept = simulate_frame_drops(900, 30.0, "online", 3, FrameDropParams(per_frame_jitter=True))
    gaps = np.diff(kept)
    assert gaps.min() >= 1 and gaps.max() <= 10
    assert len(set(gaps.tolist())) > 1


def test_static_trace():
    times = np.arange(0, 10, 1 / 30)
    trace = generate_static_trace(times, (2.0, -1.0), 0.02, seed=1)
    assert np.array_equal(trace.t, times)
    assert trace.h.mean() == pytest.approx(2.0, abs=0.01)
    assert trace.v.std() == pytest.approx(0.02, rel=0.2)


def test_synthetic_subject_frames(small_config):
    subject = SyntheticSubject(small_config, 1, "offline")
    assert subject.n_frames == round(subject.schedule.span * 30.0)
    assert subject.frame(10).image == SyntheticSubject(small_config, 1, "offline").frame(10).image
    other = SyntheticSubject(small_config, 2, "offline")
    assert other.frame(10).image != subject.frame(10).image


def test_frame_name():
    assert frame_name(7) == "frame_00007.pgm"


@pytest.mark.slow
def test_dataset_is_reproducible(small_config, tmp_path):
    first = write_dataset(small_config, tmp_path / "a", "online")
    second = write_dataset(small_config, tmp_path / "b", "online")
    manifest = orjson.loads((first / "manifest.json").read_bytes())
    assert set(manifest["frames"]) == {str(i) for i in range(6)}
    for subject in manifest["frames"]:
        directory = f"subject_{subject}"
        for name in ("timestamps.csv", "truth_gaze.csv", "truth_geometry.csv"):
            assert filecmp.cmp(first / directory / name, second / directory / name, shallow=False)
        frames = sorted(p.name for p in (first / directory / "frames").iterdir())
        assert len(frames) == manifest["frames"][subject]
        assert filecmp.cmp(first / directory / "frames" / frames[-1], second / directory / "frames" / frames[-1], shallow=False)
    assert (first / "manifest.json").read_bytes() == (second / "manifest.json").read_bytes()
