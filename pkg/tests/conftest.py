import os
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import settings

from config import ExperimentConfig, LivenessParams, ScanpathParams
from synth import SubjectProfile, generate_subject_texture, render_frame

settings.register_profile("default", max_examples=50, deadline=None)
settings.register_profile("fast", max_examples=10, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def profile():
    """Subject 3 with the round radii used throughout the detector tests."""
    return replace(SubjectProfile.from_seed(3), pupil_radius=30.0, limbus_radius=75.0)


@pytest.fixture(scope="session")
def texture():
    return generate_subject_texture(3)


@pytest.fixture(scope="session")
def eye(profile, texture):
    """Centred eye, pupil r=30 and limbus r=75 at (160, 120)."""
    return render_frame(0.0, 0.0, profile, texture, noise_seed=11, pupil_radius=30.0)


@pytest.fixture
def small_config(tmp_path):
    """Six subjects (victim included), short challenge task, one split."""
    return ExperimentConfig(
        seed=7,
        subjects=5,
        splits=1,
        hd_frames=2,
        out_dir=tmp_path / "run",
        scanpath=ScanpathParams(offline_dwell_s=2.0, online_dwell_min_s=2.0, online_dwell_max_s=2.5),
        liveness=LivenessParams(hidden=4, max_epochs=20, patience=5),
    )
