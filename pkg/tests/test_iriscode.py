import numpy as np
import pytest
from hypothesis import given, strategies as st

from config import GaborParams
from errors import GeometryMismatch, InsufficientMask, MalformedHeader, TextureTooSmall, TruncatedPayload
from iriscode import (
    Authentication,
    IrisTemplate,
    authenticate,
    band_rows,
    compare_sequences,
    decide,
    encode,
    encode_frame,
    hamming_distance,
    load_template,
    save_template,
)
from rubbersheet import PolarTexture
from segmentation import segment
from synth import SubjectProfile, generate_subject_texture, render_frame


def _random_template(seed, shape=(8, 128), coverage=0.9):
    rng = np.random.default_rng(seed)
    code = rng.random(shape + (2,)) < 0.5
    mask = np.repeat((rng.random(shape) < coverage)[:, :, None], 2, axis=2)
    return IrisTemplate(code, mask)


def test_template_shape(texture):
    tmpl = encode(texture)
    assert (tmpl.bands, tmpl.angular_positions) == (8, 128)
    assert tmpl.n_bits == 2048
    assert tmpl.coverage > 0.9


def test_constant_texture_masks_everything():
    tex = PolarTexture(np.full((64, 512), 140.0), np.ones((64, 512), dtype=bool))
    assert encode(tex).coverage == 0.0


def test_encode_is_deterministic(texture):
    assert encode(texture) == encode(texture)


@pytest.mark.parametrize("steps", [1, 5, -3])
def test_rotation_shifts_the_code(texture, steps):
    per_position = texture.angular_res // 128
    rolled = PolarTexture(
        np.roll(texture.intensities, steps * per_position, axis=1),
        np.roll(texture.valid, steps * per_position, axis=1),
    )
    base, turned = encode(texture), encode(rolled)
    usable = turned.mask & np.roll(base.mask, steps, axis=1)
    assert np.array_equal(turned.code[usable], np.roll(base.code, steps, axis=1)[usable])


def test_invalid_cells_are_masked(texture):
    valid = np.array(texture.valid)
    valid[:, :128] = False
    tmpl = encode(PolarTexture(texture.intensities, valid))
    assert not tmpl.mask[:, :20].any()
    assert tmpl.mask[:, 50:100].any()


def test_texture_too_small():
    tex = PolarTexture(np.random.default_rng(0).random((8, 512)), np.ones((8, 512), dtype=bool))
    with pytest.raises(TextureTooSmall):
        encode(tex)
    with pytest.raises(TextureTooSmall):
        band_rows(8, GaborParams())


def test_band_rows_stay_inside_the_filter_margin():
    rows = band_rows(64, GaborParams())
    assert len(rows) == 8
    assert rows[0] >= 6 and rows[-1] <= 63 - 6
    assert np.all(np.diff(rows) > 0)


def test_self_distance_is_zero(texture):
    tmpl = encode(texture)
    assert hamming_distance(tmpl, tmpl) == 0.0


def test_complement_distance_is_one():
    tmpl = _random_template(1, coverage=1.0)
    assert hamming_distance(tmpl, tmpl.complement(), max_shift=0) == 1.0


def test_shape_mismatch():
    with pytest.raises(GeometryMismatch):
        hamming_distance(_random_template(1), _random_template(2, shape=(8, 64)))


def test_sparse_mask_is_refused():
    sparse = _random_template(3, coverage=0.1)
    with pytest.raises(InsufficientMask):
        hamming_distance(sparse, _random_template(4))


@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 2 ** 32 - 1), st.integers(0, 8))
def test_distance_is_symmetric(seed_a, seed_b, shift):
    a, b = _random_template(seed_a), _random_template(seed_b)
    assert hamming_distance(a, b, shift) == hamming_distance(b, a, shift)


@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 8), st.integers(0, 8))
def test_wider_search_never_increases_distance(seed, narrow, extra):
    a, b = _random_template(seed), _random_template(seed + 1)
    assert hamming_distance(a, b, narrow + extra) <= hamming_distance(a, b, narrow)


@pytest.mark.parametrize("hd, accepted", [(0.36, True), (0.37, False), (0.39, False)])
def test_threshold_is_strict(hd, accepted):
    assert decide(hd, 0.37) is accepted


def test_authenticate_identical_templates(texture):
    tmpl = encode(texture)
    result = authenticate(tmpl, tmpl)
    assert result == Authentication(True, 0.0, 0.37)
    assert result.to_dict() == {"hd": 0.0, "decision": "accept", "threshold": 0.37}


def test_compare_sequences():
    presented = [_random_template(i) for i in range(3)]
    assert compare_sequences(presented, presented) == [0.0, 0.0, 0.0]
    with pytest.raises(GeometryMismatch):
        compare_sequences(presented, presented[:2])


def test_template_file_round_trip(tmp_path, texture):
    path = tmp_path / "presented.tmpl"
    tmpl = encode(texture)
    save_template(tmpl, path)
    assert load_template(path) == tmpl


def test_template_file_errors(tmp_path):
    bad = tmp_path / "bad.tmpl"
    bad.write_bytes(b"PTEX" + bytes(20))
    with pytest.raises(MalformedHeader):
        load_template(bad)
    short = tmp_path / "short.tmpl"
    save_template(_random_template(0), short)
    short.write_bytes(short.read_bytes()[:40])
    with pytest.raises(TruncatedPayload):
        load_template(short)


def test_rendered_frame_matches_its_texture(eye, texture):
    presented = encode_frame(eye.image, segment(eye.image))
    assert presented.coverage > 0.5
    assert hamming_distance(presented, encode(texture)) < 0.37


@pytest.mark.slow
def test_genuine_pairs_are_accepted():
    rng = np.random.default_rng(21)
    accepted = 0
    for trial in range(100):
        seed = 100 + trial // 5
        profile = SubjectProfile.from_seed(seed)
        texture = generate_subject_texture(seed)
        templates = []
        for view in range(2):
            h, v = rng.uniform(-5, 5), rng.uniform(-4, 4)
            frame = render_frame(h, v, profile, texture, [trial, view])
            templates.append(encode_frame(frame.image, segment(frame.image)))
        accepted += hamming_distance(*templates) < 0.37
    assert accepted >= 90


@pytest.mark.slow
def test_impostor_distribution():
    templates = [encode(generate_subject_texture(seed)) for seed in range(201)]
    unshifted = [hamming_distance(templates[i], templates[i + 1], max_shift=0) for i in range(200)]
    assert 0.45 <= np.mean(unshifted) <= 0.55
    searched = [hamming_distance(templates[i], templates[i + 1]) for i in range(100)]
    assert np.mean(searched) >= 0.4
    assert np.mean(np.array(searched) >= 0.37) >= 0.95
