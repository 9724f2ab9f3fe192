import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from config import LivenessParams
from errors import (
    AllSamplesCapped,
    MalformedHeader,
    NonFiniteInput,
    NoSpoofedSamples,
    SignalTooShort,
    SingleClassPartition,
    TooFewSamples,
)
from gaze import GazeTrace
from liveness import (
    REAL,
    SPOOF,
    LstmModel,
    VelocitySignal,
    VelocityWindow,
    attack_success_rate,
    cap_outliers,
    compute_velocity,
    fit,
    forward,
    gradient_check,
    load_model,
    load_windows,
    loss_and_grad,
    majority_vote,
    make_windows,
    parameter_count,
    predict_user,
    preprocess,
    save_model,
    save_windows,
    stack_windows,
    window_count,
    window_predictions,
)


def _trace(t, h, v=None):
    v = np.zeros(len(t)) if v is None else v
    return GazeTrace(t, h, v, np.ones(len(t)))


def test_velocity_of_steady_motion():
    sig = compute_velocity(_trace(np.array([0, 1, 2]) / 30.0, [0.0, 1.0, 2.0]))
    assert sig.vh == pytest.approx([30.0, 30.0])
    assert sig.vv.tolist() == [0.0, 0.0]


def test_velocity_of_constant_position():
    sig = compute_velocity(_trace(np.arange(5) / 30.0, np.full(5, 3.0), np.full(5, -2.0)))
    assert not sig.vh.any() and not sig.vv.any()


def test_velocity_uses_actual_intervals():
    sig = compute_velocity(_trace([0.0, 0.1, 0.4], [0.0, 1.0, 2.0]))
    assert sig.vh == pytest.approx([10.0, 10.0 / 3.0])
    assert sig.t.tolist() == [0.0, 0.1]


def test_velocity_needs_two_samples():
    with pytest.raises(TooFewSamples):
        compute_velocity(_trace([0.0], [0.0]))


def test_outlier_is_replaced_by_interpolation():
    out = cap_outliers(np.array([0.0, 1.0, 2.0]), np.array([10.0, 900.0, 20.0]), 800.0)
    assert out.tolist() == [10.0, 15.0, 20.0]


def test_outliers_at_the_ends_take_the_nearest_survivor():
    out = cap_outliers(np.arange(4.0), np.array([-900.0, 5.0, 7.0, 1000.0]), 800.0)
    assert out.tolist() == [5.0, 5.0, 7.0, 7.0]


def test_everything_capped():
    with pytest.raises(AllSamplesCapped):
        cap_outliers(np.arange(3.0), np.array([900.0, -900.0, 850.0]), 800.0)


def test_constant_channel_normalizes_to_zero():
    t = np.arange(30) / 30.0
    sig = preprocess(VelocitySignal(t, np.full(30, 12.0), np.linspace(0, 5, 30)))
    assert not sig.vh.any()
    assert sig.vv.min() == 0.0 and sig.vv.max() == 1.0


def test_three_hertz_input_keeps_its_grid():
    t = np.arange(10) / 3.0
    vh = np.array([0, 60, 30, 15, 45, 0, 60, 20, 10, 5], dtype=float)
    sig = preprocess(VelocitySignal(t, vh, vh[::-1]), target_rate=3.0)
    assert np.array_equal(sig.t, t)
    assert sig.vh == pytest.approx(vh / 60.0)


def test_resampling_to_three_hertz():
    t = np.arange(91) / 30.0
    sig = preprocess(VelocitySignal(t, np.sin(t), np.cos(t)))
    assert len(sig) == 10
    assert np.diff(sig.t) == pytest.approx(np.full(9, 1 / 3.0))


@pytest.mark.parametrize("n, expected", [(7, 1), (16, 4), (10, 2)])
def test_window_counts(n, expected):
    sig = VelocitySignal(np.arange(n, dtype=float), np.arange(n, dtype=float), np.zeros(n))
    windows = make_windows(sig, 7, 3, SPOOF, subject=4)
    assert len(windows) == expected
    assert windows[-1].data[:, 0].tolist() == list(range(3 * (expected - 1), 3 * (expected - 1) + 7))
    assert all(w.label_name == "spoof" and w.subject == 4 for w in windows)


def test_signal_too_short():
    sig = VelocitySignal(np.arange(6.0), np.zeros(6), np.zeros(6))
    with pytest.raises(SignalTooShort):
        make_windows(sig, 7, 3)


@given(st.integers(20, 400), st.integers(1, 20), st.integers(1, 10))
def test_window_count_formula(n, length, step):
    sig = VelocitySignal(np.arange(n, dtype=float), np.zeros(n), np.zeros(n))
    assert len(make_windows(sig, length, step)) == window_count(n, length, step) == (n - length) // step + 1


def _random_model(hidden, seed):
    rng = np.random.default_rng(seed)
    return LstmModel.from_vector(rng.normal(0, 0.5, parameter_count(hidden)), hidden)


def test_zero_model_is_undecided(rng):
    model = LstmModel.zeros(16)
    for _ in range(5):
        assert forward(model, rng.random((7, 2))) == 0.5


def test_forward_is_pure(rng):
    model = _random_model(4, 1)
    window = VelocityWindow(rng.random((7, 2)), SPOOF, 0)
    assert forward(model, window) == forward(model, window)


def test_single_unit_recurrence():
    model = LstmModel(
        W=[[0.5, -0.3], [0.2, 0.1], [-0.4, 0.6], [0.3, 0.3]],
        U=[[0.7], [-0.2], [0.5], [0.1]],
        b=[0.1, 1.0, -0.1, 0.2],
        w_out=[1.5],
        b_out=[-0.3],
    )
    window = np.array([[0.2, 0.9], [0.6, 0.1]])

    def sig(z):
        return 1.0 / (1.0 + math.exp(-z))

    h = c = 0.0
    W, U, b = model.W, model.U[:, 0], model.b
    for x in window:
        z = [W[k] @ x + U[k] * h + b[k] for k in range(4)]
        i, f, g, o = sig(z[0]), sig(z[1]), math.tanh(z[2]), sig(z[3])
        c = f * c + i * g
        h = o * math.tanh(c)
    expected = sig(1.5 * h - 0.3)
    assert forward(model, window) == pytest.approx(expected, abs=1e-12)


def test_non_finite_window():
    with pytest.raises(NonFiniteInput):
        forward(LstmModel.zeros(2), np.array([[0.0, np.nan]] * 7))


def test_model_shapes_are_checked():
    with pytest.raises(ValueError):
        LstmModel(W=np.zeros((8, 2)), U=np.zeros((8, 3)), b=np.zeros(8), w_out=np.zeros(2), b_out=np.zeros(1))


def _batch(seed, n=6, length=5):
    rng = np.random.default_rng(seed)
    return rng.random((n, length, 2)), (np.arange(n) % 2).astype(float)


def test_gradient_matches_finite_differences():
    X, y = _batch(3)
    assert gradient_check(_random_model(4, 2), X, y) < 1e-4


@pytest.mark.slow
@pytest.mark.parametrize("hidden", [2, 4, 16])
def test_gradient_over_random_models(hidden):
    rng = np.random.default_rng(hidden)
    for k in range(7):
        model = LstmModel.initialize(hidden, [hidden, k])
        X = rng.random((int(rng.integers(2, 9)), int(rng.integers(3, 8)), 2))
        y = rng.integers(0, 2, X.shape[0]).astype(float)
        assert gradient_check(model, X, y) < 1e-4


def test_corrupted_forget_gradient_is_caught():
    X, y = _batch(3)
    hidden = 4

    def corrupted(model, X, y):
        loss, grads = loss_and_grad(model, X, y)
        for name in ("W", "U", "b"):
            grads[name] = np.array(grads[name])
            grads[name][hidden:2 * hidden] *= 2.0
        return loss, grads

    assert gradient_check(_random_model(hidden, 2), X, y, grad_fn=corrupted) > 1e-1


def test_gradient_check_on_zero_model():
    X, y = _batch(4)
    error = gradient_check(LstmModel.zeros(3), X, y)
    assert math.isfinite(error)
    assert error < 1e-4


def _windows(rng, n, subject, label, low, high, length=7):
    return [VelocityWindow(rng.uniform(low, high, (length, 2)), label, subject, k) for k in range(n)]


def _separable(rng, subjects, n=20):
    windows = []
    for s in subjects:
        windows += _windows(rng, n, s, REAL, 0.0, 0.4)
        windows += _windows(rng, n, s, SPOOF, 0.6, 1.0)
    return windows


def _val_accuracy(model, windows):
    predictions = window_predictions(model, windows)
    return np.mean([p.predicted == p.label for p in predictions])


def test_separable_windows_are_learned():
    rng = np.random.default_rng(8)
    train_w, val_w = _separable(rng, range(4)), _separable(rng, range(4, 6))
    model, history = fit(train_w, val_w, LivenessParams(hidden=4, max_epochs=100, patience=100), seed=1)
    assert len(history.epochs) <= 100
    assert _val_accuracy(model, val_w) >= 0.99


def test_shuffled_labels_stay_at_chance():
    rng = np.random.default_rng(9)
    train_w = [VelocityWindow(rng.random((7, 2)), int(rng.integers(2)), k // 20, k % 20) for k in range(200)]
    val_w = [VelocityWindow(rng.random((7, 2)), k % 2, 100 + k // 20, k % 20) for k in range(400)]
    model, _ = fit(train_w, val_w, LivenessParams(hidden=4, max_epochs=30, patience=5), seed=2)
    assert 0.4 <= _val_accuracy(model, val_w) <= 0.6


def test_training_is_deterministic():
    rng = np.random.default_rng(10)
    train_w, val_w = _separable(rng, range(3), n=8), _separable(rng, range(3, 4), n=8)
    params = LivenessParams(hidden=3, max_epochs=5)
    first, _ = fit(train_w, val_w, params, seed=[5, 6])
    second, _ = fit(train_w, val_w, params, seed=[5, 6])
    assert first == second


def test_single_class_partition():
    rng = np.random.default_rng(11)
    only_real = _windows(rng, 10, 0, REAL, 0.0, 1.0)
    with pytest.raises(SingleClassPartition):
        fit(only_real, _separable(rng, [1]), LivenessParams(hidden=2, max_epochs=1))


def test_early_stopping_restores_the_best_epoch():
    rng = np.random.default_rng(12)
    train_w, val_w = _separable(rng, range(3)), _separable(rng, range(3, 5))
    params = LivenessParams(hidden=4, max_epochs=60, patience=3)
    model, history = fit(train_w, val_w, params, seed=3)
    best = history.best
    assert best.val_loss == min(r.val_loss for r in history.epochs)
    X, y = stack_windows(val_w)
    assert loss_and_grad(model, X, y)[0] == pytest.approx(best.val_loss)


@pytest.mark.parametrize(
    "decisions, expected",
    [([REAL, REAL, SPOOF], REAL), ([REAL, SPOOF], SPOOF), ([SPOOF], SPOOF), ([REAL], REAL)],
)
def test_majority_vote(decisions, expected):
    assert majority_vote(decisions) == expected


def test_undecided_model_flags_the_user(rng):
    windows = _windows(rng, 3, 0, SPOOF, 0.0, 1.0)
    assert predict_user(LstmModel.zeros(2), windows) == SPOOF


def test_attack_success_rate_extremes():
    assert attack_success_rate([(SPOOF, REAL)] * 4 + [(REAL, REAL)], [(SPOOF, REAL)]) == (1.0, 1.0)
    assert attack_success_rate([(SPOOF, SPOOF)] * 4, [(SPOOF, SPOOF), (REAL, SPOOF)]) == (0.0, 0.0)
    assert attack_success_rate([(SPOOF, REAL), (SPOOF, SPOOF)], [(SPOOF, SPOOF)]) == (0.5, 0.0)


def test_attack_success_rate_needs_spoofs():
    with pytest.raises(NoSpoofedSamples):
        attack_success_rate([(REAL, REAL)], [(SPOOF, REAL)])


def test_model_file_round_trip(tmp_path):
    model = _random_model(5, 3)
    path = tmp_path / "model.txt"
    save_model(model, path)
    assert load_model(path) == model


def test_model_file_header(tmp_path):
    path = tmp_path / "model.txt"
    path.write_text("hidden = 2\n")
    with pytest.raises(MalformedHeader):
        load_model(path)


def test_window_file_round_trip(tmp_path, rng):
    windows = _separable(rng, [3, 8], n=3)
    path = tmp_path / "windows.csv"
    save_windows(windows, path)
    loaded = load_windows(path)
    assert len(loaded) == len(windows)
    for a, b in zip(windows, loaded):
        assert (a.subject, a.label, a.index) == (b.subject, b.label, b.index)
        assert np.allclose(a.data, b.data)


def test_preprocess_rejects_tiny_signals():
    with pytest.raises(TooFewSamples):
        preprocess(VelocitySignal([0.0, 1.0], [1.0, 2.0], [0.0, 0.0]))
