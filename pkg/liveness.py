import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import LivenessParams
from errors import (
    AllSamplesCapped,
    DivergedLoss,
    IoFailure,
    MalformedHeader,
    NonFiniteInput,
    NonMonotonicTime,
    NoSpoofedSamples,
    NoWindows,
    SignalTooShort,
    SingleClassPartition,
    TooFewSamples,
)
from gaze import GazeTrace

logger = logging.getLogger(__name__)

REAL = 0
SPOOF = 1
LABEL_NAMES = {REAL: "real", SPOOF: "spoof"}
LABEL_VALUES = {name: value for value, name in LABEL_NAMES.items()}
MODEL_HEADER = "# irisswap-lstm v1"
PARAM_NAMES = ("W", "U", "b", "w_out", "b_out")
_CHECK_CHUNK = 256

DEFAULT_PARAMS = LivenessParams()


@dataclass(frozen=True, eq=False)
class VelocitySignal:
    """Horizontal and vertical angular velocity (deg/s) at timestamps t."""

    t: np.ndarray
    vh: np.ndarray
    vv: np.ndarray

    def __post_init__(self):
        for name in ("t", "vh", "vv"):
            column = np.array(getattr(self, name), dtype=np.float64, copy=True).reshape(-1)
            column.setflags(write=False)
            object.__setattr__(self, name, column)
        if not (self.t.size == self.vh.size == self.vv.size):
            raise ValueError("velocity columns must have equal lengths")

    def __len__(self) -> int:
        return int(self.t.size)

    @property
    def channels(self) -> np.ndarray:
        return np.stack([self.vh, self.vv], axis=1)


@dataclass(frozen=True, eq=False)
class VelocityWindow:
    data: np.ndarray
    label: int
    subject: int
    index: int = 0
    split: str = ""

    @property
    def label_name(self) -> str:
        return LABEL_NAMES[self.label]


def compute_velocity(trace: GazeTrace) -> VelocitySignal:
    """Forward differences, stamped at the leading sample."""
    if len(trace) < 2:
        raise TooFewSamples(f"velocity needs two samples, trace has {len(trace)}")
    dt = np.diff(trace.t)
    if np.any(dt <= 0):
        raise NonMonotonicTime("timestamps are not strictly increasing")
    return VelocitySignal(trace.t[:-1], np.diff(trace.h) / dt, np.diff(trace.v) / dt)


def cap_outliers(t: np.ndarray, values: np.ndarray, cap: float) -> np.ndarray:
    """Replace |v| > cap by linear interpolation between surviving neighbours; ends take the nearest survivor."""
    values = np.asarray(values, dtype=np.float64)
    over = np.abs(values) > cap
    if over.all():
        raise AllSamplesCapped(f"every sample exceeds {cap} deg/s")
    if not over.any():
        return values.copy()
    out = values.copy()
    out[over] = np.interp(t[over], t[~over], values[~over])
    return out


def _min_max(values: np.ndarray) -> np.ndarray:
    span = float(values.max() - values.min())
    if span == 0.0:
        return np.zeros_like(values)
    return (values - values.min()) / span


def preprocess(
    sig: VelocitySignal,
    cap: float = DEFAULT_PARAMS.cap_deg_s,
    target_rate: float = DEFAULT_PARAMS.target_rate_hz,
) -> VelocitySignal:
    """Cap and interpolate outliers, resample to a uniform grid, min-max each channel over this user."""
    if len(sig) < 4:
        raise TooFewSamples(f"preprocessing needs at least 4 velocity samples, got {len(sig)}")
    vh = cap_outliers(sig.t, sig.vh, cap)
    vv = cap_outliers(sig.t, sig.vv, cap)
    count = int(math.floor((sig.t[-1] - sig.t[0]) * target_rate + 1e-9)) + 1
    grid = sig.t[0] + np.arange(count) / target_rate
    vh = np.interp(grid, sig.t, vh)
    vv = np.interp(grid, sig.t, vv)
    return VelocitySignal(grid, _min_max(vh), _min_max(vv))


def window_count(n: int, length: int, step: int) -> int:
    return 0 if n < length else (n - length) // step + 1


def make_windows(
    sig: VelocitySignal,
    length: int = DEFAULT_PARAMS.window,
    step: int = DEFAULT_PARAMS.step,
    label: int = REAL,
    subject: int = 0,
    split: str = "",
) -> List[VelocityWindow]:
    if len(sig) < length:
        raise SignalTooShort(f"signal has {len(sig)} samples, a window needs {length}")
    channels = sig.channels
    return [
        VelocityWindow(channels[start:start + length], label, subject, k, split)
        for k, start in enumerate(range(0, len(sig) - length + 1, step))
    ]


def stack_windows(windows: Sequence[VelocityWindow]) -> Tuple[np.ndarray, np.ndarray]:
    if not windows:
        raise NoWindows("no windows to stack")
    return np.stack([w.data for w in windows]), np.array([w.label for w in windows], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class LstmModel:
    """
    Single-layer LSTM over 2 input channels, one logit read out from the last
    hidden state. Gate blocks in W, U and b are stacked [input, forget, cell, output].
    """

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = np.array(getattr(self, name), dtype=np.float64, copy=True)
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        H = self.hidden
        expected = {"W": (4 * H, 2), "U": (4 * H, H), "b": (4 * H,), "w_out": (H,), "b_out": (1,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def hidden(self) -> int:
        return self.w_out.shape[0]

    @classmethod
    def zeros(cls, hidden: int) -> "LstmModel":
        return cls.from_vector(np.zeros(parameter_count(hidden)), hidden)

    @classmethod
    def initialize(cls, hidden: int, seed) -> "LstmModel":
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(hidden)
        vector = rng.uniform(-bound, bound, parameter_count(hidden))
        params = _unpack(vector, hidden)
        params["b"][hidden:2 * hidden] = 1.0
        return cls(**params)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, name).ravel() for name in PARAM_NAMES])

    @classmethod
    def from_vector(cls, vector: np.ndarray, hidden: int) -> "LstmModel":
        return cls(**_unpack(np.asarray(vector, dtype=np.float64), hidden))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())))

    def __eq__(self, other) -> bool:
        return isinstance(other, LstmModel) and np.array_equal(self.to_vector(), other.to_vector())


def parameter_count(hidden: int) -> int:
    return 4 * hidden * 2 + 4 * hidden * hidden + 4 * hidden + hidden + 1


def _shapes(hidden: int) -> List[Tuple[str, Tuple[int, ...]]]:
    H = hidden
    return [("W", (4 * H, 2)), ("U", (4 * H, H)), ("b", (4 * H,)), ("w_out", (H,)), ("b_out", (1,))]


def _unpack(vector: np.ndarray, hidden: int) -> Dict[str, np.ndarray]:
    """Split the trailing axis of vector into named parameter arrays (leading axes kept)."""
    out, offset = {}, 0
    lead = vector.shape[:-1]
    for name, shape in _shapes(hidden):
        size = int(np.prod(shape))
        out[name] = vector[..., offset:offset + size].reshape(lead + shape).copy()
        offset += size
    return out


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward_cache(model: LstmModel, X: np.ndarray):
    N, T, _ = X.shape
    H = model.hidden
    h = np.zeros((N, H))
    c = np.zeros((N, H))
    cache = []
    for t in range(T):
        x = X[:, t, :]
        z = x @ model.W.T + h @ model.U.T + model.b
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c_next = f * c + i * g
        tc = np.tanh(c_next)
        cache.append((x, h, c, i, f, g, o, tc))
        h, c = o * tc, c_next
    logits = h @ model.w_out + model.b_out[0]
    return logits, h, cache


def _bce(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


def forward_logits(model: LstmModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise NonFiniteInput("window holds non-finite values")
    logits, _, _ = _forward_cache(model, X)
    return logits


def forward(model: LstmModel, window: Union[VelocityWindow, np.ndarray]) -> float:
    """P(spoof) for one window."""
    data = window.data if isinstance(window, VelocityWindow) else np.asarray(window, dtype=np.float64)
    return float(_sigmoid(forward_logits(model, data[None, :, :])[0]))


def predict_proba(model: LstmModel, windows: Sequence[VelocityWindow]) -> np.ndarray:
    X, _ = stack_windows(windows)
    return _sigmoid(forward_logits(model, X))


def loss_and_grad(model: LstmModel, X: np.ndarray, y: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean binary cross-entropy on logits and its gradient by backprop through time."""
    N = X.shape[0]
    H = model.hidden
    logits, h_last, cache = _forward_cache(model, X)
    loss = _bce(logits, y)
    dlogit = (_sigmoid(logits) - y) / N

    grads = {
        "W": np.zeros_like(model.W),
        "U": np.zeros_like(model.U),
        "b": np.zeros_like(model.b),
        "w_out": h_last.T @ dlogit,
        "b_out": np.array([dlogit.sum()]),
    }
    dh = dlogit[:, None] * model.w_out[None, :]
    dc = np.zeros((N, H))
    for x, h_prev, c_prev, i, f, g, o, tc in reversed(cache):
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        grads["W"] += dz.T @ x
        grads["U"] += dz.T @ h_prev
        grads["b"] += dz.sum(axis=0)
        dh = dz @ model.U
        dc = dc * f
    return loss, grads


def _pack(grads: Dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(grads[name]).ravel() for name in PARAM_NAMES])


def _stacked_loss(vectors: np.ndarray, X: np.ndarray, y: np.ndarray, hidden: int) -> np.ndarray:
    """Loss of many parameter vectors at once, computed in the dtype of vectors."""
    p = _unpack(vectors, hidden)
    H = hidden
    X = X.astype(vectors.dtype)
    y = y.astype(vectors.dtype)
    M, N = vectors.shape[0], X.shape[0]
    Wt = np.swapaxes(p["W"], 1, 2)
    Ut = np.swapaxes(p["U"], 1, 2)
    h = np.zeros((M, N, H), dtype=vectors.dtype)
    c = np.zeros((M, N, H), dtype=vectors.dtype)
    for t in range(X.shape[1]):
        z = X[:, t, :] @ Wt + h @ Ut + p["b"][:, None, :]
        i = _sigmoid(z[..., :H])
        f = _sigmoid(z[..., H:2 * H])
        g = np.tanh(z[..., 2 * H:3 * H])
        o = _sigmoid(z[..., 3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
    logits = (h * p["w_out"][:, None, :]).sum(axis=-1) + p["b_out"]
    return np.mean(np.logaddexp(0, logits) - y[None, :] * logits, axis=1)


GradFn = Callable[[LstmModel, np.ndarray, np.ndarray], Tuple[float, Dict[str, np.ndarray]]]


def gradient_check(
    model: LstmModel,
    X: np.ndarray,
    y: np.ndarray,
    epsilon: float = 1e-5,
    grad_fn: Optional[GradFn] = None,
) -> float:
    """
    Max relative error between analytic gradients and fourth-order central
    differences of the loss. The differences are taken in extended precision.
    """
    grad_fn = grad_fn or loss_and_grad
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _, grads = grad_fn(model, X, y)
    analytic = _pack(grads)

    theta = model.to_vector().astype(np.longdouble)
    eps = np.longdouble(epsilon)
    numeric = np.empty(theta.size, dtype=np.longdouble)
    for start in range(0, theta.size, _CHECK_CHUNK):
        idx = np.arange(start, min(start + _CHECK_CHUNK, theta.size))
        rows = np.arange(idx.size)
        losses = {}
        for k in (2, 1, -1, -2):
            shifted = np.repeat(theta[None, :], idx.size, axis=0)
            shifted[rows, idx] += k * eps
            losses[k] = _stacked_loss(shifted, X, y, model.hidden)
        numeric[idx] = (-losses[2] + 8 * losses[1] - 8 * losses[-1] + losses[-2]) / (12 * eps)
    numeric = numeric.astype(np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainingHistory:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch - 1]


def _require_classes(y: np.ndarray, partition: str) -> None:
    present = set(np.unique(y).astype(int).tolist())
    if present != {REAL, SPOOF}:
        raise SingleClassPartition(
            f"{partition} partition holds only {[LABEL_NAMES[p] for p in sorted(present)]}",
            {"partition": partition},
        )


def _accuracy(model: LstmModel, X: np.ndarray, y: np.ndarray, threshold: float) -> float:
    return float(np.mean((_sigmoid(forward_logits(model, X)) >= threshold) == (y == SPOOF)))


def fit(
    train_windows: Sequence[VelocityWindow],
    val_windows: Sequence[VelocityWindow],
    params: Optional[LivenessParams] = None,
    seed=0,
) -> Tuple[LstmModel, TrainingHistory]:
    """Adam on minibatches, gradient-norm clipping, early stop on validation loss with best-parameter restore."""
    params = params or DEFAULT_PARAMS
    X, y = stack_windows(train_windows)
    Xv, yv = stack_windows(val_windows)
    _require_classes(y, "train")
    _require_classes(yv, "validation")

    rng = np.random.default_rng(seed)
    model = LstmModel.initialize(params.hidden, rng)
    theta = model.to_vector()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    step = 0

    history = TrainingHistory()
    best_loss, best_theta, stale = np.inf, theta.copy(), 0
    for epoch in range(1, params.max_epochs + 1):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), params.batch_size):
            batch = order[start:start + params.batch_size]
            loss, grads = loss_and_grad(LstmModel.from_vector(theta, params.hidden), X[batch], y[batch])
            if not math.isfinite(loss):
                raise DivergedLoss(f"training loss became {loss} in epoch {epoch}", {"epoch": epoch})
            total += loss * len(batch)
            g = _pack(grads)
            norm = float(np.linalg.norm(g))
            if norm > params.clip_norm:
                g = g * (params.clip_norm / norm)
            step += 1
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * g * g
            m_hat = m / (1.0 - beta1 ** step)
            v_hat = v / (1.0 - beta2 ** step)
            theta = theta - params.learning_rate * m_hat / (np.sqrt(v_hat) + adam_eps)

        current = LstmModel.from_vector(theta, params.hidden)
        val_loss = _bce(forward_logits(current, Xv), yv)
        if not math.isfinite(val_loss):
            raise DivergedLoss(f"validation loss became {val_loss} in epoch {epoch}", {"epoch": epoch})
        record = EpochRecord(epoch, total / len(y), val_loss, _accuracy(current, Xv, yv, params.threshold))
        history.epochs.append(record)
        logger.debug(
            f"Epoch {epoch}: train {record.train_loss:.4f} val {record.val_loss:.4f} acc {record.val_accuracy:.3f}"
        )
        if val_loss < best_loss:
            best_loss, best_theta, stale = val_loss, theta.copy(), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= params.patience:
                history.stop_reason = "patience"
                break
    else:
        history.stop_reason = "max_epochs"

    logger.info(
        f"Training stopped after {len(history.epochs)} epochs ({history.stop_reason}), best epoch {history.best_epoch}"
    )
    return LstmModel.from_vector(best_theta, params.hidden), history


def train(
    windows: Sequence[VelocityWindow],
    split,
    params: Optional[LivenessParams] = None,
    seed=0,
) -> Tuple[LstmModel, TrainingHistory]:
    """Train on the split's training subjects, early-stop on its validation subjects."""
    train_set = set(split.train)
    val_set = set(split.validation)
    return fit(
        [w for w in windows if w.subject in train_set],
        [w for w in windows if w.subject in val_set],
        params,
        seed,
    )


@dataclass(frozen=True)
class WindowPrediction:
    subject: int
    label: int
    index: int
    probability: float
    predicted: int


def window_predictions(
    model: LstmModel,
    windows: Sequence[VelocityWindow],
    threshold: float = DEFAULT_PARAMS.threshold,
) -> List[WindowPrediction]:
    probabilities = predict_proba(model, windows)
    return [
        WindowPrediction(w.subject, w.label, w.index, float(p), SPOOF if p >= threshold else REAL)
        for w, p in zip(windows, probabilities)
    ]


def majority_vote(decisions: Iterable[int]) -> int:
    decisions = list(decisions)
    if not decisions:
        raise NoWindows("no window decisions to vote on")
    spoof = sum(1 for d in decisions if d == SPOOF)
    # ties go to spoof
    return SPOOF if 2 * spoof >= len(decisions) else REAL


def predict_user(
    model: LstmModel,
    windows: Sequence[VelocityWindow],
    threshold: float = DEFAULT_PARAMS.threshold,
) -> int:
    if not windows:
        raise NoWindows("user has no windows")
    return majority_vote(p.predicted for p in window_predictions(model, windows, threshold))


def attack_success_rate(
    window_preds: Sequence[Tuple[int, int]],
    user_preds: Sequence[Tuple[int, int]],
) -> Tuple[float, float]:
    """
    Both arguments are (true label, predicted label) pairs. Returns the share
    of spoofed windows and of spoofed users that were accepted as real.
    """
    rates = []
    for name, pairs in (("window", window_preds), ("user", user_preds)):
        spoofed = [pred for true, pred in pairs if true == SPOOF]
        if not spoofed:
            raise NoSpoofedSamples(f"no spoofed {name} in the evaluated set")
        rates.append(sum(1 for pred in spoofed if pred == REAL) / len(spoofed))
    return rates[0], rates[1]


def save_model(model: LstmModel, path: Union[str, Path]) -> None:
    """Plain text, one parameter per line: name rows x cols = values."""
    lines = [MODEL_HEADER, f"hidden = {model.hidden}"]
    for name in PARAM_NAMES:
        value = getattr(model, name)
        shape = "x".join(str(d) for d in value.shape)
        lines.append(f"{name} {shape} = " + " ".join(repr(float(x)) for x in value.ravel()))
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as ex:
        raise IoFailure(f"cannot write model {path}: {ex}", {"path": str(path)})


def load_model(path: Union[str, Path]) -> LstmModel:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as ex:
        raise IoFailure(f"cannot read model {path}: {ex}", {"path": str(path)})
    if not lines or lines[0].strip() != MODEL_HEADER:
        raise MalformedHeader(f"{path} is not a liveness model file")
    values = {}
    try:
        hidden = int(lines[1].split("=", 1)[1])
        for line in lines[2:]:
            if not line.strip():
                continue
            head, body = line.split("=", 1)
            name, shape = head.split()
            dims = tuple(int(d) for d in shape.split("x"))
            values[name] = np.array([float(x) for x in body.split()], dtype=np.float64).reshape(dims)
        return LstmModel(**{name: values[name] for name in PARAM_NAMES})
    except (IndexError, KeyError, ValueError) as ex:
        raise MalformedHeader(f"{path} has a malformed parameter line: {ex}", {"path": str(path)})


def windows_to_frame(windows: Sequence[VelocityWindow]) -> pd.DataFrame:
    """Two rows per window, one per channel (0 horizontal, 1 vertical)."""
    rows = []
    for w in windows:
        for ch in range(w.data.shape[1]):
            rows.append([w.subject, w.label_name, w.index, ch, *w.data[:, ch].tolist()])
    length = windows[0].data.shape[0] if windows else DEFAULT_PARAMS.window
    return pd.DataFrame(rows, columns=["subject", "label", "window_index", "ch"] + [f"s{k}" for k in range(length)])


def save_windows(windows: Sequence[VelocityWindow], path: Union[str, Path]) -> None:
    try:
        windows_to_frame(windows).to_csv(path, index=False)
    except OSError as ex:
        raise IoFailure(f"cannot write windows {path}: {ex}", {"path": str(path)})


def load_windows(path: Union[str, Path]) -> List[VelocityWindow]:
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as ex:
        raise IoFailure(f"cannot read windows {path}: {ex}", {"path": str(path)})
    sample_columns = [c for c in frame.columns if c.startswith("s") and c[1:].isdigit()]
    windows = []
    for (subject, label, index), group in frame.groupby(["subject", "label", "window_index"], sort=False):
        data = group.sort_values("ch")[sample_columns].to_numpy(dtype=np.float64).T
        windows.append(VelocityWindow(data, LABEL_VALUES[label], int(subject), int(index)))
    return windows
