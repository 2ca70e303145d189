"""Traffic-load forecaster (the rApp).

A single stacked LSTM reads the last ``look_back`` network-wide load
snapshots and forecasts the next one. A snapshot holds, for every DU and
slice, the user count and the summed offered bits, normalised to [0, 1]:

    features = [counts / N  (M*L values) , loads / (2 * slice_mean * N_l)  (M*L values)]

By default the network forecasts the *change* over the last snapshot
(``residual=True``) with a zero-initialised read-out, so an untrained model
is exactly the persistence forecast.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import PredictorConfig, SimConfig
from .env import SlicingEnv
from .errors import NumericalFailure, ShapeError
from .nn import AdamState, LstmStack, apply_adam, check_finite, lstm_backward, lstm_forward

log = logging.getLogger(__name__)


@dataclass
class LoadScaler:
    count_max: float
    load_max: np.ndarray  # (L,)
    n_dus: int
    n_slices: int

    @classmethod
    def from_config(cls, cfg: SimConfig, n_dus: int, scale: float = 1.0) -> "LoadScaler":
        load_max = np.array([2.0 * s.mean_demand * cfg.mobility.slot * max(s.n_users, 1) for s in cfg.slices])
        return cls(scale * cfg.n_users, scale * load_max, n_dus, len(cfg.slices))

    @property
    def dim(self) -> int:
        return 2 * self.n_dus * self.n_slices

    def encode(self, counts: np.ndarray, loads: np.ndarray) -> np.ndarray:
        """(..., M, L) counts and loads -> (..., 2*M*L) features."""
        lead = counts.shape[:-2]
        c = (counts / self.count_max).reshape(lead + (-1,))
        l = (loads / self.load_max).reshape(lead + (-1,))
        return np.concatenate([c, l], axis=-1)

    def decode(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lead = features.shape[:-1]
        half = self.n_dus * self.n_slices
        shape = lead + (self.n_dus, self.n_slices)
        counts = features[..., :half].reshape(shape) * self.count_max
        loads = features[..., half:].reshape(shape) * self.load_max
        return counts, loads


@dataclass
class TrafficWindow:
    look_back: int
    features: np.ndarray  # (look_back, D), normalised

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.look_back:
            raise ShapeError(f"window must have {self.look_back} rows, got {self.features.shape}")


@dataclass
class PredictionRecord:
    counts: np.ndarray  # (M, L) predicted users, >= 0
    loads: np.ndarray  # (M, L) predicted bits per slot, >= 0


@dataclass
class TrafficDataset:
    x_train: np.ndarray  # (n, look_back, D)
    y_train: np.ndarray  # (n, D)
    x_val: np.ndarray
    y_val: np.ndarray


@dataclass
class LossCurve:
    train: list[float] = field(default_factory=list)
    val: list[float] = field(default_factory=list)
    best_epoch: int = 0


class Predictor:
    def __init__(self, stack: LstmStack, scaler: LoadScaler, look_back: int, residual: bool = True):
        if stack.in_dim != scaler.dim or stack.out_dim != scaler.dim:
            raise ShapeError("LSTM width does not match the feature layout")
        self.stack = stack
        self.scaler = scaler
        self.look_back = look_back
        self.residual = residual

    @classmethod
    def create(cls, cfg: SimConfig, n_dus: int, rng: np.random.Generator, scale: float = 1.0,
               pcfg: PredictorConfig | None = None) -> "Predictor":
        pcfg = pcfg or cfg.predictor
        scaler = LoadScaler.from_config(cfg, n_dus, scale)
        stack = LstmStack.init(scaler.dim, pcfg.hidden, scaler.dim, pcfg.layers, rng, zero_output=pcfg.residual)
        return cls(stack, scaler, pcfg.look_back, pcfg.residual)

    def forward(self, windows: np.ndarray, keep_cache: bool = False):
        """Normalised one-step forecast for (B, look_back, D) windows."""
        if windows.ndim != 3 or windows.shape[1:] != (self.look_back, self.scaler.dim):
            raise ShapeError(f"expected (B, {self.look_back}, {self.scaler.dim}) windows, got {windows.shape}")
        out, cache = lstm_forward(self.stack, windows, keep_cache=keep_cache)
        pred = out[:, -1]
        if self.residual:
            pred = pred + windows[:, -1]
        return pred, cache

    def predict_batch(self, windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pred, _ = self.forward(windows)
        counts, loads = self.scaler.decode(pred)
        return np.maximum(counts, 0.0), np.maximum(loads, 0.0)


def predict_load(predictor: Predictor, window: TrafficWindow) -> PredictionRecord:
    counts, loads = predictor.predict_batch(window.features[None])
    return PredictionRecord(counts[0], loads[0])


def naive_baseline(window: TrafficWindow, scaler: LoadScaler) -> PredictionRecord:
    """Persistence forecast: the next snapshot equals the last one."""
    counts, loads = scaler.decode(window.features[-1])
    return PredictionRecord(counts, loads)


# ---------------------------------------------------------------- data


def load_trace(cfg: SimConfig, steps: int, seed: int | np.random.SeedSequence) -> tuple[np.ndarray, np.ndarray]:
    """Simulate mobility and traffic only; returns (counts, loads) of shape (steps, M, L)."""
    env = SlicingEnv(cfg, n_replicas=1, seed=seed)
    st = env.reset()
    counts, loads = [st.counts[0]], [st.loads[0]]
    for _ in range(steps - 1):
        st = env.advance()
        counts.append(st.counts[0])
        loads.append(st.loads[0])
    return np.array(counts, dtype=float), np.array(loads)


def sliding_windows(trace: np.ndarray, look_back: int) -> tuple[np.ndarray, np.ndarray]:
    """(T, D) trace -> (T - look_back, look_back, D) windows and next-step targets."""
    if len(trace) <= look_back:
        raise ValueError(f"trace of length {len(trace)} too short for look_back {look_back}")
    n = len(trace) - look_back
    idx = np.arange(look_back)[None, :] + np.arange(n)[:, None]
    return trace[idx], trace[look_back:]


def build_dataset(trace: np.ndarray, look_back: int, val_fraction: float = 0.2) -> TrafficDataset:
    """Sliding windows with a chronological train/validation split."""
    x, y = sliding_windows(trace, look_back)
    n_val = int(round(len(x) * val_fraction)) if len(x) > 1 else 0
    n_train = len(x) - n_val
    return TrafficDataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:])


# ---------------------------------------------------------------- training


def mse(predictor: Predictor, x: np.ndarray, y: np.ndarray, chunk: int = 1024) -> float:
    if len(x) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(x), chunk):
        pred, _ = predictor.forward(x[i:i + chunk])
        total += float(np.sum((pred - y[i:i + chunk]) ** 2))
    return total / y.size


def persistence_mse(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((x[:, -1] - y) ** 2))


def train_predictor(predictor: Predictor, data: TrafficDataset, epochs: int, opt: AdamState,
                    rng: np.random.Generator, batch_size: int = 32, patience: int = 10) -> tuple[Predictor, LossCurve]:
    """Minibatch MSE training with BPTT over the whole window.

    Keeps the parameters of the best validation epoch (epoch 0 = untouched
    model) and stops after ``patience`` epochs without improvement.
    """
    curve = LossCurve()
    if epochs <= 0 or len(data.x_train) == 0:
        return predictor, curve
    has_val = len(data.x_val) > 0

    def val_loss():
        return mse(predictor, data.x_val, data.y_val) if has_val else mse(predictor, data.x_train, data.y_train)

    best = val_loss()
    best_params = [p.copy() for p in predictor.stack.params()]
    stale = 0
    n = len(data.x_train)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = data.x_train[idx], data.y_train[idx]
            pred, cache = predictor.forward(xb, keep_cache=True)
            diff = pred - yb
            dy = np.zeros((len(idx), predictor.look_back, predictor.scaler.dim))
            dy[:, -1] = 2.0 * diff / diff.size
            grads, _ = lstm_backward(predictor.stack, cache, dy)
            apply_adam(predictor.stack, grads, opt)
        train_loss = mse(predictor, data.x_train, data.y_train)
        current = val_loss()
        if not (np.isfinite(train_loss) and np.isfinite(current)):
            raise NumericalFailure(f"predictor loss became non-finite at epoch {epoch}")
        curve.train.append(train_loss)
        curve.val.append(current)
        log.debug("predictor epoch %d train %.3e val %.3e", epoch, train_loss, current)
        if current < best:
            best, stale, curve.best_epoch = current, 0, epoch
            best_params = [p.copy() for p in predictor.stack.params()]
        else:
            stale += 1
            if stale >= patience:
                break
    for p, b in zip(predictor.stack.params(), best_params):
        p[...] = b
    predictor.stack.version += 1
    check_finite(predictor.stack.params(), "predictor parameters")
    return predictor, curve


def fit_predictor(cfg: SimConfig, seed: int | np.random.SeedSequence, scale: float = 1.0,
                  pcfg: PredictorConfig | None = None) -> tuple[Predictor, LossCurve, TrafficDataset]:
    """Generate a synthetic trace, train a predictor on it, return all three."""
    pcfg = pcfg or cfg.predictor
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    trace_seed, init_seed, shuffle_seed = ss.spawn(3)
    counts, loads = load_trace(cfg, pcfg.trace_steps, trace_seed)
    n_dus = counts.shape[1]
    predictor = Predictor.create(cfg, n_dus, np.random.default_rng(init_seed), scale, pcfg)
    data = build_dataset(predictor.scaler.encode(counts, loads), pcfg.look_back, pcfg.val_fraction)
    predictor, curve = train_predictor(predictor, data, pcfg.epochs, AdamState(lr=pcfg.lr),
                                       np.random.default_rng(shuffle_seed), pcfg.batch_size, pcfg.patience)
    return predictor, curve, data
