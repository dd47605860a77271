"""Stacked LSTM used to extrapolate neighbor positions.

The network is written directly in numpy (double precision) with hand-coded
backpropagation through time, so its gradients can be checked against
finite differences.  Positions are fed as a single feature per step; the
final hidden state of the top layer goes through a dense head that emits the
next (normalized) position.
"""
from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .kinematics import differentiate_kinematics

logger = logging.getLogger(__name__)

INPUT_STEPS = 20
WINDOW_STEPS = INPUT_STEPS + 1
POSITION_SCALE = 1.0  # meters; unit floor in span mode, fixed unit otherwise


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    huber_delta: float = 1.0
    batch_size: int = 64
    epochs: int = 100
    clip_norm: float = 5.0
    seed: int = 0
    shuffle: bool = True
    # cosine decay from learning_rate down to this value; None keeps it fixed
    final_learning_rate: float | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        self.betas = tuple(self.betas)


class TrainingDiverged(RuntimeError):
    pass


class LaneMismatch(ValueError):
    pass


@dataclass
class TrainWindow:
    """One normalized training example: 20 inputs and the following value."""

    input: np.ndarray
    target: float


@dataclass
class LstmNetwork:
    """Stack of LSTM layers with a dense single-value output head.

    ``weights[k]`` has shape ``(in_dim + hidden, 4 * hidden)`` where the first
    ``in_dim`` rows act on the layer input and the rest on the previous hidden
    state.  Gate columns are ordered input, forget, candidate, output.
    """

    hidden: int
    n_layers: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    w_out: np.ndarray
    b_out: np.ndarray
    lane: str = ""
    offset_mode: str = "span"
    scale: float = POSITION_SCALE
    # standardization of encoded inputs (per step) and targets
    in_mean: np.ndarray = field(default_factory=lambda: np.zeros(INPUT_STEPS))
    in_std: np.ndarray = field(default_factory=lambda: np.ones(INPUT_STEPS))
    out_mean: float = 0.0
    out_std: float = 1.0
    meta: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, hidden=100, n_layers=4, seed=0, lane="", offset_mode="span",
                   scale=POSITION_SCALE):
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(hidden)
        weights, biases = [], []
        for k in range(n_layers):
            in_dim = 1 if k == 0 else hidden
            weights.append(rng.uniform(-bound, bound, size=(in_dim + hidden, 4 * hidden)))
            b = np.zeros(4 * hidden)
            b[hidden:2 * hidden] = 1.0  # forget-gate bias
            biases.append(b)
        w_out = rng.uniform(-bound, bound, size=(hidden, 1))
        b_out = np.zeros(1)
        return cls(hidden, n_layers, weights, biases, w_out, b_out, lane=lane,
                   offset_mode=offset_mode, scale=scale)

    # -- parameters as a flat list, in a fixed order -----------------------

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, self.w_out, self.b_out]

    def copy(self) -> "LstmNetwork":
        return LstmNetwork(
            self.hidden, self.n_layers,
            [w.copy() for w in self.weights], [b.copy() for b in self.biases],
            self.w_out.copy(), self.b_out.copy(),
            lane=self.lane, offset_mode=self.offset_mode, scale=self.scale,
            in_mean=self.in_mean.copy(), in_std=self.in_std.copy(),
            out_mean=self.out_mean, out_std=self.out_std,
            meta=json.loads(json.dumps(self.meta)),
        )

    # -- normalization ------------------------------------------------------

    def normalize(self, window: np.ndarray):
        """Map raw position windows ``(B, T)`` to network units.

        Returns the normalized windows, per-window offsets and units.
        """
        window = np.atleast_2d(np.asarray(window, dtype=float))
        return _encode(window, self.offset_mode, self.scale)

    @staticmethod
    def denormalize(value: np.ndarray, ref: np.ndarray, unit: np.ndarray) -> np.ndarray:
        return value * unit + ref

    def fit_standardization(self, x: np.ndarray, y: np.ndarray, min_std: float = 1e-6) -> None:
        """Set input/target standardization from encoded training arrays."""
        self.in_mean = x.mean(axis=0)
        self.in_std = np.maximum(x.std(axis=0), min_std)
        self.out_mean = float(y.mean())
        self.out_std = float(max(y.std(), min_std))

    def standardize_target(self, y):
        return (np.asarray(y, dtype=float) - self.out_mean) / self.out_std

    def predict_encoded(self, x: np.ndarray) -> np.ndarray:
        """Network output mapped back to the encoded-position scale."""
        return self.forward(x) * self.out_std + self.out_mean

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, keep_cache=False, check=False):
        """Run a batch of encoded sequences ``(B, T)`` through the stack.

        Inputs are standardized internally; the output is the standardized
        target.  Returns predictions of shape ``(B,)`` and, when
        ``keep_cache`` is set, the per-step activations for :meth:`backward`.
        """
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        x = (x - self.in_mean[:x.shape[1]]) / self.in_std[:x.shape[1]]
        B, T = x.shape
        H = self.hidden
        seq = x[:, :, None]
        caches = []
        for W, b in zip(self.weights, self.biases):
            in_dim = W.shape[0] - H
            Wx, Wh = W[:in_dim], W[in_dim:]
            # input contributions for every step in one product
            zx = (seq.reshape(B * T, in_dim) @ Wx).reshape(B, T, 4 * H) + b
            gates = np.empty((B, T, 4 * H))
            cells = np.empty((B, T + 1, H))
            hs = np.empty((B, T + 1, H))
            cells[:, 0] = 0.0
            hs[:, 0] = 0.0
            for t in range(T):
                z = zx[:, t] + hs[:, t] @ Wh
                gt = gates[:, t]
                gt[:, :2 * H] = expit(z[:, :2 * H])
                gt[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
                gt[:, 3 * H:] = expit(z[:, 3 * H:])
                cells[:, t + 1] = gt[:, H:2 * H] * cells[:, t] + gt[:, :H] * gt[:, 2 * H:3 * H]
                hs[:, t + 1] = gt[:, 3 * H:] * np.tanh(cells[:, t + 1])
            if check:
                sig = np.concatenate([gates[..., :2 * H], gates[..., 3 * H:]], axis=-1)
                assert np.all((sig > 0) & (sig < 1))
                assert np.all(np.abs(np.tanh(cells)) <= 1.0)
            if keep_cache:
                caches.append((seq, gates, cells, hs))
            seq = hs[:, 1:]
        h_top = seq[:, -1, :]
        y = h_top @ self.w_out + self.b_out
        if keep_cache:
            return y[:, 0], (caches, h_top)
        return y[:, 0]

    def backward(self, dy: np.ndarray, cache) -> list[np.ndarray]:
        """Gradients of ``sum(dy * y)`` with respect to :meth:`params`."""
        caches, h_top = cache
        H = self.hidden
        dy = np.asarray(dy, dtype=float)[:, None]
        dw_out = h_top.T @ dy
        db_out = dy.sum(axis=0)
        B = dy.shape[0]
        T = caches[0][1].shape[1]
        # gradient reaching the top layer's hidden outputs, per step
        dseq = np.zeros((B, T, H))
        dseq[:, -1, :] = dy @ self.w_out.T
        dWs = [None] * self.n_layers
        dbs = [None] * self.n_layers
        for k in range(self.n_layers - 1, -1, -1):
            W = self.weights[k]
            in_dim = W.shape[0] - H
            Wx, Wh = W[:in_dim], W[in_dim:]
            seq_in, gates, cells, hs = caches[k]
            dz_all = np.empty((B, T, 4 * H))
            dh_next = np.zeros((B, H))
            dc_next = np.zeros((B, H))
            for t in range(T - 1, -1, -1):
                gt = gates[:, t]
                i, f, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
                tc = np.tanh(cells[:, t + 1])
                dh = dseq[:, t] + dh_next
                dc = dh * o * (1.0 - tc * tc) + dc_next
                dz = dz_all[:, t]
                dz[:, :H] = dc * g * i * (1.0 - i)
                dz[:, H:2 * H] = dc * cells[:, t] * f * (1.0 - f)
                dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
                dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
                dc_next = dc * f
                dh_next = dz @ Wh.T
            dz_flat = dz_all.reshape(B * T, 4 * H)
            dWx = seq_in.reshape(B * T, in_dim).T @ dz_flat
            dWh = hs[:, :-1].reshape(B * T, H).T @ dz_flat
            dWs[k] = np.concatenate([dWx, dWh], axis=0)
            dbs[k] = dz_flat.sum(axis=0)
            dseq = (dz_flat @ Wx.T).reshape(B, T, in_dim)
        return [*dWs, *dbs, dw_out, db_out]

    # -- inference ----------------------------------------------------------

    def predict_next(self, window: np.ndarray) -> np.ndarray:
        """Predict the position following each raw window ``(B, 20)`` in meters."""
        xn, ref, unit = self.normalize(window)
        return self.denormalize(self.predict_encoded(xn), ref, unit)

    # -- persistence --------------------------------------------------------

    def save(self, path):
        path = Path(path)
        arrays = {f"w{k}": w for k, w in enumerate(self.weights)}
        arrays.update({f"b{k}": b for k, b in enumerate(self.biases)})
        header = {
            "hidden": self.hidden, "n_layers": self.n_layers, "lane": self.lane,
            "offset_mode": self.offset_mode, "scale": self.scale, "meta": self.meta,
            "shapes": {k: list(v.shape) for k, v in arrays.items()},
        }
        header["out_mean"] = self.out_mean
        header["out_std"] = self.out_std
        arrays.update(w_out=self.w_out, b_out=self.b_out, in_mean=self.in_mean, in_std=self.in_std,
                      header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8))
        _write_npz(path, arrays)

    @classmethod
    def load(cls, path) -> "LstmNetwork":
        with np.load(path) as data:
            header = json.loads(bytes(data["header"]).decode())
            n = header["n_layers"]
            weights = [data[f"w{k}"].copy() for k in range(n)]
            biases = [data[f"b{k}"].copy() for k in range(n)]
            return cls(header["hidden"], n, weights, biases, data["w_out"].copy(),
                       data["b_out"].copy(), lane=header["lane"],
                       offset_mode=header["offset_mode"], scale=header["scale"],
                       in_mean=data["in_mean"].copy(), in_std=data["in_std"].copy(),
                       out_mean=header["out_mean"], out_std=header["out_std"],
                       meta=header["meta"])


def _write_npz(path, arrays: dict) -> None:
    """``np.savez`` equivalent with fixed member timestamps, so equal
    networks give byte-identical files."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def _encode(window: np.ndarray, mode: str, scale: float):
    """Encode raw position windows as ``(inputs, ref, unit)``.

    The network output maps back to meters as ``ref + value * unit``.  In
    ``span`` mode the unit is the window's own displacement (at least
    ``scale`` meters), so speed is carried by the unit and the network only
    has to learn the shape of the motion.
    """
    if mode == "first":
        ref = window[:, 0]
        unit = np.full(len(window), float(scale))
    elif mode == "last":
        ref = window[:, -1]
        unit = np.full(len(window), float(scale))
    elif mode == "span":
        ref = window[:, -1]
        unit = np.maximum(np.abs(window[:, -1] - window[:, 0]), scale)
    else:
        raise ValueError(f"unknown offset mode {mode!r}")
    return (window - ref[:, None]) / unit[:, None], ref, unit


def huber(residual: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise Huber loss and its derivative with respect to the residual."""
    a = np.abs(residual)
    quad = a <= delta
    loss = np.where(quad, 0.5 * residual ** 2, delta * (a - 0.5 * delta))
    grad = np.where(quad, residual, delta * np.sign(residual))
    return loss, grad


def loss_and_grad(net: LstmNetwork, x: np.ndarray, y: np.ndarray, delta: float):
    """Mean Huber loss over a batch and its gradient list."""
    pred, cache = net.forward(x, keep_cache=True)
    loss, dl = huber(pred - y, delta)
    grads = net.backward(dl / len(y), cache)
    return float(loss.mean()), grads


def make_windows(tracks: Iterable[np.ndarray], net: LstmNetwork | None = None,
                 offset_mode="span", scale=1.0) -> list[TrainWindow]:
    """Cut each position sequence into stride-1 windows of 21 steps.

    Sequences shorter than 21 steps contribute nothing.
    """
    if net is not None:
        offset_mode, scale = net.offset_mode, net.scale
    out = []
    for positions in tracks:
        positions = np.asarray(positions, dtype=float)
        if positions.size < WINDOW_STEPS:
            continue
        raw = np.lib.stride_tricks.sliding_window_view(positions, WINDOW_STEPS)
        xs, ref, unit = _encode(raw[:, :INPUT_STEPS], offset_mode, scale)
        ys = (raw[:, -1] - ref) / unit
        out.extend(TrainWindow(xi.copy(), float(yi)) for xi, yi in zip(xs, ys))
    return out


def stack_windows(windows: Sequence[TrainWindow]) -> tuple[np.ndarray, np.ndarray]:
    x = np.array([w.input for w in windows], dtype=float).reshape(len(windows), INPUT_STEPS)
    y = np.array([w.target for w in windows], dtype=float)
    return x, y


class Adam:
    def __init__(self, params, lr, betas, eps):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(net: LstmNetwork, windows: Sequence[TrainWindow], cfg: TrainConfig,
          fit_standardization: bool = True, log_every: int = 0) -> tuple[LstmNetwork, list[float]]:
    """Fit ``net`` to the windows with Adam on the mean Huber loss.

    Unless told otherwise the input/target standardization is first fitted
    to the windows; the loss is measured on standardized targets.  The
    network is updated in place and returned with the mean training loss of
    every epoch.  Batch order comes from ``cfg.seed`` only, so identical
    inputs give bitwise identical histories.
    """
    if not windows:
        raise ValueError("no training windows")
    x, y = stack_windows(windows)
    if fit_standardization:
        net.fit_standardization(x, y)
    y = net.standardize_target(y)
    rng = np.random.default_rng(cfg.seed)
    params = net.params()
    opt = Adam(params, cfg.learning_rate, cfg.betas, cfg.eps)
    history = []
    n = len(y)
    for epoch in range(cfg.epochs):
        opt.lr = _scheduled_lr(cfg, epoch)
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grad(net, x[idx], y[idx], cfg.huber_delta)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if cfg.clip_norm and norm > cfg.clip_norm:
                grads = [g * (cfg.clip_norm / norm) for g in grads]
            opt.step(params, grads)
            total += loss * len(idx)
        history.append(total / n)
        if not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingDiverged(f"non-finite weights after epoch {epoch}")
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d loss %.3e", epoch + 1, history[-1])
    net.meta.update({"train_config": asdict(cfg), "loss_history": history})
    return net, history


def _scheduled_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.final_learning_rate is None or cfg.epochs <= 1:
        return cfg.learning_rate
    frac = epoch / (cfg.epochs - 1)
    lo, hi = cfg.final_learning_rate, cfg.learning_rate
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * frac))


def evaluate_loss(net: LstmNetwork, windows: Sequence[TrainWindow], delta: float) -> float:
    x, y = stack_windows(windows)
    loss, _ = huber(net.forward(x) - net.standardize_target(y), delta)
    return float(loss.mean())


def pretrain_neighbor(net: LstmNetwork, initial: np.ndarray, horizon_steps: int,
                      lane: str | None = None) -> np.ndarray:
    """Roll the network forward ``horizon_steps`` from 20 observed positions.

    Each prediction is appended to the window, which then slides by one, so
    later inputs mix observed and predicted values.  Accepts ``(20,)`` or a
    batch ``(B, 20)``; returns meters with shape ``(horizon,)`` or
    ``(B, horizon)``.
    """
    if lane is not None and net.lane and lane != net.lane:
        raise LaneMismatch(f"network trained for lane {net.lane!r}, asked for {lane!r}")
    initial = np.asarray(initial, dtype=float)
    single = initial.ndim == 1
    window = np.atleast_2d(initial)
    if window.shape[1] != INPUT_STEPS:
        raise ValueError(f"expected {INPUT_STEPS} initial positions, got {window.shape[1]}")
    out = np.empty((window.shape[0], horizon_steps))
    for k in range(horizon_steps):
        nxt = net.predict_next(window)
        out[:, k] = nxt
        window = np.concatenate([window[:, 1:], nxt[:, None]], axis=1)
    return out[0] if single else out


def derive_neighbor_kinematics(positions: np.ndarray, dt: float):
    """Velocities and accelerations of a predicted position sequence."""
    return differentiate_kinematics(positions, dt)
