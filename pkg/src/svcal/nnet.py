"""Fully connected ReLU network with min-max input scaling, trained by Adam.

All trainable parameters live in one flat float64 buffer; per-layer weight
matrices and bias vectors are views into it, which keeps the Adam update a
handful of vector operations.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import TrainingDiverged


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_layers: int = 4
    hidden_width: int = 200
    activation: str = "relu"
    init: str = "glorot_uniform"
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.hidden_layers < 0:
            raise ValueError("hidden_layers must be >= 0")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.init != "glorot_uniform":
            raise ValueError(f"unsupported init {self.init!r}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [1]

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))


class Network:
    """MLP ``R^d -> R``; hidden layers use ReLU, the output is linear.

    Inputs are scaled to ``[0, 1]`` with the stored ``input_low`` /
    ``input_high`` before the first layer.
    """

    def __init__(self, spec: NetworkSpec, input_low=None, input_high=None, params: np.ndarray | None = None):
        self.spec = spec
        d = spec.input_dim
        self.input_low = np.zeros(d) if input_low is None else np.array(input_low, dtype=float).reshape(d)
        self.input_high = np.ones(d) if input_high is None else np.array(input_high, dtype=float).reshape(d)
        if np.any(self.input_high <= self.input_low):
            raise ValueError("input_high must exceed input_low in every dimension")
        self.params = np.zeros(spec.n_params)
        self.weights, self.biases = self._views(self.params)
        if params is None:
            self._glorot_init(np.random.default_rng(spec.seed))
        else:
            params = np.asarray(params, dtype=float)
            if params.shape != self.params.shape:
                raise ValueError(f"expected {self.params.size} parameters, got {params.size}")
            self.params[:] = params

    def _views(self, buf):
        ws, bs = [], []
        off = 0
        s = self.spec.layer_sizes
        for a, b in zip(s[:-1], s[1:]):
            ws.append(buf[off:off + a * b].reshape(a, b))
            off += a * b
            bs.append(buf[off:off + b])
            off += b
        return ws, bs

    def _glorot_init(self, rng):
        for w in self.weights:
            limit = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            w[:] = rng.uniform(-limit, limit, size=w.shape)

    @property
    def scale(self) -> np.ndarray:
        return self.input_high - self.input_low

    def copy(self) -> "Network":
        return Network(self.spec, self.input_low, self.input_high, self.params.copy())

    def grad_views(self, flat):
        """Split a flat gradient into per-layer ``(dW, db)`` lists."""
        return self._views(flat)

    def scale_inputs(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected inputs of shape (n, {self.spec.input_dim}), got {x.shape}")
        return (x - self.input_low) / self.scale


def _forward_cache(net: Network, xs, dropout=0.0, rng=None):
    acts = [xs]
    masks = []
    a = xs
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        if i == last:
            return z[:, 0], acts, masks
        a = np.maximum(z, 0.0)
        if dropout > 0.0:
            keep = (rng.random(a.shape) >= dropout) / (1.0 - dropout)
            a = a * keep
            masks.append(keep)
        else:
            masks.append(None)
        acts.append(a)


_ROW_BLOCK = 64


def forward(net: Network, x) -> np.ndarray:
    """Predicted outputs for a batch of raw (unscaled) input rows.

    Rows go through the matrix products in zero-padded blocks of fixed
    height, so BLAS takes the same kernel path for every row and a row's
    output is bit-identical whatever batch it arrives in.
    """
    xs = net.scale_inputs(x)
    n = xs.shape[0]
    out = np.empty(n)
    pad = np.zeros((_ROW_BLOCK, xs.shape[1]))
    for s in range(0, n, _ROW_BLOCK):
        blk = xs[s:s + _ROW_BLOCK]
        k = blk.shape[0]
        if k < _ROW_BLOCK:
            pad[:k] = blk
            pad[k:] = 0.0
            blk = pad
        out[s:s + k] = _forward_cache(net, blk)[0][:k]
    return out


def _backprop(net, acts, masks, dout):
    """Reverse pass given ``dL/d(output)``; returns the flat parameter
    gradient and ``dL/d(scaled input)``."""
    grad = np.zeros_like(net.params)
    gw, gb = net.grad_views(grad)
    delta = dout[:, None]
    for i in range(len(net.weights) - 1, -1, -1):
        a = acts[i]
        gw[i][:] = a.T @ delta
        gb[i][:] = delta.sum(axis=0)
        delta = delta @ net.weights[i].T
        if i > 0:
            if masks[i - 1] is not None:
                delta = delta * masks[i - 1]
            # ReLU subgradient at exactly 0 is taken as 0
            delta = delta * (acts[i] > 0.0)
    return grad, delta


def loss_and_grad(net: Network, x, y, dropout=0.0, rng=None) -> tuple[float, np.ndarray]:
    xs = net.scale_inputs(x)
    y = np.asarray(y, dtype=float).reshape(-1)
    out, acts, masks = _forward_cache(net, xs, dropout, rng)
    resid = out - y
    n = y.size
    grad, _ = _backprop(net, acts, masks, 2.0 * resid / n)
    return float(resid @ resid / n), grad


def backward(net: Network, x, y) -> np.ndarray:
    """Flat gradient of ``mean((F(x) - y)^2)`` with respect to
    ``net.params``; use ``net.grad_views`` for per-layer arrays."""
    return loss_and_grad(net, x, y)[1]


def input_gradient(net: Network, x) -> np.ndarray:
    """``dF/dx`` at a single raw input vector, in raw parameter units."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    xs = net.scale_inputs(x)
    _, acts, masks = _forward_cache(net, xs)
    _, dxs = _backprop(net, acts, masks, np.ones(1))
    return dxs[0] / net.scale


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8000
    batch_size: int = 1024
    initial_lr: float = 1e-3
    lr_halving_period: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be > 0")
        if self.epochs < 0 or self.lr_halving_period < 1:
            raise ValueError("epochs must be >= 0 and lr_halving_period >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr * 0.5 ** (epoch // self.lr_halving_period)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainTrace:
    epoch: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        rows = np.column_stack([self.epoch, self.lr, self.train_loss, self.val_mse])
        np.savetxt(path, rows, delimiter=",", header="epoch,lr,train_loss,val_mse", comments="",
                   fmt=["%d", "%.17g", "%.17g", "%.17g"])


def _xy(data):
    if hasattr(data, "inputs"):
        return data.inputs, data.iv
    x, y = data
    return np.asarray(x, dtype=float), np.asarray(y, dtype=float).reshape(-1)


def train(net: Network, train_data, val_data, cfg: TrainConfig = TrainConfig(), log_every: int = 0, logger=None):
    """Mini-batch Adam on MSE. ``train_data`` / ``val_data`` are datasets
    (inputs and ``iv`` targets) or ``(x, y)`` pairs. Returns a trained copy
    and the per-epoch trace; ``train_loss`` is the mean batch loss of the
    epoch, ``val_mse`` is measured after it."""
    x, y = _xy(train_data)
    xv, yv = _xy(val_data)
    if len(y) == 0 or len(yv) == 0:
        raise ValueError("training and validation data must be non-empty")
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    m = np.zeros_like(net.params)
    v = np.zeros_like(net.params)
    step = 0
    trace = TrainTrace()
    n = len(y)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            loss, g = loss_and_grad(net, x[idx], y[idx], cfg.dropout_rate, rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            total += loss * idx.size
            step += 1
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            mhat = m / (1.0 - cfg.beta1 ** step)
            vhat = v / (1.0 - cfg.beta2 ** step)
            net.params -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
        train_loss = total / n
        resid = forward(net, xv) - yv
        val_mse = float(resid @ resid / resid.size)
        if not (math.isfinite(train_loss) and math.isfinite(val_mse)):
            raise TrainingDiverged(epoch)
        trace.epoch.append(epoch)
        trace.lr.append(lr)
        trace.train_loss.append(train_loss)
        trace.val_mse.append(val_mse)
        if logger is not None and log_every and (epoch % log_every == 0 or epoch == cfg.epochs - 1):
            logger.info("epoch %d lr %.3g train %.4e val %.4e", epoch, lr, train_loss, val_mse)
    return net, trace


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    mse: float
    mae: float
    mape: float
    r2: float

    def table(self) -> str:
        head = f"{'MSE':>12} {'MAE':>12} {'MAPE':>12} {'R2':>12}"
        row = f"{self.mse:12.4e} {self.mae:12.4e} {self.mape:12.4e} {self.r2:12.8f}"
        return head + "\n" + row

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(pred, target) -> Metrics:
    pred = np.asarray(pred, dtype=float).reshape(-1)
    target = np.asarray(target, dtype=float).reshape(-1)
    if pred.size == 0 or pred.shape != target.shape:
        raise ValueError("need equal-length non-empty predictions and targets")
    err = pred - target
    sst = float(np.sum((target - target.mean()) ** 2))
    if sst == 0.0:
        raise ValueError("R^2 undefined: targets have zero variance")
    sse = float(err @ err)
    return Metrics(
        mse=sse / err.size,
        mae=float(np.mean(np.abs(err))),
        mape=float(np.mean(np.abs(err) / np.abs(target))),
        r2=1.0 - sse / sst,
    )


def evaluate(net: Network, data) -> Metrics:
    x, y = _xy(data)
    return metrics(forward(net, x), y)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_weights(net: Network, path: str | Path) -> None:
    doc = {
        "spec": asdict(net.spec),
        "input_ranges": {"low": net.input_low.tolist(), "high": net.input_high.tolist()},
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(net.weights, net.biases)],
        "seed": net.spec.seed,
    }
    Path(path).write_text(json.dumps(doc))


def load_weights(path: str | Path) -> Network:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: weights file parse error: {exc}") from None
    try:
        spec = NetworkSpec(**doc["spec"])
        ranges = doc["input_ranges"]
        net = Network(spec, ranges["low"], ranges["high"])
        layers = doc["layers"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed weights file ({exc})") from None
    if len(layers) != len(net.weights):
        raise ValueError(f"{path}: expected {len(net.weights)} layers, found {len(layers)}")
    for i, layer in enumerate(layers):
        try:
            w = np.asarray(layer["w"], dtype=float)
            b = np.asarray(layer["b"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: malformed layer {i} ({exc})") from None
        if w.shape != net.weights[i].shape or b.shape != net.biases[i].shape:
            raise ValueError(f"{path}: layer {i} shape mismatch")
        net.weights[i][:] = w
        net.biases[i][:] = b
    if not np.all(np.isfinite(net.params)):
        raise ValueError(f"{path}: non-finite weights")
    return net
