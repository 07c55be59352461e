"""Small convolutional classifier written directly in numpy.

Architecture: one single-channel conv layer (valid padding, stride 1, ReLU),
dropout, two ReLU dense layers each followed by dropout, and a softmax output.
Trained with Adam on categorical cross-entropy plus an L2 penalty on the conv
and hidden dense kernels.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

from .errors import ConfigurationError, InvalidArgument
from .labeling import ConfusionMatrix, per_class_f1

CHECKPOINT_VERSION = 1
LABELS = (1, 2, 3)
CONV_KEYS = ("conv_w", "conv_b")
DENSE_KEYS = ("d1_w", "d1_b", "d2_w", "d2_b", "out_w", "out_b")
REGULARIZED = ("conv_w", "d1_w", "d2_w")


@dataclass(frozen=True)
class ModelConfig:
    filters: int = 16
    kernel: int = 5
    dropout: float = 0.2
    dense1: int = 512
    dense2: int = 128
    n_classes: int = 3
    l2: float = 1e-3
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.filters, self.kernel, self.dense1, self.dense2, self.n_classes) <= 0:
            raise ConfigurationError("layer widths and kernel size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout rate must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("patience, batch size and max epochs must be >= 1")


@dataclass(frozen=True)
class FinetuneConfig:
    start_lr: float = 2e-5
    peak_lr: float = 1e-4
    end_lr: float = 1e-6
    peak_epoch: int = 5
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.peak_epoch < self.epochs:
            raise ConfigurationError("peak epoch must lie strictly inside the schedule")


def slanted_triangular_lr(epoch, cfg: FinetuneConfig = FinetuneConfig()):
    """Linear rise from ``start_lr`` to ``peak_lr`` at ``peak_epoch``, then linear decay to ``end_lr``."""
    if epoch <= cfg.peak_epoch:
        return cfg.start_lr + (cfg.peak_lr - cfg.start_lr) * epoch / cfg.peak_epoch
    frac = min(1.0, (epoch - cfg.peak_epoch) / (cfg.epochs - cfg.peak_epoch))
    return cfg.peak_lr + (cfg.end_lr - cfg.peak_lr) * frac


@dataclass(eq=False)
class ModelState:
    params: dict
    config: ModelConfig
    input_shape: tuple
    history: list = field(default_factory=list)

    @property
    def conv_shape(self):
        k = self.config.kernel
        return self.input_shape[0] - k + 1, self.input_shape[1] - k + 1

    def copy(self):
        return ModelState({k: v.copy() for k, v in self.params.items()}, self.config, self.input_shape,
                          [dict(h) for h in self.history])

    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))


def parameter_count(cfg: ModelConfig, input_shape):
    h, w = input_shape
    k = cfg.kernel
    flat = (h - k + 1) * (w - k + 1) * cfg.filters
    return (k * k * cfg.filters + cfg.filters + flat * cfg.dense1 + cfg.dense1
            + cfg.dense1 * cfg.dense2 + cfg.dense2 + cfg.dense2 * cfg.n_classes + cfg.n_classes)


def glorot_limit(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_model(cfg: ModelConfig, input_shape, seed=0) -> ModelState:
    h, w = (int(v) for v in input_shape)
    k = cfg.kernel
    if h < k or w < k:
        raise ConfigurationError(f"kernel {k}x{k} does not fit an input of {h}x{w}")
    rng = np.random.default_rng(seed)
    dt = np.dtype(cfg.dtype)
    flat = (h - k + 1) * (w - k + 1) * cfg.filters

    def glorot(shape, fan_in, fan_out):
        lim = glorot_limit(fan_in, fan_out)
        return rng.uniform(-lim, lim, size=shape).astype(dt)

    params = {
        "conv_w": glorot((k * k, cfg.filters), k * k, k * k * cfg.filters),
        "conv_b": np.zeros(cfg.filters, dtype=dt),
        "d1_w": glorot((flat, cfg.dense1), flat, cfg.dense1),
        "d1_b": np.zeros(cfg.dense1, dtype=dt),
        "d2_w": glorot((cfg.dense1, cfg.dense2), cfg.dense1, cfg.dense2),
        "d2_b": np.zeros(cfg.dense2, dtype=dt),
        "out_w": glorot((cfg.dense2, cfg.n_classes), cfg.dense2, cfg.n_classes),
        "out_b": np.zeros(cfg.n_classes, dtype=dt),
    }
    return ModelState(params, cfg, (h, w))


# -- forward / backward ------------------------------------------------------------


def _patches(x, k):
    """``(n, ho*wo, k*k)`` im2col view of ``(n, h, w)`` inputs."""
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    n, ho, wo = win.shape[:3]
    return win.reshape(n, ho * wo, k * k)


def _dropout_mask(shape, rate, rng, dtype):
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    return ((rng.random(shape) < keep) / keep).astype(dtype)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(model, x):
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise InvalidArgument(f"batch shape {x.shape} does not match model input {model.input_shape}")
    return x.astype(model.params["conv_w"].dtype, copy=False)


def _forward(model, x, train, rng, masks=None):
    p = model.params
    cfg = model.config
    cache = {"x": x}
    P = _patches(x, cfg.kernel)
    cache["P"] = P
    conv = P @ p["conv_w"] + p["conv_b"]  # (n, ho*wo, F)
    a0 = np.maximum(conv, 0).reshape(len(x), -1)
    cache["conv"] = conv
    drop = masks if masks is not None else {}
    if train and masks is None:
        drop = {name: _dropout_mask(shape, cfg.dropout, rng, x.dtype)
                for name, shape in (("m0", a0.shape), ("m1", (len(x), cfg.dense1)), ("m2", (len(x), cfg.dense2)))}
    if train and drop.get("m0") is not None:
        a0 = a0 * drop["m0"]
    cache["a0"] = a0
    z1 = a0 @ p["d1_w"] + p["d1_b"]
    a1 = np.maximum(z1, 0)
    if train and drop.get("m1") is not None:
        a1 = a1 * drop["m1"]
    cache["z1"], cache["a1"] = z1, a1
    z2 = a1 @ p["d2_w"] + p["d2_b"]
    a2 = np.maximum(z2, 0)
    if train and drop.get("m2") is not None:
        a2 = a2 * drop["m2"]
    cache["z2"], cache["a2"] = z2, a2
    logits = a2 @ p["out_w"] + p["out_b"]
    cache["drop"] = drop if train else {}
    return _softmax(logits), cache


def forward(model: ModelState, batch, mode="eval", rng=None):
    """Class probability rows; ``mode="train"`` applies inverted dropout drawn from ``rng``."""
    if mode not in ("train", "eval"):
        raise InvalidArgument("mode must be 'train' or 'eval'")
    x = _check_batch(model, batch)
    if mode == "train" and rng is None:
        raise InvalidArgument("train mode needs a random generator for dropout")
    probs, _ = _forward(model, x, mode == "train", rng)
    return probs


def one_hot(labels, n_classes=3, labels_order=LABELS):
    pos = {v: i for i, v in enumerate(labels_order)}
    y = np.zeros((len(labels), n_classes))
    for i, lab in enumerate(labels):
        y[i, pos[int(lab)]] = 1.0
    return y


def l2_penalty(model):
    total = 0.0
    for k in REGULARIZED:
        w = model.params[k].reshape(-1)
        total += float(np.dot(w, w))
    return model.config.l2 * total


def _add_decay(g, lam, w):
    if lam:
        g += 2 * lam * w
    return g


def _loss_grads(model, x, y, train, rng, masks=None, need=None, l2_grad=True):
    probs, c = _forward(model, x, train, rng, masks)
    n = len(x)
    ce = -float(np.mean(np.sum(y * np.log(np.clip(probs, 1e-300, None)), axis=1)))
    loss = ce + l2_penalty(model)
    p = model.params
    # the optimizer may add the L2 term itself to spare a pass over the big kernels
    lam = model.config.l2 if l2_grad else 0.0
    dt = p["conv_w"].dtype
    g = {}
    dlog = ((probs - y) / n).astype(dt)
    g["out_w"] = c["a2"].T @ dlog
    g["out_b"] = dlog.sum(axis=0)
    da2 = dlog @ p["out_w"].T
    if c["drop"].get("m2") is not None:
        da2 = da2 * c["drop"]["m2"]
    dz2 = da2 * (c["z2"] > 0)
    g["d2_w"] = _add_decay(c["a1"].T @ dz2, lam, p["d2_w"])
    g["d2_b"] = dz2.sum(axis=0)
    da1 = dz2 @ p["d2_w"].T
    if c["drop"].get("m1") is not None:
        da1 = da1 * c["drop"]["m1"]
    dz1 = da1 * (c["z1"] > 0)
    g["d1_w"] = _add_decay(c["a0"].T @ dz1, lam, p["d1_w"])
    g["d1_b"] = dz1.sum(axis=0)
    if need is None or "conv_w" in need:
        da0 = dz1 @ p["d1_w"].T
        if c["drop"].get("m0") is not None:
            da0 = da0 * c["drop"]["m0"]
        dconv = da0.reshape(c["conv"].shape) * (c["conv"] > 0)
        F = dconv.shape[-1]
        g["conv_w"] = c["P"].reshape(-1, c["P"].shape[-1]).T @ dconv.reshape(-1, F)
        g["conv_w"] = _add_decay(g["conv_w"], lam, p["conv_w"])
        g["conv_b"] = dconv.reshape(-1, F).sum(axis=0)
    return loss, g, probs


def loss_and_grads(model: ModelState, batch, labels, rng=None, masks=None):
    """Mean cross-entropy plus L2 penalty, and the gradient of every tensor.

    Dropout is active when ``rng`` (or explicit ``masks``) is given.
    """
    x = _check_batch(model, batch)
    y = one_hot(labels, model.config.n_classes).astype(x.dtype)
    train = rng is not None or masks is not None
    loss, g, _ = _loss_grads(model, x, y, train, rng, masks)
    return loss, g


# -- training ------------------------------------------------------------------------


@njit(cache=True, fastmath=True)
def _adam_kernel(w, g, m, v, lr, b1, b2, eps, c1, c2, decay):
    # scalars arrive in the weight dtype so float32 models stay in float32
    one = w.dtype.type(1.0)
    for i in range(w.size):
        gi = g[i] + decay * w[i]
        mi = b1 * m[i] + (one - b1) * gi
        vi = b2 * v[i] + (one - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        w[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


class Adam:
    def __init__(self, params, keys, beta1=0.9, beta2=0.999, eps=1e-8):
        self.keys = tuple(keys)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(params[k]) for k in self.keys}
        self.v = {k: np.zeros_like(params[k]) for k in self.keys}
        self.t = 0

    def step(self, params, grads, lr, decay=None):
        """``decay`` maps tensor names to a coefficient c adding ``c * w`` to their gradient."""
        decay = decay or {}
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in self.keys:
            w = params[k]
            g = np.ascontiguousarray(grads[k], dtype=w.dtype)
            t = w.dtype.type
            _adam_kernel(w.reshape(-1), g.reshape(-1), self.m[k].reshape(-1), self.v[k].reshape(-1),
                         t(lr), t(self.b1), t(self.b2), t(self.eps), t(c1), t(c2), t(decay.get(k, 0.0)))


class EarlyStopping:
    """Stop once the monitored loss has not improved for ``patience`` consecutive epochs."""

    def __init__(self, patience=10):
        self.patience = patience
        self.best = np.inf
        self.bad_epochs = 0
        self.epoch = 0

    def update(self, loss):
        self.epoch += 1
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def predict(model, x, batch_size=256):
    x = _check_batch(model, x)
    out = np.empty((len(x), model.config.n_classes))
    for i in range(0, len(x), batch_size):
        out[i:i + batch_size], _ = _forward(model, x[i:i + batch_size], False, None)
    return out


@dataclass(frozen=True, eq=False)
class Evaluation:
    macro_f1: float
    per_class_f1: np.ndarray
    confusion: ConfusionMatrix
    loss: float
    accuracy: float

    def to_dict(self):
        return {"macro_f1": self.macro_f1, "per_class_f1": self.per_class_f1.tolist(),
                "confusion": self.confusion.to_list(), "loss": self.loss, "accuracy": self.accuracy}


def evaluate_predictions(true, pred, labels=LABELS):
    cm = ConfusionMatrix.from_labels(true, pred, labels)
    f1 = per_class_f1(cm)
    return float(np.mean(f1)), f1, cm


def evaluate(model: ModelState, x, labels) -> Evaluation:
    """Argmax decisions, one-vs-rest F1 per class and their unweighted mean."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InvalidArgument("cannot evaluate on an empty set")
    probs = predict(model, x)
    pred = np.array(LABELS)[np.argmax(probs, axis=1)]
    macro, f1, cm = evaluate_predictions(labels, pred)
    y = one_hot(labels, model.config.n_classes)
    ce = -float(np.mean(np.sum(y * np.log(np.clip(probs, 1e-300, None)), axis=1)))
    return Evaluation(macro, f1, cm, ce + l2_penalty(model), float(np.mean(pred == labels)))


def _epoch(model, opt, x, y_onehot, batch_size, lr, rng, keys_needed):
    order = rng.permutation(len(x))
    decay = {k: 2 * model.config.l2 for k in REGULARIZED}
    total = 0.0
    for i in range(0, len(x), batch_size):
        idx = order[i:i + batch_size]
        loss, g, _ = _loss_grads(model, x[idx], y_onehot[idx], True, rng, need=keys_needed, l2_grad=False)
        opt.step(model.params, g, lr, decay)
        total += loss * len(idx)
    return total / len(x)


def train(model: ModelState, train_set, val_set, cfg: TrainConfig = TrainConfig()):
    """Adam on shuffled mini-batches with early stopping on validation loss.

    Returns a new state holding the weights of the epoch with the best
    validation macro F1 (earliest on ties) and the full per-epoch history.
    """
    xt, yt = train_set
    xv, yv = val_set
    if len(xt) == 0 or len(xv) == 0:
        raise InvalidArgument("training and validation sets must be nonempty")
    model = model.copy()
    xt = _check_batch(model, xt)
    xv = _check_batch(model, xv)
    yt_oh = one_hot(yt, model.config.n_classes).astype(xt.dtype)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, model.params.keys(), cfg.beta1, cfg.beta2, cfg.epsilon)
    stopper = EarlyStopping(cfg.patience)
    best_f1, best_params, best_epoch = -1.0, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        tr_loss = _epoch(model, opt, xt, yt_oh, cfg.batch_size, cfg.learning_rate, rng, None)
        ev = evaluate(model, xv, yv)
        model.history.append({"epoch": epoch, "loss": tr_loss, "val_loss": ev.loss, "val_macro_f1": ev.macro_f1,
                              "lr": cfg.learning_rate})
        if ev.macro_f1 > best_f1:
            best_f1, best_epoch = ev.macro_f1, epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        if stopper.update(ev.loss):
            break
    out = ModelState(best_params, model.config, model.input_shape, model.history)
    out.history.append({"epoch": best_epoch, "selected": True, "val_macro_f1": best_f1})
    return out


def finetune(model: ModelState, tune_set, val_set=None, cfg: FinetuneConfig = FinetuneConfig()):
    """Update only the dense layers for ``cfg.epochs`` epochs on the slanted triangular schedule."""
    xt, yt = tune_set
    if len(xt) == 0:
        raise InvalidArgument("fine-tuning set must be nonempty")
    model = model.copy()
    xt = _check_batch(model, xt)
    yt_oh = one_hot(yt, model.config.n_classes).astype(xt.dtype)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, DENSE_KEYS)
    for epoch in range(cfg.epochs):
        lr = slanted_triangular_lr(epoch, cfg)
        loss = _epoch(model, opt, xt, yt_oh, cfg.batch_size, lr, rng, DENSE_KEYS)
        row = {"epoch": epoch + 1, "loss": loss, "lr": lr, "phase": "finetune"}
        if val_set is not None and len(val_set[0]):
            ev = evaluate(model, val_set[0], val_set[1])
            row.update(val_loss=ev.loss, val_macro_f1=ev.macro_f1)
        model.history.append(row)
    return model


# -- persistence ------------------------------------------------------------------------


def save_checkpoint(model: ModelState, path):
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(model.config), "input_shape": list(model.input_shape)}
    np.savez(path, __meta__=np.array(json.dumps(meta)), **model.params)


def load_checkpoint(path) -> ModelState:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {meta.get('version')!r}")
        params = {k: z[k].copy() for k in CONV_KEYS + DENSE_KEYS}
    return ModelState(params, ModelConfig(**meta["config"]), tuple(meta["input_shape"]))


def write_history(model: ModelState, path):
    cols = ["epoch", "phase", "loss", "val_loss", "val_macro_f1", "lr", "selected"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in model.history:
            w.writerow({k: row.get(k, "") for k in cols})


def with_kernel(cfg: ModelConfig, kernel) -> ModelConfig:
    return replace(cfg, kernel=int(kernel))
