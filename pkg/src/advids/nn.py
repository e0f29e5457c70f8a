"""Dense ReLU network with softmax head, exact reverse-mode gradients and Adam.

Layers map ``a -> W @ a + b``; every layer but the last is followed by ReLU
and (in training mode only) inverted dropout. The last layer emits the logits
``Z(x)``; probabilities are ``softmax(Z(x))``.
"""

import io
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fileio
from .errors import ConfigError, NumericalError, ParseError, ShapeError, UsageError

log = logging.getLogger(__name__)

_model_ids = itertools.count()


@dataclass
class DenseLayer:
    weights: np.ndarray  # out x in
    biases: np.ndarray  # out

    def __post_init__(self):
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ShapeError(f"bad layer shapes {self.weights.shape} / {self.biases.shape}")


class Mlp:
    def __init__(self, layers, dropout_rate=0.2, hidden_activation="relu"):
        if not layers:
            raise ConfigError("an Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weights.shape[0] != nxt.weights.shape[1]:
                raise ShapeError(
                    f"layer widths do not chain: {prev.weights.shape} -> {nxt.weights.shape}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
        if hidden_activation != "relu":
            raise ConfigError(f"unsupported activation {hidden_activation!r}")
        self.layers = list(layers)
        self.dropout_rate = float(dropout_rate)
        self.hidden_activation = hidden_activation
        self._id = next(_model_ids)
        self._version = 0

    @classmethod
    def build(cls, sizes, dropout_rate=0.2, seed=0, dtype=np.float64):
        """He-uniform weights, zero biases. ``sizes`` = (inputs, hidden..., outputs)."""
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            limit = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)
            layers.append(DenseLayer(w, np.zeros(fan_out, dtype=dtype)))
        return cls(layers, dropout_rate)

    @property
    def sizes(self):
        return (self.layers[0].weights.shape[1],) + tuple(l.weights.shape[0] for l in self.layers)

    @property
    def n_inputs(self):
        return self.sizes[0]

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def params(self):
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.biases]
        return out

    def touch(self):
        """Mark parameters as changed so stale forward caches are rejected."""
        self._version += 1

    def copy(self):
        layers = [DenseLayer(l.weights.copy(), l.biases.copy()) for l in self.layers]
        return Mlp(layers, self.dropout_rate, self.hidden_activation)

    def fingerprint(self):
        return fileio.sha256_arrays(*self.params())


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    predicted_class: np.ndarray


@dataclass
class ForwardCache:
    model_id: int
    version: int
    mode: str
    inputs: list  # input to each layer (post-dropout)
    pre_activations: list
    masks: list
    logits: np.ndarray = field(repr=False)


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def forward(model, x, mode="infer", rng=None):
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(x, dtype=model.dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.n_inputs:
        raise ShapeError(f"expected inputs with {model.n_inputs} features, got shape {x.shape}")
    dropping = mode == "train" and model.dropout_rate > 0
    if dropping and rng is None:
        raise UsageError("train-mode forward needs an rng for dropout masks")
    keep = 1.0 - model.dropout_rate

    inputs, pres, masks = [], [], []
    a = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        inputs.append(a)
        z = a @ layer.weights.T + layer.biases
        pres.append(z)
        if i == last:
            break
        a = np.maximum(z, 0)
        if dropping:
            mask = (rng.random(a.shape) < keep).astype(a.dtype) / keep
            a = a * mask
            masks.append(mask)
        else:
            masks.append(None)
    logits = pres[-1]
    probs = softmax(logits)
    pred = Prediction(logits, probs, np.argmax(logits, axis=1))
    if single:
        pred = Prediction(logits[0], probs[0], pred.predicted_class[0])
    cache = ForwardCache(model._id, model._version, mode, inputs, pres, masks, logits)
    return pred, cache


def loss(logits, y):
    """Per-sample categorical cross-entropy, via log-softmax of the logits."""
    if isinstance(logits, Prediction):
        logits = logits.logits
    return -np.sum(np.asarray(y) * log_softmax(np.asarray(logits)), axis=-1)


@dataclass
class Gradients:
    params: list  # same order as Mlp.params(), gradient of the batch-mean loss
    inputs: np.ndarray  # row i: gradient of sample i's own loss w.r.t. x_i


def backward(model, cache, y, param_grads=True):
    if cache is None:
        raise UsageError("backward needs the cache of a forward pass")
    if cache.model_id != model._id or cache.version != model._version:
        raise UsageError("forward cache is stale: it belongs to another model or older parameters")
    y = np.asarray(y, dtype=cache.logits.dtype)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape != cache.logits.shape:
        raise ShapeError(f"labels shape {y.shape} does not match logits {cache.logits.shape}")
    n = y.shape[0]
    delta = softmax(cache.logits) - y
    grads = [None] * (2 * len(model.layers))
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if param_grads:
            grads[2 * i] = delta.T @ cache.inputs[i] / n
            grads[2 * i + 1] = delta.sum(axis=0) / n
        delta = delta @ layer.weights
        if i > 0:
            if cache.masks[i - 1] is not None:
                delta = delta * cache.masks[i - 1]
            delta = delta * (cache.pre_activations[i - 1] > 0)
    return Gradients(grads, delta)


def input_gradient(model, x, y):
    """Infer-mode loss value and input gradient, per sample."""
    pred, cache = forward(model, x, "infer")
    g = backward(model, cache, y, param_grads=False)
    return loss(cache.logits, y), g.inputs


class AdamState:
    def __init__(self, params, learning_rate=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(state, params, grads):
    """One bias-corrected Adam update, applied in place; returns ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    learning_rate: float = 0.001
    seed: int = 0
    dropout_rate: float = 0.2
    hidden: tuple = (512, 512)
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs, batch_size and learning_rate must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def as_dict(self):
        return asdict(self)


def build_detector(n_inputs, config=TrainConfig(), n_classes=2):
    sizes = (n_inputs, *config.hidden, n_classes)
    # init stream is separate from the shuffle/dropout stream
    return Mlp.build(sizes, config.dropout_rate, seed=[config.seed, 1], dtype=np.dtype(config.dtype))


def train(model, dataset, config=TrainConfig(), progress=None, augment=None):
    """Minibatch Adam over shuffled epochs. Returns (model, per-epoch mean loss).

    ``augment(model, x, y, epoch, batch)`` may return a replacement (x, y) for
    each minibatch; adversarial training uses it to append fresh attacks.
    """
    x = np.asarray(dataset.features, dtype=model.dtype)
    y = np.asarray(dataset.labels, dtype=model.dtype)
    n = len(x)
    if n == 0:
        raise ConfigError("cannot train on an empty dataset")
    rng = np.random.default_rng([config.seed, 2])
    state = AdamState(model.params(), config.learning_rate)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        seen = 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb, yb = x[idx], y[idx]
            if augment is not None:
                xb, yb = augment(model, xb, yb, epoch, b)
            pred, cache = forward(model, xb, "train", rng)
            s = float(loss(cache.logits, yb).sum())
            if not math.isfinite(s):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch + 1}, batch starting at {start}")
            total += s
            seen += len(xb)
            grads = backward(model, cache, yb)
            adam_step(state, model.params(), grads.params)
            model.touch()
        history.append(total / seen)
        log.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, history[-1])
        if progress:
            progress(epoch, history[-1])
    return model, history


def predict(model, x, batch_size=8192):
    x = np.asarray(x)
    out = np.empty(len(x), dtype=np.int64)
    for s in range(0, len(x), batch_size):
        out[s:s + batch_size] = forward(model, x[s:s + batch_size])[0].predicted_class
    return out


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray  # rows: true class, cols: predicted (normal, anomaly)
    n: int

    @property
    def error_rate(self):
        return 1.0 - self.accuracy


def evaluate(model, dataset):
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    return evaluate_predictions(predict(model, dataset.features), dataset.classes)


def evaluate_predictions(predicted, truth):
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if len(truth) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    confusion = np.zeros((2, 2), dtype=np.int64)
    np.add.at(confusion, (truth, predicted), 1)
    correct = int(np.trace(confusion))
    return Evaluation(correct / len(truth), confusion, len(truth))


MODEL_FORMAT = "advids-model/1"
_SEPARATOR = b"%%\n"


def model_header(model, train_config=None, extra=None):
    sizes = model.sizes
    items = {
        "format": MODEL_FORMAT,
        "layers": list(sizes),
        "hidden": list(sizes[1:-1]),
        "activation": model.hidden_activation,
        "dropout": model.dropout_rate,
        "dtype": str(model.dtype),
    }
    if train_config is not None:
        for k, v in train_config.as_dict().items():
            items[f"train.{k}"] = v
        items["seed"] = train_config.seed
    for k, v in (extra or {}).items():
        items[k] = v
    return items


def save_model(path, model, train_config=None, extra=None):
    header = fileio.format_kv(model_header(model, train_config, extra)).encode("utf-8")
    with fileio.atomic_write(path, "wb") as fh:
        fh.write(header)
        fh.write(_SEPARATOR)
        for p in model.params():
            fileio.write_matrix(fh, p)


def load_model(path):
    """Return (model, header dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    cut = blob.find(b"\n" + _SEPARATOR)
    if cut < 0:
        raise ParseError(f"{path}: missing header separator")
    header = fileio.parse_kv(blob[:cut + 1].decode("utf-8"))
    if header.get("format") != MODEL_FORMAT:
        raise ParseError(f"{path}: unsupported model format {header.get('format')!r}")
    sizes = [int(s) for s in header["layers"].split(",")]
    stream = io.BytesIO(blob[cut + 1 + len(_SEPARATOR):])
    dtype = np.dtype(header.get("dtype", "float64"))
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        w = fileio.read_matrix(stream).astype(dtype)
        b = fileio.read_matrix(stream).reshape(-1).astype(dtype)
        if w.shape != (fan_out, fan_in):
            raise ParseError(f"{path}: weight shape {w.shape} does not match header")
        layers.append(DenseLayer(w, b))
    return Mlp(layers, float(header["dropout"]), header["activation"]), header


def train_config_from_header(header):
    kw = {}
    for f in ("epochs", "batch_size", "seed"):
        kw[f] = int(header[f"train.{f}"])
    kw["learning_rate"] = float(header["train.learning_rate"])
    kw["dropout_rate"] = float(header["train.dropout_rate"])
    kw["hidden"] = tuple(int(h) for h in header["train.hidden"].split(",") if h)
    kw["dtype"] = header["train.dtype"]
    return TrainConfig(**kw)
