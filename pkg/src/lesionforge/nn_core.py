"""Dense feed-forward network primitives.

Parameters and activations are float32 by default.  Losses are reduced in
float64 and gradients are returned as float64 arrays.  Every function that
draws random numbers takes an explicit ``numpy.random.Generator``.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError

ACTIVATIONS = ("sigmoid", "linear", "softmax")
ACTIVATION_CODES = {"sigmoid": 0, "linear": 1, "softmax": 2}
NLL_FLOOR = 1e-12


def make_rng(seed):
    """Seeded generator; identical seeds give identical draw sequences."""
    return np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "sigmoid"

    def __post_init__(self):
        if int(self.input_dim) <= 0 or int(self.output_dim) <= 0:
            raise ParameterError(f"layer dims must be positive: {self.input_dim}x{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")


@dataclass
class DenseLayer:
    spec: LayerSpec
    weights: np.ndarray  # (output_dim, input_dim)
    biases: np.ndarray  # (output_dim,)

    def __post_init__(self):
        if self.weights.shape != (self.spec.output_dim, self.spec.input_dim):
            raise ShapeError(f"weights {self.weights.shape} do not match {self.spec}")
        if self.biases.shape != (self.spec.output_dim,):
            raise ShapeError(f"biases {self.biases.shape} do not match {self.spec}")

    @property
    def activation(self):
        return self.spec.activation

    def copy(self):
        return DenseLayer(self.spec, self.weights.copy(), self.biases.copy())

    def astype(self, dtype):
        return DenseLayer(self.spec, self.weights.astype(dtype), self.biases.astype(dtype))


def check_network(network):
    if not network:
        raise ParameterError("network has no layers")
    for prev, nxt in zip(network, network[1:]):
        if prev.spec.output_dim != nxt.spec.input_dim:
            raise ShapeError(
                f"layer output {prev.spec.output_dim} does not feed input {nxt.spec.input_dim}")
    for layer in network[:-1]:
        if layer.activation == "softmax":
            raise ParameterError("softmax is only allowed as the final layer")


def xavier_init(spec, rng, dtype=np.float32):
    bound = np.sqrt(6.0 / (spec.input_dim + spec.output_dim))
    w = rng.uniform(-bound, bound, size=(spec.output_dim, spec.input_dim)).astype(dtype)
    return DenseLayer(spec, w, np.zeros(spec.output_dim, dtype=dtype))


def zero_layer(spec, dtype=np.float32):
    return DenseLayer(spec, np.zeros((spec.output_dim, spec.input_dim), dtype=dtype),
                      np.zeros(spec.output_dim, dtype=dtype))


def mask_corrupt(v, fraction, rng):
    """Zero exactly ``round(fraction * len)`` positions per row, chosen without replacement.

    Accepts a single vector or a 2D batch (rows corrupted independently).
    """
    if not 0.0 <= fraction <= 1.0:
        raise ParameterError(f"masking fraction must be in [0, 1], got {fraction}")
    v = np.asarray(v)
    out = v.copy()
    flat = out.reshape(-1, v.shape[-1]) if v.ndim > 1 else out[None, :]
    n, d = flat.shape
    k = int(round(fraction * d))
    if k == 0:
        return out
    if k == d:
        flat[...] = 0
        return out
    keys = rng.random((n, d))
    idx = np.argpartition(keys, k - 1, axis=1)[:, :k]
    np.put_along_axis(flat, idx, 0, axis=1)
    return out


def _activate(z, kind):
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if kind == "linear":
        return z
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _dropout_mask(shape, rate, rng, dtype):
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype(1.0 - rate)


@dataclass
class Trace:
    """Per-layer record of one forward pass.

    ``inputs[k]`` is what layer k consumed (after any dropout),
    ``outputs[k]`` is layer k's activation before dropout, and
    ``masks[k]`` is the scaled dropout mask applied to ``inputs[k]``
    (None when no dropout was applied).
    """
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    masks: list = field(default_factory=list)

    @property
    def output(self):
        return self.outputs[-1]


def forward(network, x, dropout_rate=0.0, training=False, rng=None, input_dropout=False):
    """Run ``network`` on a vector or a batch of row vectors.

    With ``training`` set and a positive ``dropout_rate`` every hidden
    activation (and the input when ``input_dropout``) is zeroed with that
    probability and survivors are scaled by ``1 / (1 - rate)``.
    """
    if not 0.0 <= dropout_rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    x = np.asarray(x)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != network[0].spec.input_dim:
        raise ShapeError(f"input width {a.shape[1]} != {network[0].spec.input_dim}")
    dtype = network[0].weights.dtype.type
    a = a.astype(dtype, copy=False)
    use_dropout = training and dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ParameterError("dropout during training needs an rng")
    trace = Trace()
    for k, layer in enumerate(network):
        mask = None
        if use_dropout and (k > 0 or input_dropout):
            mask = _dropout_mask(a.shape, dropout_rate, rng, dtype)
            a = a * mask
        trace.inputs.append(a)
        trace.masks.append(mask)
        z = a @ layer.weights.T + layer.biases
        a = _activate(z, layer.activation)
        trace.outputs.append(a)
    if single:
        trace.inputs = [t[0] for t in trace.inputs]
        trace.outputs = [t[0] for t in trace.outputs]
        trace.masks = [None if m is None else m[0] for m in trace.masks]
    return trace


def predict(network, x, chunk=8192):
    """Inference output for a batch, evaluated in chunks to bound memory."""
    x = np.asarray(x)
    if x.ndim == 1:
        return forward(network, x).output
    if len(x) <= chunk:
        return forward(network, x).output
    return np.concatenate([forward(network, x[i:i + chunk]).output
                           for i in range(0, len(x), chunk)])


def weight_penalty(network):
    return float(sum(np.sum(np.square(layer.weights, dtype=np.float64)) for layer in network))


def mse_l2_loss(recon, target, weights=(), l2=0.0):
    """Per-sample mean squared error plus ``l2 * sum(w**2)`` (biases excluded).

    For a batch the squared-error term is averaged over rows too.
    """
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape:
        raise ShapeError(f"recon {recon.shape} vs target {target.shape}")
    penalty = sum(float(np.sum(np.square(np.asarray(w, dtype=np.float64)))) for w in weights)
    return float(np.mean(np.square(recon - target))) + l2 * penalty


def nll_loss(probs, label):
    """Negative log likelihood of ``label``; probabilities are clamped at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    label = np.asarray(label)
    if probs.ndim == 1:
        if not 0 <= int(label) < probs.shape[0]:
            raise ParameterError(f"label {label} out of range")
        return float(-np.log(max(probs[int(label)], NLL_FLOOR)))
    if np.any(label < 0) or np.any(label >= probs.shape[1]):
        raise ParameterError("label out of range")
    picked = probs[np.arange(len(probs)), label]
    return float(np.mean(-np.log(np.maximum(picked, NLL_FLOOR))))


def backprop(network, x, target, loss="mse", l2=0.0, trace=None):
    """Mean batch loss and its exact gradient for every layer.

    ``target`` is the reconstruction target for ``loss="mse"`` or integer
    class labels for ``loss="nll"`` (softmax output layer required).  Pass
    the ``trace`` of a training forward pass to differentiate through the
    dropout masks it used; otherwise a deterministic pass is run.

    Returns ``(loss, grads)`` with ``grads[k] = (dW, db)`` in float64.
    """
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
        target = np.asarray(target)[None] if loss == "nll" else np.asarray(target)[None, :]
    if len(x) == 0:
        raise ParameterError("empty batch")
    if trace is None:
        trace = forward(network, x)
    out = trace.output
    n = out.shape[0]
    last = network[-1].activation
    if loss == "mse":
        target = np.asarray(target)
        if target.shape != out.shape:
            raise ShapeError(f"target {target.shape} vs output {out.shape}")
        if last == "softmax":
            raise ParameterError("mse loss expects a sigmoid or linear output layer")
        diff = out.astype(np.float64) - target
        value = float(np.mean(np.square(diff)))
        delta = (2.0 / diff.size) * diff
        if last == "sigmoid":
            delta = delta * (out * (1.0 - out))
    elif loss == "nll":
        if last != "softmax":
            raise ParameterError("nll loss expects a softmax output layer")
        labels = np.asarray(target, dtype=np.int64)
        if labels.shape != (n,):
            raise ShapeError(f"labels {labels.shape} vs batch {n}")
        value = nll_loss(out, labels)
        delta = out.astype(np.float64)
        delta[np.arange(n), labels] -= 1.0
        delta /= n
    else:
        raise ParameterError(f"unknown loss {loss!r}")
    if l2:
        value += l2 * weight_penalty(network)

    dtype = network[0].weights.dtype
    delta = delta.astype(dtype, copy=False)
    grads = [None] * len(network)
    for k in range(len(network) - 1, -1, -1):
        layer = network[k]
        a_in = trace.inputs[k]
        dw = (delta.T @ a_in).astype(np.float64)
        if l2:
            dw += 2.0 * l2 * layer.weights
        db = delta.sum(axis=0, dtype=np.float64)
        grads[k] = (dw, db)
        if k == 0:
            break
        d_in = delta @ layer.weights
        mask = trace.masks[k]
        if mask is not None:
            d_in = d_in * mask
        prev = network[k - 1]
        a_prev = trace.outputs[k - 1]
        if prev.activation == "sigmoid":
            d_in = d_in * (a_prev * (1.0 - a_prev))
        elif prev.activation == "softmax":
            raise ParameterError("softmax is only allowed as the final layer")
        delta = d_in
    return value, grads


class Optimizer:
    """RMSProp or SGD with momentum over a list of layers, updated in place.

    The learning rate at a 1-based epoch follows ``schedule``:
    ``"inverse_time"`` gives ``lr / (1 + epoch * decay)``, ``"literal"``
    gives ``lr / (epoch * decay)``; a decay of 0 means a constant rate.
    """

    def __init__(self, kind="sgd_momentum", initial_lr=0.005, lr_decay=0.001, momentum=0.9,
                 rmsprop_decay=0.9, epsilon=1e-8, schedule="inverse_time"):
        if kind not in ("rmsprop", "sgd_momentum"):
            raise ParameterError(f"unknown optimizer {kind!r}")
        if schedule not in ("inverse_time", "literal"):
            raise ParameterError(f"unknown lr schedule {schedule!r}")
        if initial_lr < 0 or lr_decay < 0:
            raise ParameterError("learning rate and decay must be nonnegative")
        if not 0.0 <= momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {momentum}")
        if not 0.0 < rmsprop_decay < 1.0:
            raise ParameterError(f"rmsprop decay must be in (0, 1), got {rmsprop_decay}")
        self.kind = kind
        self.initial_lr = initial_lr
        self.lr_decay = lr_decay
        self.momentum = momentum
        self.rmsprop_decay = rmsprop_decay
        self.epsilon = epsilon
        self.schedule = schedule
        self.state = None

    def learning_rate(self, epoch):
        if epoch < 1:
            raise ParameterError(f"epoch must be >= 1, got {epoch}")
        if self.lr_decay == 0:
            return self.initial_lr
        if self.schedule == "literal":
            return self.initial_lr / (epoch * self.lr_decay)
        return self.initial_lr / (1.0 + epoch * self.lr_decay)

    def _init_state(self, network):
        self.state = [(np.zeros(layer.weights.shape), np.zeros(layer.biases.shape))
                      for layer in network]

    def step(self, network, grads, epoch):
        if self.state is None:
            self._init_state(network)
        lr = self.learning_rate(epoch)
        for layer, (dw, db), acc in zip(network, grads, self.state):
            for param, grad, slot in ((layer.weights, dw, acc[0]), (layer.biases, db, acc[1])):
                if slot.shape != param.shape:
                    raise ShapeError("optimizer state does not match parameters")
                if self.kind == "sgd_momentum":
                    slot *= self.momentum
                    slot -= lr * grad
                    update = slot
                else:
                    slot *= self.rmsprop_decay
                    slot += (1.0 - self.rmsprop_decay) * np.square(grad)
                    update = -lr * grad / np.sqrt(slot + self.epsilon)
                param += update.astype(param.dtype, copy=False)
        return lr
