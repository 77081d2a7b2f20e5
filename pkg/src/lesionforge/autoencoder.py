"""Greedy layer-wise DAE pre-training, stacking, and supervised fine-tuning."""
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import DataError, ParameterError, ShapeError
from .nn_core import (LayerSpec, Optimizer, backprop, check_network, forward, make_rng,
                      mask_corrupt, nll_loss, predict, xavier_init, zero_layer)

log = logging.getLogger(__name__)

N_CLASSES = 5


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 30
    initial_lr: float = 0.005
    lr_decay: float = 0.001
    lr_schedule: str = "inverse_time"
    masking_fraction: float = 0.0
    dropout: float = 0.25
    input_dropout: bool = True
    batch_size: int = 128
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    rmsprop_decay: float = 0.9
    epsilon: float = 1e-8
    l2: float = 1e-4
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if not 0.0 <= self.masking_fraction <= 1.0:
            raise ParameterError("masking_fraction must be in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError("dropout must be in [0, 1)")
        if self.l2 < 0 or self.initial_lr < 0 or self.lr_decay < 0:
            raise ParameterError("l2, learning rate and decay must be nonnegative")
        # validates optimizer kind, schedule, momentum and rmsprop decay
        self.make_optimizer()

    def make_optimizer(self):
        return Optimizer(self.optimizer, self.initial_lr, self.lr_decay, self.momentum,
                         self.rmsprop_decay, self.epsilon, self.lr_schedule)

    def updated(self, **changes):
        return replace(self, **changes)


def pretrain_config(**overrides):
    """Layer-wise DAE defaults: RMSProp, 25% masking, 50 epochs, no dropout."""
    base = dict(epochs=50, initial_lr=0.001, lr_decay=0.0, masking_fraction=0.25,
                dropout=0.0, optimizer="rmsprop")
    base.update(overrides)
    return TrainingConfig(**base)


def nd_config(**overrides):
    """Novelty-detector defaults: RMSProp, 20% masking, 200 epochs at lr 0.001."""
    base = dict(epochs=200, initial_lr=0.001, lr_decay=0.0, masking_fraction=0.2,
                dropout=0.0, optimizer="rmsprop")
    base.update(overrides)
    return TrainingConfig(**base)


def finetune_config(**overrides):
    """HGG fine-tuning defaults: SGD momentum 0.9, lr 0.005, decay 0.001, dropout 0.25."""
    return TrainingConfig(**overrides)


def transfer_config(**overrides):
    base = dict(dropout=0.35)
    base.update(overrides)
    return TrainingConfig(**base)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float


@dataclass
class TrainedNetwork:
    layers: list
    role: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        check_network(self.layers)
        if self.role == "nd":
            if len(self.layers) != 2 or self.layers[-1].activation != "linear" or \
                    self.layers[-1].spec.output_dim != self.layers[0].spec.input_dim:
                raise ShapeError("novelty detector must be one hidden layer with a linear "
                                 "output of input width")
        elif self.role == "sdae_classifier":
            last = self.layers[-1]
            if last.activation != "softmax" or last.spec.output_dim != N_CLASSES:
                raise ShapeError(f"classifier must end in a softmax of width {N_CLASSES}")
        elif self.role != "encoder":
            raise ParameterError(f"unknown network role {self.role!r}")

    @property
    def input_dim(self):
        return self.layers[0].spec.input_dim

    def copy(self):
        return TrainedNetwork([layer.copy() for layer in self.layers], self.role,
                              dict(self.provenance))

    def digest(self):
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(layer.activation.encode())
            h.update(np.ascontiguousarray(layer.weights).tobytes())
            h.update(np.ascontiguousarray(layer.biases).tobytes())
        return h.hexdigest()[:16]


def data_digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        if a is not None:
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def _accuracy(network, x, labels):
    probs = predict(network, x)
    return float(np.mean(np.argmax(probs, axis=1) == labels)), nll_loss(probs, labels)


def train(layers, x, target, loss, cfg, val=None, on_epoch=None, keep_best=False):
    """Mini-batch training of ``layers`` in place.

    ``target`` is the reconstruction target (mse) or labels (nll).
    ``val`` is an ``(x, target)`` pair scored after every epoch without
    corruption or dropout; epoch 0 records the untrained network.  With
    ``keep_best`` the parameters of the lowest-validation-loss epoch are
    restored at the end (ties go to the earlier epoch) and training stops
    after ``cfg.patience`` epochs without improvement.
    """
    if len(x) == 0:
        raise ParameterError("cannot train on an empty batch")
    rng = make_rng(cfg.seed)
    opt = cfg.make_optimizer()
    history = []

    def score(epoch, train_loss, lr):
        if val is None:
            vl, acc = train_loss, float("nan")
        elif loss == "nll":
            acc, vl = _accuracy(layers, val[0], val[1])
        else:
            vl, acc = float(np.mean(np.square(predict(layers, val[0]) - val[1],
                                              dtype=np.float64))), float("nan")
        rec = EpochRecord(epoch, train_loss, vl, acc, lr)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        return rec

    def full_train_loss():
        out = predict(layers, x)
        if loss == "nll":
            return nll_loss(out, target)
        return float(np.mean(np.square(out - target, dtype=np.float64)))

    best = score(0, full_train_loss() if val is None else float("nan"), 0.0)
    best_params = [layer.copy() for layer in layers] if keep_best else None
    stale = 0
    n = len(x)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total, count = 0.0, 0
        lr = opt.learning_rate(epoch)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x[idx]
            if cfg.masking_fraction > 0:
                xb = mask_corrupt(xb, cfg.masking_fraction, rng)
            trace = forward(layers, xb, cfg.dropout, training=True, rng=rng,
                            input_dropout=cfg.input_dropout)
            value, grads = backprop(layers, xb, target[idx], loss, cfg.l2, trace)
            opt.step(layers, grads, epoch)
            total += value * len(idx)
            count += len(idx)
        rec = score(epoch, total / count, lr)
        if not np.isfinite(rec.train_loss):
            raise DataError(f"training diverged at epoch {epoch}")
        if keep_best:
            if rec.val_loss < best.val_loss or not np.isfinite(best.val_loss):
                best, stale = rec, 0
                best_params = [layer.copy() for layer in layers]
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, best.epoch)
                    break
    if keep_best:
        for layer, saved in zip(layers, best_params):
            layer.weights[...] = saved.weights
            layer.biases[...] = saved.biases
    return history


@dataclass
class DAE:
    encoder: object
    decoder: object
    history: list

    @property
    def final_val_loss(self):
        return self.history[-1].val_loss


def pretrain_layer(input_dim, hidden_dim, data, cfg, val_data=None):
    """Train a sigmoid-encoder / linear-decoder DAE on unlabeled rows.

    Inputs are masked per ``cfg.masking_fraction`` and the loss compares
    the reconstruction with the clean rows.  Only the raw data matrix is
    accepted, so labels can never leak into pre-training.
    """
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2 or len(data) == 0:
        raise ParameterError("pre-training needs a nonempty 2D data matrix")
    if data.shape[1] != input_dim:
        raise ShapeError(f"data width {data.shape[1]} != input_dim {input_dim}")
    rng = make_rng(cfg.seed)
    layers = [xavier_init(LayerSpec(input_dim, hidden_dim, "sigmoid"), rng),
              xavier_init(LayerSpec(hidden_dim, input_dim, "linear"), rng)]
    val = np.asarray(val_data if val_data is not None else data, dtype=np.float32)
    history = train(layers, data, data, "mse", cfg.updated(seed=cfg.seed + 1), val=(val, val))
    return DAE(layers[0], layers[1], history)


def encode(encoders, data, chunk=8192):
    """Clean (no corruption, no dropout) hidden activations of the encoder stack."""
    return predict(list(encoders), np.asarray(data, dtype=np.float32), chunk)


def stack_and_pretrain(widths, data, cfg, val_data=None):
    """Greedily pre-train ``len(widths) - 1`` encoders.

    Layer k trains as a DAE on the clean activations of layers 1..k-1.
    Returns ``(encoders, histories)``.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ParameterError("need at least an input width and one hidden width")
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2 or data.shape[1] != widths[0]:
        raise ShapeError(f"data width {data.shape[-1]} != first width {widths[0]}")
    encoders, histories = [], []
    current, current_val = data, val_data
    for k, (d_in, d_out) in enumerate(zip(widths, widths[1:])):
        log.info("pre-training layer %d: %d -> %d on %d rows", k + 1, d_in, d_out, len(current))
        dae = pretrain_layer(d_in, d_out, current, cfg.updated(seed=cfg.seed + 1000 * k),
                             current_val)
        encoders.append(dae.encoder)
        histories.append(dae.history)
        if k + 2 < len(widths):
            current = encode([dae.encoder], current)
            if current_val is not None:
                current_val = encode([dae.encoder], current_val)
    return encoders, histories


def attach_classifier(stack, n_classes=N_CLASSES):
    """Append a zero-initialized softmax layer to copies of the encoders."""
    if not stack:
        raise ParameterError("encoder stack is empty")
    layers = [layer.copy() for layer in stack]
    layers.append(zero_layer(LayerSpec(layers[-1].spec.output_dim, n_classes, "softmax"),
                             dtype=layers[-1].weights.dtype))
    return TrainedNetwork(layers, "sdae_classifier")


def _labeled(batch, what):
    if batch.labels is None:
        raise DataError(f"{what} batch has no labels")
    labels = np.asarray(batch.labels)
    if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
        raise DataError(f"{what} labels must be within 0-{N_CLASSES - 1}")
    return labels.astype(np.int64)


def finetune(net, labeled, val, cfg, on_epoch=None):
    """End-to-end NLL training; returns the best-validation network and history."""
    if net.role != "sdae_classifier":
        raise ParameterError("fine-tuning needs an sdae_classifier network")
    y = _labeled(labeled, "training")
    yv = _labeled(val, "validation")
    if labeled.vec_len != net.input_dim:
        raise ShapeError(f"patch width {labeled.vec_len} != network input {net.input_dim}")
    out = net.copy()
    history = train(out.layers, labeled.data, y, "nll", cfg, val=(val.data, yv),
                    on_epoch=on_epoch, keep_best=True)
    out.provenance = dict(net.provenance, finetune=asdict(cfg),
                          data=data_digest(labeled.data, y))
    return out, history


def transfer_finetune(pretrained, labeled, val, cfg=None, on_epoch=None):
    """Start from ``pretrained`` weights, re-zero the decision layer, fine-tune."""
    cfg = cfg if cfg is not None else transfer_config()
    if pretrained.role != "sdae_classifier":
        raise ShapeError("transfer learning expects an sdae_classifier network")
    if labeled.vec_len != pretrained.input_dim:
        raise ShapeError(f"patch width {labeled.vec_len} != network input "
                         f"{pretrained.input_dim}")
    start = pretrained.copy()
    start.layers[-1].weights[...] = 0
    start.layers[-1].biases[...] = 0
    return finetune(start, labeled, val, cfg, on_epoch=on_epoch)


def train_novelty_detector(data, hidden_dim, cfg=None, val_data=None):
    """Single-hidden-layer DAE on non-lesion rows (FLAIR + T2)."""
    cfg = cfg if cfg is not None else nd_config()
    data = np.asarray(data, dtype=np.float32)
    dae = pretrain_layer(data.shape[1], hidden_dim, data, cfg, val_data)
    net = TrainedNetwork([dae.encoder, dae.decoder], "nd",
                         {"train": asdict(cfg), "data": data_digest(data)})
    return net, dae.history


def sample_config(space, rng):
    """Draw one configuration: (lo, hi) tuples are uniform, lists are choices."""
    config = {}
    for name, dom in space.items():
        if isinstance(dom, tuple) and len(dom) == 2:
            lo, hi = dom
            if isinstance(lo, int) and isinstance(hi, int) and not isinstance(lo, bool):
                config[name] = int(rng.integers(lo, hi + 1))
            else:
                config[name] = float(rng.uniform(lo, hi))
        elif isinstance(dom, (list, tuple)) and len(dom) > 0:
            config[name] = dom[int(rng.integers(0, len(dom)))]
        else:
            raise ParameterError(f"cannot sample hyper-parameter {name!r} from {dom!r}")
    return config


def random_search(space, budget, eval_fn, seed=0, n_jobs=1):
    """Sample ``budget`` configurations and rank them by ``eval_fn`` (lower is better).

    ``eval_fn(config, trial_seed)`` trains and returns a validation score;
    trial ``i`` receives seed ``seed + i``.  Returns ``[(score, config), ...]``
    sorted best first; ties keep sampling order.
    """
    if not space:
        raise ParameterError("hyper-parameter space is empty")
    if budget < 1:
        raise ParameterError("budget must be >= 1")
    rng = make_rng(seed)
    configs = [sample_config(space, rng) for _ in range(budget)]

    def run(i):
        return float(eval_fn(configs[i], seed + i))

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            scores = list(pool.map(run, range(budget)))
    else:
        scores = [run(i) for i in range(budget)]
    order = sorted(range(budget), key=lambda i: (scores[i], i))
    return [(scores[i], configs[i]) for i in order]
