"""Minimal feed-forward networks with exact Jacobians and numpy training.

A :class:`Network` is an ordered list of :class:`Linear` and
:class:`Activation` layers.  Activations are indexed by *layer id*: id ``0``
is the raw input and id ``i`` is the output of ``layers[i - 1]``, so a
network with ``L`` layers has ids ``0..L``.  Freezing is expressed per layer
and respected by :func:`train`.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import InvalidConfig, InvalidInput, TrainingDiverged
from .linalg import as_matrix, as_vector

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu", "sigmoid", "sin", "identity")
OPTIMIZERS = ("sgd", "adam")
LOSSES = ("mse", "binary_cross_entropy", "cross_entropy")
FORMAT_NAME = "concept-gradient-network"
FORMAT_VERSION = 1


@dataclass
class Linear:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    frozen: bool = False

    def __post_init__(self):
        self.weight = as_matrix(self.weight, "weight")
        self.bias = as_vector(self.bias, "bias")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise InvalidInput(
                f"bias length {self.bias.shape[0]} != weight rows {self.weight.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class Activation:
    fn: str
    frozen: bool = False

    def __post_init__(self):
        if self.fn not in ACTIVATIONS:
            raise InvalidInput(f"unknown activation {self.fn!r}; expected one of {ACTIVATIONS}")


Layer = Union[Linear, Activation]


def _act_forward(fn: str, z: np.ndarray) -> np.ndarray:
    if fn == "tanh":
        return np.tanh(z)
    if fn == "relu":
        return np.maximum(z, 0.0)
    if fn == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if fn == "sin":
        return np.sin(z)
    return z.copy()


def _act_derivative(fn: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Elementwise derivative given pre-activation ``z`` and output ``a``."""
    if fn == "tanh":
        return 1.0 - a * a
    if fn == "relu":
        return (z > 0).astype(np.float64)
    if fn == "sigmoid":
        return a * (1.0 - a)
    if fn == "sin":
        return np.cos(z)
    return np.ones_like(z)


@dataclass
class Network:
    layers: list[Layer]
    input_dim: int
    dims: list[int] = field(init=False)

    def __post_init__(self):
        self.layers = list(self.layers)
        if self.input_dim < 1:
            raise InvalidInput("input_dim must be positive")
        dims = [int(self.input_dim)]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Linear):
                if layer.in_dim != dims[-1]:
                    raise InvalidInput(
                        f"layer {i} expects {layer.in_dim} inputs but receives {dims[-1]}"
                    )
                dims.append(layer.out_dim)
            elif isinstance(layer, Activation):
                dims.append(dims[-1])
            else:
                raise InvalidInput(f"layer {i} has unsupported type {type(layer).__name__}")
        self.dims = dims

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def linear_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Linear)]

    def head_index(self) -> int:
        idx = self.linear_indices()
        if not idx:
            raise InvalidInput("network has no linear layer")
        return idx[-1]

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def __call__(self, x) -> np.ndarray:
        return predict(self, x)


def check_layer_id(net: Network, at: int) -> int:
    if not isinstance(at, (int, np.integer)) or not 0 <= at <= net.n_layers:
        raise InvalidInput(f"layer id {at!r} outside 0..{net.n_layers}")
    return int(at)


def glorot_linear(in_dim: int, out_dim: int, rng: np.random.Generator) -> Linear:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return Linear(rng.uniform(-limit, limit, size=(out_dim, in_dim)), np.zeros(out_dim))


def mlp(sizes: Sequence[int], activation: str = "tanh", seed: int = 0) -> Network:
    """Fully-connected network ``sizes[0] -> ... -> sizes[-1]``.

    Every hidden linear layer is followed by ``activation``; the head is linear.
    """
    if len(sizes) < 2:
        raise InvalidInput("mlp needs at least input and output sizes")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(glorot_linear(a, b, rng))
        if i < len(sizes) - 2:
            layers.append(Activation(activation))
    return Network(layers, sizes[0])


# -- inference ---------------------------------------------------------------


def _forward_batch(net: Network, x: np.ndarray, start: int = 0) -> list[np.ndarray]:
    acts = [x]
    for layer in net.layers[start:]:
        a = acts[-1]
        if isinstance(layer, Linear):
            acts.append(a @ layer.weight.T + layer.bias)
        else:
            acts.append(_act_forward(layer.fn, a))
    return acts


def _as_batch(net: Network, x, at: int = 0) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != net.dims[at]:
        raise InvalidInput(f"expected inputs of width {net.dims[at]}, got shape {np.shape(x)}")
    return arr


def forward(net: Network, x) -> list[np.ndarray]:
    """Activations at every layer id for a single input vector.

    ``result[0]`` is ``x`` and ``result[-1]`` is the network output.
    """
    xv = as_vector(x, "x")
    if xv.shape[0] != net.input_dim:
        raise InvalidInput(f"x has length {xv.shape[0]}, network expects {net.input_dim}")
    return [a[0] for a in _forward_batch(net, xv[None, :])]


def forward_batch(net: Network, x) -> list[np.ndarray]:
    """Batched :func:`forward`; each entry has shape ``(n, dims[i])``."""
    return _forward_batch(net, _as_batch(net, x))


def predict(net: Network, x) -> np.ndarray:
    """Network output for a vector ``(d,)`` or a batch ``(n, d)``."""
    arr = np.asarray(x, dtype=np.float64)
    out = _forward_batch(net, _as_batch(net, arr))[-1]
    return out[0] if arr.ndim == 1 else out


def activations_at(net: Network, x, at: int) -> np.ndarray:
    """Activations at layer id ``at`` for a batch of inputs, shape ``(n, dims[at])``."""
    at = check_layer_id(net, at)
    arr = _as_batch(net, x)
    for layer in net.layers[:at]:
        if isinstance(layer, Linear):
            arr = arr @ layer.weight.T + layer.bias
        else:
            arr = _act_forward(layer.fn, arr)
    return arr


def forward_from(net: Network, a, at: int) -> np.ndarray:
    """Run the layers after id ``at`` on activations ``a`` (vector or batch)."""
    at = check_layer_id(net, at)
    arr = np.asarray(a, dtype=np.float64)
    out = _forward_batch(net, _as_batch(net, arr, at), start=at)[-1]
    return out[0] if arr.ndim == 1 else out


def jacobian_from_activation(net: Network, a, at: int) -> np.ndarray:
    """Jacobian of the outputs with respect to activations ``a`` at layer id ``at``.

    Returns a ``(dims[at], output_dim)`` matrix, entry ``(i, j)`` being
    ``d out_j / d a_i``.  All output rows are swept backwards together.
    """
    at = check_layer_id(net, at)
    av = as_vector(a, "activation")
    if av.shape[0] != net.dims[at]:
        raise InvalidInput(f"activation has length {av.shape[0]}, layer {at} has {net.dims[at]}")
    acts = _forward_batch(net, av[None, :], start=at)
    # jac[r, :] is d out_r / d (current activation)
    jac = np.eye(net.output_dim)
    for offset in range(len(acts) - 2, -1, -1):
        layer = net.layers[at + offset]
        if isinstance(layer, Linear):
            jac = jac @ layer.weight
        else:
            jac = jac * _act_derivative(layer.fn, acts[offset][0], acts[offset + 1][0])
    return jac.T


def jacobian_at_layer(net: Network, x, at: int) -> np.ndarray:
    """Jacobian of the outputs with respect to the activations at layer id ``at``.

    Parameters
    ----------
    net : Network
    x : array_like, shape (input_dim,)
        Raw network input.
    at : int
        Layer id; ``0`` differentiates with respect to the input itself.

    Returns
    -------
    numpy.ndarray, shape (dims[at], output_dim)
    """
    at = check_layer_id(net, at)
    acts = forward(net, x)
    return jacobian_from_activation(net, acts[at], at)


# -- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0
    loss: str = "mse"
    early_stop_patience: int = 0
    # per-output positive-class weights for binary_cross_entropy; "balanced" uses n_neg / n_pos
    pos_weight: Union[Sequence[float], str, None] = None

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise InvalidConfig(f"optimizer must be one of {OPTIMIZERS}")
        if self.loss not in LOSSES:
            raise InvalidConfig(f"loss must be one of {LOSSES}")
        if not self.learning_rate >= 0:
            raise InvalidConfig("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be at least 1")
        if self.weight_decay < 0 or self.early_stop_patience < 0:
            raise InvalidConfig("weight_decay and early_stop_patience must be non-negative")


@dataclass
class TrainResult:
    network: Network
    history: list[float]  # training loss; entry 0 is before the first update
    val_history: list[float] = field(default_factory=list)
    best_epoch: int = 0


def _resolve_pos_weight(cfg: TrainConfig, y: np.ndarray) -> np.ndarray | None:
    if cfg.loss != "binary_cross_entropy" or cfg.pos_weight is None:
        return None
    if isinstance(cfg.pos_weight, str):
        if cfg.pos_weight != "balanced":
            raise InvalidConfig(f"unknown pos_weight mode {cfg.pos_weight!r}")
        pos = y.sum(axis=0)
        neg = y.shape[0] - pos
        return np.where(pos > 0, neg / np.maximum(pos, 1.0), 1.0)
    w = np.asarray(cfg.pos_weight, dtype=np.float64)
    if w.shape != (y.shape[1],):
        raise InvalidConfig(f"pos_weight needs {y.shape[1]} entries")
    return w


def _loss_and_grad(kind: str, out: np.ndarray, y: np.ndarray, pos_weight):
    """Mean loss over the batch and its gradient with respect to ``out``."""
    n = out.shape[0]
    if kind == "mse":
        diff = out - y
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    if kind == "binary_cross_entropy":
        # numerically stable log-sigmoid on logits
        log_p = -np.logaddexp(0.0, -out)
        log_q = -np.logaddexp(0.0, out)
        p = np.exp(log_p)
        w = 1.0 if pos_weight is None else pos_weight
        loss = -(w * y * log_p + (1.0 - y) * log_q)
        grad = (w * y + 1.0 - y) * p - w * y
        return float(np.mean(loss)), grad / out.size
    # cross_entropy: y is one-hot
    shifted = out - out.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -np.sum(y * log_probs) / n
    return float(loss), (np.exp(log_probs) - y) / n


def one_hot(labels, n_classes: int | None = None) -> np.ndarray:
    lab = np.asarray(labels).astype(int).ravel()
    k = int(lab.max()) + 1 if n_classes is None else n_classes
    out = np.zeros((lab.size, k))
    out[np.arange(lab.size), lab] = 1.0
    return out


def _prepare_targets(cfg: TrainConfig, net: Network, y) -> np.ndarray:
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if cfg.loss == "cross_entropy" and arr.shape[1] == 1 and net.output_dim > 1:
        arr = one_hot(arr[:, 0], net.output_dim)
    if arr.shape[1] != net.output_dim:
        raise InvalidInput(f"targets have width {arr.shape[1]}, network emits {net.output_dim}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("targets contain non-finite entries")
    return arr


def evaluate_loss(net: Network, x, y, cfg: TrainConfig) -> float:
    ya = _prepare_targets(cfg, net, y)
    out = predict(net, _as_batch(net, x))
    return _loss_and_grad(cfg.loss, out, ya, _resolve_pos_weight(cfg, ya))[0]


def train(net: Network, x, y, cfg: TrainConfig, validation: tuple | None = None) -> TrainResult:
    """Fit the unfrozen linear layers of a copy of ``net`` to ``(x, y)``.

    Parameters
    ----------
    net : Network
        Left untouched; a trained copy is returned.
    x, y : array_like
        Inputs ``(n, input_dim)`` and targets ``(n, output_dim)``.  For
        ``cross_entropy`` a column of class indices is also accepted.
    cfg : TrainConfig
    validation : (x_val, y_val), optional
        Monitored for early stopping when ``cfg.early_stop_patience > 0``.
        Without it the training loss is monitored instead.

    Returns
    -------
    TrainResult
        With early stopping the parameters of the best monitored epoch are
        restored.

    Raises
    ------
    InvalidConfig
        If no linear layer is trainable.
    TrainingDiverged
        If the loss becomes non-finite.
    """
    model = net.copy()
    xa = _as_batch(model, x)
    ya = _prepare_targets(cfg, model, y)
    if xa.shape[0] != ya.shape[0]:
        raise InvalidInput("inputs and targets disagree on the number of rows")
    trainable = [i for i in model.linear_indices() if not model.layers[i].frozen]
    if not trainable:
        raise InvalidConfig("every linear layer is frozen; nothing to train")
    first = trainable[0]
    pos_weight = _resolve_pos_weight(cfg, ya)
    if validation is not None:
        xv = _as_batch(model, validation[0])
        yv = _prepare_targets(cfg, model, validation[1])

    # frozen prefix activations never change, so compute them once
    prefix = activations_at(model, xa, first)

    def full_loss(m: Network) -> float:
        out = forward_from(m, prefix, first)
        return _loss_and_grad(cfg.loss, out, ya, pos_weight)[0]

    def val_loss(m: Network) -> float:
        return _loss_and_grad(cfg.loss, predict(m, xv), yv, pos_weight)[0]

    params = [(model.layers[i].weight, model.layers[i].bias) for i in trainable]
    moments = [
        (np.zeros_like(w), np.zeros_like(b), np.zeros_like(w), np.zeros_like(b)) for w, b in params
    ]
    rng = np.random.default_rng(cfg.seed)
    n = xa.shape[0]
    step = 0
    history = [full_loss(model)]
    val_history = [val_loss(model)] if validation is not None else []
    monitor = val_history if validation is not None else history
    best = (monitor[0], 0, [(w.copy(), b.copy()) for w, b in params])
    stale = 0
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            acts = _forward_batch(model, prefix[idx], start=first)
            loss, delta = _loss_and_grad(cfg.loss, acts[-1], ya[idx], pos_weight)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            grads = {}
            for off in range(len(acts) - 2, -1, -1):
                li = first + off
                layer = model.layers[li]
                if isinstance(layer, Linear):
                    gw = delta.T @ acts[off]
                    if cfg.weight_decay:
                        gw = gw + cfg.weight_decay * layer.weight
                    grads[li] = (gw, delta.sum(axis=0))
                    if li > first:
                        delta = delta @ layer.weight
                else:
                    delta = delta * _act_derivative(layer.fn, acts[off], acts[off + 1])
            step += 1
            for (w, b), mom, li in zip(params, moments, trainable):
                gw, gb = grads[li]
                if cfg.optimizer == "sgd":
                    w -= cfg.learning_rate * gw
                    b -= cfg.learning_rate * gb
                    continue
                mw, mb, vw, vb = mom
                mw *= beta1
                mw += (1 - beta1) * gw
                mb *= beta1
                mb += (1 - beta1) * gb
                vw *= beta2
                vw += (1 - beta2) * gw * gw
                vb *= beta2
                vb += (1 - beta2) * gb * gb
                lr = cfg.learning_rate * np.sqrt(1 - beta2**step) / (1 - beta1**step)
                w -= lr * mw / (np.sqrt(vw) + eps)
                b -= lr * mb / (np.sqrt(vb) + eps)

        history.append(full_loss(model))
        if not np.isfinite(history[-1]):
            raise TrainingDiverged(f"non-finite loss after epoch {epoch}")
        if validation is not None:
            val_history.append(val_loss(model))
        if cfg.early_stop_patience:
            if monitor[-1] < best[0]:
                best = (monitor[-1], epoch, [(w.copy(), b.copy()) for w, b in params])
                stale = 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    logger.debug("early stop at epoch %d (best %d)", epoch, best[1])
                    break

    best_epoch = len(history) - 1
    if cfg.early_stop_patience:
        best_epoch = best[1]
        for (w, b), (bw, bb) in zip(params, best[2]):
            w[...] = bw
            b[...] = bb
    return TrainResult(model, history, val_history, best_epoch)


# -- transfer ----------------------------------------------------------------


def clone_with_new_head(
    net: Network, new_output_dim: int, unfreeze_from: int, seed: int = 0
) -> Network:
    """Copy ``net`` with a freshly initialised linear head of width ``new_output_dim``.

    Layers after the last linear layer are dropped.  Layers with index below
    ``unfreeze_from`` are frozen and the rest are trainable, so the
    activations at layer id ``unfreeze_from`` are shared with ``net``.
    """
    head = net.head_index()
    if not isinstance(unfreeze_from, (int, np.integer)) or not 0 <= unfreeze_from <= head:
        raise InvalidInput(f"unfreeze_from must be in 0..{head}, got {unfreeze_from!r}")
    if new_output_dim < 1:
        raise InvalidInput("new_output_dim must be positive")
    layers = copy.deepcopy(net.layers[:head])
    rng = np.random.default_rng(seed)
    layers.append(glorot_linear(net.dims[head], new_output_dim, rng))
    for i, layer in enumerate(layers):
        layer.frozen = i < unfreeze_from
    return Network(layers, net.input_dim)


def shares_prefix(a: Network, b: Network, upto: int) -> bool:
    """True when layers ``0..upto-1`` of both networks are bitwise identical."""
    if a.input_dim != b.input_dim or a.n_layers < upto or b.n_layers < upto:
        return False
    for la, lb in zip(a.layers[:upto], b.layers[:upto]):
        if type(la) is not type(lb):
            return False
        if isinstance(la, Linear):
            if la.weight.shape != lb.weight.shape:
                return False
            if not (np.array_equal(la.weight, lb.weight) and np.array_equal(la.bias, lb.bias)):
                return False
        elif la.fn != lb.fn:
            return False
    return True


# -- serialization -----------------------------------------------------------


def network_to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, Linear):
            layers.append(
                {
                    "kind": "linear",
                    "in_dim": layer.in_dim,
                    "out_dim": layer.out_dim,
                    "weight": layer.weight.ravel().tolist(),
                    "bias": layer.bias.tolist(),
                    "frozen": bool(layer.frozen),
                }
            )
        else:
            layers.append({"kind": "activation", "fn": layer.fn, "frozen": bool(layer.frozen)})
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "input_dim": net.input_dim,
        "output_dim": net.output_dim,
        "layers": layers,
    }


def network_from_dict(data: dict) -> Network:
    if data.get("format") != FORMAT_NAME:
        raise InvalidInput("not a serialized network")
    if data.get("version") != FORMAT_VERSION:
        raise InvalidInput(f"unsupported network format version {data.get('version')!r}")
    layers: list[Layer] = []
    for spec in data["layers"]:
        if spec["kind"] == "linear":
            w = np.asarray(spec["weight"], dtype=np.float64).reshape(spec["out_dim"], spec["in_dim"])
            layers.append(Linear(w, np.asarray(spec["bias"]), bool(spec["frozen"])))
        elif spec["kind"] == "activation":
            layers.append(Activation(spec["fn"], bool(spec["frozen"])))
        else:
            raise InvalidInput(f"unknown layer kind {spec['kind']!r}")
    return Network(layers, int(data["input_dim"]))


def save_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n")


def load_network(path) -> Network:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}: {exc}") from exc
    return network_from_dict(data)
