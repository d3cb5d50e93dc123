"""A small 1-D CNN for ToA error regression, written directly in numpy.

Architecture (default): three stride-2 convolutions with 16 channels and
kernel 5, ReLU after each, dropout on the flattened features, the scaled
conventional ToA appended as one extra feature, and a linear output unit.
Everything runs in float64.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cir import CNN_LENGTH
from .errors import ParameterError, ShapeError, UsageError

CHECKPOINT_FORMAT = "cirtoa-cnn"
CHECKPOINT_VERSION = 1


def conv_out_length(length: int, kernel: int, stride: int) -> int:
    if length < kernel:
        raise ShapeError(f"input length {length} shorter than kernel {kernel}")
    return (length - kernel) // stride + 1


@dataclass
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        expected = (self.out_channels, self.in_channels, self.kernel)
        if self.weights.shape != expected:
            raise ShapeError(f"conv weights have shape {self.weights.shape}, expected {expected}")
        if self.biases.shape != (self.out_channels,):
            raise ShapeError(f"conv biases have shape {self.biases.shape}")
        if self.stride < 1 or self.kernel < 1:
            raise ShapeError("kernel and stride must be >= 1")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ParameterError("conv parameters must be finite")


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeError(f"conv input must be (channels, length) or (batch, channels, length), got {x.shape}")
    return x, False


def _im2col(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """(B, C, L) -> (B, L_out, C * kernel)."""
    b, c, _ = x.shape
    win = sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]
    return win.transpose(0, 2, 1, 3).reshape(b, win.shape[2], c * kernel)


def conv1d_forward(x: np.ndarray, layer: ConvLayerSpec) -> np.ndarray:
    """Valid (unpadded) strided 1-D convolution."""
    xb, single = _batched(x)
    if xb.shape[1] != layer.in_channels:
        raise ShapeError(f"expected {layer.in_channels} input channels, got {xb.shape[1]}")
    conv_out_length(xb.shape[2], layer.kernel, layer.stride)
    cols = _im2col(xb, layer.kernel, layer.stride)
    out = cols @ layer.weights.reshape(layer.out_channels, -1).T + layer.biases
    out = out.transpose(0, 2, 1)
    return out[0] if single else out


def relu(x):
    return np.maximum(x, 0.0)


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multipliers: 0 with probability ``p``, else ``1/(1-p)``."""
    if not 0 <= p < 1:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout(x, p: float = 0.5, mode: str = "train", rng: np.random.Generator | None = None):
    if not 0 <= p < 1:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    x = np.asarray(x, dtype=np.float64)
    if mode == "inference" or p == 0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs an explicit generator")
    return x * dropout_mask(x.shape, p, rng)


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    return float(np.mean((pred - target) ** 2))


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class CnnModel:
    """Conv stack plus one dense output unit.

    Parameters are kept as a flat list in declared order: for each conv
    layer its weights then biases, then the dense weights and bias.
    """

    def __init__(
        self,
        conv_layers: Sequence[ConvLayerSpec],
        dense_weights,
        dense_bias: float = 0.0,
        input_length: int = CNN_LENGTH,
        dropout_p: float = 0.5,
        toa_scale: float | None = None,
    ):
        if not conv_layers:
            raise ShapeError("model needs at least one conv layer")
        if not 0 <= dropout_p < 1:
            raise ParameterError("dropout_p must lie in [0, 1)")
        self.conv_layers = list(conv_layers)
        self.input_length = int(input_length)
        self.dropout_p = float(dropout_p)
        self.toa_scale = 1.0 / self.input_length if toa_scale is None else float(toa_scale)
        self.lengths = [self.input_length]
        channels = 1
        for i, layer in enumerate(self.conv_layers):
            if layer.in_channels != channels:
                raise ShapeError(
                    f"conv layer {i} expects {layer.in_channels} channels, previous layer gives {channels}"
                )
            self.lengths.append(conv_out_length(self.lengths[-1], layer.kernel, layer.stride))
            channels = layer.out_channels
        self.n_features = channels * self.lengths[-1]
        self.dense_weights = np.asarray(dense_weights, dtype=np.float64)
        if self.dense_weights.shape != (self.n_features + 1,):
            raise ShapeError(
                f"dense layer has {self.dense_weights.shape} weights, chain needs {self.n_features + 1}"
            )
        self.dense_bias = np.array([float(dense_bias)])
        self.mode = "inference"
        self._cache = None

    @classmethod
    def build(
        cls,
        input_length: int = CNN_LENGTH,
        channels: int = 16,
        kernel: int = 5,
        stride: int = 2,
        n_conv: int = 3,
        dropout_p: float = 0.5,
        seed: int = 0,
        toa_scale: float | None = None,
    ) -> "CnnModel":
        """Fresh model with Glorot-uniform weights and zero biases."""
        rng = np.random.default_rng(seed)
        layers, c_in, length = [], 1, input_length
        for _ in range(n_conv):
            length = conv_out_length(length, kernel, stride)
            w = _glorot(rng, (channels, c_in, kernel), c_in * kernel, channels * kernel)
            layers.append(ConvLayerSpec(c_in, channels, kernel, stride, w, np.zeros(channels)))
            c_in = channels
        n_in = channels * length + 1
        dense = _glorot(rng, (n_in,), n_in, 1)
        return cls(layers, dense, 0.0, input_length, dropout_p, toa_scale)

    # -------------------------------------------------------------- params

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.conv_layers:
            out += [layer.weights, layer.biases]
        return out + [self.dense_weights, self.dense_bias]

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.conv_layers)):
            names += [f"conv{i}.weights", f"conv{i}.biases"]
        return names + ["dense.weights", "dense.bias"]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        total = sum(p.size for p in self.params)
        if flat.shape != (total,):
            raise ShapeError(f"flat parameter vector has {flat.size} entries, model has {total}")
        pos = 0
        for p in self.params:
            p[...] = flat[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    def copy(self) -> "CnnModel":
        clone = copy.deepcopy(self)
        clone._cache = None
        return clone

    def architecture(self) -> dict:
        first = self.conv_layers[0]
        return {
            "input_length": self.input_length,
            "channels": [l.out_channels for l in self.conv_layers],
            "kernel": first.kernel,
            "stride": first.stride,
            "kernels": [l.kernel for l in self.conv_layers],
            "strides": [l.stride for l in self.conv_layers],
            "dropout_p": self.dropout_p,
            "toa_scale": self.toa_scale,
            "lengths": list(self.lengths),
            "dense_inputs": self.n_features + 1,
        }

    # ------------------------------------------------------------- forward

    def _check_inputs(self, cirs, toas):
        x = np.asarray(cirs, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != self.input_length:
            raise ShapeError(f"expected CIRs of length {self.input_length}, got shape {x.shape}")
        t = np.asarray(toas, dtype=np.float64).reshape(-1)
        if t.shape != (x.shape[0],):
            raise ShapeError("one conventional ToA per CIR is required")
        return x, t

    def forward(
        self,
        cirs,
        toas,
        rng: np.random.Generator | None = None,
        mask: np.ndarray | None = None,
    ) -> np.ndarray:
        """Predicted ToA errors (samples) for a batch.

        In train mode a dropout mask is drawn from ``rng`` unless ``mask``
        is given; activations are cached for :meth:`backward`.
        """
        x, t = self._check_inputs(cirs, toas)
        h = x[:, None, :]
        acts = []
        for layer in self.conv_layers:
            cols = _im2col(h, layer.kernel, layer.stride)
            z = (cols @ layer.weights.reshape(layer.out_channels, -1).T + layer.biases).transpose(0, 2, 1)
            h = relu(z)
            acts.append((cols, z, h.shape))
        feats = h.reshape(h.shape[0], -1)
        if self.mode == "train":
            if mask is None:
                if rng is None:
                    raise UsageError("train-mode forward needs a generator or a dropout mask")
                mask = dropout_mask(feats.shape, self.dropout_p, rng)
            elif mask.shape != feats.shape:
                raise ShapeError(f"dropout mask shape {mask.shape} != {feats.shape}")
            dropped = feats * mask
        else:
            mask = None
            dropped = feats
        dense_in = np.concatenate([dropped, (t * self.toa_scale)[:, None]], axis=1)
        pred = dense_in @ self.dense_weights + self.dense_bias[0]
        self._cache = {"acts": acts, "mask": mask, "dense_in": dense_in, "in_shape": x.shape}
        return pred

    def predict(self, cirs, toas) -> np.ndarray:
        mode, self.mode = self.mode, "inference"
        try:
            return self.forward(cirs, toas)
        finally:
            self.mode = mode
            self._cache = None

    # ------------------------------------------------------------ backward

    def backward(self, pred, targets) -> list[np.ndarray]:
        """Gradients of the batch MSE with respect to :attr:`params`."""
        if self._cache is None:
            raise UsageError("backward called without a cached forward pass")
        cache = self._cache
        pred = np.asarray(pred, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64).reshape(-1)
        if pred.shape != targets.shape:
            raise ShapeError("pred and targets differ in shape")
        b = pred.shape[0]
        dpred = 2.0 * (pred - targets) / b

        dense_in = cache["dense_in"]
        d_dense_w = dense_in.T @ dpred
        d_dense_b = np.array([dpred.sum()])
        d_feats = np.outer(dpred, self.dense_weights[:-1])
        if cache["mask"] is not None:
            d_feats = d_feats * cache["mask"]

        grads = []
        dh = d_feats.reshape(cache["acts"][-1][2])
        for li in range(len(self.conv_layers) - 1, -1, -1):
            layer = self.conv_layers[li]
            cols, z, _ = cache["acts"][li]
            dz = dh * (z > 0)
            dz_t = dz.transpose(0, 2, 1)  # (B, L_out, O)
            dw = (dz_t.reshape(-1, layer.out_channels).T @ cols.reshape(-1, cols.shape[2])).reshape(
                layer.weights.shape
            )
            db = dz.sum(axis=(0, 2))
            grads = [dw, db] + grads
            if li == 0:
                break
            dcols = (dz_t @ layer.weights.reshape(layer.out_channels, -1)).reshape(
                b, cols.shape[1], layer.in_channels, layer.kernel
            )
            in_len = self.lengths[li]
            dx = np.zeros((b, layer.in_channels, in_len))
            l_out = cols.shape[1]
            span = layer.stride * (l_out - 1) + 1
            for k in range(layer.kernel):
                dx[:, :, k : k + span : layer.stride] += dcols[:, :, :, k].transpose(0, 2, 1)
            dh = dx
        return grads + [d_dense_w, d_dense_b]


def forward(model: CnnModel, cir, toa_conventional):
    """Inference-mode error estimate for one CIR (float) or a batch (array)."""
    out = model.predict(cir, np.atleast_1d(toa_conventional))
    return float(out[0]) if np.ndim(cir) == 1 else out


def backward(model: CnnModel, pred, targets) -> list[np.ndarray]:
    return model.backward(pred, targets)


# ------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list | None = None
    v: list | None = None


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """One in-place Adam update with bias-corrected moments."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


# --------------------------------------------------------------- training


@dataclass
class ErrorDataset:
    """Inputs and targets for error regression.

    ``cirs`` are normalized CIRs (N, length), ``toa`` the conventional
    estimates and ``target`` their errors ``toa - toa_true``, all in samples.
    """

    cirs: np.ndarray
    toa: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        self.cirs = np.atleast_2d(np.asarray(self.cirs, dtype=np.float64))
        self.toa = np.asarray(self.toa, dtype=np.float64).reshape(-1)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1)
        n = self.cirs.shape[0]
        if self.toa.shape != (n,) or self.target.shape != (n,):
            raise ShapeError("cirs, toa and target must have matching lengths")

    def __len__(self):
        return self.cirs.shape[0]


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    lr: float = 1e-3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.patience < 1:
            raise ParameterError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ParameterError("max_epochs must be >= 0")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")


def evaluate_loss(model: CnnModel, data: ErrorDataset, batch_size: int = 512) -> float:
    sq = 0.0
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        pred = model.predict(data.cirs[sl], data.toa[sl])
        sq += float(np.sum((pred - data.target[sl]) ** 2))
    return sq / len(data)


def train(
    model: CnnModel,
    train_set: ErrorDataset,
    val_set: ErrorDataset,
    config: TrainConfig | None = None,
) -> tuple[CnnModel, TrainHistory]:
    """Mini-batch Adam on the MSE with validation early stopping.

    The returned model carries the weights of the best validation epoch.
    """
    config = config or TrainConfig()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ParameterError("training and validation sets must be non-empty")
    history = TrainHistory()
    if config.max_epochs == 0:
        return model, history

    rng = np.random.default_rng(config.seed)
    state = AdamState(lr=config.lr)
    best = model.get_flat()
    n = len(train_set)
    stale = 0
    for epoch in range(config.max_epochs):
        model.mode = "train"
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            pred = model.forward(train_set.cirs[idx], train_set.toa[idx], rng=rng)
            total += float(np.sum((pred - train_set.target[idx]) ** 2))
            grads = model.backward(pred, train_set.target[idx])
            adam_step(model.params, grads, state)
        model.mode = "inference"
        model._cache = None
        val = evaluate_loss(model, val_set)
        history.train_loss.append(total / n)
        history.val_loss.append(val)
        if val < history.best_val_loss:
            history.best_val_loss = val
            history.best_epoch = epoch
            best = model.get_flat()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.set_flat(best)
    return model, history


# --------------------------------------------------------- gradient check


@dataclass
class GradientCheck:
    max_rel_error: float
    n_checked: int
    n_kinked: int


def _gates(model: CnnModel) -> np.ndarray:
    return np.concatenate([(z > 0).ravel() for _, z, _ in model._cache["acts"]])


def check_gradients(model: CnnModel, cirs, toas, targets, h: float = 1e-5, seed: int = 0) -> GradientCheck:
    """Compare backprop against central differences of the batch MSE.

    One dropout mask is drawn and held fixed for every evaluation. The loss
    difference is formed as mean((p+ - p-)(p+ + p- - 2y)), which equals
    L(+h) - L(-h) without subtracting two nearly equal losses. Parameters
    whose +-h step flips any ReLU gate straddle a kink, where the central
    difference is not a gradient estimate; they are counted, not compared.
    """
    if not (np.isfinite(h) and h > 0):
        raise ParameterError("finite-difference step h must be positive")
    x, t = model._check_inputs(cirs, toas)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    mode = model.mode
    model.mode = "train"
    base = model.get_flat()
    try:
        mask = dropout_mask((x.shape[0], model.n_features), model.dropout_p, np.random.default_rng(seed))
        pred = model.forward(x, t, mask=mask)
        gates = _gates(model)
        analytic = np.concatenate([g.ravel() for g in model.backward(pred, targets)])

        def evaluate(flat):
            model.set_flat(flat)
            p = model.forward(x, t, mask=mask)
            return p, np.array_equal(_gates(model), gates)

        numeric = np.empty_like(base)
        smooth = np.ones(base.size, dtype=bool)
        for i in range(base.size):
            step = base.copy()
            step[i] = base[i] + h
            p_up, ok_up = evaluate(step)
            step[i] = base[i] - h
            p_dn, ok_dn = evaluate(step)
            numeric[i] = np.mean((p_up - p_dn) * (p_up + p_dn - 2.0 * targets)) / (2.0 * h)
            smooth[i] = ok_up and ok_dn
    finally:
        model.set_flat(base)
        model.mode = mode
        model._cache = None

    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    rel = np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 0)[smooth]
    return GradientCheck(float(rel.max()) if rel.size else 0.0, int(smooth.sum()), int((~smooth).sum()))


def gradient_check(model: CnnModel, cirs, toas, targets, h: float = 1e-5, seed: int = 0) -> float:
    """Max relative gradient error; see :func:`check_gradients`."""
    return check_gradients(model, cirs, toas, targets, h, seed).max_rel_error


# -------------------------------------------------------------- checkpoint


def checkpoint_dict(model: CnnModel, metadata: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": model.architecture(),
        "parameters": model.get_flat().tolist(),
        "metadata": dict(metadata or {}),
    }


def model_from_checkpoint(doc: dict) -> CnnModel:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ParameterError("not a cirtoa CNN checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ParameterError(f"unsupported checkpoint version {doc.get('version')}")
    arch = doc["architecture"]
    layers, c_in = [], 1
    for c_out, k, s in zip(arch["channels"], arch["kernels"], arch["strides"]):
        layers.append(ConvLayerSpec(c_in, c_out, k, s, np.zeros((c_out, c_in, k)), np.zeros(c_out)))
        c_in = c_out
    model = CnnModel(
        layers,
        np.zeros(arch["dense_inputs"]),
        0.0,
        arch["input_length"],
        arch["dropout_p"],
        arch["toa_scale"],
    )
    model.set_flat(np.array(doc["parameters"], dtype=np.float64))
    return model


def save_checkpoint(path, model: CnnModel, metadata: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, metadata)) + "\n")


def load_checkpoint(path) -> tuple[CnnModel, dict]:
    doc = json.loads(Path(path).read_text())
    return model_from_checkpoint(doc), doc.get("metadata", {})
