"""Two-tower convolutional fold classifier: assembly, inference, checkpoints.

Each window size gets its own tower of ``conv_depth`` (conv -> batchnorm ->
ReLU) blocks followed by k-max pooling. Tower outputs are flattened,
concatenated and passed through a ReLU hidden layer (the fold embedding) and a
softmax output layer.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .batching import pad_batch

CHECKPOINT_MAGIC = b"DSF1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    window_sizes: list = field(default_factory=lambda: [6, 10])
    filters_per_layer: int = 10
    conv_depth: int = 10
    kmax: int = 30
    hidden_units: int = 500
    num_folds: int = 1195
    dropout_rate: float = 0.2
    input_channels: int = 45

    def __post_init__(self):
        self.window_sizes = [int(w) for w in self.window_sizes]
        if not self.window_sizes or min(self.window_sizes) < 1:
            raise ValueError(f"window sizes must be positive, got {self.window_sizes}")
        for name in ("filters_per_layer", "conv_depth", "kmax", "hidden_units",
                     "num_folds", "input_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def flatten_width(self):
        return self.filters_per_layer * self.kmax * len(self.window_sizes)

    def to_json(self):
        """Canonical JSON text (sorted keys, no whitespace)."""
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ConvLayerParams:
    kernel: np.ndarray  # [out_channels, in_channels, window]
    bias: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class ModelState:
    config: ModelConfig
    towers: list  # one list of ConvLayerParams per window size
    hidden_weights: np.ndarray  # [flatten_width, hidden_units]
    hidden_bias: np.ndarray
    output_weights: np.ndarray  # [hidden_units, num_folds]
    output_bias: np.ndarray

    def named_tensors(self):
        """All tensors in checkpoint order, as ``(name, array)`` pairs.

        Order: for each tower (window sizes in config order), for each conv layer
        bottom-up: kernel, bias, gamma, beta, running_mean, running_var; then
        hidden weights, hidden bias, output weights, output bias.
        """
        out = []
        for t, tower in enumerate(self.towers):
            for i, layer in enumerate(tower):
                for attr in ("kernel", "bias", "gamma", "beta", "running_mean", "running_var"):
                    out.append((f"tower{t}.conv{i}.{attr}", getattr(layer, attr)))
        out += [
            ("hidden.weights", self.hidden_weights),
            ("hidden.bias", self.hidden_bias),
            ("output.weights", self.output_weights),
            ("output.bias", self.output_bias),
        ]
        return out

    def trainable(self):
        return [(n, a) for n, a in self.named_tensors() if not n.endswith(("running_mean", "running_var"))]

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class FoldPrediction:
    probabilities: np.ndarray
    ranked_folds: np.ndarray  # descending probability, ties by ascending fold index

    @classmethod
    def from_probabilities(cls, probs):
        probs = np.asarray(probs, dtype=np.float64)
        return cls(probs, np.argsort(-probs, kind="stable"))


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def build_model(config=None, seed=0):
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    f = config.filters_per_layer
    towers = []
    for w in config.window_sizes:
        tower = []
        c_in = config.input_channels
        for _ in range(config.conv_depth):
            tower.append(ConvLayerParams(
                kernel=_glorot(rng, (f, c_in, w), c_in * w, f * w),
                bias=np.zeros(f), gamma=np.ones(f), beta=np.zeros(f),
                running_mean=np.zeros(f), running_var=np.ones(f)))
            c_in = f
        towers.append(tower)
    n_flat, n_hid, n_out = config.flatten_width, config.hidden_units, config.num_folds
    return ModelState(
        config=config, towers=towers,
        hidden_weights=_glorot(rng, (n_flat, n_hid), n_flat, n_hid),
        hidden_bias=np.zeros(n_hid),
        output_weights=_glorot(rng, (n_hid, n_out), n_hid, n_out),
        output_bias=np.zeros(n_out))


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

@dataclass
class Activations:
    logits: np.ndarray
    probabilities: np.ndarray
    features: np.ndarray  # fold embedding: post-ReLU hidden layer, before dropout
    cache: dict


def forward(state, batch, mode="infer", rng=None):
    """Run the network over a padded batch.

    ``mode`` is ``"train"`` (batch statistics, running-stat updates, dropout
    drawn from ``rng``) or ``"infer"``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    train = mode == "train"
    cfg = state.config
    x, mask = batch.features, batch.mask
    if x.shape[1] != cfg.input_channels:
        raise ValueError(f"batch has {x.shape[1]} channels, model expects {cfg.input_channels}")
    B = x.shape[0]
    if mask is not None and mask.all():
        mask = None
    x_cm = np.ascontiguousarray(x.transpose(1, 0, 2))
    tower_caches, pooled = [], []
    for tower in state.towers:
        h, caches = x_cm, []
        for p in tower:
            h, c_conv = nn.conv1d_forward_cm(h, p.kernel, p.bias, mask)
            h, c_bn = nn.batchnorm_forward_cm(h, p.gamma, p.beta, p.running_mean,
                                              p.running_var, mask, train=train)
            h, c_relu = nn.relu_forward(h)
            caches.append((c_conv, c_bn, c_relu))
        h, c_pool = nn.kmax_forward_cm(h, mask, cfg.kmax)
        tower_caches.append((caches, c_pool, h.shape))
        # flatten per protein as channel-major [C * k]
        pooled.append(h.transpose(1, 0, 2).reshape(B, -1))
    flat = np.concatenate(pooled, axis=1)
    hid, c_hid = nn.dense_forward(flat, state.hidden_weights, state.hidden_bias)
    feats, c_hrelu = nn.relu_forward(hid)
    dropped, c_drop = nn.dropout_forward(feats, cfg.dropout_rate, train, rng)
    logits, c_out = nn.dense_forward(dropped, state.output_weights, state.output_bias)
    cache = dict(towers=tower_caches, hidden=c_hid, hidden_relu=c_hrelu,
                 dropout=c_drop, output=c_out)
    return Activations(logits, nn.softmax(logits), feats, cache)


def backward(state, act, dlogits):
    """Gradients of every trainable tensor, keyed as in ``ModelState.trainable``."""
    c = act.cache
    grads = {}
    d, grads["output.weights"], grads["output.bias"] = nn.dense_backward(dlogits, c["output"])
    d = nn.dropout_backward(d, c["dropout"])
    d = nn.relu_backward(d, c["hidden_relu"])
    d, grads["hidden.weights"], grads["hidden.bias"] = nn.dense_backward(d, c["hidden"])
    offset = 0
    for t, (caches, c_pool, pooled_shape) in enumerate(c["towers"]):
        C, B, K = pooled_shape
        dh = d[:, offset:offset + C * K].reshape(B, C, K).transpose(1, 0, 2)
        offset += C * K
        dh = nn.kmax_backward_cm(dh, c_pool)
        for i in reversed(range(len(caches))):
            c_conv, c_bn, c_relu = caches[i]
            prefix = f"tower{t}.conv{i}."
            dh = nn.relu_backward(dh, c_relu)
            dh, grads[prefix + "gamma"], grads[prefix + "beta"] = nn.batchnorm_backward_cm(dh, c_bn)
            # the input gradient of the first layer is never needed
            dh, grads[prefix + "kernel"], grads[prefix + "bias"] = \
                nn.conv1d_backward_cm(dh, c_conv, need_input_grad=i > 0)
    return grads


# --------------------------------------------------------------------------
# prediction helpers
# --------------------------------------------------------------------------

def predict(state, proteins, batch_size=64):
    """Infer-mode predictions and fold embeddings for a list of proteins.

    Proteins are batched in length order to limit padding; results come back in
    input order as ``(list[FoldPrediction], features [N, hidden_units])``.
    """
    proteins = list(proteins)
    n = len(proteins)
    probs = np.zeros((n, state.config.num_folds))
    feats = np.zeros((n, state.config.hidden_units))
    order = sorted(range(n), key=lambda i: proteins[i].features.shape[0])
    for start in range(0, n, batch_size):
        chunk = order[start:start + batch_size]
        act = forward(state, pad_batch([proteins[i] for i in chunk]), "infer")
        probs[chunk] = act.probabilities
        feats[chunk] = act.features
    return [FoldPrediction.from_probabilities(p) for p in probs], feats


def extract_features(state, proteins, batch_size=64):
    return predict(state, proteins, batch_size)[1]


def predict_topk(state, protein, k):
    """Top ``k`` folds for one protein as a list of ``(fold_index, probability)``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > state.config.num_folds:
        raise ValueError(f"k={k} exceeds the number of folds ({state.config.num_folds})")
    (pred,), _ = predict(state, [protein])
    return [(int(f), float(pred.probabilities[f])) for f in pred.ranked_folds[:k]]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(state, path):
    """Write ``state`` in the DSF1 layout.

    magic ``DSF1`` | uint32 LE version | uint64 LE config length | canonical
    config JSON (UTF-8) | every tensor of ``named_tensors()`` as LE float32.
    """
    cfg = state.config.to_json().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<Q", len(cfg)), cfg]
    for _, arr in state.named_tensors():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (n_cfg,) = struct.unpack("<Q", blob[8:16])
    if 16 + n_cfg > len(blob):
        raise CheckpointError(f"{path}: truncated config block")
    try:
        config = ModelConfig.from_dict(json.loads(blob[16:16 + n_cfg].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable config: {exc}") from exc
    state = build_model(config, seed=0)
    pos = 16 + n_cfg
    for name, arr in state.named_tensors():
        nbytes = arr.size * 4
        if pos + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {name}")
        arr[...] = np.frombuffer(blob, dtype="<f4", count=arr.size, offset=pos).reshape(arr.shape)
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return state
