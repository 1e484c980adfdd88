"""Bias-free fully connected networks and their losses."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from s2o import autodiff as ad
from s2o.autodiff import Tensor

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "linear": ad.identity}
_NP_ACTIVATIONS = {
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "linear": lambda x: x,
}
_ACT_CODES = {"relu": 0, "tanh": 1, "linear": 2}
_CODE_ACTS = {v: k for k, v in _ACT_CODES.items()}

CHECKPOINT_MAGIC = b"S2OW"
CHECKPOINT_VERSION = 1


@dataclass
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray
    domain_tag: str = "clean"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be (batch, features), got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match batch size {self.inputs.shape[0]}")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain non-finite values")
        if self.domain_tag not in ("clean", "adversarial"):
            raise ValueError(f"unknown domain tag {self.domain_tag!r}")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx):
        return LabeledBatch(self.inputs[idx], self.labels[idx], self.domain_tag)

    def with_inputs(self, inputs, domain_tag="adversarial"):
        return LabeledBatch(inputs, self.labels, domain_tag)


@dataclass
class MlpNetwork:
    """``f(s) = W_n act(W_{n-1} ... act(W_1 s))``; ``W_l`` has shape (out, in)."""

    weights: list[np.ndarray]
    activation: str = "relu"
    cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for l in range(1, len(self.weights)):
            if self.weights[l].shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(
                    f"layer {l + 1} expects width {self.weights[l].shape[1]}, "
                    f"layer {l} produces {self.weights[l - 1].shape[0]}")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "MlpNetwork":
        return MlpNetwork([w.copy() for w in self.weights], self.activation)

    def act_derivative(self, pre: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return (pre > 0).astype(np.float64)
        if self.activation == "tanh":
            t = np.tanh(pre)
            return 1.0 - t * t
        return np.ones_like(pre)


def init_network(dims, seed: int, activation: str = "relu") -> MlpNetwork:
    """He-uniform weights, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``."""
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output sizes")
    rng = np.random.default_rng(seed)
    weights = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
    return MlpNetwork(weights, activation)


def forward_tensor(net: MlpNetwork, x, weights=None):
    """Differentiable forward pass.

    ``weights`` may be a list of :class:`Tensor` to differentiate through;
    the network's own arrays are used otherwise. Returns ``(logits, posts)``
    where ``posts[l]`` is ``a_l`` (``posts[0]`` is the input).
    """
    ws = weights if weights is not None else [Tensor(w) for w in net.weights]
    x = ad.as_tensor(x)
    if x.shape[1] != ws[0].shape[1]:
        raise ad.ShapeError(f"forward: input width {x.shape[1]} != first layer columns {ws[0].shape[1]}")
    act = ACTIVATIONS[net.activation]
    posts = [x]
    a = x
    for l, w in enumerate(ws):
        h = a @ w.T
        if l == len(ws) - 1:
            return h, posts
        a = act(h)
        posts.append(a)


def forward(net: MlpNetwork, batch) -> np.ndarray:
    """Logits for a batch (or raw input array); fills ``net.cache``."""
    x = batch.inputs if isinstance(batch, LabeledBatch) else np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.dims[0]:
        raise ValueError(f"forward: input shape {x.shape} does not match input width {net.dims[0]}")
    act = _NP_ACTIVATIONS[net.activation]
    pres, posts = [], [x]
    a = x
    for l, w in enumerate(net.weights):
        h = a @ w.T
        pres.append(h)
        if l < net.depth - 1:
            a = act(h)
            posts.append(a)
    net.cache = {"pre": pres, "post": posts, "inputs_id": id(x), "n": x.shape[0]}
    return pres[-1]


def predict(net: MlpNetwork, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    a = x
    act = _NP_ACTIVATIONS[net.activation]
    for l, w in enumerate(net.weights):
        a = a @ w.T
        if l < net.depth - 1:
            a = act(a)
    return a.argmax(axis=1)


def accuracy(net: MlpNetwork, batch: LabeledBatch) -> float:
    if len(batch) == 0:
        return float("nan")
    return float(np.mean(predict(net, batch.inputs) == batch.labels))


# ---------------------------------------------------------------- losses

def margin_loss(logits, labels, gamma: float) -> float:
    """Fraction of samples with ``f[y] <= gamma + max_{j != y} f[j]``."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    idx = np.arange(z.shape[0])
    true = z[idx, y]
    others = z.copy()
    others[idx, y] = -np.inf
    return float(np.mean(true <= gamma + others.max(axis=1)))


def one_hot(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    out = np.zeros((y.shape[0], num_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def soft_cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of ``-sum_c t_c log softmax(z)_c``."""
    logp = ad.log_softmax(logits)
    n = logp.shape[0]
    return -(ad.tsum(logp * np.asarray(targets, dtype=np.float64)) * (1.0 / n))


def cross_entropy(logits, labels) -> Tensor:
    z = ad.as_tensor(logits)
    return soft_cross_entropy(z, one_hot(labels, z.shape[1]))


def kl_softmax(logits_p, logits_q) -> Tensor:
    """Mean over rows of ``KL(softmax(p) || softmax(q))``."""
    p, q = ad.as_tensor(logits_p), ad.as_tensor(logits_q)
    if p.shape != q.shape:
        raise ad.ShapeError(f"kl_softmax: shapes {p.shape} and {q.shape} differ")
    logp, logq = ad.log_softmax(p), ad.log_softmax(q)
    return ad.tsum(ad.exp(logp) * (logp - logq)) * (1.0 / p.shape[0])


# ---------------------------------------------------------------- snapshots

def save_checkpoint(net: MlpNetwork, path, metadata: dict | None = None) -> Path:
    """Write the binary weight container plus a ``.json`` sidecar.

    Layout (little endian): magic ``S2OW``, u32 version, u32 layer count,
    u32 activation code, u32 dims[layers+1], then each ``W_l`` as row-major
    float64.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dims = net.dims
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, net.depth, _ACT_CODES[net.activation]))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        for w in net.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
    meta = dict(metadata or {})
    meta.update({"dims": dims, "activation": net.activation, "format_version": CHECKPOINT_VERSION,
                 "vec_order": "row-major"})
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> tuple[MlpNetwork, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, depth, code = struct.unpack_from("<III", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 16
    dims = struct.unpack_from(f"<{depth + 1}I", raw, off)
    off += 4 * (depth + 1)
    weights = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        n = fan_in * fan_out
        if off + 8 * n > len(raw):
            raise ValueError(f"{path}: truncated weight payload at offset {off}")
        weights.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(fan_out, fan_in).copy())
        off += 8 * n
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return MlpNetwork(weights, _CODE_ACTS[code]), meta
