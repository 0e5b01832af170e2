"""Small classifiers with hand-derived gradients, SGD with momentum and a
cosine schedule, evaluation, and the flat binary model format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels

ARCHITECTURES = ("softmax_linear", "mlp1")
_ARCH_TAG = {"softmax_linear": 0, "mlp1": 1}
MODEL_MAGIC = b"RSMK"
MODEL_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class ModelState:
    architecture: str
    input_shape: tuple
    n_classes: int
    params: dict
    momentum: dict = field(default_factory=dict)
    rng_seed: int | None = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if not self.momentum:
            self.momentum = {k: np.zeros_like(v) for k, v in self.params.items()}

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def copy(self) -> "ModelState":
        return replace(
            self,
            params={k: v.copy() for k, v in self.params.items()},
            momentum={k: v.copy() for k, v in self.momentum.items()},
        )


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        # argmax returns the first maximum, i.e. ties go to the lowest index
        return self.probabilities.argmax(axis=1)


def init_model(architecture: str, input_shape, n_classes: int, seed: int, hidden: int = 128) -> ModelState:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for every array."""
    rng = np.random.default_rng(seed)
    d = int(np.prod(input_shape))

    def layer(fan_in, fan_out):
        s = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-s, s, size=(fan_in, fan_out)), rng.uniform(-s, s, size=fan_out)

    if architecture == "softmax_linear":
        w, b = layer(d, n_classes)
        params = {"W": w, "b": b}
    elif architecture == "mlp1":
        w1, b1 = layer(d, hidden)
        w2, b2 = layer(hidden, n_classes)
        params = {"W1": w1, "b1": b1, "W2": w2, "b2": b2}
    else:
        raise ValueError(f"unknown architecture {architecture!r}")
    return ModelState(architecture, tuple(int(v) for v in input_shape), n_classes, params, rng_seed=seed)


def features(model: ModelState, images) -> np.ndarray:
    images = np.asarray(images)
    if images.shape[1:] != tuple(model.input_shape):
        raise ValueError(f"input shape {images.shape[1:]} does not match model input {tuple(model.input_shape)}")
    return images.reshape(len(images), -1).astype(np.float64) / 255.0


def _logits(model: ModelState, x: np.ndarray):
    p = model.params
    if model.architecture == "softmax_linear":
        return x @ p["W"] + p["b"], None
    pre = x @ p["W1"] + p["b1"]
    h = np.maximum(pre, 0.0)
    return h @ p["W2"] + p["b2"], h


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: ModelState, images) -> Prediction:
    logits, _ = _logits(model, features(model, images))
    return Prediction(logits, softmax(logits))


def loss_and_grad(model: ModelState, images, labels, alphas, sample_weights=None):
    """Weighted smoothed cross-entropy and its exact gradient.

    With the default weights ``1/B`` the loss is the batch mean of
    ``(1 - a_i) H(q_i, p_i) + a_i H(u, p_i)``.
    """
    x = features(model, images)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    alphas = np.ascontiguousarray(alphas, dtype=np.float64)
    n = len(x)
    if sample_weights is None:
        sample_weights = np.full(n, 1.0 / n)
    sample_weights = np.ascontiguousarray(sample_weights, dtype=np.float64)
    logits, h = _logits(model, x)
    losses, dz = kernels.smoothed_xent(np.ascontiguousarray(logits), labels, alphas, sample_weights)
    loss = float(np.dot(sample_weights, losses))
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"non-finite training loss {loss}")
    p = model.params
    if model.architecture == "softmax_linear":
        grads = {"W": x.T @ dz, "b": dz.sum(axis=0)}
    else:
        dh = dz @ p["W2"].T
        dh[h <= 0.0] = 0.0
        grads = {"W1": x.T @ dh, "b1": dh.sum(axis=0), "W2": h.T @ dz, "b2": dz.sum(axis=0)}
    return loss, grads


def learning_rate(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if cfg.schedule == "constant" or total_steps <= 0:
        return cfg.lr0
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(state: ModelState, grads: dict, step: int, total_steps: int, cfg: TrainConfig) -> ModelState:
    """v <- m v + (g + wd w);  w <- w - lr(t) v.  Returns a new state."""
    lr = learning_rate(step, total_steps, cfg)
    params, slots = {}, {}
    for key, w in state.params.items():
        g = grads[key]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {key} {w.shape}")
        v = cfg.momentum * state.momentum[key] + (g + cfg.weight_decay * w)
        slots[key] = v
        params[key] = w - lr * v
    return replace(state, params=params, momentum=slots)


def evaluate(model: ModelState, images, labels, batch_size: int = 1024):
    """Accuracy and per-sample plain cross-entropy (probability floor 1e-12)."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    correct = 0
    losses = np.empty(len(labels))
    for start in range(0, len(labels), batch_size):
        sl = slice(start, start + batch_size)
        pred = forward(model, images[sl])
        correct += int((pred.labels == labels[sl]).sum())
        losses[sl] = per_sample_ce(pred.logits, labels[sl])
    return correct / len(labels), losses


def per_sample_ce(logits: np.ndarray, labels) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = logp[np.arange(len(logp)), np.asarray(labels, dtype=np.int64)]
    # 0.0 - x turns a -0.0 into +0.0 for exact predictions
    return 0.0 - np.maximum(picked, kernels.LOG_EPS)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def model_to_bytes(model: ModelState) -> bytes:
    """RSMK layout: magic, u16 version, u8 arch tag, u16 channels-last input
    shape (u8 rank + u16 dims), u16 class count, u8 array count, per array
    (u8 rank, u32 dims), then every parameter array followed by every
    momentum slot as little-endian float64 in declaration order."""
    out = bytearray(MODEL_MAGIC)
    out += struct.pack("<HB", MODEL_VERSION, _ARCH_TAG[model.architecture])
    out += struct.pack("<B", len(model.input_shape)) + struct.pack(f"<{len(model.input_shape)}H", *model.input_shape)
    out += struct.pack("<HB", model.n_classes, len(model.params))
    for key, arr in model.params.items():
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    for group in (model.params, model.momentum):
        for key in model.params:
            out += np.ascontiguousarray(group[key], dtype="<f8").tobytes()
    return bytes(out)


def model_from_bytes(blob: bytes) -> ModelState:
    if blob[:4] != MODEL_MAGIC:
        raise ValueError("not a model file (bad magic)")
    off = 4
    version, tag = struct.unpack_from("<HB", blob, off)
    off += 3
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    arch = {v: k for k, v in _ARCH_TAG.items()}[tag]
    (rank,) = struct.unpack_from("<B", blob, off)
    off += 1
    input_shape = struct.unpack_from(f"<{rank}H", blob, off)
    off += 2 * rank
    n_classes, n_arrays = struct.unpack_from("<HB", blob, off)
    off += 3
    names = ("W", "b") if arch == "softmax_linear" else ("W1", "b1", "W2", "b2")
    if n_arrays != len(names):
        raise ValueError("array count does not match architecture")
    shapes = []
    for _ in names:
        (nd,) = struct.unpack_from("<B", blob, off)
        off += 1
        shapes.append(struct.unpack_from(f"<{nd}I", blob, off))
        off += 4 * nd
    groups = []
    for _ in range(2):
        g = {}
        for name, shape in zip(names, shapes):
            size = int(np.prod(shape))
            g[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
        groups.append(g)
    if off != len(blob):
        raise ValueError("trailing bytes in model file")
    return ModelState(arch, tuple(input_shape), n_classes, groups[0], groups[1])


def save_model(model: ModelState, path) -> None:
    from .datafile import atomic_write_bytes

    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path) -> ModelState:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
