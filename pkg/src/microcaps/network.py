"""The two image classifiers and their training loop.

M1 ends the convolutional trunk with a fully-connected layer. M2 splits the
flattened trunk output into capsules of dimension d and scores each class
with a homogeneous vector capsule (HVC): the capsules are weighted
elementwise, summed into one d-vector per class, squashed componentwise and
summed to a scalar logit.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import ROTATION_ORDER, AugmentPolicy, augmentation_homography, sample_augmentation, warp_batch
from .rng import derive_rng
from .synthgen import SampleSet

HEADS = ("fc", "hvc")
MODEL_NAMES = {"M1": "fc", "M2": "hvc"}


@dataclass(frozen=True)
class ModelConfig:
    head: str = "hvc"
    input_size: int = 64
    num_classes: int = 8
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    capsule_dim: int = 8
    input_pool: int = 1  # average-pool factor applied to the raw image
    hvc_activation: str = "sigmoid"
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.channels or min(self.channels) < 1:
            raise ValueError("channels must be a non-empty list of positive widths")
        if self.input_pool < 1 or self.capsule_dim < 1:
            raise ValueError("input_pool and capsule_dim must be positive")
        if self.hvc_activation not in ("sigmoid", "identity"):
            raise ValueError(f"unknown HVC activation {self.hvc_activation!r}")
        if self.feature_side < 1:
            raise ValueError(f"input_size {self.input_size} too small for {len(self.channels)} pooling stages")
        if self.head == "hvc" and self.feature_count % self.capsule_dim:
            raise ValueError(
                f"{self.feature_count} trunk features cannot be split into capsules of dimension {self.capsule_dim}"
            )

    @property
    def feature_side(self) -> int:
        side = self.input_size // self.input_pool
        for _ in self.channels:
            side //= 2
        return side

    @property
    def feature_count(self) -> int:
        return self.feature_side**2 * self.channels[-1]

    @property
    def num_capsules(self) -> int:
        return self.feature_count // self.capsule_dim

    def with_head(self, head: str) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), "head": head})


def parameter_count(config: ModelConfig) -> int:
    """Closed-form number of scalar parameters."""
    total = 0
    cin = config.in_channels
    for cout in config.channels:
        total += cout * cin * 9 + cout
        cin = cout
    k = config.num_classes
    if config.head == "fc":
        return total + config.feature_count * k + k
    return total + config.num_capsules * k * config.capsule_dim + k * config.capsule_dim


def capsules_from_features(features: T.Tensor, capsule_dim: int) -> T.Tensor:
    """[N, F] features to [N, F/d, d] capsules: contiguous blocks of the row-major flattening."""
    n, f = features.shape
    if f % capsule_dim:
        raise T.ShapeError(f"{f} features are not divisible into capsules of dimension {capsule_dim}")
    return T.reshape(features, (n, f // capsule_dim, capsule_dim))


def hvc_head(capsules: T.Tensor, weights: T.Tensor, bias: T.Tensor | None = None,
             activation: str = "sigmoid") -> T.Tensor:
    """Class logits from capsules [N, n, d] (or [n, d]) and weights [n, K, d].

    v_j = sum_i x_i * w_ij (+ b_j), then logit_j = sum over d of act(v_j).
    """
    single = capsules.ndim == 2
    if single:
        capsules = T.reshape(capsules, (1,) + capsules.shape)
    if capsules.ndim != 3 or weights.ndim != 3:
        raise T.ShapeError(f"hvc_head: expected capsules [N,n,d] and weights [n,K,d], got {capsules.shape}, "
                           f"{weights.shape}")
    b, n, d = capsules.shape
    if weights.shape[0] != n or weights.shape[2] != d:
        raise T.ShapeError(f"hvc_head: weights {weights.shape} do not match {n} capsules of dimension {d}")
    k = weights.shape[1]
    x = T.reshape(capsules, (b, n, 1, d))
    v = T.reduce_sum(T.hadamard_multiply(x, weights), axis=1)  # [N, K, d]
    if bias is not None:
        if bias.shape != (k, d):
            raise T.ShapeError(f"hvc_head: bias shape {bias.shape} should be {(k, d)}")
        v = T.add(v, bias)
    if activation == "sigmoid":
        v = T.sigmoid(v)
    elif activation != "identity":
        raise ValueError(f"unknown activation {activation!r}")
    logits = T.reduce_sum(v, axis=2)
    return T.reshape(logits, (k,)) if single else logits


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Model:
    """Convolutional trunk plus an FC or HVC head; parameters kept in declaration order."""

    def __init__(self, config: ModelConfig, params: dict[str, T.Tensor]):
        self.config = config
        self.params = params

    @property
    def name(self) -> str:
        return "M1" if self.config.head == "fc" else "M2"

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def trunk_parameters(self) -> dict[str, T.Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("conv")}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def features(self, images) -> T.Tensor:
        """Flattened trunk output [N, F] for [N, H, W, C] ``images``; features keep (row, col, channel) order."""
        cfg = self.config
        x = images if isinstance(images, T.Tensor) else T.Tensor(np.asarray(images, dtype=cfg.dtype))
        if x.ndim != 4 or x.shape[1:] != (cfg.input_size, cfg.input_size, cfg.in_channels):
            raise T.ShapeError(
                f"expected images [N, {cfg.input_size}, {cfg.input_size}, {cfg.in_channels}], got {x.shape}"
            )
        if cfg.input_pool > 1:
            x = T.avg_pool2d_nhwc(x, cfg.input_pool)
        for i in range(len(cfg.channels)):
            x = T.conv2d_nhwc(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], padding=1)
            x = T.max_pool2d_nhwc(T.relu(x), 2)
        return T.reshape(x, (x.shape[0], -1))

    def __call__(self, images) -> T.Tensor:
        feats = self.features(images)
        p = self.params
        if self.config.head == "fc":
            return T.dense(feats, p["head.w"], p["head.b"])
        caps = capsules_from_features(feats, self.config.capsule_dim)
        return hvc_head(caps, p["head.w"], p["head.b"], self.config.hvc_activation)

    def copy(self) -> "Model":
        return Model(self.config, {k: T.Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})


def build_model(config: ModelConfig, rng_seed: int) -> Model:
    """Deterministic initialisation; the trunk draws from a stream that ignores the head type."""
    dtype = np.dtype(config.dtype)
    trunk_rng = derive_rng(rng_seed, 0)
    head_rng = derive_rng(rng_seed, 1)
    params: dict[str, T.Tensor] = {}
    cin = config.in_channels
    for i, cout in enumerate(config.channels):
        params[f"conv{i}.w"] = T.Tensor(_he_uniform(trunk_rng, (3, 3, cin, cout), cin * 9, dtype), requires_grad=True)
        params[f"conv{i}.b"] = T.Tensor(np.zeros(cout, dtype), requires_grad=True)
        cin = cout
    k = config.num_classes
    if config.head == "fc":
        w = _he_uniform(head_rng, (config.feature_count, k), config.feature_count, dtype)
        b = np.zeros(k, dtype)
    else:
        n, d = config.num_capsules, config.capsule_dim
        w = _he_uniform(head_rng, (n, k, d), n, dtype)
        b = np.zeros((k, d), dtype)
    params["head.w"] = T.Tensor(w, requires_grad=True)
    params["head.b"] = T.Tensor(b, requires_grad=True)
    return Model(config, params)


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    seconds: float


@dataclass
class TrainResult:
    model: Model
    metrics: list[EpochMetrics] = field(default_factory=list)


def border_fill(images: np.ndarray) -> np.ndarray:
    """Per-image, per-channel mean of the outermost pixel ring, [N, C]."""
    ring = np.concatenate(
        [images[:, 0], images[:, -1], images[:, 1:-1, 0], images[:, 1:-1, -1]], axis=1
    )
    return ring.mean(axis=1)


def augment_batch(images: np.ndarray, rotation_idx, rings, policy: AugmentPolicy,
                  rng: np.random.Generator) -> tuple[np.ndarray, list]:
    """Draw one augmentation per image and warp the batch; returns images and draws."""
    shape = images.shape[1:3]
    draws = [sample_augmentation(ROTATION_ORDER[int(r)], ring, policy, rng, shape)
             for r, ring in zip(rotation_idx, rings)]
    hs = np.stack([augmentation_homography(d, shape).m for d in draws])
    out = warp_batch(images, hs, border_fill(images)).astype(images.dtype, copy=False)
    return out, draws


def _check_dataset(model: Model, data: SampleSet, what: str) -> None:
    if len(data) == 0:
        raise ValueError(f"{what} set is empty")
    cfg = model.config
    if data.images.shape[1:] != (cfg.input_size, cfg.input_size, cfg.in_channels):
        raise T.ShapeError(f"{what} images have shape {data.images.shape[1:]}, model expects "
                           f"{(cfg.input_size, cfg.input_size, cfg.in_channels)}")


def train(model: Model, dataset: SampleSet, policy: AugmentPolicy | None = None, epochs: int = 30,
          batch_size: int = 32, rng_seed: int = 0, lr: float = 1e-3, log=None) -> TrainResult:
    """Adam training with per-sample jitter and policy-driven augmentation, in place."""
    _check_dataset(model, dataset, "training")
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    policy = policy or AugmentPolicy()
    rng = derive_rng(rng_seed, 2)
    opt = T.Adam(model.parameters(), lr=lr)
    rings = np.array(dataset.rings, dtype=object)
    n = len(dataset)
    result = TrainResult(model)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            imgs, _ = augment_batch(dataset.images[idx], dataset.rotation[idx], rings[idx], policy, rng)
            logits = model(imgs.astype(model.config.dtype, copy=False))
            labels = dataset.class_ids[idx]
            loss = T.softmax_cross_entropy(logits, labels)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            loss_sum += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
        m = EpochMetrics(epoch, loss_sum / n, correct / n, time.perf_counter() - t0)
        result.metrics.append(m)
        if log:
            log(m)
    return result


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray  # [true, predicted] counts


def predict(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            batch = images[start:start + batch_size].astype(model.config.dtype, copy=False)
            out.append(model(batch).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, test_set: SampleSet, batch_size: int = 256) -> Evaluation:
    """Accuracy and confusion matrix on unaugmented images."""
    _check_dataset(model, test_set, "test")
    pred = predict(model, test_set.images, batch_size)
    k = model.config.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (test_set.class_ids, pred), 1)
    return Evaluation(float(np.trace(confusion)) / len(pred), confusion)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (all little-endian):
#   8 bytes   magic b"MCAPCKPT"
#   u32       header length L
#   L bytes   UTF-8 JSON: {"config": {...}, "params": [[name, dtype, shape], ...]}
#   then each parameter's raw bytes in header order

MAGIC = b"MCAPCKPT"


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    entries = []
    for name, p in model.params.items():
        entries.append([name, p.data.dtype.newbyteorder("<").str, list(p.shape)])
    header = json.dumps({"config": asdict(model.config), "params": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<")).tobytes())
    return path


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen])
    cfg = header["config"]
    cfg["channels"] = tuple(cfg["channels"])
    config = ModelConfig(**cfg)
    offset = 12 + hlen
    params = {}
    for name, dt, shape in header["params"]:
        dtype = np.dtype(dt)
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape)
        params[name] = T.Tensor(arr.astype(dtype.newbyteorder("="), copy=True), requires_grad=True)
        offset += count * dtype.itemsize
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return Model(config, params)
