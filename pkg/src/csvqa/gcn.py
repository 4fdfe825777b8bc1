"""Two-layer graph convolutional network with MLP confidence head.

Propagation per layer is rect(A_norm @ H @ W + b) with inverted dropout in
training mode; node states are mean-pooled and mapped to per-option logits,
masked to the sample's valid option count before the softmax.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .errors import ContractError, FormatError
from .graph import MultimodalGraph

CHECKPOINT_MAGIC = b"MGCN"
CHECKPOINT_VERSION = 1

DEFAULT_HIDDEN = (256, 512)
PARAM_NAMES = ("w0", "b0", "w1", "b1", "w_out", "b_out")


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-5
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        for name in ("batch_size", "learning_rate", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ContractError("val_fraction must be in (0, 1)")


@dataclass
class ConfidenceVector:
    """Softmax over options, padded to the model width M.

    Entries beyond `valid_options` are exactly zero; the valid entries
    sum to one.
    """

    probs: np.ndarray
    valid_options: int

    def valid_probs(self) -> list[float]:
        return [float(p) for p in self.probs[: self.valid_options]]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-scale, scale, size=(fan_in, fan_out))


class GcnModel:
    """Trainable parameters; float64 in memory, f32 in checkpoints."""

    def __init__(
        self,
        input_dim: int,
        num_options: int,
        hidden: tuple[int, int] = DEFAULT_HIDDEN,
        dropout_rate: float = 0.4,
        params: dict[str, np.ndarray] | None = None,
    ):
        if input_dim <= 0 or num_options <= 0:
            raise ContractError("input_dim and num_options must be positive")
        if not 0.0 <= dropout_rate < 1.0:
            raise ContractError(f"dropout rate {dropout_rate} outside [0, 1)")
        self.input_dim = input_dim
        self.num_options = num_options
        self.hidden = tuple(hidden)
        self.dropout_rate = dropout_rate
        h1, h2 = self.hidden
        shapes = {
            "w0": (input_dim, h1),
            "b0": (h1,),
            "w1": (h1, h2),
            "b1": (h2,),
            "w_out": (h2, num_options),
            "b_out": (num_options,),
        }
        if params is None:
            params = {name: np.zeros(shape) for name, shape in shapes.items()}
        for name, shape in shapes.items():
            value = np.asarray(params[name], dtype=np.float64)
            if value.shape != shape:
                raise ContractError(f"parameter {name} has shape {value.shape}, expected {shape}")
            if not np.all(np.isfinite(value)):
                raise ContractError(f"parameter {name} contains non-finite values")
            params[name] = value
        self.params = params

    @classmethod
    def init(
        cls,
        input_dim: int,
        num_options: int,
        hidden: tuple[int, int] = DEFAULT_HIDDEN,
        dropout_rate: float = 0.4,
        seed: int = 0,
    ) -> "GcnModel":
        """Centered-uniform weight init scaled by sqrt(6/(fan_in+fan_out))."""
        rng = np.random.default_rng(seed)
        h1, h2 = hidden
        params = {
            "w0": _glorot(rng, input_dim, h1),
            "b0": np.zeros(h1),
            "w1": _glorot(rng, h1, h2),
            "b1": np.zeros(h2),
            "w_out": _glorot(rng, h2, num_options),
            "b_out": np.zeros(num_options),
        }
        return cls(input_dim, num_options, hidden, dropout_rate, params)

    def copy(self) -> "GcnModel":
        return GcnModel(
            self.input_dim,
            self.num_options,
            self.hidden,
            self.dropout_rate,
            {name: value.copy() for name, value in self.params.items()},
        )


@dataclass
class ForwardCache:
    a_norm: np.ndarray
    h0: np.ndarray
    ah0: np.ndarray
    z1: np.ndarray
    h1_dropped: np.ndarray
    mask1: np.ndarray | None
    ah1: np.ndarray
    z2: np.ndarray
    h2_dropped: np.ndarray
    mask2: np.ndarray | None
    pooled: np.ndarray
    probs: np.ndarray
    valid_options: int
    model: GcnModel


def _dropout(
    h: np.ndarray, rate: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray | None]:
    if rate == 0.0:
        return h, None
    mask = (rng.random(h.shape) >= rate) / (1.0 - rate)
    return h * mask, mask


def gcn_forward(
    graph: MultimodalGraph,
    model: GcnModel,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    valid_options: int | None = None,
) -> tuple[ConfidenceVector, ForwardCache]:
    """Run the network; training mode applies inverted dropout after each layer."""
    if graph.dim != model.input_dim:
        raise ContractError(
            f"graph feature dim {graph.dim} does not match model input dim {model.input_dim}"
        )
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and model.dropout_rate > 0 and rng is None:
        raise ContractError("training mode with dropout requires an rng")
    valid = model.num_options if valid_options is None else valid_options
    if not 1 <= valid <= model.num_options:
        raise ContractError(f"valid_options {valid} outside [1, {model.num_options}]")

    p = model.params
    a_norm, h0 = graph.normalized, graph.node_features
    ah0 = a_norm @ h0
    z1 = ah0 @ p["w0"] + p["b0"]
    h1 = np.maximum(z1, 0.0)
    mask1 = None
    if mode == "train":
        h1, mask1 = _dropout(h1, model.dropout_rate, rng)
    ah1 = a_norm @ h1
    z2 = ah1 @ p["w1"] + p["b1"]
    h2 = np.maximum(z2, 0.0)
    mask2 = None
    if mode == "train":
        h2, mask2 = _dropout(h2, model.dropout_rate, rng)

    pooled = h2.mean(axis=0)
    logits = pooled @ p["w_out"] + p["b_out"]
    masked = np.full(model.num_options, -np.inf)
    masked[:valid] = logits[:valid]
    shifted = masked - np.max(masked[:valid])
    exp = np.exp(shifted, where=np.isfinite(shifted), out=np.zeros_like(shifted))
    probs = exp / exp.sum()

    cache = ForwardCache(
        a_norm=a_norm,
        h0=h0,
        ah0=ah0,
        z1=z1,
        h1_dropped=h1,
        mask1=mask1,
        ah1=ah1,
        z2=z2,
        h2_dropped=h2,
        mask2=mask2,
        pooled=pooled,
        probs=probs,
        valid_options=valid,
        model=model,
    )
    return ConfidenceVector(probs=probs, valid_options=valid), cache


def cross_entropy(confidence: ConfidenceVector, gold: int) -> float:
    if not 0 <= gold < confidence.valid_options:
        raise ContractError(f"gold index {gold} outside valid options {confidence.valid_options}")
    return float(-np.log(confidence.probs[gold]))


def gcn_backward(cache: ForwardCache, gold: int) -> dict[str, np.ndarray]:
    """Gradients of the cross-entropy loss; reuses the cached dropout masks."""
    if cache is None:
        raise ContractError("backward pass requires the forward cache")
    if not 0 <= gold < cache.valid_options:
        raise ContractError(f"gold index {gold} outside valid options {cache.valid_options}")
    p = cache.model.params
    n = cache.h0.shape[0]

    d_logits = cache.probs.copy()
    d_logits[gold] -= 1.0
    grads = {
        "w_out": np.outer(cache.pooled, d_logits),
        "b_out": d_logits,
    }
    d_pooled = p["w_out"] @ d_logits
    d_h2 = np.tile(d_pooled / n, (n, 1))
    if cache.mask2 is not None:
        d_h2 = d_h2 * cache.mask2
    d_z2 = d_h2 * (cache.z2 > 0)
    grads["w1"] = cache.ah1.T @ d_z2
    grads["b1"] = d_z2.sum(axis=0)
    d_h1 = cache.a_norm.T @ d_z2 @ p["w1"].T
    if cache.mask1 is not None:
        d_h1 = d_h1 * cache.mask1
    d_z1 = d_h1 * (cache.z1 > 0)
    grads["w0"] = cache.ah0.T @ d_z1
    grads["b0"] = d_z1.sum(axis=0)
    return grads


def score_sample(model: GcnModel, graph: MultimodalGraph, valid_options: int) -> ConfidenceVector:
    """Deterministic eval-mode forward pass."""
    confidence, _ = gcn_forward(graph, model, mode="eval", valid_options=valid_options)
    return confidence


class EarlyStopper:
    """Stop when validation accuracy has not improved for `patience` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_accuracy = -np.inf
        self.best_epoch = 0
        self.epochs_since_improvement = 0

    def update(self, epoch: int, accuracy: float) -> bool:
        """Record one epoch's accuracy; returns True when training should stop."""
        if accuracy > self.best_accuracy:
            self.best_accuracy = accuracy
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
            return False
        self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float


TrainSample = tuple[MultimodalGraph, int, int]  # graph, gold index, valid options


def _accuracy(model: GcnModel, samples: Sequence[TrainSample]) -> float:
    correct = 0
    for graph, gold, valid in samples:
        confidence = score_sample(model, graph, valid)
        if int(np.argmax(confidence.probs[:valid])) == gold:
            correct += 1
    return correct / len(samples)


def train(
    dataset: Sequence[TrainSample],
    cfg: TrainConfig,
    *,
    hidden: tuple[int, int] = DEFAULT_HIDDEN,
    dropout_rate: float = 0.4,
) -> tuple[GcnModel, list[EpochStats]]:
    """Mini-batch adaptive-moment training with early stopping.

    Carves out a seeded validation split, tracks the best-validation
    parameters, and is bit-deterministic for a fixed (seed, dataset order).
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    for graph, gold, valid in dataset:
        if not 0 <= gold < valid:
            raise ContractError(f"gold index {gold} outside valid options {valid}")

    input_dim = dataset[0][0].dim
    num_options = max(valid for _, _, valid in dataset)
    rng = np.random.default_rng(cfg.seed)

    permutation = rng.permutation(len(dataset))
    val_size = max(1, int(round(cfg.val_fraction * len(dataset))))
    if val_size >= len(dataset):
        raise ContractError("dataset too small to carve out a validation split")
    val_set = [dataset[i] for i in permutation[:val_size]]
    train_set = [dataset[i] for i in permutation[val_size:]]

    model = GcnModel.init(input_dim, num_options, hidden, dropout_rate, seed=cfg.seed)
    moments1 = {name: np.zeros_like(value) for name, value in model.params.items()}
    moments2 = {name: np.zeros_like(value) for name, value in model.params.items()}
    step = 0

    stopper = EarlyStopper(cfg.patience)
    best_params = {name: value.copy() for name, value in model.params.items()}
    history: list[EpochStats] = []

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start : start + cfg.batch_size]]
            accumulated = {name: np.zeros_like(value) for name, value in model.params.items()}
            for graph, gold, valid in batch:
                confidence, cache = gcn_forward(
                    graph, model, mode="train", rng=rng, valid_options=valid
                )
                epoch_loss += cross_entropy(confidence, gold)
                for name, grad in gcn_backward(cache, gold).items():
                    accumulated[name] += grad
            step += 1
            for name in model.params:
                grad = accumulated[name] / len(batch)
                moments1[name] = cfg.beta1 * moments1[name] + (1 - cfg.beta1) * grad
                moments2[name] = cfg.beta2 * moments2[name] + (1 - cfg.beta2) * grad**2
                m_hat = moments1[name] / (1 - cfg.beta1**step)
                v_hat = moments2[name] / (1 - cfg.beta2**step)
                model.params[name] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)

        stats = EpochStats(
            epoch=epoch,
            train_loss=epoch_loss / len(train_set),
            train_accuracy=_accuracy(model, train_set),
            val_accuracy=_accuracy(model, val_set),
        )
        history.append(stats)
        improved = stats.val_accuracy > stopper.best_accuracy
        should_stop = stopper.update(epoch, stats.val_accuracy)
        if improved:
            best_params = {name: value.copy() for name, value in model.params.items()}
        if should_stop:
            break

    best = GcnModel(input_dim, num_options, hidden, dropout_rate, best_params)
    return best, history


def write_history_csv(history: Sequence[EpochStats], sink: IO[str]) -> None:
    writer = csv.writer(sink)
    writer.writerow(["epoch", "train_loss", "train_accuracy", "val_accuracy"])
    for stats in history:
        writer.writerow(
            [stats.epoch, f"{stats.train_loss:.6f}", f"{stats.train_accuracy:.4f}", f"{stats.val_accuracy:.4f}"]
        )


def save_checkpoint(model: GcnModel) -> bytes:
    """Serialize: magic, version, length-prefixed JSON header, f32 blocks."""
    header = json.dumps(
        {
            "input_dim": model.input_dim,
            "hidden": list(model.hidden),
            "num_options": model.num_options,
            "dropout_rate": model.dropout_rate,
        },
        sort_keys=True,
    ).encode("utf-8")
    buffer = io.BytesIO()
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(struct.pack("<H", CHECKPOINT_VERSION))
    buffer.write(struct.pack("<I", len(header)))
    buffer.write(header)
    for name in PARAM_NAMES:
        buffer.write(model.params[name].astype("<f4").tobytes())
    return buffer.getvalue()


def load_checkpoint(data: bytes) -> GcnModel:
    offset = 0
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}", offset=0)
    offset = 4
    if len(data) < offset + 6:
        raise FormatError("truncated checkpoint header", offset=offset)
    version = struct.unpack_from("<H", data, offset)[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=offset)
    offset += 2
    header_len = struct.unpack_from("<I", data, offset)[0]
    offset += 4
    if len(data) < offset + header_len:
        raise FormatError("truncated checkpoint JSON header", offset=offset)
    try:
        header = json.loads(data[offset : offset + header_len])
    except ValueError as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", offset=offset) from exc
    offset += header_len

    input_dim = int(header["input_dim"])
    hidden = tuple(int(h) for h in header["hidden"])
    num_options = int(header["num_options"])
    dropout_rate = float(header["dropout_rate"])
    shapes = {
        "w0": (input_dim, hidden[0]),
        "b0": (hidden[0],),
        "w1": (hidden[0], hidden[1]),
        "b1": (hidden[1],),
        "w_out": (hidden[1], num_options),
        "b_out": (num_options,),
    }
    params = {}
    for name in PARAM_NAMES:
        count = int(np.prod(shapes[name]))
        end = offset + 4 * count
        if len(data) < end:
            raise FormatError(f"truncated parameter block {name}", offset=offset)
        params[name] = (
            np.frombuffer(data[offset:end], dtype="<f4").astype(np.float64).reshape(shapes[name])
        )
        offset = end
    if offset != len(data):
        raise FormatError("trailing bytes after parameter blocks", offset=offset)
    return GcnModel(input_dim, num_options, hidden, dropout_rate, params)
