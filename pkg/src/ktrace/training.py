"""Loss, initialization, Adam, the training loop with validation-based
checkpoint selection, and the versioned binary checkpoint format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from . import evaluation
from .data import Batch, Catalog, UserSequence, window_and_batch
from .errors import CheckpointError, DivergenceError
from .model import (ModelConfig, Parameters, backward_batch, forward_batch,
                    parameter_shapes)

CHECKPOINT_MAGIC = b"KTCKPT"
CHECKPOINT_VERSION = 1

_PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. The optimizer constants are the usual Adam
    defaults (lr 0.001, betas 0.9/0.999, epsilon 1e-8)."""

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 5
    patience: int = 5
    seed: int = 0
    precision: str = "float32"
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, patience must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


def xavier_init(config: ModelConfig, seed: int = 0,
                dtype=np.float32) -> Parameters:
    """Uniform Xavier weights, zero biases, forget-gate bias 1.

    Embedding tables are treated as per-row (d_embed, d_embed) maps so the
    bound does not collapse for large vocabularies. Tensors are drawn from
    one seeded stream in name order, so a seed pins every value.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".b"):
            t = np.zeros(shape, dtype=dtype)
            if ".fwd." in name or ".bwd." in name:
                t[config.d_lstm:2 * config.d_lstm] = 1.0
        else:
            if name.startswith("embed."):
                fan_in = fan_out = config.d_embed
            elif name == "attn.v_a":
                fan_in, fan_out = shape[0], 1
            else:
                fan_in, fan_out = shape[0], shape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            t = rng.uniform(-bound, bound, size=shape).astype(dtype)
        tensors[name] = t
    return Parameters(tensors)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def bce_loss(p, label):
    """Binary cross-entropy with the probability clamped away from {0, 1}."""
    p = np.clip(p, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    label = np.asarray(label, dtype=np.asarray(p).dtype)
    return -(label * np.log(p) + (1.0 - label) * np.log(1.0 - p))


@dataclass
class OptimizerState:
    """Adam moment accumulators, shaped exactly like the parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Parameters) -> "OptimizerState":
        return cls(m={k: np.zeros_like(t) for k, t in params.tensors.items()},
                   v={k: np.zeros_like(t) for k, t in params.tensors.items()})


def adam_step(params: Parameters, grads: dict[str, np.ndarray],
              state: OptimizerState, config: TrainConfig):
    """One bias-corrected Adam update, in place. Returns (params, state)."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name, tensor in params.tensors.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        tensor -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return params, state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm cap; returns the norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Trained parameters plus everything needed to score with them."""

    config: ModelConfig
    params: Parameters
    question_ids: list[str]
    meta: dict
    version: int = CHECKPOINT_VERSION

    def catalog(self, tags: dict[str, frozenset[str]] | None = None) -> Catalog:
        return Catalog(ids=list(self.question_ids), tags=dict(tags or {}))

    @property
    def prior_p(self) -> float:
        return float(self.meta.get("prior_p", 0.5))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        _write_checkpoint(ckpt, fh)


def _write_checkpoint(ckpt: Checkpoint, fh: BinaryIO) -> None:
    header = {
        "model_config": ckpt.config.to_dict(),
        "question_ids": ckpt.question_ids,
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", ckpt.version))
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)
    names = ckpt.params.names()
    fh.write(struct.pack("<I", len(names)))
    for name in names:
        tensor = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", tensor.ndim))
        for dim in tensor.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(tensor.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return _read_checkpoint(fh)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def _read_checkpoint(fh: BinaryIO) -> Checkpoint:
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version}, this build reads "
            f"{CHECKPOINT_VERSION}")
    (blob_len,) = struct.unpack("<Q", _read_exact(fh, 8))
    try:
        header = json.loads(_read_exact(fh, blob_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata block: {exc}") from None
    config = ModelConfig.from_dict(header["model_config"])
    expected = parameter_shapes(config)
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, name_len).decode("utf-8")
        if name not in expected:
            raise CheckpointError(f"unknown tensor {name!r} in checkpoint")
        (rank,) = struct.unpack("<B", _read_exact(fh, 1))
        shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0]
                      for _ in range(rank))
        if shape != expected[name]:
            raise CheckpointError(
                f"tensor {name!r} has shape {shape}, config implies "
                f"{expected[name]}")
        size = int(np.prod(shape)) if shape else 1
        raw = _read_exact(fh, size * 4)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint is missing tensor {missing[0]!r}")
    params = Parameters({n: tensors[n] for n in expected})
    return Checkpoint(config=config, params=params,
                      question_ids=list(header["question_ids"]),
                      meta=dict(header["meta"]), version=version)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    loss: float
    val_auc: float
    val_acc: float
    val_f1: float

    def format_line(self) -> str:
        return (f"{self.epoch}\t{self.loss:.6f}\t{self.val_auc:.6f}"
                f"\t{self.val_acc:.6f}\t{self.val_f1:.6f}")


EPOCH_LOG_HEADER = "epoch\tloss\tval_auc\tval_acc\tval_f1"


def predict_batches(params: Parameters, config: ModelConfig,
                    batches: Sequence[Batch]):
    """Forward-only pass over batches; returns (probs, labels) arrays."""
    probs, labels = [], []
    for batch in batches:
        trace = forward_batch(params, config, batch.questions, batch.responses,
                              batch.mask, batch.targets, cache=False)
        probs.append(trace.prob)
        labels.append(batch.labels)
    if not probs:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(probs).astype(np.float64), np.concatenate(labels)


def fit(train_sequences: Sequence[UserSequence],
        val_sequences: Sequence[UserSequence],
        catalog: Catalog,
        model_config: ModelConfig,
        train_config: TrainConfig,
        log_fn=None):
    """Train with validation-AUC checkpoint selection and early stopping.

    Batches are rebuilt each epoch from an epoch-derived seed, batch order
    is shuffled the same way, and updates are applied in that order, so a
    (seed, thread=1) pair reproduces the run bit for bit. Returns the best
    checkpoint and the per-epoch log. On divergence the last good
    checkpoint is returned; divergence before any epoch completes raises.
    """
    if not train_sequences or not val_sequences:
        raise ValueError("train and validation splits must be nonempty")
    dtype = train_config.dtype
    params = xavier_init(model_config, seed=train_config.seed, dtype=dtype)
    state = OptimizerState.for_params(params)
    val_batches = window_and_batch(val_sequences, catalog, model_config.window,
                                   train_config.batch_size)
    labels_all = [it.correct for seq in train_sequences
                  for it in seq.interactions]
    prior_p = float(np.mean(labels_all)) if labels_all else 0.5

    best: Checkpoint | None = None
    best_auc = -np.inf
    stats: list[EpochStats] = []
    stale = 0
    rng = np.random.default_rng([train_config.seed, 0xBA7C4])
    for epoch in range(1, train_config.max_epochs + 1):
        epoch_seed = int(rng.integers(2 ** 63))
        batches = window_and_batch(train_sequences, catalog,
                                   model_config.window,
                                   train_config.batch_size,
                                   shuffle_seed=epoch_seed)
        order = np.random.default_rng(epoch_seed).permutation(len(batches))
        loss_sum = 0.0
        n_examples = 0
        diverged = False
        for bi in order:
            batch = batches[bi]
            trace = forward_batch(params, model_config, batch.questions,
                                  batch.responses, batch.mask, batch.targets,
                                  cache=True)
            losses = bce_loss(trace.prob, batch.labels)
            if not np.all(np.isfinite(losses)):
                diverged = True
                break
            loss_sum += float(losses.sum())
            n_examples += len(batch)
            grads = backward_batch(params, model_config, trace, batch.labels,
                                   scale=1.0 / len(batch))
            if train_config.clip_norm is not None:
                clip_gradients(grads, train_config.clip_norm)
            adam_step(params, grads, state, train_config)
        if diverged:
            if best is None:
                raise DivergenceError("training diverged before any epoch "
                                      "completed")
            best.meta["diverged_at_epoch"] = epoch
            break
        probs, labels = predict_batches(params, model_config, val_batches)
        report = evaluation.binary_metrics(probs, labels)
        val_auc = report.auc if report.auc is not None else 0.5
        entry = EpochStats(epoch=epoch, loss=loss_sum / max(1, n_examples),
                           val_auc=val_auc, val_acc=report.acc,
                           val_f1=report.f1)
        stats.append(entry)
        if log_fn is not None:
            log_fn(entry)
        if val_auc > best_auc:
            best_auc = val_auc
            stale = 0
            best = Checkpoint(
                config=model_config,
                params=params.astype(np.float32),
                question_ids=list(catalog.ids),
                meta={"epoch": epoch, "val_auc": val_auc, "val_acc": report.acc,
                      "val_f1": report.f1, "seed": train_config.seed,
                      "prior_p": prior_p},
            )
        else:
            stale += 1
            if stale >= train_config.patience:
                break
    if best is None:
        raise DivergenceError("no epoch produced a usable checkpoint")
    return best, stats
