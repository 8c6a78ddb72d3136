"""Teacher-forced training with Adam, decoupled weight decay and checkpoints.

Checkpoint layout (all integers little-endian)::

    b"PXAD" | u32 version | u32 header_length | header (UTF-8 JSON) | payload

The header lists every tensor as ``{"name", "shape", "offset"}`` (offset in
bytes into the payload) together with the full model config and, optionally,
the vocabulary. The payload is contiguous little-endian float32.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import MultiStreamSample, Vocabulary, iter_batches
from .errors import (ConfigurationError, CorruptionError, DegenerateBatchError, FormatError,
                     NumericError, TrainingError)
from .model import PAD, ModelConfig, ModelParams, forward, is_decayed, param_shapes
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

MAGIC = b"PXAD"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 30
    grad_clip_norm: float | None = 1.0
    seed: int = 0
    eval_every: int = 1
    patience: int = 10
    schedule: str = "constant"
    warmup_steps: int = 100

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ConfigurationError("learning rate and weight decay must be >= 0, eps > 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.eval_every < 1:
            raise ConfigurationError("batch_size and eval_every must be >= 1, max_epochs >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigurationError("grad_clip_norm must be positive (or None to disable)")
        if self.schedule not in ("constant", "inverse_sqrt"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant":
            return self.learning_rate
        w = max(self.warmup_steps, 1)
        return self.learning_rate * min(step / w, math.sqrt(w / max(step, 1)))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def sequence_loss(logits: Tensor, targets, pad_mask=None) -> Tensor:
    """Mean next-token NLL over target positions not marked in ``pad_mask``."""
    targets = np.asarray(targets)
    if pad_mask is not None:
        targets = np.where(np.asarray(pad_mask, bool), PAD, targets)
    return T.cross_entropy_with_logits(logits, targets, ignore_index=PAD)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              config: TrainConfig, lr: float | None = None) -> float:
    """Apply one Adam update in place; returns the pre-clipping global grad norm.

    Gradients are clipped to ``config.grad_clip_norm`` by global norm. Decoupled
    weight decay (``p *= 1 - lr * wd``) is applied to matrices only, before the
    Adam step.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    missing = [n for n in params if n not in grads]
    if missing:
        raise TrainingError(f"no gradient for parameters {missing[:3]}")
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    factor = 1.0
    if config.grad_clip_norm is not None and norm > config.grad_clip_norm:
        factor = config.grad_clip_norm / norm
    lr = config.learning_rate if lr is None else lr
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name] * factor if factor != 1.0 else grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if config.weight_decay and is_decayed(name, p):
            p.data *= p.dtype.type(1.0 - lr * config.weight_decay)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)).astype(p.dtype)
    return norm


def token_accuracy(logits: np.ndarray, targets: np.ndarray, pad_mask: np.ndarray) -> tuple[int, int]:
    keep = ~np.asarray(pad_mask, bool)
    correct = (logits.argmax(axis=-1) == targets) & keep
    return int(correct.sum()), int(keep.sum())


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    split: str
    loss: float
    token_accuracy: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[HistoryRow]
    best_epoch: int | None
    final_params: ModelParams


def _batch_step(params: ModelParams, batch, rng, training: bool):
    targets = batch.tokens[:, 1:]
    pad = batch.token_pad[:, 1:]
    if training:
        with Tape():
            logits, _ = forward(params, batch, training=True, rng=rng)
            loss = sequence_loss(logits, targets, pad)
            T.backward(loss)
    else:
        with T.no_grad():
            logits, _ = forward(params, batch)
            loss = sequence_loss(logits, targets, pad)
    return loss.item(), token_accuracy(logits.data, targets, pad)


def evaluate(params: ModelParams, samples: Sequence[MultiStreamSample], vocab: Vocabulary | None,
             batch_size: int = 32) -> tuple[float, float]:
    """Token-weighted mean loss and token accuracy in eval mode."""
    total_loss = 0.0
    correct = count = 0
    for batch in iter_batches(samples, batch_size, vocab, dtype=params.dtype):
        loss, (c, n) = _batch_step(params, batch, None, training=False)
        total_loss += loss * n
        correct += c
        count += n
    if count == 0:
        raise DegenerateBatchError("evaluation set has no target tokens")
    return total_loss / count, correct / count


def train(params: ModelParams, samples: Sequence[MultiStreamSample], config: TrainConfig,
          vocab: Vocabulary | None = None, val_samples: Sequence[MultiStreamSample] | None = None,
          sink: Callable[[HistoryRow], None] | None = None) -> TrainResult:
    """Train ``params`` in place and return the best parameters and history.

    Batch order comes from a generator seeded with ``config.seed``; dropout uses
    an independent stream of the same seed. With validation data, the returned
    ``params`` are those with the lowest validation loss and training stops
    after ``config.patience`` evaluations without improvement.
    """
    if not samples:
        raise TrainingError("training set is empty")
    order_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    state = AdamState()
    history: list[HistoryRow] = []
    best = None
    best_loss = math.inf
    best_epoch = None
    stale = 0

    def emit(row):
        history.append(row)
        if sink is not None:
            sink(row)

    for epoch in range(1, config.max_epochs + 1):
        order = order_rng.permutation(len(samples))
        total_loss = 0.0
        correct = count = 0
        for step, batch in enumerate(iter_batches(samples, config.batch_size, vocab, order,
                                                  dtype=params.dtype)):
            params.zero_grad()
            try:
                loss, (c, n) = _batch_step(params, batch, drop_rng, training=True)
            except NumericError as exc:
                raise TrainingError(f"loss diverged (epoch {epoch}, step {step}): {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged (epoch {epoch}, step {step}): {loss}")
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for k, t in params.items()}
            adam_step(params.tensors, grads, state, config, config.lr_at(state.step + 1))
            total_loss += loss * n
            correct += c
            count += n
        emit(HistoryRow(epoch, "train", total_loss / count, correct / count))
        log.info("epoch %d train loss %.4f acc %.4f", epoch, total_loss / count, correct / count)
        if val_samples and epoch % config.eval_every == 0:
            vl, va = evaluate(params, val_samples, vocab, config.batch_size)
            emit(HistoryRow(epoch, "val", vl, va))
            if vl < best_loss:
                best_loss, best_epoch, best = vl, epoch, params.copy()
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("stopping early after epoch %d", epoch)
                    break
    params.zero_grad()
    return TrainResult(best if best is not None else params, history, best_epoch, params)


def write_history(path, history: Sequence[HistoryRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "loss", "token_accuracy"])
        for row in history:
            w.writerow([row.epoch, row.split, repr(row.loss), repr(row.token_accuracy)])


# -- checkpoints -----------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    vocab: Vocabulary | None


def _header_bytes(params: ModelParams, config: ModelConfig, vocab: Vocabulary | None) -> tuple[bytes, list]:
    entries, arrays, offset = [], [], 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        arrays.append(arr)
        offset += arr.nbytes
    header = {"config": config.to_dict(), "tensors": entries}
    if vocab is not None:
        header["vocab"] = vocab.tokens
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"), arrays


def save_checkpoint(params: ModelParams, path, vocab: Vocabulary | None = None) -> None:
    header, arrays = _header_bytes(params, params.config, vocab)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for arr in arrays:
            fh.write(arr.tobytes())


def read_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptionError(f"{path}: unreadable header") from None
    return header, raw[12 + hlen:]


def load_checkpoint(path, config: ModelConfig | None = None, dtype=np.float32) -> Checkpoint:
    """Load a checkpoint; if ``config`` is given it must match the stored one."""
    header, payload = read_header(path)
    try:
        stored = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError):
        raise CorruptionError(f"{path}: header has no valid config") from None
    if config is not None and config.to_dict() != stored.to_dict():
        diff = sorted(k for k, v in config.to_dict().items() if stored.to_dict()[k] != v)
        raise ConfigurationError(f"{path}: checkpoint config differs in {diff}")
    expected = param_shapes(stored)
    entries = header.get("tensors", [])
    if len(entries) != len(expected):
        raise CorruptionError(f"{path}: {len(entries)} tensors, config implies {len(expected)}")
    tensors = {}
    for e in entries:
        name, shape, off = e["name"], tuple(e["shape"]), e["offset"]
        if expected.get(name) != shape:
            raise CorruptionError(f"{path}: tensor {name!r} has unexpected shape {shape}")
        n = int(np.prod(shape)) * 4
        if off < 0 or off + n > len(payload):
            raise CorruptionError(f"{path}: payload truncated at tensor {name!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=off).reshape(shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
    total = sum(int(np.prod(s)) * 4 for s in expected.values())
    if len(payload) != total:
        raise CorruptionError(f"{path}: payload has {len(payload)} bytes, expected {total}")
    ordered = {name: tensors[name] for name in expected}
    vocab = Vocabulary(header["vocab"]) if "vocab" in header else None
    return Checkpoint(ModelParams(ordered, stored), stored, vocab)
