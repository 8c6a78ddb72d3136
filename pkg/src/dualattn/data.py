"""Samples, vocabulary, feature-file I/O, batching and the synthetic task.

Sample files hold one JSON object per line::

    {"id": "s1", "body": [[...], ...], "face": [[...], ...], "text": "...",
     "attribution": ["body", "face", ...]}

``attribution`` is optional and only present for synthetic data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, LengthError, ParseError, SchemaError, VocabularyError
from .model import BOS, EOS, PAD, UNK

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

# Upstream keypoint layout of the original feature extractor. Recorded as
# metadata only; the loader does not interpret feature columns.
KEYPOINTS = {"body": 48, "face": 72, "total": 120}


@dataclass
class MultiStreamSample:
    id: str
    body: np.ndarray
    face: np.ndarray
    text: str
    attribution: list[str] | None = None
    tokens: list[int] | None = field(default=None, compare=False)

    def __post_init__(self):
        self.body = np.asarray(self.body, dtype=np.float64)
        self.face = np.asarray(self.face, dtype=np.float64)
        if self.body.ndim != 2 or self.face.ndim != 2 or not len(self.body) or not len(self.face):
            raise SchemaError(f"sample {self.id!r}: each stream needs at least one frame of features")
        if self.attribution is not None:
            bad = set(self.attribution) - {"body", "face"}
            if bad:
                raise SchemaError(f"sample {self.id!r}: unknown attribution labels {sorted(bad)}")
            if len(self.attribution) != len(self.text.split()):
                raise SchemaError(f"sample {self.id!r}: {len(self.attribution)} attribution labels "
                                  f"for {len(self.text.split())} tokens")


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Token <-> id mapping with reserved ids 0..3 for pad, bos, eos, unk."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise VocabularyError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode_text(self, text: str) -> list[int]:
        return [self.index.get(t, UNK) for t in tokenize(text)]

    def decode_tokens(self, ids: Iterable[int]) -> str:
        """Inverse of :meth:`encode_text`; stops at EOS and skips PAD/BOS."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return " ".join(out)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocab(texts: Iterable[str]) -> Vocabulary:
    """Vocabulary of all whitespace tokens, in order of first appearance."""
    seen = dict.fromkeys(SPECIAL_TOKENS)
    for text in texts:
        for tok in tokenize(text):
            seen.setdefault(tok)
    return Vocabulary(list(seen))


# -- sample files ---------------------------------------------------------------

def _matrix(value, what: str, line: int) -> np.ndarray:
    if not isinstance(value, list) or not value or not all(isinstance(r, list) for r in value):
        raise ParseError(f"'{what}' must be a non-empty array of arrays", line)
    widths = {len(r) for r in value}
    if len(widths) != 1:
        raise SchemaError(f"'{what}' rows have differing widths {sorted(widths)}", line)
    try:
        return np.array(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError(f"'{what}' contains non-numeric entries", line) from None


def load_samples(path) -> list[MultiStreamSample]:
    """Read a line-delimited JSON sample file; feature widths must match the first record."""
    samples = []
    widths = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record is not an object", lineno)
            for key, kind in (("id", str), ("text", str)):
                if not isinstance(rec.get(key), kind):
                    raise ParseError(f"missing or non-string field '{key}'", lineno)
            body = _matrix(rec.get("body"), "body", lineno)
            face = _matrix(rec.get("face"), "face", lineno)
            if widths is None:
                widths = (body.shape[1], face.shape[1])
            elif (body.shape[1], face.shape[1]) != widths:
                raise SchemaError(f"feature widths {(body.shape[1], face.shape[1])} differ from "
                                  f"dataset widths {widths}", lineno)
            attribution = rec.get("attribution")
            try:
                samples.append(MultiStreamSample(rec["id"], body, face, rec["text"], attribution))
            except SchemaError as exc:
                raise SchemaError(str(exc), lineno) from None
    return samples


def save_samples(path, samples: Iterable[MultiStreamSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {"id": s.id, "body": s.body.tolist(), "face": s.face.tolist(), "text": s.text}
            if s.attribution is not None:
                rec["attribution"] = list(s.attribution)
            fh.write(json.dumps(rec) + "\n")


# -- rotation features -------------------------------------------------------------

@dataclass(frozen=True)
class RotationCheck:
    valid: bool
    orthogonality_residual: float
    determinant: float
    failed: str | None = None

    def __bool__(self) -> bool:
        return self.valid


def validate_rotation(R, tol: float = 1e-6) -> RotationCheck:
    """Check that ``R`` is in SO(3): orthogonal with determinant +1, both within ``tol``."""
    if tol <= 0:
        raise ConfigurationError("tol must be positive")
    R = np.asarray(R, dtype=np.float64)
    if R.shape == (9,):
        R = R.reshape(3, 3)
    if R.shape != (3, 3):
        raise SchemaError(f"rotation must be 3x3 (or 9 values), got shape {R.shape}")
    residual = float(np.max(np.abs(R.T @ R - np.eye(3))))
    det = float(np.linalg.det(R))
    if not np.isfinite(residual) or residual > tol:
        return RotationCheck(False, residual, det, "orthogonality")
    if abs(det - 1.0) > tol:
        return RotationCheck(False, residual, det, "determinant")
    return RotationCheck(True, residual, det)


def validate_pose(pose, tol: float = 1e-6) -> list[RotationCheck]:
    """Validate a per-joint pose given as ``[J, 3, 3]`` or ``[J * 9]`` values."""
    pose = np.asarray(pose, dtype=np.float64).reshape(-1, 3, 3)
    return [validate_rotation(r, tol) for r in pose]


def axis_angle_to_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula for a rotation of ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


# -- temporal segmentation -----------------------------------------------------------

def segment_temporal(seq, width: int, stride: int | None = None, reducer: str = "mean") -> np.ndarray:
    """Pool ``[N, d]`` frames over windows of ``width`` frames moved by ``stride``.

    ``stride`` defaults to ``width`` (non-overlapping windows). A trailing
    partial window is dropped, giving ``(N - width) // stride + 1`` rows.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2:
        raise SchemaError(f"expected [N, d] frames, got shape {seq.shape}")
    stride = width if stride is None else stride
    if width < 1 or stride < 1:
        raise ConfigurationError("width and stride must be at least 1")
    N = len(seq)
    if width > N:
        raise LengthError(f"window width {width} exceeds sequence length {N}")
    reduce = {"mean": np.mean, "max": np.max}.get(reducer)
    if reduce is None:
        raise ConfigurationError(f"unknown reducer {reducer!r}")
    starts = range(0, N - width + 1, stride)
    return np.stack([reduce(seq[s:s + width], axis=0) for s in starts])


# -- batching -------------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    """Padded block of samples. Pad masks are ``True`` on padded positions.

    ``tokens`` rows are ``BOS w1 .. wn EOS`` followed by PAD.
    """

    ids: tuple[str, ...]
    body: np.ndarray
    face: np.ndarray
    tokens: np.ndarray
    body_pad: np.ndarray
    face_pad: np.ndarray
    token_pad: np.ndarray
    body_len: np.ndarray
    face_len: np.ndarray
    token_len: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def sample_token_ids(sample: MultiStreamSample, vocab: Vocabulary | None) -> list[int]:
    if vocab is not None:
        return vocab.encode_text(sample.text)
    if sample.tokens is None:
        raise VocabularyError(f"sample {sample.id!r} has no token ids and no vocabulary was given")
    return list(sample.tokens)


def pad_batch(samples: Sequence[MultiStreamSample], vocab: Vocabulary | None = None,
              dtype=np.float64) -> Batch:
    if not samples:
        raise LengthError("cannot batch zero samples")
    seqs = [[BOS] + sample_token_ids(s, vocab) + [EOS] for s in samples]
    B = len(samples)
    body_len = np.array([len(s.body) for s in samples])
    face_len = np.array([len(s.face) for s in samples])
    tok_len = np.array([len(t) for t in seqs])
    d_b, d_f = samples[0].body.shape[1], samples[0].face.shape[1]
    body = np.zeros((B, body_len.max(), d_b), dtype)
    face = np.zeros((B, face_len.max(), d_f), dtype)
    tokens = np.full((B, tok_len.max()), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(zip(samples, seqs)):
        if s.body.shape[1] != d_b or s.face.shape[1] != d_f:
            raise SchemaError(f"sample {s.id!r} has feature widths inconsistent with the batch")
        body[i, :len(s.body)] = s.body
        face[i, :len(s.face)] = s.face
        tokens[i, :len(t)] = t

    def pad_of(lengths, width):
        return np.arange(width)[None, :] >= lengths[:, None]

    return Batch(tuple(s.id for s in samples), body, face, tokens,
                 pad_of(body_len, body.shape[1]), pad_of(face_len, face.shape[1]),
                 pad_of(tok_len, tokens.shape[1]), body_len, face_len, tok_len)


def unpad_batch(batch: Batch) -> list[tuple[np.ndarray, np.ndarray, list[int]]]:
    """Per-sample ``(body, face, token ids without BOS/EOS)`` recovered from a batch."""
    out = []
    for i in range(len(batch)):
        out.append((batch.body[i, :batch.body_len[i]], batch.face[i, :batch.face_len[i]],
                    batch.tokens[i, 1:batch.token_len[i] - 1].tolist()))
    return out


def iter_batches(samples: Sequence[MultiStreamSample], batch_size: int, vocab=None,
                 order: Sequence[int] | None = None, dtype=np.float64):
    order = range(len(samples)) if order is None else order
    order = list(order)
    for start in range(0, len(order), batch_size):
        yield pad_batch([samples[i] for i in order[start:start + batch_size]], vocab, dtype)


# -- synthetic attribution task ----------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Synthetic two-stream task with known per-token modality attribution.

    Every target token ``c_t`` is carried by exactly one stream at frame ``t``
    as ``onehot(c_t) @ A`` plus Gaussian noise; the other stream holds unit
    Gaussian noise at that frame. ``A`` (``[vocab_size, d_in]``) is shared by
    every dataset generated with the same ``mixing_seed`` (default ``seed``),
    so train and test splits from different seeds stay compatible.
    ``mixing="identity"`` uses ``A = I``.
    """

    n_samples: int
    seq_len: int = 8
    vocab_size: int = 16
    d_in: int = 64
    noise_sigma: float = 0.1
    p_body: float = 0.5
    seed: int = 0
    mixing_seed: int | None = None
    mixing: str = "random"

    def validate(self) -> None:
        if self.vocab_size > self.d_in:
            raise ConfigurationError(f"vocab_size={self.vocab_size} exceeds d_in={self.d_in}; "
                                     "tokens must be one-hot embeddable")
        if not 0.0 < self.p_body < 1.0:
            raise ConfigurationError("p_body must lie strictly between 0 and 1")
        if self.n_samples < 0 or self.seq_len < 1 or self.vocab_size < 1:
            raise ConfigurationError("n_samples must be >= 0 and seq_len, vocab_size >= 1")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")
        if self.mixing not in ("random", "identity"):
            raise ConfigurationError(f"unknown mixing {self.mixing!r}")


def synth_token(c: int) -> str:
    return f"w{c:02d}"


def mixing_matrix(spec: SynthSpec) -> np.ndarray:
    if spec.mixing == "identity":
        return np.eye(spec.vocab_size, spec.d_in)
    seed = spec.seed if spec.mixing_seed is None else spec.mixing_seed
    return np.random.default_rng([seed, 0x5A17]).standard_normal((spec.vocab_size, spec.d_in))


def synth_generate(spec: SynthSpec) -> list[MultiStreamSample]:
    spec.validate()
    A = mixing_matrix(spec)
    rng = np.random.default_rng(spec.seed)
    L, V, d = spec.seq_len, spec.vocab_size, spec.d_in
    samples = []
    for n in range(spec.n_samples):
        content = rng.integers(0, V, size=L)
        on_body = rng.random(L) < spec.p_body
        signal = A[content] + spec.noise_sigma * rng.standard_normal((L, d))
        noise = rng.standard_normal((L, d))
        body = np.where(on_body[:, None], signal, noise)
        face = np.where(on_body[:, None], noise, signal)
        text = " ".join(synth_token(int(c)) for c in content)
        attribution = ["body" if b else "face" for b in on_body]
        samples.append(MultiStreamSample(f"synth-{spec.seed}-{n:05d}", body, face, text, attribution))
    return samples


def synth_vocab(vocab_size: int) -> Vocabulary:
    return Vocabulary(list(SPECIAL_TOKENS) + [synth_token(c) for c in range(vocab_size)])
