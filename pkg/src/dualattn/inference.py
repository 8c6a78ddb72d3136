"""Decoding with attention tracing, head selection and per-modality influence.

Influence of a modality on output step ``t`` is the share of the pre-merge
attention output norm, ``|Attn_body(t)| / (|Attn_body(t)| + |Attn_face(t)|)``,
read at the layer of the selected head. Raw per-stream weight rows of that
head are exported alongside for heatmaps: rows are output tokens, columns are
encoder frames.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, UsageError
from .model import BOS, EOS, PAD, DecoderTrace, ModelParams, decode_teacher_forced, encode

INFLUENCE_COLUMNS = ("sample_id", "step", "token", "layer", "head", "influence_body", "influence_face",
                     "body_argmax", "face_argmax", "entropy_body", "entropy_face")


@dataclass
class AttentionTrace:
    """Unpadded attention record of one decoded sample.

    ``w_body`` is ``[layers, heads, steps, T_b]``, ``w_face`` is
    ``[layers, heads, steps, T_f]``; ``norm_body`` / ``norm_face`` are
    ``[layers, steps]`` norms of each stream's attention output before merging.
    """

    w_body: np.ndarray
    w_face: np.ndarray
    norm_body: np.ndarray
    norm_face: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.w_body.shape[2]

    @classmethod
    def from_decoder(cls, trace: DecoderTrace, index: int, steps: int, T_b: int, T_f: int) -> "AttentionTrace":
        return cls(trace.w_body[index, :, :, :steps, :T_b].copy(),
                   trace.w_face[index, :, :, :steps, :T_f].copy(),
                   trace.norm_body[index, :, :steps].copy(),
                   trace.norm_face[index, :, :steps].copy())


@dataclass(frozen=True)
class InfluenceSummary:
    step: int
    layer: int
    head: int
    influence_body: float
    influence_face: float
    body_argmax: int
    face_argmax: int
    entropy_body: float
    entropy_face: float
    degenerate: bool = False


def _allowed_logits(logits: np.ndarray) -> np.ndarray:
    out = logits.astype(np.float64, copy=True)
    out[..., PAD] = -np.inf
    out[..., BOS] = -np.inf
    return out


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def _greedy(z_b, z_f, params: ModelParams, max_len: int, body_pad=None, face_pad=None):
    config = params.config
    if not 1 <= max_len <= config.max_tgt_len:
        raise ConfigurationError(f"max_len={max_len} must lie in [1, max_tgt_len={config.max_tgt_len}]")
    if z_b.ndim == 2:
        z_b, z_f = T.reshape(z_b, (1,) + z_b.shape), T.reshape(z_f, (1,) + z_f.shape)
    B, T_b, T_f = z_b.shape[0], z_b.shape[1], z_f.shape[1]
    body_pad = np.zeros((B, T_b), bool) if body_pad is None else np.asarray(body_pad, bool)
    face_pad = np.zeros((B, T_f), bool) if face_pad is None else np.asarray(face_pad, bool)
    seq = np.full((B, 1), BOS, dtype=np.int64)
    emitted: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, bool)
    with T.no_grad():
        for _ in range(max_len):
            logits, trace = decode_teacher_forced(z_b, z_f, seq, params, body_pad, face_pad)
            nxt = np.argmax(_allowed_logits(logits.data[:, -1]), axis=-1)
            for i in np.flatnonzero(~done):
                emitted[i].append(int(nxt[i]))
            nxt = np.where(done, PAD, nxt)
            done |= nxt == EOS
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
            if done.all():
                break
    # causal decoding: the last pass holds every earlier step's weights unchanged
    traces = [AttentionTrace.from_decoder(trace, i, len(emitted[i]), int((~body_pad[i]).sum()),
                                          int((~face_pad[i]).sum()))
              for i in range(B)]
    terminated = [bool(e) and e[-1] == EOS for e in emitted]
    tokens = [e[:-1] if term else e for e, term in zip(emitted, terminated)]
    return tokens, terminated, traces


def greedy_decode(z_b, z_f, params: ModelParams, max_len: int, body_pad=None, face_pad=None
                  ) -> tuple[list[list[int]], list[AttentionTrace]]:
    """Greedy decoding for a batch of encoded samples ``[B, T, d_model]``.

    Each hypothesis starts at BOS and ends at EOS or after ``max_len`` steps;
    the returned token lists exclude BOS and EOS. Argmax ties go to the smaller
    token id, and PAD/BOS are never emitted. The trace of each sample covers
    every emitted step, EOS included.
    """
    tokens, _, traces = _greedy(z_b, z_f, params, max_len, body_pad, face_pad)
    return tokens, traces


def _single(z):
    return T.reshape(z, (1,) + z.shape) if z.ndim == 2 else z


def _decoder_input(tokens: Sequence[int], terminated: bool) -> tuple[np.ndarray, list[int]]:
    steps = list(tokens) + ([EOS] if terminated else [])
    if not steps:
        raise UsageError("hypothesis has no steps")
    return np.array([[BOS] + steps[:-1]], dtype=np.int64), steps


def sequence_score(z_b, z_f, params: ModelParams, tokens: Sequence[int], terminated: bool) -> float:
    """Length-normalised log-probability of ``tokens`` (plus EOS if ``terminated``)."""
    inp, steps = _decoder_input(tokens, terminated)
    with T.no_grad():
        logits, _ = decode_teacher_forced(_single(z_b), _single(z_f), inp, params)
    logp = _log_softmax(_allowed_logits(logits.data[0]))
    return float(logp[np.arange(len(steps)), steps].sum() / len(steps))


def trace_for(z_b, z_f, params: ModelParams, tokens: Sequence[int], terminated: bool) -> AttentionTrace:
    """Attention trace of a given hypothesis, one step per emitted token (EOS included)."""
    inp, steps = _decoder_input(tokens, terminated)
    zb, zf = _single(z_b), _single(z_f)
    with T.no_grad():
        _, trace = decode_teacher_forced(zb, zf, inp, params)
    return AttentionTrace.from_decoder(trace, 0, len(steps), zb.shape[1], zf.shape[1])


@dataclass
class BeamResult:
    tokens: list[int]
    trace: AttentionTrace
    score: float
    terminated: bool


def beam_decode(z_b, z_f, params: ModelParams, beam_size: int, max_len: int) -> BeamResult:
    """Beam search over one sample (``z_b`` ``[T_b, d]``, ``z_f`` ``[T_f, d]``).

    Hypotheses are ranked by length-normalised log-probability. The greedy
    hypothesis always competes in the final ranking, so the result never
    scores below greedy decoding; ``beam_size=1`` reproduces greedy exactly.
    """
    if beam_size < 1:
        raise ConfigurationError("beam_size must be at least 1")
    if not 1 <= max_len <= params.config.max_tgt_len:
        raise ConfigurationError(f"max_len={max_len} must lie in [1, max_tgt_len]")
    if z_b.ndim != 2 or z_f.ndim != 2:
        raise DimensionError("beam_decode works on a single unbatched sample")
    alive: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[float, list[int], bool]] = []
    with T.no_grad():
        for _ in range(max_len):
            n = len(alive)
            inp = np.array([[BOS] + toks for toks, _ in alive], dtype=np.int64)
            zb = T.Tensor(np.broadcast_to(z_b.data, (n,) + z_b.shape))
            zf = T.Tensor(np.broadcast_to(z_f.data, (n,) + z_f.shape))
            logits, _ = decode_teacher_forced(zb, zf, inp, params)
            logp = _log_softmax(_allowed_logits(logits.data[:, -1]))
            total = (np.array([s for _, s in alive])[:, None] + logp).reshape(-1)
            nxt = []
            for idx in np.argsort(-total, kind="stable")[:beam_size]:
                if not np.isfinite(total[idx]):
                    continue
                a, tok = divmod(int(idx), logp.shape[1])
                toks = alive[a][0] + [tok]
                if tok == EOS:
                    finished.append((float(total[idx]) / len(toks), toks[:-1], True))
                else:
                    nxt.append((toks, float(total[idx])))
            alive = nxt
            if not alive:
                break
    finished.extend((s / len(toks), toks, False) for toks, s in alive)
    best_score, best_toks, best_term = max(finished, key=lambda f: f[0])

    g_tokens, g_term, _ = _greedy(z_b, z_f, params, max_len)
    g_score = sequence_score(z_b, z_f, params, g_tokens[0], g_term[0])
    if g_score > best_score:
        best_score, best_toks, best_term = g_score, g_tokens[0], g_term[0]
    return BeamResult(best_toks, trace_for(z_b, z_f, params, best_toks, best_term), best_score, best_term)


def translate(params: ModelParams, batch, max_len: int, beam_size: int = 1
              ) -> tuple[list[list[int]], list[AttentionTrace]]:
    """Encode a padded batch and decode every sample (greedy unless ``beam_size > 1``)."""
    with T.no_grad():
        z_b, z_f = encode(params, batch.body, batch.face, batch.body_pad, batch.face_pad)
    if beam_size == 1:
        return greedy_decode(z_b, z_f, params, max_len, batch.body_pad, batch.face_pad)
    tokens, traces = [], []
    for i in range(len(batch)):
        zb = T.Tensor(z_b.data[i, :batch.body_len[i]])
        zf = T.Tensor(z_f.data[i, :batch.face_len[i]])
        res = beam_decode(zb, zf, params, beam_size, max_len)
        tokens.append(res.tokens)
        traces.append(res.trace)
    return tokens, traces


# -- head selection and influence -------------------------------------------------------

def row_entropy(rows: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each last-axis row; ``0 log 0 = 0``."""
    rows = np.asarray(rows, dtype=np.float64)
    safe = np.where(rows > 0, rows, 1.0)
    return -(rows * np.log(safe)).sum(axis=-1)


def head_entropies(trace: AttentionTrace) -> np.ndarray:
    """Mean row entropy per ``(layer, head)`` over all body and face rows."""
    eb = row_entropy(trace.w_body)
    ef = row_entropy(trace.w_face)
    return np.concatenate([eb, ef], axis=-1).mean(axis=-1)


def select_best_head(trace: AttentionTrace) -> tuple[int, int]:
    """The ``(layer, head)`` with the sharpest alignment (lowest mean entropy).

    Ties resolve to the first in ``(layer, head)`` order.
    """
    if trace.w_body.size == 0 or trace.n_steps == 0:
        raise UsageError("cannot select a head from an empty trace")
    ent = head_entropies(trace)
    flat = int(np.argmin(ent.reshape(-1)))
    return divmod(flat, ent.shape[1])


def influence_scores(trace: AttentionTrace, head: tuple[int, int]) -> list[InfluenceSummary]:
    """Per-step influence of each modality, read at the selected head's layer."""
    layer, h = head
    if not (0 <= layer < trace.w_body.shape[0] and 0 <= h < trace.w_body.shape[1]):
        raise UsageError(f"head {head} is outside the trace")
    wb, wf = trace.w_body[layer, h], trace.w_face[layer, h]
    eb, ef = row_entropy(wb), row_entropy(wf)
    out = []
    for t in range(trace.n_steps):
        nb, nf = float(trace.norm_body[layer, t]), float(trace.norm_face[layer, t])
        total = nb + nf
        degenerate = total == 0.0
        ib = 0.5 if degenerate else nb / total
        out.append(InfluenceSummary(t, layer, h, ib, 1.0 - ib, int(np.argmax(wb[t])), int(np.argmax(wf[t])),
                                    float(eb[t]), float(ef[t]), degenerate))
    return out


def _display(tok: int, vocab) -> str:
    if vocab is None:
        return str(tok)
    return vocab.tokens[tok]


def step_labels(tokens: Sequence[int], terminated: bool, vocab=None) -> list[str]:
    """Text labels of the emitted steps, EOS included."""
    steps = list(tokens) + ([EOS] if terminated else [])
    return [_display(t, vocab) for t in steps]


def write_influence_csv(path, rows: Sequence[tuple[str, str, InfluenceSummary]]) -> None:
    """Write ``(sample_id, token_label, summary)`` rows as the influence table."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(INFLUENCE_COLUMNS)
        for sample_id, label, s in rows:
            w.writerow([sample_id, s.step, label, s.layer, s.head, f"{s.influence_body:.9g}",
                        f"{s.influence_face:.9g}", s.body_argmax, s.face_argmax,
                        f"{s.entropy_body:.9g}", f"{s.entropy_face:.9g}"])


def export_influence_csv(summaries: dict[str, tuple[list[str], list[InfluenceSummary]]], path) -> None:
    """``summaries`` maps sample id to ``(step labels, per-step summaries)``."""
    rows = []
    for sid, (labels, items) in summaries.items():
        rows.extend((sid, labels[s.step], s) for s in items)
    write_influence_csv(path, rows)


def heatmap_matrices(trace: AttentionTrace, head: tuple[int, int] | None = None,
                     average: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """``[steps, T_b]`` and ``[steps, T_f]`` weight matrices of one head, or the
    mean over every layer and head when ``average`` is set."""
    if average:
        return trace.w_body.mean(axis=(0, 1)), trace.w_face.mean(axis=(0, 1))
    if head is None:
        raise UsageError("a head is required unless average=True")
    layer, h = head
    return trace.w_body[layer, h], trace.w_face[layer, h]


def write_matrix(path, labels: Sequence[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if len(labels) != matrix.shape[0]:
        raise DimensionError(f"{len(labels)} row labels for {matrix.shape[0]} rows")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["token"] + [str(j) for j in range(matrix.shape[1])])
        for label, row in zip(labels, matrix):
            w.writerow([label] + [f"{x:.9g}" for x in row])


def read_matrix(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    width = len(rows[0]) - 1
    labels = [r[0] for r in rows[1:]]
    values = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=np.float64).reshape(-1, width)
    return labels, values


def export_heatmap(trace: AttentionTrace, head: tuple[int, int] | None, out_dir, sample_id: str,
                   labels: Sequence[str], average: bool = False) -> tuple[Path, Path]:
    """Write ``<sample_id>.body.csv`` and ``<sample_id>.face.csv`` into ``out_dir``.

    The first row holds frame indices and the first column the emitted tokens.
    """
    out_dir = Path(out_dir)
    body, face = heatmap_matrices(trace, head, average)
    paths = out_dir / f"{sample_id}.body.csv", out_dir / f"{sample_id}.face.csv"
    write_matrix(paths[0], labels, body)
    write_matrix(paths[1], labels, face)
    return paths
