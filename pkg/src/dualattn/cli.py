"""Command-line entry point: ``dualattn {synth,train,translate,analyze,eval,inspect}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric/training error.
Errors go to stderr as ``error_kind=<kind> <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .errors import (ConfigurationError, CorruptionError, DataError, DualAttnError, FormatError,
                     LengthError, NumericError, TrainingError, UsageError, VocabularyError,
                     DegenerateBatchError, DimensionError)
from .inference import (export_heatmap, influence_scores, select_best_head, step_labels,
                        translate, write_influence_csv)
from .metrics import score_corpus
from .model import ModelConfig, init_params
from .training import (TrainConfig, load_checkpoint, read_header, save_checkpoint, train,
                       write_history)

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

_DATA_ERRORS = (DataError, VocabularyError, LengthError, FormatError, CorruptionError, OSError,
                DimensionError)
_NUMERIC_ERRORS = (NumericError, TrainingError, DegenerateBatchError, FloatingPointError)

# flag name -> (ModelConfig / TrainConfig field, type)
_MODEL_FLAGS = {"d_model": ("d_model", int), "heads": ("n_heads", int), "enc_layers": ("enc_layers", int),
                "dec_layers": ("dec_layers", int), "ffn": ("d_ffn", int), "dropout": ("dropout", float)}
_TRAIN_FLAGS = {"lr": ("learning_rate", float), "weight_decay": ("weight_decay", float),
                "batch": ("batch_size", int), "epochs": ("max_epochs", int), "clip": ("grad_clip_norm", float)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dualattn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic two-stream dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--len", type=int, default=8)
    s.add_argument("--vocab", type=int, default=16)
    s.add_argument("--d-in", type=int, default=64)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--p-body", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mixing-seed", type=int, default=None)
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", help="JSON file with flag defaults; flags override it")
    t.add_argument("--data", required=False)
    t.add_argument("--val-data")
    t.add_argument("--vocab")
    for flag, (_, typ) in {**_MODEL_FLAGS, **_TRAIN_FLAGS}.items():
        t.add_argument("--" + flag.replace("_", "-"), type=typ, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=False)
    t.add_argument("--precision", type=int, choices=(32, 64), default=None)

    tr = sub.add_parser("translate", help="decode samples to text, one line per sample")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out")
    tr.add_argument("--max-len", type=int, default=None)
    tr.add_argument("--beam", type=int, default=1)

    a = sub.add_parser("analyze", help="write influence table and attention heatmaps")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--head", default="auto")
    a.add_argument("--out-dir", required=True)
    a.add_argument("--max-len", type=int, default=None)
    a.add_argument("--average", action="store_true", help="export the mean over all layers and heads")

    e = sub.add_parser("eval", help="score hypotheses against references")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True)

    i = sub.add_parser("inspect", help="print a checkpoint header")
    i.add_argument("--ckpt", required=True)
    return p


def _train_settings(args) -> dict:
    settings = {}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise D.ParseError(f"{args.config}: {exc.msg}") from None
        if not isinstance(loaded, dict):
            raise D.ParseError(f"{args.config}: expected a JSON object")
        settings.update({k.replace("-", "_"): v for k, v in loaded.items()})
    for key, value in vars(args).items():
        if value is not None and key not in ("command", "config"):
            settings[key] = value
    for required in ("data", "out"):
        if required not in settings:
            raise UsageError(f"train needs --{required}")
    return settings


def cmd_synth(args) -> int:
    spec = D.SynthSpec(args.n, args.len, args.vocab, args.d_in, args.noise, args.p_body, args.seed,
                       args.mixing_seed)
    D.save_samples(args.out, D.synth_generate(spec))
    return 0


def cmd_train(args) -> int:
    st = _train_settings(args)
    samples = D.load_samples(st["data"])
    if not samples:
        raise DataError(f"{st['data']}: no samples")
    val = D.load_samples(st["val_data"]) if st.get("val_data") else None
    vocab = D.Vocabulary.load(st["vocab"]) if st.get("vocab") else D.build_vocab(s.text for s in samples)
    seed = int(st.get("seed", 0))
    model_kw = {field: typ(st[flag]) for flag, (field, typ) in _MODEL_FLAGS.items() if flag in st}
    train_kw = {field: typ(st[flag]) for flag, (field, typ) in _TRAIN_FLAGS.items() if flag in st}
    longest_src = max(max(len(s.body), len(s.face)) for s in samples + (val or []))
    longest_tgt = max(len(D.tokenize(s.text)) + 2 for s in samples + (val or []))
    config = ModelConfig(samples[0].body.shape[1], samples[0].face.shape[1], len(vocab),
                         max_src_len=max(512, longest_src), max_tgt_len=max(128, longest_tgt),
                         seed=seed, **model_kw)
    dtype = np.float64 if int(st.get("precision", 32)) == 64 else np.float32
    params = init_params(config, dtype)
    result = train(params, samples, TrainConfig(seed=seed, **train_kw), vocab, val)
    out = Path(st["out"])
    save_checkpoint(result.params, out, vocab)
    write_history(out.with_suffix(".metrics.csv"), result.history)
    return 0


def _load_for_decoding(args):
    ck = load_checkpoint(args.ckpt)
    if ck.vocab is None:
        raise FormatError(f"{args.ckpt}: checkpoint carries no vocabulary")
    samples = D.load_samples(args.data)
    max_len = args.max_len or ck.config.max_tgt_len
    return ck, samples, min(max_len, ck.config.max_tgt_len)


def _decode_all(ck, samples, max_len, beam=1, batch_size=32):
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = D.pad_batch(chunk, ck.vocab, ck.params.dtype)
        tokens, traces = translate(ck.params, batch, max_len, beam)
        yield from zip(chunk, tokens, traces)


def cmd_translate(args) -> int:
    ck, samples, max_len = _load_for_decoding(args)
    lines = [ck.vocab.decode_tokens(toks) + "\n" for _, toks, _ in _decode_all(ck, samples, max_len, args.beam)]
    if args.out:
        Path(args.out).write_text("".join(lines), encoding="utf-8")
    else:
        sys.stdout.writelines(lines)
    return 0


def _parse_head(text: str):
    if text == "auto":
        return None
    try:
        layer, head = (int(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"--head must be 'auto' or L:H, got {text!r}") from None
    return layer, head


def cmd_analyze(args) -> int:
    manual = _parse_head(args.head)
    ck, samples, max_len = _load_for_decoding(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for sample, toks, trace in _decode_all(ck, samples, max_len):
        head = manual if manual is not None else select_best_head(trace)
        labels = step_labels(toks, trace.n_steps > len(toks), ck.vocab)
        for s in influence_scores(trace, head):
            rows.append((sample.id, labels[s.step], s))
        export_heatmap(trace, head, out_dir, sample.id, labels, average=args.average)
    write_influence_csv(out_dir / "influence.csv", rows)
    return 0


def _read_texts(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if lines and lines[0].lstrip().startswith("{"):
        return [s.text for s in D.load_samples(path)]
    return lines


def cmd_eval(args) -> int:
    hyp = _read_texts(args.hyp)
    ref = _read_texts(args.ref)
    if len(hyp) != len(ref):
        raise DataError(f"{len(hyp)} hypotheses for {len(ref)} references")
    report = score_corpus([D.tokenize(h) for h in hyp], [D.tokenize(r) for r in ref])
    print(report.to_json())
    return 0


def cmd_inspect(args) -> int:
    header, payload = read_header(args.ckpt)
    header = dict(header)
    header["payload_bytes"] = len(payload)
    print(json.dumps(header, indent=2, sort_keys=True))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "translate": cmd_translate,
            "analyze": cmd_analyze, "eval": cmd_eval, "inspect": cmd_inspect}


def _fail(exc: BaseException, code: int) -> int:
    kind = getattr(exc, "kind", type(exc).__name__.lower())
    print(f"error_kind={kind} {exc}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as exc:
        return _fail(exc, EXIT_USAGE)
    except _NUMERIC_ERRORS as exc:
        return _fail(exc, EXIT_NUMERIC)
    except _DATA_ERRORS as exc:
        return _fail(exc, EXIT_DATA)
    except DualAttnError as exc:
        return _fail(exc, EXIT_DATA)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
