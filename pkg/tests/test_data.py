import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualattn.data import (KEYPOINTS, MultiStreamSample, SynthSpec, Vocabulary, axis_angle_to_matrix,
                           build_vocab, iter_batches, load_samples, mixing_matrix, pad_batch,
                           save_samples, segment_temporal, synth_generate, synth_vocab, tokenize,
                           unpad_batch, validate_pose, validate_rotation)
from dualattn.errors import (ConfigurationError, LengthError, ParseError, SchemaError, VocabularyError)
from dualattn.model import BOS, EOS, PAD, UNK


def record(i=0, body_width=4, face_width=4, **extra):
    rec = {"id": f"r{i}", "body": [[0.5] * body_width] * 3, "face": [[1.5] * face_width] * 2, "text": "a b"}
    rec.update(extra)
    return rec


def write_lines(path, lines):
    path.write_text("".join((l if isinstance(l, str) else json.dumps(l)) + "\n" for l in lines))
    return path


# -- sample files --------------------------------------------------------------------

def test_empty_file_gives_empty_list(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert load_samples(p) == []


def test_roundtrip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    s = MultiStreamSample("x", rng.standard_normal((3, 4)), rng.standard_normal((2, 4)) * 1e-30, "hello world",
                          ["body", "face"])
    p = tmp_path / "s.jsonl"
    save_samples(p, [s])
    (back,) = load_samples(p)
    assert back.id == s.id and back.text == s.text and back.attribution == s.attribution
    assert back.body.tobytes() == s.body.tobytes() and back.face.tobytes() == s.face.tobytes()
    save_samples(tmp_path / "again.jsonl", [back])
    assert (tmp_path / "again.jsonl").read_bytes() == p.read_bytes()


def test_scientific_notation_accepted(tmp_path):
    p = tmp_path / "sci.jsonl"
    p.write_text('{"id": "a", "body": [[1e-3, 2.5E2]], "face": [[-3e+1]], "text": "x"}\n')
    (s,) = load_samples(p)
    np.testing.assert_array_equal(s.body, [[1e-3, 250.0]])
    assert s.face[0, 0] == -30.0


def test_inconsistent_width_is_schema_error_at_line(tmp_path):
    p = write_lines(tmp_path / "w.jsonl", [record(0), record(1), record(2, body_width=5)])
    with pytest.raises(SchemaError, match="line 3") as info:
        load_samples(p)
    assert info.value.line == 3


def test_malformed_record_is_parse_error_with_line(tmp_path):
    p = write_lines(tmp_path / "bad.jsonl", [record(0), "{not json"])
    with pytest.raises(ParseError) as info:
        load_samples(p)
    assert info.value.line == 2


@pytest.mark.parametrize("rec", [{"id": 3, "body": [[1]], "face": [[1]], "text": "a"},
                                 {"id": "a", "body": [], "face": [[1]], "text": "a"},
                                 {"id": "a", "body": [["x"]], "face": [[1]], "text": "a"},
                                 [1, 2, 3]])
def test_malformed_fields(tmp_path, rec):
    p = write_lines(tmp_path / "f.jsonl", [rec])
    with pytest.raises(ParseError):
        load_samples(p)


def test_ragged_rows_and_bad_attribution(tmp_path):
    with pytest.raises(SchemaError):
        load_samples(write_lines(tmp_path / "a.jsonl", [record(body=[[1, 2], [1]])]))
    with pytest.raises(SchemaError, match="line 1"):
        load_samples(write_lines(tmp_path / "b.jsonl", [record(attribution=["body"])]))
    with pytest.raises(SchemaError):
        load_samples(write_lines(tmp_path / "c.jsonl", [record(attribution=["body", "hand"])]))


def test_blank_lines_skipped_and_order_kept(tmp_path):
    p = write_lines(tmp_path / "o.jsonl", [record(2), "", record(1)])
    assert [s.id for s in load_samples(p)] == ["r2", "r1"]


# -- vocabulary ------------------------------------------------------------------------------

def test_build_vocab_order_and_reserved_ids():
    v = build_vocab(["The cat", "the dog"])
    assert v.tokens[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert v.tokens[4:] == ["the", "cat", "dog"]
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)


def test_encode_decode_inverse_and_unknown():
    v = build_vocab(["a b c"])
    assert v.decode_tokens(v.encode_text("c a b")) == "c a b"
    assert v.encode_text("a zzz") == [4, UNK]
    assert v.decode_tokens([BOS, 4, PAD, 5, EOS, 6]) == "a b"


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["alpha", "beta", "gamma", "delta"]), min_size=1, max_size=12))
def test_decode_encode_property(words):
    v = build_vocab(["alpha beta gamma delta"])
    s = " ".join(words)
    assert v.decode_tokens(v.encode_text(s)) == s


def test_vocab_file_roundtrip(tmp_path):
    v = build_vocab(["x y z"])
    v.save(tmp_path / "v.txt")
    assert (tmp_path / "v.txt").read_text().splitlines()[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert Vocabulary.load(tmp_path / "v.txt") == v


def test_vocab_rejects_bad_headers_and_duplicates():
    with pytest.raises(VocabularyError):
        Vocabulary(["a", "b"])
    with pytest.raises(VocabularyError):
        Vocabulary(["<pad>", "<bos>", "<eos>", "<unk>", "a", "a"])


def test_tokenize_lowercases():
    assert tokenize("  Hello  WORLD\t") == ["hello", "world"]


# -- rotations -------------------------------------------------------------------------------

def test_identity_rotation_is_valid():
    assert validate_rotation(np.eye(3)).valid


def test_reflection_is_rejected():
    check = validate_rotation(np.diag([1.0, 1.0, -1.0]))
    assert not check.valid and check.failed == "determinant"
    assert check.determinant == pytest.approx(-1.0)


def test_perturbed_rotation_depends_on_tolerance():
    R = axis_angle_to_matrix([0, 0, 1], 0.3)
    R[0, 1] += 1e-8
    assert validate_rotation(R, 1e-6).valid
    check = validate_rotation(R, 1e-10)
    assert not check.valid and check.failed == "orthogonality" and check.orthogonality_residual > 1e-10


def test_axis_angle_matches_closed_form_z_rotation():
    c, s = math.cos(0.3), math.sin(0.3)
    np.testing.assert_allclose(axis_angle_to_matrix([0, 0, 2], 0.3), [[c, -s, 0], [s, c, 0], [0, 0, 1]], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda a: np.linalg.norm(a) > 1e-3),
       st.floats(-2 * math.pi, 2 * math.pi))
def test_axis_angle_matrices_accepted_at_tight_tolerance(axis, angle):
    assert validate_rotation(axis_angle_to_matrix(axis, angle), tol=1e-9).valid


def test_validate_pose_flat_rotmat9d():
    pose = np.concatenate([np.eye(3).ravel(), np.diag([1.0, -1, 1]).ravel()])
    assert [c.valid for c in validate_pose(pose)] == [True, False]


def test_rotation_shape_error():
    with pytest.raises(SchemaError):
        validate_rotation(np.eye(2))


# -- temporal segmentation ----------------------------------------------------------------------

def test_single_window_is_column_means():
    seq = np.random.default_rng(0).standard_normal((9, 4))
    np.testing.assert_allclose(segment_temporal(seq, 9), seq.mean(0, keepdims=True), atol=1e-15)


def test_two_windows():
    assert segment_temporal(np.ones((18, 2)), 9, 9).shape == (2, 2)


def test_sliding_mean_hand_computed():
    np.testing.assert_array_equal(segment_temporal(np.arange(1.0, 6.0)[:, None], 3, 1)[:, 0], [2, 3, 4])


def test_partial_window_dropped_and_max_reducer():
    out = segment_temporal(np.arange(10.0)[:, None], 4, 3, reducer="max")
    np.testing.assert_array_equal(out[:, 0], [3, 6, 9])
    assert segment_temporal(np.ones((20, 1)), 9).shape == (2, 1)


def test_segment_errors():
    with pytest.raises(LengthError):
        segment_temporal(np.ones((3, 1)), 4)
    with pytest.raises(ConfigurationError):
        segment_temporal(np.ones((3, 1)), 2, 0)


# -- batching --------------------------------------------------------------------------------------

def _samples():
    rng = np.random.default_rng(3)
    return [MultiStreamSample(f"s{i}", rng.standard_normal((tb, 2)), rng.standard_normal((tf, 3)), text)
            for i, (tb, tf, text) in enumerate([(3, 1, "a b c"), (1, 4, "b"), (2, 2, "c a")])]


def test_pad_batch_masks_and_tokens():
    samples = _samples()
    v = build_vocab(s.text for s in samples)
    b = pad_batch(samples, v)
    assert b.body.shape == (3, 3, 2) and b.face.shape == (3, 4, 3) and b.tokens.shape == (3, 5)
    np.testing.assert_array_equal(b.body_pad[1], [False, True, True])
    np.testing.assert_array_equal(b.tokens[1], [BOS, 5, EOS, PAD, PAD])
    np.testing.assert_array_equal(b.token_pad, b.tokens == PAD)
    np.testing.assert_array_equal(b.token_len, [5, 3, 4])
    assert np.all(b.body[1, 1:] == 0)


def test_pad_unpad_roundtrip():
    samples = _samples()
    v = build_vocab(s.text for s in samples)
    for s, (body, face, ids) in zip(samples, unpad_batch(pad_batch(samples, v))):
        np.testing.assert_array_equal(body, s.body)
        np.testing.assert_array_equal(face, s.face)
        assert v.decode_tokens(ids) == s.text


def test_pad_batch_errors():
    with pytest.raises(LengthError):
        pad_batch([])
    with pytest.raises(VocabularyError):
        pad_batch(_samples())


def test_iter_batches_covers_order():
    samples = _samples()
    v = build_vocab(s.text for s in samples)
    ids = [i for b in iter_batches(samples, 2, v, order=[2, 0, 1]) for i in b.ids]
    assert ids == ["s2", "s0", "s1"]


# -- synthetic task -----------------------------------------------------------------------------------

def test_synth_deterministic(tmp_path):
    a = synth_generate(SynthSpec(20, seed=5))
    b = synth_generate(SynthSpec(20, seed=5))
    save_samples(tmp_path / "a", a)
    save_samples(tmp_path / "b", b)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert synth_generate(SynthSpec(20, seed=6))[0].text != a[0].text or \
        not np.array_equal(synth_generate(SynthSpec(20, seed=6))[0].body, a[0].body)


def test_noise_free_identity_carrier_is_onehot():
    spec = SynthSpec(10, seq_len=6, vocab_size=5, d_in=8, noise_sigma=0.0, mixing="identity", seed=1)
    for s in synth_generate(spec):
        tokens = [int(w[1:]) for w in s.text.split()]
        for t, (c, m) in enumerate(zip(tokens, s.attribution)):
            frame = (s.body if m == "body" else s.face)[t]
            np.testing.assert_array_equal(frame, np.eye(8)[c])


def test_shared_mixing_across_splits():
    a = SynthSpec(1, seed=0)
    b = SynthSpec(1, seed=9, mixing_seed=0)
    np.testing.assert_array_equal(mixing_matrix(a), mixing_matrix(b))


def test_nearest_codeword_recovers_tokens():
    spec = SynthSpec(125, seq_len=8, vocab_size=16, d_in=64, noise_sigma=0.1, seed=2)
    A = mixing_matrix(spec)
    correct = total = 0
    for s in synth_generate(spec):
        for t, (w, m) in enumerate(zip(s.text.split(), s.attribution)):
            frame = (s.body if m == "body" else s.face)[t]
            correct += int(np.argmin(((A - frame) ** 2).sum(1)) == int(w[1:]))
            total += 1
    assert total == 1000 and correct / total > 0.99


@pytest.mark.parametrize("sigma", [0.1, 0.2])
def test_carrier_frames_correlate_with_targets(sigma):
    spec = SynthSpec(300, seq_len=8, vocab_size=8, d_in=16, noise_sigma=sigma, seed=3)
    carrier, other, onehot = [], [], []
    for s in synth_generate(spec):
        for t, (w, m) in enumerate(zip(s.text.split(), s.attribution)):
            carrier.append((s.body if m == "body" else s.face)[t])
            other.append((s.face if m == "body" else s.body)[t])
            onehot.append(np.eye(8)[int(w[1:])])
    Y = np.array(onehot)

    def mean_sq_corr(X):
        Xc = (X - X.mean(0)) / X.std(0)
        Yc = (Y - Y.mean(0)) / Y.std(0)
        return float(np.mean((Xc.T @ Yc / len(X)) ** 2))

    assert mean_sq_corr(np.array(carrier)) >= 10 * mean_sq_corr(np.array(other))


def test_synth_attribution_and_ids():
    samples = synth_generate(SynthSpec(3, seq_len=5, seed=4))
    assert [s.id for s in samples] == ["synth-4-00000", "synth-4-00001", "synth-4-00002"]
    for s in samples:
        assert len(s.attribution) == 5 and s.body.shape == s.face.shape == (5, 64)


def test_synth_invalid_specs():
    with pytest.raises(ConfigurationError):
        synth_generate(SynthSpec(1, vocab_size=65, d_in=64))
    with pytest.raises(ConfigurationError):
        synth_generate(SynthSpec(1, p_body=1.0))


def test_synth_vocab_covers_tokens():
    v = synth_vocab(16)
    assert len(v) == 20
    assert UNK not in v.encode_text(synth_generate(SynthSpec(2))[0].text)


def test_keypoint_metadata():
    assert KEYPOINTS["body"] + KEYPOINTS["face"] == KEYPOINTS["total"] == 120
