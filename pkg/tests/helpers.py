"""Small fixtures shared across test modules."""

import numpy as np

from dualattn.data import MultiStreamSample, pad_batch
from dualattn.model import ModelConfig, ModelParams, init_params
from dualattn.tensor import Tensor


def tiny_config(**overrides) -> ModelConfig:
    kw = dict(d_in_body=3, d_in_face=5, vocab_size=7, d_model=8, n_heads=2, enc_layers=1,
              dec_layers=1, d_ffn=12, dropout=0.0, max_src_len=32, max_tgt_len=16, seed=0)
    kw.update(overrides)
    return ModelConfig(**kw)


def jittered_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    """Initialised params with non-trivial biases and gains so every path carries signal."""
    params = init_params(config, dtype)
    rng = np.random.default_rng(seed + 1000)
    out = {}
    for name, t in params.items():
        data = t.data.astype(np.float64)
        if data.ndim == 1:
            data = data + 0.1 * rng.standard_normal(data.shape)
        out[name] = Tensor(data.astype(dtype), requires_grad=True)
    return ModelParams(out, config)


def random_samples(config: ModelConfig, n: int, seed: int = 0, lengths=None) -> list[MultiStreamSample]:
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        T_b, T_f, t = lengths[i] if lengths else rng.integers(1, 6, size=3)
        tokens = rng.integers(4, config.vocab_size, size=t).tolist()
        samples.append(MultiStreamSample(
            f"s{i}", rng.standard_normal((T_b, config.d_in_body)), rng.standard_normal((T_f, config.d_in_face)),
            " ".join(f"t{k}" for k in tokens), tokens=tokens))
    return samples


def random_batch(config: ModelConfig, n: int, seed: int = 0, lengths=None, dtype=np.float64):
    return pad_batch(random_samples(config, n, seed, lengths), None, dtype)
