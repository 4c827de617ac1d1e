"""Pre-LN Transformer encoder with an aggregation token."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    DimensionError, Rng, Tensor, add, concat, gelu, layer_norm, matmul,
    parameter, reshape, softmax, take, transpose,
)
from .tokenizers import TEXT_MAX_LEN, TokenSequence

LN_EPS = 1e-6


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    hidden: int
    mlp_size: int
    heads: int
    use_relative_bias_first_layer: bool = False
    max_len: int = TEXT_MAX_LEN
    name: str = "custom"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def with_relative_bias(self, flag: bool = True) -> "EncoderConfig":
        return EncoderConfig(self.layers, self.hidden, self.mlp_size, self.heads,
                             flag, self.max_len, self.name)


PRESETS: dict[str, EncoderConfig] = {
    "small": EncoderConfig(6, 512, 2048, 8, name="small"),
    "base": EncoderConfig(12, 768, 3072, 12, name="base"),
    "medium": EncoderConfig(12, 1024, 4096, 16, name="medium"),
    "large": EncoderConfig(24, 1024, 4096, 16, name="large"),
    "tiny": EncoderConfig(2, 64, 256, 4, name="tiny"),
    "micro": EncoderConfig(2, 16, 32, 2, name="micro"),
}


def preset(name: str, relative_bias: bool = False) -> EncoderConfig:
    try:
        cfg = PRESETS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown encoder preset {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.with_relative_bias(relative_bias)


def encoder_param_count(cfg: EncoderConfig) -> int:
    """Closed-form parameter count (aggregation token and final LN included)."""
    d, m = cfg.hidden, cfg.mlp_size
    per_layer = 4 * (d * d + d) + 2 * d * m + m + d + 4 * d
    rel = cfg.heads * (2 * cfg.max_len - 1) if cfg.use_relative_bias_first_layer else 0
    return cfg.layers * per_layer + d + 2 * d + rel


class Encoder:
    """Weights of one Transformer encoder.

    Each layer holds ``wq wk wv wo`` (+ biases), two layer norms and a GeLU
    MLP. ``x_agg`` is the learnable aggregation token.
    """

    def __init__(self, cfg: EncoderConfig, rng: Rng | None = None, dtype=np.float32, std: float = 0.02):
        self.cfg = cfg
        rng = rng or Rng(0, "encoder")
        d, m = cfg.hidden, cfg.mlp_size
        tn = lambda name, shape: parameter(rng.derive(name).truncated_normal(shape, std, dtype), name)
        zeros = lambda name, n: parameter(np.zeros(n, dtype), name)
        ones = lambda name, n: parameter(np.ones(n, dtype), name)
        self.layers: list[dict[str, Tensor]] = []
        for i in range(cfg.layers):
            p = f"layer{i}."
            self.layers.append({
                "ln1_g": ones(p + "ln1_g", d), "ln1_b": zeros(p + "ln1_b", d),
                "wq": tn(p + "wq", (d, d)), "bq": zeros(p + "bq", d),
                "wk": tn(p + "wk", (d, d)), "bk": zeros(p + "bk", d),
                "wv": tn(p + "wv", (d, d)), "bv": zeros(p + "bv", d),
                "wo": tn(p + "wo", (d, d)), "bo": zeros(p + "bo", d),
                "ln2_g": ones(p + "ln2_g", d), "ln2_b": zeros(p + "ln2_b", d),
                "w1": tn(p + "w1", (d, m)), "b1": zeros(p + "b1", m),
                "w2": tn(p + "w2", (m, d)), "b2": zeros(p + "b2", d),
            })
        self.x_agg = tn("x_agg", (d,))
        self.ln_g = ones("ln_g", d)
        self.ln_b = zeros("ln_b", d)
        self.rel_table = None
        if cfg.use_relative_bias_first_layer:
            self.rel_table = parameter(np.zeros((cfg.heads, 2 * cfg.max_len - 1), dtype), "rel_table")

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.items():
                out[f"layer{i}.{k}"] = v
        out["x_agg"] = self.x_agg
        out["ln_g"] = self.ln_g
        out["ln_b"] = self.ln_b
        if self.rel_table is not None:
            out["rel_table"] = self.rel_table
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def __call__(self, seq: TokenSequence, relative_bias: bool | None = None, taps: list | None = None):
        return encoder_forward(seq, self, relative_bias=relative_bias, taps=taps)


def relative_bias_lookup(n: int, table: Tensor, max_len: int | None = None) -> Tensor:
    """``bias[h, i, j] = table[h, i - j + max_len - 1]`` for ``n`` tokens."""
    heads, width = table.shape
    max_len = (width + 1) // 2 if max_len is None else max_len
    if n > max_len:
        raise ValueError(f"sequence of {n} tokens exceeds relative-bias range {max_len}")
    i = np.arange(n)
    idx = i[:, None] - i[None, :] + max_len - 1
    return take(table, (slice(None), idx))


def mha_forward(x: Tensor, layer: dict[str, Tensor], heads: int,
                bias: Tensor | np.ndarray | None = None,
                key_mask: np.ndarray | None = None, return_probs: bool = False):
    """Multi-head self-attention on ``(B, N, d)`` (or ``(N, d)``) input.

    ``bias`` broadcasts against ``(B, heads, N, N)`` scores; ``key_mask``
    ``(B, N)`` excludes keys with ``-inf`` logits.
    """
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    B, N, d = x.shape
    dh = d // heads

    def split(t):
        return transpose(reshape(t, (B, N, heads, dh)), (0, 2, 1, 3))

    q = split(add(matmul(x, layer["wq"]), layer["bq"]))
    k = split(add(matmul(x, layer["wk"]), layer["bk"]))
    v = split(add(matmul(x, layer["wv"]), layer["bv"]))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if bias is not None:
        bshape = bias.shape
        if bshape[-2:] != (N, N) or (len(bshape) >= 3 and bshape[-3] not in (1, heads)):
            raise DimensionError(f"attention bias shape {bshape} incompatible with {heads} heads x {N} tokens")
        scores = add(scores, bias)
    if key_mask is not None:
        neg = np.where(key_mask, 0.0, -np.inf).astype(x.dtype)[:, None, None, :]
        scores = add(scores, Tensor(neg))
    probs = softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (B, N, d))
    out = add(matmul(ctx, layer["wo"]), layer["bo"])
    if single:
        out = reshape(out, (N, d))
    return (out, probs) if return_probs else out


def encoder_forward(seq: TokenSequence, enc: Encoder, relative_bias: bool | None = None,
                    taps: list | None = None):
    """Run the encoder; returns ``(z_out, z0)``.

    ``z_out`` is ``(B, N + 1, d)`` with the aggregation output in row 0 and
    ``z0`` that row. ``taps`` (a list) receives each layer's MLP output before
    the residual addition.
    """
    cfg = enc.cfg
    b = seq.as_batch()
    x = b.tokens
    B, N, d = x.shape
    if d != cfg.hidden:
        raise DimensionError(f"token width {d} does not match encoder width {cfg.hidden}")
    agg = add(Tensor(np.zeros((B, 1, d), x.dtype)), reshape(enc.x_agg, (1, 1, d)))
    z = concat([agg, x], axis=1)
    key_mask = None
    if b.valid is not None:
        key_mask = np.concatenate([np.ones((B, 1), bool), b.valid], axis=1)
    use_rel = cfg.use_relative_bias_first_layer if relative_bias is None else relative_bias
    rel = None
    if use_rel:
        if enc.rel_table is None:
            raise ValueError("encoder has no relative-bias table")
        # the aggregation row/column carries no relative offset
        inner = relative_bias_lookup(N, enc.rel_table, cfg.max_len)
        pad_col = Tensor(np.zeros((cfg.heads, N, 1), x.dtype))
        pad_row = Tensor(np.zeros((cfg.heads, 1, N + 1), x.dtype))
        rel = reshape(concat([pad_row, concat([pad_col, inner], axis=2)], axis=1),
                      (1, cfg.heads, N + 1, N + 1))
    for i, layer in enumerate(enc.layers):
        h = layer_norm(z, layer["ln1_g"], layer["ln1_b"], LN_EPS)
        z = add(z, mha_forward(h, layer, cfg.heads, rel if i == 0 else None, key_mask))
        h = layer_norm(z, layer["ln2_g"], layer["ln2_b"], LN_EPS)
        h = add(matmul(gelu(add(matmul(h, layer["w1"]), layer["b1"])), layer["w2"]), layer["b2"])
        if taps is not None:
            taps.append(h)
        z = add(z, h)
    z = layer_norm(z, enc.ln_g, enc.ln_b, LN_EPS)
    z0 = take(z, (slice(None), 0))
    if not seq.batched:
        return reshape(z, z.shape[1:]), reshape(z0, (d,))
    return z, z0
