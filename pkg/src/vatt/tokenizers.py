"""Raw-signal tokenizers for video, audio and text, plus DropToken."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Rng, Tensor, add, matmul, parameter, reshape, take

TEXT_MAX_LEN = 16
TEXT_PAD_ID = 0


@dataclass
class TokenSequence:
    """Embedded tokens of one modality.

    ``tokens`` is ``(N, d)`` or batched ``(B, N, d)``; ``positions`` holds the
    raster index of each token in the undropped sequence with the same leading
    shape. ``valid`` marks attendable tokens (False on text padding).
    """

    tokens: Tensor
    positions: np.ndarray
    modality: str
    kept_mask: np.ndarray | None = None
    valid: np.ndarray | None = None

    @property
    def batched(self) -> bool:
        return self.tokens.ndim == 3

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]

    def as_batch(self) -> "TokenSequence":
        if self.batched:
            return self
        return TokenSequence(
            reshape(self.tokens, (1,) + self.tokens.shape),
            self.positions[None],
            self.modality,
            None if self.kept_mask is None else self.kept_mask[None],
            None if self.valid is None else self.valid[None],
        )


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")


class VideoTokenizer:
    """3-D patch projection with factorised (temporal + two spatial) positions.

    A token at grid cell (i, j, k) receives
    ``pos_temporal[i] + pos_horizontal[j] + pos_vertical[k]``, so
    ``nt + nh + nw`` rows encode ``nt * nh * nw`` positions.
    """

    modality = "video"

    def __init__(self, d: int, patch=(4, 16, 16), buckets=(8, 14, 14),
                 rng: Rng | None = None, dtype=np.float32, std: float = 0.02):
        self.d = d
        self.patch = tuple(patch)
        self.buckets = tuple(buckets)
        rng = rng or Rng(0, "video_tokenizer")
        t, h, w = self.patch
        self.proj = parameter(rng.derive("proj").truncated_normal((t * h * w * 3, d), std, dtype), "proj")
        self.pos_temporal = parameter(rng.derive("pt").truncated_normal((buckets[0], d), std, dtype), "pos_temporal")
        self.pos_horizontal = parameter(rng.derive("ph").truncated_normal((buckets[1], d), std, dtype), "pos_horizontal")
        self.pos_vertical = parameter(rng.derive("pv").truncated_normal((buckets[2], d), std, dtype), "pos_vertical")

    def params(self) -> dict[str, Tensor]:
        return {"proj": self.proj, "pos_temporal": self.pos_temporal,
                "pos_horizontal": self.pos_horizontal, "pos_vertical": self.pos_vertical}

    @property
    def positional_rows(self) -> int:
        return sum(self.buckets)

    def grid(self, T: int, H: int, W: int) -> tuple[int, int, int]:
        t, h, w = self.patch
        return _ceil_div(T, t), _ceil_div(H, h), _ceil_div(W, w)

    def patchify(self, clip: np.ndarray) -> np.ndarray:
        """``(B, T, H, W, 3)`` -> ``(B, N, t*h*w*3)`` with zero padding."""
        B, T, H, W, C = clip.shape
        t, h, w = self.patch
        nt, nh, nw = self.grid(T, H, W)
        pad = ((0, 0), (0, nt * t - T), (0, nh * h - H), (0, nw * w - W), (0, 0))
        if any(p[1] for p in pad):
            clip = np.pad(clip, pad)
        x = clip.reshape(B, nt, t, nh, h, nw, w, C).transpose(0, 1, 3, 5, 2, 4, 6, 7)
        return x.reshape(B, nt * nh * nw, t * h * w * C)

    def positional(self, nt: int, nh: int, nw: int) -> Tensor:
        d = self.d
        et = reshape(take(self.pos_temporal, slice(0, nt)), (nt, 1, 1, d))
        eh = reshape(take(self.pos_horizontal, slice(0, nh)), (1, nh, 1, d))
        ev = reshape(take(self.pos_vertical, slice(0, nw)), (1, 1, nw, d))
        return reshape(add(add(et, eh), ev), (nt * nh * nw, d))

    def __call__(self, clip: np.ndarray) -> TokenSequence:
        clip = np.asarray(clip, dtype=self.proj.dtype)
        single = clip.ndim == 4
        if single:
            clip = clip[None]
        if clip.ndim != 5 or clip.shape[-1] != 3:
            raise ValueError(f"expected (B,)T x H x W x 3 clip, got {clip.shape}")
        _check_finite(clip, "video clip")
        nt, nh, nw = self.grid(*clip.shape[1:4])
        if nt > self.buckets[0] or nh > self.buckets[1] or nw > self.buckets[2]:
            raise ValueError(f"clip grid {(nt, nh, nw)} exceeds positional buckets {self.buckets}")
        patches = self.patchify(clip)
        tokens = add(matmul(Tensor(patches), self.proj), self.positional(nt, nh, nw))
        n = nt * nh * nw
        pos = np.broadcast_to(np.arange(n), (clip.shape[0], n)).copy()
        seq = TokenSequence(tokens, pos, "video")
        if single:
            seq = TokenSequence(reshape(tokens, tokens.shape[1:]), pos[0], "video")
        return seq


class AudioTokenizer:
    """Waveform segments of ``segment`` samples, linearly projected."""

    modality = "audio"

    def __init__(self, d: int, segment: int = 128, buckets: int = 1200,
                 rng: Rng | None = None, dtype=np.float32, std: float = 0.02):
        self.d = d
        self.segment = segment
        self.buckets = buckets
        rng = rng or Rng(0, "audio_tokenizer")
        self.proj = parameter(rng.derive("proj").truncated_normal((segment, d), std, dtype), "proj")
        self.pos = parameter(rng.derive("pos").truncated_normal((buckets, d), std, dtype), "pos")

    def params(self) -> dict[str, Tensor]:
        return {"proj": self.proj, "pos": self.pos}

    def __call__(self, wave: np.ndarray) -> TokenSequence:
        wave = np.asarray(wave, dtype=self.proj.dtype)
        single = wave.ndim == 1
        if single:
            wave = wave[None]
        if wave.shape[-1] == 0:
            raise ValueError("empty waveform")
        _check_finite(wave, "waveform")
        B, L = wave.shape
        n = _ceil_div(L, self.segment)
        if n > self.buckets:
            raise ValueError(f"{n} segments exceed {self.buckets} positional buckets")
        if n * self.segment != L:
            wave = np.pad(wave, ((0, 0), (0, n * self.segment - L)))
        segs = wave.reshape(B, n, self.segment)
        tokens = add(matmul(Tensor(segs), self.proj), take(self.pos, slice(0, n)))
        pos = np.broadcast_to(np.arange(n), (B, n)).copy()
        if single:
            return TokenSequence(reshape(tokens, tokens.shape[1:]), pos[0], "audio")
        return TokenSequence(tokens, pos, "audio")


def pad_text(ids: Sequence[Sequence[int]] | Sequence[int], max_len: int = TEXT_MAX_LEN):
    """Clip or pad id lists to ``max_len``; returns ``(ids, lengths)``."""
    if len(ids) == 0 or np.isscalar(ids[0]):
        ids = [ids]
    out = np.full((len(ids), max_len), TEXT_PAD_ID, dtype=np.int64)
    lengths = np.zeros(len(ids), dtype=np.int64)
    for i, row in enumerate(ids):
        row = list(row)[:max_len]
        out[i, : len(row)] = row
        lengths[i] = len(row)
    return out, lengths


class TextTokenizer:
    """Embedding lookup; equivalent to one-hot times the projection matrix.

    No positional term is attached; the text encoder uses a relative
    attention bias instead.
    """

    modality = "text"

    def __init__(self, d: int, vocab: int = 2 ** 16, max_len: int = TEXT_MAX_LEN,
                 rng: Rng | None = None, dtype=np.float32, std: float = 0.02):
        self.d = d
        self.vocab = vocab
        self.max_len = max_len
        rng = rng or Rng(0, "text_tokenizer")
        self.proj = parameter(rng.derive("proj").truncated_normal((vocab, d), std, dtype), "proj")

    def params(self) -> dict[str, Tensor]:
        return {"proj": self.proj}

    def __call__(self, ids, lengths: np.ndarray | None = None) -> TokenSequence:
        """Tokenize one id list, a list of lists, or a padded ``(B, L)`` array."""
        single = False
        if isinstance(ids, np.ndarray) and ids.ndim == 2:
            arr = ids[:, : self.max_len]
            if arr.shape[1] < self.max_len:
                arr = np.pad(arr, ((0, 0), (0, self.max_len - arr.shape[1])))
            if lengths is None:
                lengths = np.full(arr.shape[0], min(ids.shape[1], self.max_len))
            lengths = np.minimum(np.asarray(lengths), self.max_len)
        else:
            single = len(ids) == 0 or np.isscalar(ids[0])
            arr, lengths = pad_text(ids, self.max_len)
        arr = np.asarray(arr, dtype=np.int64)
        if arr.size and (arr.max() >= self.vocab or arr.min() < 0):
            bad = int(arr[(arr >= self.vocab) | (arr < 0)][0])
            raise KeyError(f"token id {bad} outside vocabulary of size {self.vocab}")
        tokens = take(self.proj, arr)
        valid = np.arange(self.max_len)[None, :] < np.asarray(lengths)[:, None]
        pos = np.broadcast_to(np.arange(self.max_len), arr.shape).copy()
        if single:
            return TokenSequence(reshape(tokens, tokens.shape[1:]), pos[0], "text", valid=valid[0])
        return TokenSequence(tokens, pos, "text", valid=valid)


def kept_count(n: int, rate: float) -> int:
    return max(1, math.ceil(round((1.0 - rate) * n, 9)))


def drop_token(seq: TokenSequence, rate: float, rng: Rng) -> TokenSequence:
    """Keep a uniform random ``ceil((1 - rate) * N)``-subset of tokens.

    Order and original positions are preserved; each batch row draws its
    own subset.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return seq
    b = seq.as_batch()
    B, N = b.positions.shape
    k = kept_count(N, rate)
    idx = rng.subset(N, k, batch=B)
    rows = np.arange(B)[:, None]
    tokens = take(b.tokens, (rows, idx))
    kept = np.zeros((B, N), dtype=bool)
    kept[rows, idx] = True
    if b.kept_mask is not None:
        prev = b.kept_mask.copy()
        prev[prev] = kept.reshape(-1)
        kept = prev
    valid = None if b.valid is None else b.valid[rows, idx]
    out = TokenSequence(tokens, b.positions[rows, idx], seq.modality, kept, valid)
    if not seq.batched:
        out = TokenSequence(reshape(tokens, tokens.shape[1:]), out.positions[0], seq.modality,
                            kept[0], None if valid is None else valid[0])
    return out


__all__ = [
    "TokenSequence", "VideoTokenizer", "AudioTokenizer", "TextTokenizer",
    "drop_token", "pad_text", "kept_count", "TEXT_MAX_LEN", "TEXT_PAD_ID",
]
