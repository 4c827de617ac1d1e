"""Contrastive objectives and fine-tuning loss utilities."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import (
    Rng, Tensor, add, concat, l2_normalize, log_softmax, logsumexp, matmul,
    mean, mul, reshape, sub, sum_, take, transpose,
)


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    weight: float = 1.0
    bidirectional: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.weight < 0:
            raise ValueError("loss weight must be non-negative")


@dataclass
class BatchPairing:
    """Which samples carry text and which text slots are MIL positives.

    ``positive_mask[i, p]`` marks slot ``p`` of sample ``i`` as a real positive
    (slot 0 is the temporally nearest text clip). Negatives are all
    non-matching pairs inside the batch.
    """

    text_present: np.ndarray
    positive_mask: np.ndarray

    @classmethod
    def full(cls, batch: int, positives: int = 1) -> "BatchPairing":
        return cls(np.ones(batch, bool), np.ones((batch, positives), bool))


class InsufficientNegatives(ValueError):
    pass


def _neg_inf_mask(allowed: np.ndarray, dtype) -> Tensor:
    return Tensor(np.where(allowed, 0.0, -np.inf).astype(dtype))


def nce_loss(zv: Tensor, za: Tensor, temperature: float = 0.07, bidirectional: bool = True) -> Tensor:
    """Mean NCE over the batch; rows are l2-normalised here.

    With ``bidirectional`` the negatives of pair ``i`` are ``(v_i, a_j)`` and
    ``(v_j, a_i)`` for every ``j != i``.
    """
    B = zv.shape[0]
    if B < 2:
        raise InsufficientNegatives("NCE needs a batch of at least 2 for in-batch negatives")
    if za.shape != zv.shape:
        raise ValueError(f"embedding shapes differ: {zv.shape} vs {za.shape}")
    v = l2_normalize(zv)
    a = l2_normalize(za)
    s = mul(matmul(v, transpose(a)), 1.0 / temperature)
    diag = np.arange(B)
    pos = take(s, (diag, diag))
    logits = s
    if bidirectional:
        off = ~np.eye(B, dtype=bool)
        logits = concat([s, add(transpose(s), _neg_inf_mask(off, s.dtype))], axis=1)
    return mean(sub(logsumexp(logits, axis=1), pos))


def mil_nce_loss(zv: Tensor, zt: Tensor, pairing: BatchPairing, temperature: float = 0.07,
                 bidirectional: bool = True) -> Tensor:
    """MIL-NCE between video ``(B, d)`` and text positive sets ``(B, P, d)``.

    Samples without text are removed before scoring: they are neither anchors
    nor negatives, so their text rows get exactly zero gradient. A batch with
    no text at all yields 0 and emits a warning.
    """
    present = np.flatnonzero(pairing.text_present)
    m = present.size
    if m == 0:
        warnings.warn("MIL-NCE batch has no text-bearing samples; loss defined as 0", RuntimeWarning)
        return Tensor(np.zeros((), zv.dtype))
    B, P, d = zt.shape
    valid = np.asarray(pairing.positive_mask, bool)[present]
    if not valid[:, 0].all():
        raise ValueError("every text-bearing sample needs at least one positive")
    v = l2_normalize(take(zv, present))
    t = l2_normalize(take(zt, present))
    s = mul(matmul(v, transpose(reshape(t, (m * P, d)))), 1.0 / temperature)  # (m, m*P)
    eye = np.eye(m, dtype=bool)[:, :, None]
    own = (eye & valid[None, :, :]).reshape(m, m * P)
    num = logsumexp(add(s, _neg_inf_mask(own, s.dtype)), axis=1)
    rows = np.broadcast_to(valid[None, :, :], (m, m, P)).reshape(m, m * P)
    parts = [add(s, _neg_inf_mask(rows, s.dtype))]
    if bidirectional:
        # entry (i, j, p) scores video j against text slot p of sample i
        st = reshape(transpose(reshape(s, (m, m, P)), (1, 0, 2)), (m, m * P))
        cols = ((~eye) & valid[:, None, :]).reshape(m, m * P)
        parts.append(add(st, _neg_inf_mask(cols, s.dtype)))
    den = logsumexp(concat(parts, axis=1) if len(parts) > 1 else parts[0], axis=1)
    return mean(sub(den, num))


def total_loss(emb, pairing: BatchPairing, cfg: LossConfig = LossConfig()) -> Tensor:
    """NCE in the video-audio space plus weighted MIL-NCE in the video-text space."""
    loss = nce_loss(emb.va_video, emb.va_audio, cfg.temperature, cfg.bidirectional)
    if cfg.weight == 0:
        return loss
    mil = mil_nce_loss(emb.vt_video, emb.vt_text, pairing, cfg.temperature, cfg.bidirectional)
    return add(loss, mul(mil, cfg.weight))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy for integer labels ``(B,)`` or soft labels ``(B, c)``."""
    logp = log_softmax(logits, axis=-1)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        picked = take(logp, (np.arange(targets.size), targets.astype(np.int64)))
        return mul(mean(picked), -1.0)
    return mul(mean(sum_(mul(logp, Tensor(targets.astype(logits.dtype))), axis=-1)), -1.0)


def mixup(x1, y1, x2, y2, rng: Rng | None = None, alpha: float | None = None):
    """Convex combination with mixing rate drawn from Beta(5, 5)."""
    x1, x2, y1, y2 = map(np.asarray, (x1, x2, y1, y2))
    if x1.shape != x2.shape or y1.shape != y2.shape:
        raise ValueError(f"mixup shape mismatch: {x1.shape}/{x2.shape}, {y1.shape}/{y2.shape}")
    if alpha is None:
        if rng is None:
            raise ValueError("mixup needs an rng when alpha is not given")
        alpha = float(rng.beta(5.0, 5.0))
    return alpha * x1 + (1 - alpha) * x2, alpha * y1 + (1 - alpha) * y2


def label_smooth(onehot, alpha: float = 0.1) -> np.ndarray:
    y = np.asarray(onehot, dtype=np.float64)
    if y.ndim != 1 or not np.isin(y, (0.0, 1.0)).all() or y.sum() != 1:
        raise ValueError("label_smooth expects a single one-hot vector")
    return (1 - alpha) * y + alpha / y.size


def balance_weights(labels) -> np.ndarray:
    """Per-sample weight: mean over its labels of 1 / (label count in batch)."""
    y = np.asarray(labels).astype(bool)
    per_sample = y.sum(axis=1)
    if (per_sample == 0).any():
        raise ValueError(f"sample {int(np.argmin(per_sample))} carries no labels")
    counts = y.sum(axis=0)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    return (y * inv).sum(axis=1) / per_sample
