"""Optimisation, pre-training loop, checkpoints and transfer utilities."""

from __future__ import annotations

import hashlib
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .data import AugmentConfig, SyntheticCorpus, TripletBatch
from .losses import LossConfig, softmax_cross_entropy, total_loss
from .model import (
    HeadsConfig, ModelConfig, ShareMode, VATTModel, agnostic, analytic_census,
    backbone_with_video_tokenizer, build_model, specific,
)
from .numerics import DiffRecord, Rng, Tensor, backward, matmul, parameter, take
from .tokenizers import VideoTokenizer


class NumericError(FloatingPointError):
    """A loss or gradient became non-finite."""


# ------------------------------------------------------------------ schedule


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 1e-4
    final_lr: float = 5e-5
    warmup_steps: int = 10_000
    total_steps: int = 500_000

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.final_lr > self.base_lr:
            raise ValueError("final_lr must not exceed base_lr")


def lr_at(step: int, s: Schedule = Schedule()) -> float:
    """Linear warmup from 0, then a quarter sine period from base to final."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= s.total_steps:
        return s.final_lr
    if step < s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    span = s.total_steps - s.warmup_steps
    progress = (step - s.warmup_steps) / span
    return s.base_lr + (s.final_lr - s.base_lr) * math.sin(0.5 * math.pi * progress)


# --------------------------------------------------------------------- Adam


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kw) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, **kw)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}; step aborted")
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for k, g in grads.items():
        p = params[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= upd.astype(p.dtype)


# -------------------------------------------------------------- train step


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 32
    drop_rate: float = 0.5
    audio_drop_rate: float | None = None  # None: same as drop_rate
    positives: int = 5
    augment: AugmentConfig | None = None
    loss: LossConfig = LossConfig()
    schedule: Schedule = Schedule(1e-3, 5e-4, 100, 2000)
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0


@dataclass
class StepResult:
    step: int
    loss: float
    grad_norm: float
    lr: float


def batch_fingerprint(batch: TripletBatch) -> str:
    h = hashlib.sha256()
    for a in (batch.video, batch.audio, batch.text_ids, batch.positive_mask):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def loss_and_grads(model: VATTModel, batch: TripletBatch, cfg: TrainConfig, rng: Rng,
                   detach: frozenset[str] = frozenset()):
    params = model.params()
    with DiffRecord() as rec:
        emb, pairing = model.forward(batch, cfg.drop_rate, rng, "train",
                                     with_text=cfg.loss.weight > 0, detach=detach,
                                     audio_drop_rate=cfg.audio_drop_rate)
        loss = total_loss(emb, pairing, cfg.loss)
    names = list(params)
    grads = backward(loss, rec, [params[k] for k in names])
    return loss, dict(zip(names, grads))


def train_step(batch: TripletBatch, model: VATTModel, opt: OptimizerState, cfg: TrainConfig,
               step: int | None = None) -> StepResult:
    """Forward, backward and one Adam update; randomness keyed on the step."""
    step = opt.step if step is None else step
    rng = Rng(cfg.seed, "step", step)
    loss, grads = loss_and_grads(model, batch, cfg, rng)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {step} (batch {batch_fingerprint(batch)})")
    gnorm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    lr = lr_at(step, cfg.schedule)
    adam_step(model.params(), grads, opt, lr)
    return StepResult(step, value, gnorm, lr)


def batch_for_step(corpus: SyntheticCorpus, cfg: TrainConfig, step: int) -> TripletBatch:
    return corpus.batch(cfg.batch, Rng(cfg.seed, "batch", step), cfg.positives, cfg.augment)


def pretrain(model: VATTModel, corpus: SyntheticCorpus, cfg: TrainConfig, opt: OptimizerState | None = None,
             until: int | None = None, on_step: Callable[[StepResult], None] | None = None,
             on_checkpoint: Callable[[int], None] | None = None) -> tuple[OptimizerState, list[float]]:
    """Run steps ``opt.step .. until`` (default ``cfg.steps``); returns the losses."""
    opt = opt or OptimizerState.for_params(model.params())
    until = cfg.steps if until is None else until
    losses = []
    while opt.step < until:
        res = train_step(batch_for_step(corpus, cfg, opt.step), model, opt, cfg)
        losses.append(res.loss)
        if on_step is not None:
            on_step(res)
        if on_checkpoint is not None and cfg.checkpoint_every and opt.step % cfg.checkpoint_every == 0:
            on_checkpoint(opt.step)
    return opt, losses


# --------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"VATTCKPT"
CKPT_VERSION = 1


def _tensor_table(model: VATTModel, opt: OptimizerState | None) -> dict[str, np.ndarray]:
    table: dict[str, np.ndarray] = {}
    for k, p in model.params().items():
        table["param/" + k] = p.data
    for k, b in model.buffers().items():
        table["buffer/" + k] = b
    if opt is not None:
        for k in opt.m:
            table["adam_m/" + k] = opt.m[k]
            table["adam_v/" + k] = opt.v[k]
        # integer counter stored bit-cast into 32-bit words
        table["meta/step"] = np.array([opt.step & 0xFFFFFFFF, opt.step >> 32], "<u4").view("<f4")
    return table


def save_checkpoint(path: str | Path, model: VATTModel, opt: OptimizerState | None = None) -> None:
    """Write the named-tensor table; values are little-endian float32."""
    out = bytearray(CKPT_MAGIC)
    table = _tensor_table(model, opt)
    out += struct.pack("<II", CKPT_VERSION, len(table))
    for name, arr in table.items():
        raw = name.encode()
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, "<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a VATTCKPT file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ValueError(f"{path}: checksum mismatch")
    version, count = struct.unpack_from("<II", body, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    table = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, off)
        name = body[off + 4: off + 4 + n].decode()
        off += 4 + n
        (rank,) = struct.unpack_from("<I", body, off)
        shape = struct.unpack_from(f"<{rank}I", body, off + 4)
        off += 4 + 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        table[name] = np.frombuffer(body, "<f4", size, off).reshape(shape).copy()
        off += 4 * size
    return table


def load_checkpoint(path: str | Path, model: VATTModel, opt: OptimizerState | None = None) -> int:
    """Restore weights (and optimizer state when given); returns the step."""
    table = read_checkpoint(path)
    params = model.params()
    for k, p in params.items():
        key = "param/" + k
        if key not in table:
            raise ValueError(f"checkpoint lacks parameter {k}")
        if table[key].shape != p.shape:
            raise ValueError(f"incompatible checkpoint: {k} has shape {table[key].shape}, model expects {p.shape}")
        p.data[...] = table[key]
    for k, b in model.buffers().items():
        b[...] = table["buffer/" + k]
    step = 0
    if "meta/step" in table:
        lo, hi = table["meta/step"].view("<u4")
        step = int(lo) | int(hi) << 32
    if opt is not None:
        for k in params:
            opt.m[k][...] = table["adam_m/" + k]
            opt.v[k][...] = table["adam_v/" + k]
        opt.step = step
    return step


# ---------------------------------------------------- resolution transfer


def interpolate_positional(table: np.ndarray, new_m: int) -> np.ndarray:
    """Cubic-spline resampling of an ``m x d`` bucket table to ``new_m`` rows.

    Bucket ends map onto each other; natural boundary conditions keep linear
    ramps exactly linear.
    """
    table = np.asarray(table)
    m = table.shape[0]
    if new_m < 1:
        raise ValueError("new bucket count must be at least 1")
    if m < 2:
        raise ValueError("need at least two buckets to interpolate")
    if new_m == m:
        return table.copy()
    spline = CubicSpline(np.arange(m, dtype=np.float64), table.astype(np.float64), axis=0, bc_type="natural")
    x = np.linspace(0.0, m - 1, new_m) if new_m > 1 else np.array([(m - 1) / 2])
    return spline(x).astype(table.dtype)


def resize_video_buckets(tok: VideoTokenizer, buckets: tuple[int, int, int]) -> VideoTokenizer:
    """A tokenizer sharing ``tok``'s projection with interpolated positions."""
    new = VideoTokenizer.__new__(VideoTokenizer)
    new.d, new.patch, new.buckets = tok.d, tok.patch, tuple(buckets)
    new.proj = tok.proj
    new.pos_temporal = parameter(interpolate_positional(tok.pos_temporal.data, buckets[0]), "pos_temporal")
    new.pos_horizontal = parameter(interpolate_positional(tok.pos_horizontal.data, buckets[1]), "pos_horizontal")
    new.pos_vertical = parameter(interpolate_positional(tok.pos_vertical.data, buckets[2]), "pos_vertical")
    return new


# ---------------------------------------------------------- low-rank probe


class LowRankClassifier:
    """Linear classifier with weight ``U @ V`` trained on random component subsets."""

    def __init__(self, d: int, classes: int, n: int = 128, rate: float = 0.1, lr: float = 5e-4,
                 rng: Rng | None = None, dtype=np.float32):
        if not 0 < rate <= 1:
            raise ValueError("component sample rate must lie in (0, 1]")
        rng = rng or Rng(0, "probe")
        self.n, self.rate, self.lr = n, rate, lr
        self.U = parameter(rng.derive("U").truncated_normal((d, n), 0.02, dtype), "U")
        self.V = parameter(rng.derive("V").truncated_normal((n, classes), 0.02, dtype), "V")
        self.opt = OptimizerState.for_params({"U": self.U, "V": self.V})

    @property
    def weight(self) -> np.ndarray:
        return self.U.data @ self.V.data

    def sample(self, rng: Rng) -> np.ndarray:
        k = max(1, round(self.rate * self.n))
        return rng.subset(self.n, k)

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Inference logits; the full product is scaled by the sample rate."""
        return self.rate * (np.asarray(x, self.U.dtype) @ self.weight)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


def low_rank_probe_step(features: np.ndarray, labels, clf: LowRankClassifier, rng: Rng) -> float:
    comps = clf.sample(rng)
    params = {"U": clf.U, "V": clf.V}
    with DiffRecord() as rec:
        u = take(clf.U, (slice(None), comps))
        v = take(clf.V, comps)
        logits = matmul(matmul(Tensor(np.asarray(features, clf.U.dtype)), u), v)
        loss = softmax_cross_entropy(logits, labels)
    gu, gv = backward(loss, rec, [clf.U, clf.V])
    adam_step(params, {"U": gu, "V": gv}, clf.opt, clf.lr)
    return loss.item()


def multiview_logits(views: Sequence[np.ndarray]) -> np.ndarray:
    if len(views) == 0:
        raise ValueError("need at least one view")
    return np.mean(np.stack([np.asarray(v, np.float64) for v in views]), axis=0)


__all__ = [
    "Schedule", "lr_at", "OptimizerState", "adam_step", "TrainConfig", "StepResult",
    "train_step", "pretrain", "batch_for_step", "loss_and_grads", "NumericError",
    "save_checkpoint", "load_checkpoint", "read_checkpoint", "interpolate_positional",
    "resize_video_buckets", "LowRankClassifier", "low_rank_probe_step", "multiview_logits",
    "ModelConfig", "HeadsConfig", "ShareMode", "VATTModel", "build_model", "specific",
    "agnostic", "analytic_census", "backbone_with_video_tokenizer",
]
