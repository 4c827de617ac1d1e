"""Hierarchical projection into the video-audio and video-text spaces.

The video-text embedding of a video is computed from its video-audio
embedding, never from the backbone output directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    DimensionError, Rng, Tensor, add, batch_norm_train, matmul, mul,
    parameter, relu, sub,
)

BN_MOMENTUM = 0.99
BN_EPS = 1e-5


class Linear:
    def __init__(self, n_in: int, n_out: int, name: str, rng: Rng, dtype=np.float32, std: float = 0.02):
        self.n_in, self.n_out = n_in, n_out
        self.w = parameter(rng.derive(name).truncated_normal((n_in, n_out), std, dtype), name + ".w")
        self.b = parameter(np.zeros(n_out, dtype), name + ".b")

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"linear expects width {self.n_in}, got {x.shape[-1]}")
        return add(matmul(x, self.w), self.b)


class BatchNorm:
    """Batch statistics in training, running statistics at inference."""

    def __init__(self, n: int, name: str, dtype=np.float32,
                 momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.gain = parameter(np.ones(n, dtype), name + ".gain")
        self.bias = parameter(np.zeros(n, dtype), name + ".bias")
        self.running_mean = np.zeros(n, dtype)
        self.running_var = np.ones(n, dtype)
        self.momentum = momentum
        self.eps = eps

    def params(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if train:
            out, mu, var = batch_norm_train(x, self.gain, self.bias, self.eps)
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1 - m) * mu
            self.running_var[...] = m * self.running_var + (1 - m) * var
            return out
        scale = (1.0 / np.sqrt(self.running_var + self.eps)).astype(x.dtype)
        xhat = mul(sub(x, Tensor(self.running_mean)), Tensor(scale))
        return add(mul(xhat, self.gain), self.bias)


@dataclass
class CommonSpaceEmbedding:
    va_video: Tensor | None
    va_audio: Tensor | None
    vt_video: Tensor | None
    vt_text: Tensor | None


class ProjectionHeads:
    """``video->va`` (linear, BN, ReLU, linear, BN), ``audio->va``,
    ``va->vt`` and ``text->vt`` (linear, BN each)."""

    def __init__(self, d_video: int, d_audio: int, d_text: int, d_va: int = 512, d_vt: int = 256,
                 rng: Rng | None = None, dtype=np.float32, std: float = 0.02):
        rng = rng or Rng(0, "heads")
        self.d_va, self.d_vt = d_va, d_vt
        self.v_va1 = Linear(d_video, d_va, "v_va1", rng, dtype, std)
        self.v_va1_bn = BatchNorm(d_va, "v_va1_bn", dtype)
        self.v_va2 = Linear(d_va, d_va, "v_va2", rng, dtype, std)
        self.v_va2_bn = BatchNorm(d_va, "v_va2_bn", dtype)
        self.a_va = Linear(d_audio, d_va, "a_va", rng, dtype, std)
        self.a_va_bn = BatchNorm(d_va, "a_va_bn", dtype)
        self.v_vt = Linear(d_va, d_vt, "v_vt", rng, dtype, std)
        self.v_vt_bn = BatchNorm(d_vt, "v_vt_bn", dtype)
        self.t_vt = Linear(d_text, d_vt, "t_vt", rng, dtype, std)
        self.t_vt_bn = BatchNorm(d_vt, "t_vt_bn", dtype)

    def _modules(self):
        return {k: v for k, v in vars(self).items() if isinstance(v, (Linear, BatchNorm))}

    def params(self) -> dict[str, Tensor]:
        return {f"{k}.{n}": p for k, m in self._modules().items() for n, p in m.params().items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{k}.{n}": b for k, m in self._modules().items()
                if isinstance(m, BatchNorm) for n, b in m.buffers().items()}

    def video_va(self, z: Tensor, train: bool) -> Tensor:
        h = relu(self.v_va1_bn(self.v_va1(z), train))
        return self.v_va2_bn(self.v_va2(h), train)

    def audio_va(self, z: Tensor, train: bool) -> Tensor:
        return self.a_va_bn(self.a_va(z), train)

    def video_vt(self, z_va: Tensor, train: bool) -> Tensor:
        return self.v_vt_bn(self.v_vt(z_va), train)

    def text_vt(self, z: Tensor, train: bool) -> Tensor:
        return self.t_vt_bn(self.t_vt(z), train)


def project(z_video: Tensor | None, z_audio: Tensor | None, z_text: Tensor | None,
            heads: ProjectionHeads, mode: str = "train") -> CommonSpaceEmbedding:
    """Map aggregation outputs (``(B, d)`` each) into both common spaces."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    train = mode == "train"
    va_v = vt_v = va_a = vt_t = None
    if z_video is not None:
        va_v = heads.video_va(z_video, train)
        vt_v = heads.video_vt(va_v, train)
    if z_audio is not None:
        va_a = heads.audio_va(z_audio, train)
    if z_text is not None:
        vt_t = heads.text_vt(z_text, train)
    return CommonSpaceEmbedding(va_v, va_a, vt_v, vt_t)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).reshape(-1)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return a @ b.T


__all__ = ["Linear", "BatchNorm", "ProjectionHeads", "CommonSpaceEmbedding",
           "project", "cosine_similarity", "cosine_matrix"]
