"""FLOP accounting, retrieval metrics, similarity separation, activation profiles."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

import numpy as np
from scipy.stats import rankdata

from .data import SyntheticCorpus, TripletBatch, assemble_batch
from .encoder import EncoderConfig, preset
from .numerics import Rng, Tensor
from .tokenizers import kept_count

# ------------------------------------------------------------------- FLOPs


@dataclass
class FlopReport:
    token_projection: int
    attention_projections: int
    attention_scores: int
    mlp: int
    heads: int
    tokens: int

    @property
    def total(self) -> int:
        return self.token_projection + self.attention_projections + self.attention_scores + self.mlp + self.heads

    def __add__(self, other: "FlopReport") -> "FlopReport":
        return FlopReport(self.token_projection + other.token_projection,
                          self.attention_projections + other.attention_projections,
                          self.attention_scores + other.attention_scores,
                          self.mlp + other.mlp, self.heads + other.heads, self.tokens + other.tokens)


def count_flops(cfg: EncoderConfig, n_tokens: int, input_dim: int = 0, projected_tokens: int | None = None,
                heads: int = 0) -> FlopReport:
    """Forward FLOPs of one encoder over ``n_tokens`` kept tokens.

    A multiply-add counts as 2. The aggregation token is added here, so the
    sequence length is ``n_tokens + 1``. Token projection runs on
    ``projected_tokens`` (all tokens, before dropping) rows of width
    ``input_dim``.
    """
    if n_tokens < 1:
        raise ValueError("need at least one token")
    n = n_tokens + 1
    d, m, L = cfg.hidden, cfg.mlp_size, cfg.layers
    proj_rows = n_tokens if projected_tokens is None else projected_tokens
    return FlopReport(
        token_projection=2 * proj_rows * input_dim * d,
        attention_projections=L * 8 * n * d * d,
        attention_scores=L * 4 * n * n * d,
        mlp=L * 4 * n * d * m,
        heads=heads,
        tokens=n,
    )


@dataclass(frozen=True)
class Geometry:
    """Input geometry and encoder choice for a triplet forward pass."""

    video: EncoderConfig
    audio: EncoderConfig
    text: EncoderConfig
    frames: int = 32
    height: int = 224
    width: int = 224
    patch: tuple[int, int, int] = (4, 16, 16)
    audio_samples: int = 153_600
    audio_segment: int = 128
    text_tokens: int = 16
    d_va: int = 512
    d_vt: int = 256

    @property
    def video_tokens(self) -> int:
        t, h, w = self.patch
        return -(-self.frames // t) * -(-self.height // h) * -(-self.width // w)

    @property
    def audio_tokens(self) -> int:
        return -(-self.audio_samples // self.audio_segment)


def mbs_geometry() -> Geometry:
    """Medium video, Base audio and Small text encoders at pre-training resolution."""
    return Geometry(preset("medium"), preset("base"), preset("small", True))


def head_flops(g: Geometry) -> int:
    va, vt = g.d_va, g.d_vt
    return 2 * (g.video.hidden * va + va * va + g.audio.hidden * va + va * vt + g.text.hidden * vt)


def multimodal_flops(g: Geometry, drop_rate: float) -> dict[str, FlopReport]:
    """Per-modality and summed FLOPs; DropToken thins video and audio only."""
    if not 0 <= drop_rate < 1:
        raise ValueError(f"drop rate must lie in [0, 1), got {drop_rate}")
    t, h, w = g.patch
    nv, na = g.video_tokens, g.audio_tokens
    out = {
        "video": count_flops(g.video, kept_count(nv, drop_rate), t * h * w * 3, nv),
        "audio": count_flops(g.audio, kept_count(na, drop_rate), g.audio_segment, na),
        # the text lookup is a gather, not a matrix product
        "text": count_flops(g.text, g.text_tokens, 0, g.text_tokens),
    }
    total = out["video"] + out["audio"] + out["text"]
    total.heads = head_flops(g)
    out["total"] = total
    return out


FLOP_COLUMNS = ["drop_rate", "tokens_video", "tokens_audio", "tokens_text", "token_projection",
                "attention_projections", "attention_scores", "mlp", "heads", "total"]


def flop_rows(g: Geometry, rates) -> list[dict]:
    rows = []
    for r in rates:
        rep = multimodal_flops(g, r)
        tot = rep["total"]
        rows.append({
            "drop_rate": r, "tokens_video": rep["video"].tokens, "tokens_audio": rep["audio"].tokens,
            "tokens_text": rep["text"].tokens, "token_projection": tot.token_projection,
            "attention_projections": tot.attention_projections, "attention_scores": tot.attention_scores,
            "mlp": tot.mlp, "heads": tot.heads, "total": tot.total,
        })
    return rows


def write_flop_csv(rows: list[dict], fh: TextIO) -> None:
    w = csv.DictWriter(fh, FLOP_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


# --------------------------------------------------------------- retrieval


@dataclass
class RetrievalResult:
    recall_at_10: float
    median_rank: int
    ranks: np.ndarray


def _unit(x: np.ndarray, axis: int = -1) -> np.ndarray:
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.maximum(n, 1e-12)


def video_representation(clips: np.ndarray) -> np.ndarray:
    """``(M, k, d)`` clip embeddings -> ``(M, d)``: normalise, average, renormalise."""
    return _unit(_unit(np.asarray(clips, np.float64)).mean(axis=1))


def retrieval_eval(text_queries: np.ndarray, video_pool: np.ndarray, targets=None) -> RetrievalResult:
    """Rank the pool for each query; query ``q`` targets video ``targets[q]``.

    Ties rank by pool index. Median rank takes the upper middle value for an
    even number of queries.
    """
    video_pool = np.asarray(video_pool, np.float64)
    if video_pool.size == 0 or video_pool.shape[0] == 0:
        raise ValueError("empty retrieval pool")
    pool = video_representation(video_pool) if video_pool.ndim == 3 else _unit(video_pool)
    q = _unit(np.asarray(text_queries, np.float64))
    targets = np.arange(q.shape[0]) if targets is None else np.asarray(targets)
    sims = q @ pool.T
    tgt = sims[np.arange(q.shape[0]), targets][:, None]
    idx = np.arange(pool.shape[0])[None, :]
    better = (sims > tgt) | ((sims == tgt) & (idx < targets[:, None]))
    ranks = better.sum(axis=1) + 1
    srt = np.sort(ranks)
    med = int(srt[len(srt) // 2])
    return RetrievalResult(float(np.mean(ranks <= 10)), med, ranks)


# ----------------------------------------------------- similarity separation


@dataclass
class SimilarityReport:
    auc: float
    pos_hist: np.ndarray
    neg_hist: np.ndarray
    bin_edges: np.ndarray
    pos: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    neg: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def _as_similarities(pairs) -> np.ndarray:
    if isinstance(pairs, tuple) and len(pairs) == 2:
        a, b = (np.asarray(x, np.float64) for x in pairs)
        return np.sum(_unit(a) * _unit(b), axis=-1)
    return np.asarray(pairs, np.float64).reshape(-1)


def auc_rank(pos: np.ndarray, neg: np.ndarray) -> float:
    """P(positive > negative) with ties counted half (Mann-Whitney)."""
    pos, neg = np.asarray(pos, np.float64), np.asarray(neg, np.float64)
    r = rankdata(np.concatenate([pos, neg]))
    u = r[: pos.size].sum() - pos.size * (pos.size + 1) / 2
    return float(u / (pos.size * neg.size))


def similarity_separation(pos_pairs, neg_pairs, bins: int = 64) -> SimilarityReport:
    """Pairs are ``(A, B)`` row-aligned vector arrays or precomputed cosines."""
    pos = _as_similarities(pos_pairs)
    neg = _as_similarities(neg_pairs)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need at least one positive and one negative pair")
    edges = np.linspace(-1.0, 1.0, bins + 1)
    ph, _ = np.histogram(np.clip(pos, -1, 1), edges)
    nh, _ = np.histogram(np.clip(neg, -1, 1), edges)
    return SimilarityReport(auc_rank(pos, neg), ph, nh, edges, pos, neg)


def cross_pairs(a: np.ndarray, b: np.ndarray, groups=None):
    """Cosines of matched rows (positives) and of rows from different groups."""
    s = _unit(np.asarray(a, np.float64)) @ _unit(np.asarray(b, np.float64)).T
    n = s.shape[0]
    groups = np.arange(n) if groups is None else np.asarray(groups)
    neg = groups[:, None] != groups[None, :]
    return np.diag(s).copy(), s[neg]


# ------------------------------------------------------- activation profile


@dataclass
class ActivationProfile:
    """``profiles[modality]`` is ``(layers, d)``: mean MLP output per node."""

    profiles: dict[str, np.ndarray]


def activation_profile(model, inputs: dict[str, object]) -> ActivationProfile:
    """Average pre-residual MLP outputs over samples and attendable tokens.

    ``inputs`` maps ``video`` to clips, ``audio`` to waveforms and ``text``
    to ``(ids, lengths)``.
    """
    out = {}
    for m, x in inputs.items():
        taps: list[Tensor] = []
        enc = model.encoders[m]
        if m == "video":
            seq, rel = model.video_tok(x), False
        elif m == "audio":
            seq, rel = model.audio_tok(x), False
        elif m == "text":
            seq, rel = model.text_tok(*x), True
        else:
            raise KeyError(f"unknown modality {m!r}")
        enc(seq, relative_bias=rel, taps=taps)
        b = seq.as_batch()
        B, N = b.positions.shape
        w = np.ones((B, N + 1))
        if b.valid is not None:
            w[:, 1:] = b.valid
        prof = []
        for t in taps:
            h = t.data.reshape(B, N + 1, -1).astype(np.float64)
            prof.append((h * w[..., None]).sum(axis=(0, 1)) / w.sum())
        out[m] = np.stack(prof)
    return ActivationProfile(out)


# ---------------------------------------------------------------- emitters


def metric_line(name: str, step: int, value: float) -> str:
    return f"metric={name} step={int(step)} value={float(value)!r}"


def write_histogram_csv(path_or_fh, counts: np.ndarray, edges: np.ndarray) -> None:
    own = isinstance(path_or_fh, (str, Path))
    fh = open(path_or_fh, "w", newline="") if own else path_or_fh
    try:
        fh.write("bin_left,count\n")
        for left, c in zip(edges[:-1], counts):
            fh.write(f"{float(left)!r},{int(c)}\n")
    finally:
        if own:
            fh.close()


# ------------------------------------------------- model-level evaluation


def embed_batch(model, batch: TripletBatch):
    """Inference-mode common-space embeddings as float64 arrays."""
    emb, pairing = model.forward(batch, 0.0, None, "infer")
    vt_text = None if emb.vt_text is None else emb.vt_text.data.astype(np.float64)
    return {
        "va_video": emb.va_video.data.astype(np.float64),
        "va_audio": emb.va_audio.data.astype(np.float64),
        "vt_video": emb.vt_video.data.astype(np.float64),
        "vt_text": vt_text,
        "pairing": pairing,
    }


def separation_reports(model, batches: list[TripletBatch]) -> dict[str, SimilarityReport]:
    """S_va and S_vt separation on held-out batches.

    Positives pair a video with its own audio (or its nearest text clip);
    negatives pair it with other streams' audio (or text) in the same batch.
    """
    pos = {"va": [], "vt": []}
    neg = {"va": [], "vt": []}
    for b in batches:
        e = embed_batch(model, b)
        p, n = cross_pairs(e["va_video"], e["va_audio"], b.streams)
        pos["va"].append(p)
        neg["va"].append(n)
        if e["vt_text"] is not None:
            keep = e["pairing"].text_present
            p, n = cross_pairs(e["vt_video"][keep], e["vt_text"][keep, 0], b.streams[keep])
            pos["vt"].append(p)
            neg["vt"].append(n)
    return {k: similarity_separation(np.concatenate(pos[k]), np.concatenate(neg[k]))
            for k in pos if pos[k]}


@dataclass
class HeldoutResult:
    separation: dict[str, SimilarityReport]
    retrieval: RetrievalResult
    video_agg: np.ndarray
    concepts: np.ndarray
    styles: np.ndarray
    profile_inputs: dict[str, object]


def heldout_eval(model, corpus: SyntheticCorpus, pool: int = 100, clips_per_video: int = 4,
                 batch: int = 32) -> HeldoutResult:
    """Separation over every held-out stream plus text-to-video retrieval.

    Each pool video is represented by ``clips_per_video`` uniformly spaced
    clips; its query is the text nearest to its first clip.
    """
    n, L = len(corpus), corpus.spec.stream_length
    if pool > n:
        raise ValueError(f"pool of {pool} videos exceeds {n} held-out streams")
    batches = []
    for start in range(0, n, batch):
        picks = [(i, i % L) for i in range(start, min(n, start + batch))]
        if len(picks) >= 2:
            batches.append(corpus.batch(len(picks), Rng(0, "heldout"), picks=picks))
    sep = separation_reports(model, batches)
    streams = corpus.streams[:pool]
    clip_idx = np.round(np.linspace(0, L - 1, clips_per_video)).astype(int)
    pool_emb, agg, queries = [], [], None
    for k in clip_idx:
        b = assemble_batch(streams, [int(k)] * pool, Rng(0, "pool"), positives=1)
        e = embed_batch(model, b)
        pool_emb.append(e["vt_video"])
        agg.append(model.embed_video(b.video).data.astype(np.float64))
        if queries is None:
            queries = e["vt_text"][:, 0]
            first = b
    ret = retrieval_eval(queries, np.stack(pool_emb, axis=1))
    prof_b = batches[0]
    keep = prof_b.text_present
    profile_inputs = {"video": prof_b.video, "audio": prof_b.audio,
                      "text": (prof_b.text_ids[keep, 0], prof_b.text_lengths[keep, 0])}
    return HeldoutResult(sep, ret, np.mean(agg, axis=0), first.concepts, first.styles, profile_inputs)


__all__ = [
    "FlopReport", "count_flops", "Geometry", "mbs_geometry", "multimodal_flops", "flop_rows",
    "write_flop_csv", "RetrievalResult", "retrieval_eval", "video_representation",
    "SimilarityReport", "similarity_separation", "auc_rank", "cross_pairs", "ActivationProfile",
    "activation_profile", "metric_line", "write_histogram_csv", "embed_batch", "separation_reports",
    "HeldoutResult", "heldout_eval",
]
