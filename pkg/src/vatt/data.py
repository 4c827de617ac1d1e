"""Synthetic video-audio-text streams, augmentation and batch assembly.

Every stream (one "video") has a hidden concept and a style. Each modality
renders both deterministically, so clips of the same stream agree across
modalities up to independent noise:

* video: a moving cosine gradient blending a concept colour and a style
  colour, travelling in a concept-specific direction;
* audio: a concept tone plus a style tone (both periodic in the segment);
* text: one of several concept-specific id trigrams and a style word amid
  filler ids.

Each clip also draws random phases for the gradient and both tones
(``phase_jitter`` of a full period), a nuisance the model must learn to
ignore.

A fraction of streams carries no text at all, mimicking clips from a
text-free source mixed into the same batches.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .numerics import Rng
from .tokenizers import TEXT_MAX_LEN

SYN_MAGIC = b"VATTSYN1"


@dataclass(frozen=True)
class SyntheticSpec:
    concepts: int = 8
    styles: int = 8
    frames: int = 8
    height: int = 32
    width: int = 32
    wave_len: int = 1024
    segment: int = 128
    vocab: int = 512
    noise_video: float = 0.1
    noise_audio: float = 0.1
    noise_text: float = 0.1
    stream_length: int = 8
    clip_seconds: float = 1.0
    text_absent_fraction: float = 0.25
    text_gap_fraction: float = 0.0
    phase_jitter: float = 1.0
    paraphrases: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.concepts < 2:
            raise ValueError("need at least two concepts")
        if min(self.noise_video, self.noise_audio, self.noise_text, self.phase_jitter) < 0:
            raise ValueError("noise levels must be non-negative")
        if self.paraphrases < 1:
            raise ValueError("need at least one phrasing per concept")
        if self.vocab < 1 + 3 * self.concepts * self.paraphrases + self.styles + 8:
            raise ValueError(f"vocab {self.vocab} too small for {self.concepts} concepts")


@dataclass
class ClipSample:
    video: np.ndarray
    waveform: np.ndarray
    text: np.ndarray | None
    timestamp: float
    concept: int
    style: int = 0
    stream: int = 0

    @property
    def has_text(self) -> bool:
        return self.text is not None


@dataclass
class TripletBatch:
    video: np.ndarray            # (B, T, H, W, 3)
    audio: np.ndarray            # (B, L)
    text_ids: np.ndarray         # (B, P, max_len)
    text_lengths: np.ndarray     # (B, P)
    positive_mask: np.ndarray    # (B, P)
    text_present: np.ndarray     # (B,)
    timestamps: np.ndarray       # (B,)
    streams: np.ndarray          # (B,)
    concepts: np.ndarray         # (B,) hidden ground truth, tests only
    styles: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    @property
    def size(self) -> int:
        return self.video.shape[0]


class SyntheticWorld:
    """Per-(concept, style) patterns for all modalities; ``video``/``audio`` hold the zero-phase templates."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        rng = Rng(spec.seed, "world")
        C, S = spec.concepts, spec.styles
        self.concept_rgb = np.array([colorsys.hsv_to_rgb(c / C, 0.9, 1.0) for c in range(C)])
        self.style_rgb = np.array([colorsys.hsv_to_rgb((s + 0.5) / S, 0.5, 0.35) for s in range(S)])
        self.angles = 2 * np.pi * (np.arange(C) / C) + rng.derive("angle").uniform(0, 0.2, C)
        self.freq = 1.0 + (np.arange(S) % 3) * 0.5
        self.video = np.stack([np.stack([self.video_pattern(c, s) for s in range(S)]) for c in range(C)])
        self.audio = np.stack([np.stack([self.audio_pattern(c, s) for s in range(S)]) for c in range(C)])
        # ids: 0 pad | concept trigrams (P phrasings each) | style words | filler
        P = spec.paraphrases
        self.concept_words = 1 + np.arange(3 * C * P).reshape(C, P, 3)
        self.style_words = 1 + 3 * C * P + np.arange(S)
        self.filler_lo = 1 + 3 * C * P + S

    def video_pattern(self, c: int, s: int, phase: float = 0.0) -> np.ndarray:
        spec = self.spec
        T, H, W = spec.frames, spec.height, spec.width
        t = np.arange(T)[:, None, None]
        y = np.arange(H)[None, :, None] / H
        x = np.arange(W)[None, None, :] / W
        ramp = np.cos(self.angles[c]) * x + np.sin(self.angles[c]) * y
        g = (0.5 + 0.5 * np.cos(2 * np.pi * (1.5 * ramp - self.freq[s] * t / T) + phase))[..., None]
        return (2 * (g * self.concept_rgb[c] + (1 - g) * self.style_rgb[s]) - 1).astype(np.float32)

    def audio_pattern(self, c: int, s: int, phases: tuple[float, float] = (0.0, 0.7)) -> np.ndarray:
        n = np.arange(self.spec.wave_len) / self.spec.segment
        C = self.spec.concepts
        return (0.5 * np.sin(2 * np.pi * (c + 1) * n + phases[0])
                + 0.3 * np.sin(2 * np.pi * (C + 1 + s) * n + phases[1])).astype(np.float32)

    def text(self, concept: int, style: int, rng: Rng) -> np.ndarray:
        spec = self.spec
        length = int(rng.integers(6, TEXT_MAX_LEN + 1))
        ids = rng.integers(self.filler_lo, spec.vocab, length)
        start = int(rng.integers(0, length - 3))
        phrasing = int(rng.integers(0, spec.paraphrases)) if spec.paraphrases > 1 else 0
        ids[start:start + 3] = self.concept_words[concept, phrasing]
        spots = [i for i in range(length) if not start <= i < start + 3]
        ids[spots[int(rng.integers(0, len(spots)))]] = self.style_words[style]
        if spec.noise_text > 0:
            flip = rng.uniform(size=length) < spec.noise_text
            ids[flip] = rng.integers(self.filler_lo, spec.vocab, int(flip.sum()))
        return ids.astype(np.int64)

    def render(self, concept: int, style: int, rng: Rng, timestamp: float = 0.0,
               has_text: bool = True, stream: int = 0) -> ClipSample:
        spec = self.spec
        if spec.phase_jitter > 0:
            ph = rng.derive("phase").uniform(0, 2 * np.pi * spec.phase_jitter, 3)
            video = self.video_pattern(concept, style, ph[0])
            audio = self.audio_pattern(concept, style, (ph[1], 0.7 + ph[2]))
        else:
            video = self.video[concept, style]
            audio = self.audio[concept, style]
        if spec.noise_video > 0:
            video = video + spec.noise_video * rng.normal(size=video.shape)
        if spec.noise_audio > 0:
            audio = audio + spec.noise_audio * rng.normal(size=audio.shape)
        text = self.text(concept, style, rng) if has_text else None
        return ClipSample(np.clip(video, -1, 1).astype(np.float32),
                          np.clip(audio, -1, 1).astype(np.float32),
                          text, timestamp, concept, style, stream)


def generate_stream(spec: SyntheticSpec, rng: Rng, world: SyntheticWorld | None = None,
                    stream_id: int = 0, concept: int | None = None, style: int | None = None) -> list[ClipSample]:
    """One stream of ``stream_length`` consecutive clips in time order."""
    world = world or SyntheticWorld(spec)
    c = int(rng.integers(0, spec.concepts)) if concept is None else concept
    s = int(rng.integers(0, spec.styles)) if style is None else style
    textless = rng.uniform() < spec.text_absent_fraction
    clips = []
    for k in range(spec.stream_length):
        ts = k * spec.clip_seconds
        has_text = not textless and (spec.text_gap_fraction == 0 or rng.uniform() >= spec.text_gap_fraction)
        clips.append(world.render(c, s, rng.derive("clip", k), ts, has_text, stream_id))
    if not textless and not any(cl.has_text for cl in clips):
        clips[0].text = world.text(c, s, rng.derive("fallback"))
    return clips


def nearest_text_clips(stream: Sequence[ClipSample], clip_index: int, k: int = 5) -> list[int]:
    """Indices of the ``k`` text-bearing clips closest in time; ties go earlier."""
    t0 = stream[clip_index].timestamp
    cand = [i for i, c in enumerate(stream) if c.has_text]
    if not cand:
        raise ValueError("stream contains no text-bearing clip")
    cand.sort(key=lambda i: (abs(stream[i].timestamp - t0), stream[i].timestamp))
    return cand[:k]


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    area: tuple[float, float] = (0.08, 1.0)
    aspect: tuple[float, float] = (0.5, 2.0)
    flip_p: float = 0.5
    brightness: float = 32 / 255
    saturation: float = 0.4
    contrast: float = 0.4
    hue: float = 0.2
    out_size: tuple[int, int] | None = None


def sample_crop(H: int, W: int, rng: Rng, area=(0.08, 1.0), aspect=(0.5, 2.0),
                attempts: int = 10) -> tuple[int, int, int, int]:
    """Random ``(top, left, height, width)``; full frame when nothing fits."""
    for _ in range(attempts):
        target = rng.uniform(*area) * H * W
        ar = float(np.exp(rng.uniform(np.log(aspect[0]), np.log(aspect[1]))))
        w = int(round(np.sqrt(target * ar)))
        h = int(round(np.sqrt(target / ar)))
        if 1 <= h <= H and 1 <= w <= W:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    return 0, 0, H, W


def resize_bilinear(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``(T, h, w, C)`` with half-pixel centres."""
    T, h, w, C = frames.shape
    if (h, w) == (out_h, out_w):
        return frames.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(frames.dtype)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = frames[:, y0] * (1 - fy)[None, :, None, None] + frames[:, y1] * fy[None, :, None, None]
    return top[:, :, x0] * (1 - fx)[None, None, :, None] + top[:, :, x1] * fx[None, None, :, None]


def augment_video(clip: np.ndarray, rng: Rng, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Temporally consistent crop/resize, flip and colour jitter on a [-1, 1] clip."""
    T, H, W, _ = clip.shape
    out_h, out_w = cfg.out_size or (H, W)
    if not cfg.enabled:
        return resize_bilinear(clip, out_h, out_w)
    top, left, h, w = sample_crop(H, W, rng, cfg.area, cfg.aspect)
    x = resize_bilinear(clip[:, top:top + h, left:left + w], out_h, out_w)
    if rng.uniform() < cfg.flip_p:
        x = x[:, :, ::-1]
    x = np.clip((x + 1) / 2, 0, 1)
    if cfg.brightness:
        x = np.clip(x + rng.uniform(-cfg.brightness, cfg.brightness), 0, 1)
    if cfg.saturation or cfg.hue:
        hsv = rgb_to_hsv(x)
        if cfg.saturation:
            hsv[..., 1] = np.clip(hsv[..., 1] * rng.uniform(1 - cfg.saturation, 1 + cfg.saturation), 0, 1)
        x = hsv_to_rgb(hsv)
    if cfg.contrast:
        m = x.mean(axis=(0, 1, 2), keepdims=True)
        x = np.clip((x - m) * rng.uniform(1 - cfg.contrast, 1 + cfg.contrast) + m, 0, 1)
    if cfg.hue:
        hsv = rgb_to_hsv(x)
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-cfg.hue, cfg.hue)) % 1.0
        x = hsv_to_rgb(hsv)
    return np.clip(2 * x - 1, -1, 1).astype(clip.dtype)


class SyntheticCorpus:
    """A fixed pool of streams from which training batches are drawn."""

    def __init__(self, spec: SyntheticSpec, n_streams: int, rng: Rng):
        self.spec = spec
        self.world = SyntheticWorld(spec)
        self.streams = [generate_stream(spec, rng.derive("stream", i), self.world, i)
                        for i in range(n_streams)]

    def __len__(self) -> int:
        return len(self.streams)

    def batch(self, size: int, rng: Rng, positives: int = 5, augment: AugmentConfig | None = None,
              picks: Sequence[tuple[int, int]] | None = None) -> TripletBatch:
        """Assemble a batch from distinct streams.

        ``picks`` fixes ``(stream, clip)`` pairs; otherwise both are sampled.
        """
        if picks is None:
            if size > len(self.streams):
                raise ValueError(f"batch of {size} needs {size} distinct streams, have {len(self.streams)}")
            sids = rng.gen.choice(len(self.streams), size, replace=False)
            cids = rng.integers(0, self.spec.stream_length, size)
            picks = list(zip(sids.tolist(), cids.tolist()))
        return assemble_batch([self.streams[s] for s, _ in picks], [c for _, c in picks],
                              rng, positives, augment)


def assemble_batch(streams: Sequence[Sequence[ClipSample]], clip_indices: Sequence[int], rng: Rng,
                   positives: int = 5, augment: AugmentConfig | None = None) -> TripletBatch:
    B = len(streams)
    sid = [s[i].stream for s, i in zip(streams, clip_indices)]
    if len(set(sid)) != B:
        raise ValueError("batch samples must come from distinct stream locations")
    ids = np.zeros((B, positives, TEXT_MAX_LEN), np.int64)
    lengths = np.zeros((B, positives), np.int64)
    pmask = np.zeros((B, positives), bool)
    present = np.zeros(B, bool)
    videos, audios = [], []
    for b, (stream, ci) in enumerate(zip(streams, clip_indices)):
        clip = stream[ci]
        v = clip.video
        if augment is not None:
            v = augment_video(v, rng.derive("aug", b), augment)
        videos.append(v)
        audios.append(clip.waveform)
        if any(c.has_text for c in stream):
            present[b] = True
            for p, j in enumerate(nearest_text_clips(stream, ci, positives)):
                t = stream[j].text[:TEXT_MAX_LEN]
                ids[b, p, : t.size] = t
                lengths[b, p] = t.size
                pmask[b, p] = True
    return TripletBatch(
        np.stack(videos), np.stack(audios), ids, lengths, pmask, present,
        np.array([s[i].timestamp for s, i in zip(streams, clip_indices)]),
        np.array(sid), np.array([s[i].concept for s, i in zip(streams, clip_indices)]),
        np.array([s[i].style for s, i in zip(streams, clip_indices)]),
    )


# ------------------------------------------------------------- fixture export


def write_streams(path: str | Path | BinaryIO, clips: Sequence[ClipSample]) -> None:
    """Write clips to a ``VATTSYN1`` record file (all fields little-endian).

    Header: magic, u32 clip count, u32 T, H, W, u32 waveform length,
    u32 max text length. Per clip: f64 timestamp, i32 stream, i32 concept,
    i32 style, u32 text length (0 = no text), i32 ids[max_len],
    f32 video[T*H*W*3], f32 waveform[L].
    """
    if not clips:
        raise ValueError("nothing to write")
    T, H, W, _ = clips[0].video.shape
    L = clips[0].waveform.size
    own = not hasattr(path, "write")
    fh = open(path, "wb") if own else path
    try:
        fh.write(SYN_MAGIC)
        fh.write(struct.pack("<6I", len(clips), T, H, W, L, TEXT_MAX_LEN))
        for c in clips:
            n = 0 if c.text is None else min(c.text.size, TEXT_MAX_LEN)
            ids = np.zeros(TEXT_MAX_LEN, "<i4")
            if n:
                ids[:n] = c.text[:n]
            fh.write(struct.pack("<diiiI", c.timestamp, c.stream, c.concept, c.style, n))
            fh.write(ids.tobytes())
            fh.write(np.ascontiguousarray(c.video, "<f4").tobytes())
            fh.write(np.ascontiguousarray(c.waveform, "<f4").tobytes())
    finally:
        if own:
            fh.close()


def read_streams(path: str | Path) -> list[ClipSample]:
    raw = Path(path).read_bytes()
    if raw[:8] != SYN_MAGIC:
        raise ValueError(f"{path}: not a VATTSYN1 file")
    n, T, H, W, L, M = struct.unpack_from("<6I", raw, 8)
    off = 8 + 24
    vsz = T * H * W * 3
    out = []
    for _ in range(n):
        ts, stream, concept, style, tl = struct.unpack_from("<diiiI", raw, off)
        off += struct.calcsize("<diiiI")
        ids = np.frombuffer(raw, "<i4", M, off).astype(np.int64)
        off += 4 * M
        video = np.frombuffer(raw, "<f4", vsz, off).reshape(T, H, W, 3).copy()
        off += 4 * vsz
        wave = np.frombuffer(raw, "<f4", L, off).copy()
        off += 4 * L
        out.append(ClipSample(video, wave, ids[:tl].copy() if tl else None, ts, concept, style, stream))
    return out
