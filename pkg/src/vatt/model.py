"""Full VATT model: tokenizers, one or three encoders, projection heads."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .data import TripletBatch
from .encoder import Encoder, EncoderConfig, encoder_param_count, preset
from .heads import CommonSpaceEmbedding, ProjectionHeads, project
from .losses import BatchPairing
from .numerics import DimensionError, Rng, Tensor, concat, take
from .tokenizers import TEXT_MAX_LEN, AudioTokenizer, TextTokenizer, VideoTokenizer, drop_token

MODALITIES = ("video", "audio", "text")


class ShareMode(str, Enum):
    SPECIFIC = "specific"
    AGNOSTIC = "agnostic"


@dataclass(frozen=True)
class HeadsConfig:
    d_va: int = 512
    d_vt: int = 256


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a full model.

    In agnostic mode ``shared`` names the single encoder and the three
    per-modality encoder fields are ignored.
    """

    share_mode: ShareMode = ShareMode.SPECIFIC
    video: EncoderConfig = field(default_factory=lambda: preset("tiny"))
    audio: EncoderConfig = field(default_factory=lambda: preset("tiny"))
    text: EncoderConfig = field(default_factory=lambda: preset("tiny", True))
    shared: EncoderConfig | None = None
    heads: HeadsConfig = HeadsConfig()
    patch: tuple[int, int, int] = (4, 16, 16)
    video_buckets: tuple[int, int, int] = (8, 14, 14)
    audio_segment: int = 128
    audio_buckets: int = 1200
    vocab: int = 2 ** 16
    text_max_len: int = TEXT_MAX_LEN

    def encoder_for(self, modality: str) -> EncoderConfig:
        if self.share_mode == ShareMode.AGNOSTIC:
            if self.shared is None:
                raise ValueError("agnostic mode needs a shared encoder config")
            return self.shared
        return getattr(self, modality)

    def widths(self) -> dict[str, int]:
        return {m: self.encoder_for(m).hidden for m in MODALITIES}


def specific(video: str, audio: str, text: str, **kw) -> ModelConfig:
    return ModelConfig(ShareMode.SPECIFIC, preset(video), preset(audio), preset(text, True), **kw)


def agnostic(name: str, **kw) -> ModelConfig:
    cfg = preset(name, True)
    return ModelConfig(ShareMode.AGNOSTIC, cfg, cfg, cfg, shared=cfg, **kw)


class VATTModel:
    """Tokenizers are always per-modality; encoders may be one shared object."""

    def __init__(self, cfg: ModelConfig, rng: Rng | None = None, dtype=np.float32):
        rng = rng or Rng(0, "model")
        self.cfg = cfg
        self.dtype = dtype
        w = cfg.widths()
        self.video_tok = VideoTokenizer(w["video"], cfg.patch, cfg.video_buckets, rng.derive("video_tok"), dtype)
        self.audio_tok = AudioTokenizer(w["audio"], cfg.audio_segment, cfg.audio_buckets, rng.derive("audio_tok"), dtype)
        self.text_tok = TextTokenizer(w["text"], cfg.vocab, cfg.text_max_len, rng.derive("text_tok"), dtype)
        if cfg.share_mode == ShareMode.AGNOSTIC:
            shared = cfg.encoder_for("video")
            if not shared.use_relative_bias_first_layer:
                shared = shared.with_relative_bias(True)
            if shared.max_len < cfg.text_max_len:
                raise ValueError("relative-bias range shorter than text length")
            enc = Encoder(shared, rng.derive("enc_shared"), dtype)
            self.encoders = {m: enc for m in MODALITIES}
        else:
            tcfg = cfg.text if cfg.text.use_relative_bias_first_layer else cfg.text.with_relative_bias(True)
            self.encoders = {
                "video": Encoder(cfg.video, rng.derive("enc_video"), dtype),
                "audio": Encoder(cfg.audio, rng.derive("enc_audio"), dtype),
                "text": Encoder(tcfg, rng.derive("enc_text"), dtype),
            }
        self.heads = ProjectionHeads(w["video"], w["audio"], w["text"], cfg.heads.d_va, cfg.heads.d_vt,
                                     rng.derive("heads"), dtype)

    @property
    def shared(self) -> bool:
        return self.encoders["video"] is self.encoders["text"]

    def unique_encoders(self) -> dict[str, Encoder]:
        if self.shared:
            return {"shared": self.encoders["video"]}
        return dict(self.encoders)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for tag, tok in (("video_tok", self.video_tok), ("audio_tok", self.audio_tok), ("text_tok", self.text_tok)):
            out.update({f"{tag}.{k}": v for k, v in tok.params().items()})
        for tag, enc in self.unique_encoders().items():
            out.update({f"enc_{tag}.{k}": v for k, v in enc.params().items()})
        out.update({f"heads.{k}": v for k, v in self.heads.params().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"heads.{k}": v for k, v in self.heads.buffers().items()}

    def census(self) -> dict[str, int]:
        """Parameter counts per component; every weight object counted once."""
        seen: set[int] = set()
        out: dict[str, int] = {}

        def count(tensors) -> int:
            n = 0
            for t in tensors:
                if id(t) not in seen:
                    seen.add(id(t))
                    n += t.size
            return n

        for tag, tok in (("video_tok", self.video_tok), ("audio_tok", self.audio_tok), ("text_tok", self.text_tok)):
            out[tag] = count(tok.params().values())
        for m in MODALITIES:
            out[f"encoder_{m}"] = count(self.encoders[m].params().values())
        out["heads"] = count(self.heads.params().values())
        out["encoder_weight_sets"] = len({id(e) for e in self.encoders.values()})
        out["total"] = sum(t.size for t in {id(t): t for t in self.params().values()}.values())
        return out

    # ----------------------------------------------------------------- forward

    def embed_video(self, video: np.ndarray, drop_rate: float = 0.0, rng: Rng | None = None):
        seq = self.video_tok(video)
        if drop_rate > 0:
            seq = drop_token(seq, drop_rate, rng.derive("drop", "video"))
        return self.encoders["video"](seq, relative_bias=False)[1]

    def embed_audio(self, audio: np.ndarray, drop_rate: float = 0.0, rng: Rng | None = None):
        seq = self.audio_tok(audio)
        if drop_rate > 0:
            seq = drop_token(seq, drop_rate, rng.derive("drop", "audio"))
        return self.encoders["audio"](seq, relative_bias=False)[1]

    def embed_text(self, ids: np.ndarray, lengths: np.ndarray):
        seq = self.text_tok(np.asarray(ids), np.asarray(lengths))
        return self.encoders["text"](seq, relative_bias=True)[1]

    def forward(self, batch: TripletBatch, drop_rate: float = 0.0, rng: Rng | None = None,
                mode: str = "train", with_text: bool = True,
                detach: frozenset[str] = frozenset(),
                audio_drop_rate: float | None = None) -> tuple[CommonSpaceEmbedding, BatchPairing]:
        """Embed a batch into both common spaces.

        DropToken applies to video and audio only; ``audio_drop_rate``
        overrides ``drop_rate`` for audio when given. The text tower runs just on
        valid positive slots of text-bearing samples; other slots of
        ``vt_text`` are constant zero rows. ``detach`` lists modality paths
        whose backbone output is cut from the gradient graph.
        """
        audio_rate = drop_rate if audio_drop_rate is None else audio_drop_rate
        if max(drop_rate, audio_rate) > 0 and rng is None:
            raise ValueError("DropToken needs an rng")
        zv = self.embed_video(batch.video, drop_rate, rng)
        za = self.embed_audio(batch.audio, audio_rate, rng)
        present = np.asarray(batch.text_present, bool)
        valid = np.asarray(batch.positive_mask, bool) & present[:, None]
        present = valid.any(axis=1)
        zt = None
        if with_text and valid.any():
            bi, pi = np.nonzero(valid)
            zt = self.embed_text(batch.text_ids[bi, pi], batch.text_lengths[bi, pi])
        if "video" in detach:
            zv = Tensor(zv.data)
        if "audio" in detach:
            za = Tensor(za.data)
        if zt is not None and "text" in detach:
            zt = Tensor(zt.data)
        emb = project(zv, za, zt, self.heads, mode)
        if zt is not None:
            B, P = valid.shape
            d = emb.vt_text.shape[-1]
            slot = np.zeros((B, P), np.int64)
            slot[valid] = 1 + np.arange(int(valid.sum()))
            table = concat([Tensor(np.zeros((1, d), emb.vt_text.dtype)), emb.vt_text], axis=0)
            emb.vt_text = take(table, slot)
        return emb, BatchPairing(present, valid)


def build_model(cfg: ModelConfig | ShareMode | str = ModelConfig(), heads_cfg: HeadsConfig | None = None,
                rng: Rng | None = None, dtype=np.float32, **kw) -> VATTModel:
    """Instantiate a model; ``cfg`` may also be a share mode with tiny presets."""
    if not isinstance(cfg, ModelConfig):
        mode = ShareMode(cfg)
        cfg = agnostic("tiny", **kw) if mode == ShareMode.AGNOSTIC else ModelConfig(**kw)
    if heads_cfg is not None:
        cfg = replace(cfg, heads=heads_cfg)
    if cfg.share_mode == ShareMode.AGNOSTIC:
        cfg.encoder_for("video")
    else:
        for m in MODALITIES:
            if getattr(cfg, m).hidden <= 0:
                raise DimensionError(f"{m} encoder width must be positive")
    return VATTModel(cfg, rng, dtype)


# ------------------------------------------------------------ analytic census


def video_tokenizer_params(d: int, patch=(4, 16, 16), buckets=(8, 14, 14)) -> int:
    t, h, w = patch
    return t * h * w * 3 * d + sum(buckets) * d


def audio_tokenizer_params(d: int, segment: int = 128, buckets: int = 1200) -> int:
    return segment * d + buckets * d


def heads_params(d_video: int, d_audio: int, d_text: int, d_va: int = 512, d_vt: int = 256) -> int:
    lin = lambda a, b: a * b + b
    bn = lambda n: 2 * n
    return (lin(d_video, d_va) + bn(d_va) + lin(d_va, d_va) + bn(d_va)
            + lin(d_audio, d_va) + bn(d_va) + lin(d_va, d_vt) + bn(d_vt)
            + lin(d_text, d_vt) + bn(d_vt))


def backbone_with_video_tokenizer(name: str) -> int:
    """Encoder preset plus its video tokenizer (projection and 8+14+14 rows)."""
    cfg = preset(name)
    return encoder_param_count(cfg) + video_tokenizer_params(cfg.hidden)


def analytic_census(cfg: ModelConfig, include_text_vocab: bool = False) -> dict[str, int]:
    """Closed-form census matching :meth:`VATTModel.census` without allocating."""
    w = cfg.widths()
    if cfg.share_mode == ShareMode.AGNOSTIC:
        s = cfg.encoder_for("video")
        encoders = {"shared": encoder_param_count(s if s.use_relative_bias_first_layer else s.with_relative_bias(True))}
    else:
        t = cfg.text if cfg.text.use_relative_bias_first_layer else cfg.text.with_relative_bias(True)
        encoders = {"video": encoder_param_count(cfg.video), "audio": encoder_param_count(cfg.audio),
                    "text": encoder_param_count(t)}
    out = {
        "video_tok": video_tokenizer_params(w["video"], cfg.patch, cfg.video_buckets),
        "audio_tok": audio_tokenizer_params(w["audio"], cfg.audio_segment, cfg.audio_buckets),
        "text_tok": cfg.vocab * w["text"],
        "heads": heads_params(w["video"], w["audio"], w["text"], cfg.heads.d_va, cfg.heads.d_vt),
        "encoders": sum(encoders.values()),
        "encoder_weight_sets": len(encoders),
    }
    out["total"] = out["video_tok"] + out["audio_tok"] + out["text_tok"] + out["heads"] + out["encoders"]
    if not include_text_vocab:
        out["total_without_text_vocab"] = out["total"] - out["text_tok"]
    return out
