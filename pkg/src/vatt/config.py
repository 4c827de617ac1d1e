"""Flat ``key=value`` run configuration with dotted section names."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentConfig, SyntheticSpec
from .encoder import PRESETS, preset
from .losses import LossConfig
from .model import HeadsConfig, ModelConfig, ShareMode
from .training import Schedule, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the line and field."""


# value types are inferred from the defaults; tuples are comma-separated ints
DEFAULTS: dict[str, object] = {
    "seed": None,
    "out": "runs/default",
    "model.preset": "tiny",
    "model.video": "",
    "model.audio": "",
    "model.text": "",
    "model.share": "specific",
    "model.d_va": 512,
    "model.d_vt": 256,
    "model.patch": (4, 16, 16),
    "model.video_buckets": (2, 2, 2),
    "model.audio_segment": 128,
    "model.audio_buckets": 8,
    "model.vocab": 512,
    "data.concepts": 8,
    "data.styles": 8,
    "data.frames": 8,
    "data.height": 32,
    "data.width": 32,
    "data.wave_len": 1024,
    "data.noise_video": 0.1,
    "data.noise_audio": 0.1,
    "data.noise_text": 0.1,
    "data.stream_length": 8,
    "data.text_absent_fraction": 0.25,
    "data.text_gap_fraction": 0.0,
    "data.phase_jitter": 1.0,
    "data.paraphrases": 4,
    "data.train_streams": 512,
    "data.heldout_streams": 512,
    "data.augment": False,
    "data.export_streams": 4,
    "train.steps": 2000,
    "train.batch": 32,
    "train.drop_rate": 0.5,
    "train.audio_drop_rate": -1.0,  # negative: follow train.drop_rate
    "train.positives": 5,
    "train.log_every": 1,
    "train.checkpoint_every": 500,
    "loss.temperature": 0.07,
    "loss.weight": 1.0,
    "loss.bidirectional": True,
    "schedule.base_lr": 1e-3,
    "schedule.final_lr": 5e-4,
    "schedule.warmup_steps": 100,
    "schedule.total_steps": 0,
    "eval.pool": 100,
    "eval.clips_per_video": 4,
    "probe.steps": 1000,
    "probe.components": 128,
    "probe.rate": 0.1,
    "probe.lr": 5e-4,
    "flops.geometry": "mbs",
    "flops.drop_rates": "0,0.25,0.5,0.75",
}


def _coerce(key: str, raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(","))
        if default is None:
            return int(raw)
        return raw
    except ValueError:
        kind = "integer" if default is None else type(default).__name__
        raise ConfigError(f"{where}: field '{key}' expects {kind}, got {raw!r}") from None


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=lambda: dict(DEFAULTS))
    source: str = "<defaults>"

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> "RunConfig":
        values = dict(DEFAULTS)
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            where = f"{source}:{lineno}"
            if "=" not in line:
                raise ConfigError(f"{where}: expected key=value, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{where}: unknown field '{key}'")
            values[key] = _coerce(key, raw, DEFAULTS[key], where)
        cfg = cls(values, source)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"{path}: config file not found")
        return cls.parse(p.read_text(), str(path))

    def override(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"<flag>: unknown field '{key}'")
        self.values[key] = value
        self.validate()

    def validate(self) -> None:
        v = self.values
        for k in ("model.preset", "model.video", "model.audio", "model.text"):
            if v[k] and v[k].lower() not in PRESETS:
                raise ConfigError(f"{self.source}: field '{k}' names unknown preset {v[k]!r}")
        if v["model.share"] not in ("specific", "agnostic"):
            raise ConfigError(f"{self.source}: field 'model.share' must be specific or agnostic")
        if not 0 <= v["train.drop_rate"] < 1:
            raise ConfigError(f"{self.source}: field 'train.drop_rate' must lie in [0, 1)")
        if not v["train.audio_drop_rate"] < 1:
            raise ConfigError(f"{self.source}: field 'train.audio_drop_rate' must lie below 1")
        if v["loss.temperature"] <= 0:
            raise ConfigError(f"{self.source}: field 'loss.temperature' must be positive")
        if v["train.batch"] < 2:
            raise ConfigError(f"{self.source}: field 'train.batch' must be at least 2")
        try:
            self.spec()
            self.schedule()
        except ValueError as e:
            raise ConfigError(f"{self.source}: {e}") from None

    def require_seed(self) -> int:
        if self.values["seed"] is None:
            raise ConfigError(f"{self.source}: field 'seed' is mandatory (set seed=N or pass --seed)")
        return int(self.values["seed"])

    # ------------------------------------------------------------ builders

    def model_config(self) -> ModelConfig:
        v = self.values
        base = v["model.preset"]
        heads = HeadsConfig(v["model.d_va"], v["model.d_vt"])
        common = dict(heads=heads, patch=v["model.patch"], video_buckets=v["model.video_buckets"],
                      audio_segment=v["model.audio_segment"], audio_buckets=v["model.audio_buckets"],
                      vocab=v["model.vocab"])
        if v["model.share"] == "agnostic":
            s = preset(base, True)
            return ModelConfig(ShareMode.AGNOSTIC, s, s, s, shared=s, **common)
        pick = lambda k: v[k] or base
        return ModelConfig(ShareMode.SPECIFIC, preset(pick("model.video")), preset(pick("model.audio")),
                           preset(pick("model.text"), True), **common)

    def spec(self, heldout: bool = False) -> SyntheticSpec:
        v = self.values
        return SyntheticSpec(
            concepts=v["data.concepts"], styles=v["data.styles"], frames=v["data.frames"],
            height=v["data.height"], width=v["data.width"], wave_len=v["data.wave_len"],
            segment=v["model.audio_segment"], vocab=v["model.vocab"],
            noise_video=v["data.noise_video"], noise_audio=v["data.noise_audio"],
            noise_text=v["data.noise_text"], stream_length=v["data.stream_length"],
            text_absent_fraction=0.0 if heldout else v["data.text_absent_fraction"],
            text_gap_fraction=v["data.text_gap_fraction"],
            phase_jitter=v["data.phase_jitter"], paraphrases=v["data.paraphrases"], seed=int(v["seed"] or 0),
        )

    def schedule(self) -> Schedule:
        v = self.values
        total = v["schedule.total_steps"] or v["train.steps"]
        return Schedule(v["schedule.base_lr"], v["schedule.final_lr"],
                        min(v["schedule.warmup_steps"], total), total)

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            steps=v["train.steps"], batch=v["train.batch"], drop_rate=v["train.drop_rate"],
            audio_drop_rate=v["train.audio_drop_rate"] if v["train.audio_drop_rate"] >= 0 else None,
            positives=v["train.positives"],
            augment=AugmentConfig() if v["data.augment"] else None,
            loss=LossConfig(v["loss.temperature"], v["loss.weight"], v["loss.bidirectional"]),
            schedule=self.schedule(), seed=int(v["seed"] or 0), log_every=v["train.log_every"],
            checkpoint_every=v["train.checkpoint_every"],
        )

    def drop_rates(self) -> list[float]:
        return parse_rates(self.values["flops.drop_rates"])

    def dump(self) -> str:
        out = []
        for k, val in self.values.items():
            if isinstance(val, tuple):
                val = ",".join(map(str, val))
            elif isinstance(val, bool):
                val = str(val).lower()
            out.append(f"{k}={'' if val is None else val}")
        return "\n".join(out) + "\n"


def parse_rates(text: str) -> list[float]:
    try:
        rates = [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"drop rates must be comma-separated numbers, got {text!r}") from None
    bad = [r for r in rates if not 0 <= r < 1]
    if bad or not rates:
        raise ConfigError(f"invalid drop rate(s) {bad or text!r}; each must lie in [0, 1)")
    return rates


def build_hash() -> str:
    """Digest of the package sources, identifying the build that ran."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]
