"""Run configuration: one JSON-serializable view over every component's settings."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .align import AlignWeights
from .encoder import EncoderConfig
from .masked import DEFAULT_MASK_RATIO, DecoderConfig
from .synth import WorldSpec
from .tokenizer import PatchConfig

ABLATIONS = ("no_match", "no_text", "no_vision", "no_dynamic", "no_universal_tokens")


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    epochs: int = 5
    base_lr: float = 2e-4
    warmup_epochs: int = 1
    batch_size: int = 32
    mask_ratio: float = DEFAULT_MASK_RATIO
    alpha_tv: float = 1.0
    alpha_tl: float = 1.0
    alpha_vl: float = 0.2
    tau: float = 0.07
    match_weight: float = 0.1
    p_u_max: float = 0.75
    weight_decay: float = 0.05
    seed: int = 0
    alternation: str = "batch"  # "batch" | "epoch"
    unseen_sensors: tuple[str, ...] = ()
    no_match: bool = False
    no_text: bool = False
    no_vision: bool = False
    no_dynamic: bool = False
    no_universal_tokens: bool = False
    from_scratch: bool = False

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if not 0.0 <= self.p_u_max <= 1.0:
            raise ValueError("p_u_max must lie in [0, 1]")
        if self.match_weight < 0:
            raise ValueError("match weight must be non-negative")
        if self.alternation not in ("batch", "epoch"):
            raise ValueError("alternation must be 'batch' or 'epoch'")
        object.__setattr__(self, "unseen_sensors", tuple(self.unseen_sensors))

    def align_weights(self) -> AlignWeights:
        return AlignWeights(self.alpha_tv, self.alpha_tl, self.alpha_vl, self.tau)


@dataclass(frozen=True)
class EvalConfig:
    sensor_token_policy: str = "specific"  # for seen sensors; unseen always universal
    probe_iters: int = 500
    probe_lr: float = 0.1
    label: str = "material"
    media_kind: str = "video"


@dataclass
class RunConfig:
    patch: PatchConfig = field(default_factory=PatchConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    world: WorldSpec | None = None
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "patch": asdict(self.patch),
            "encoder": asdict(self.encoder),
            "decoder": asdict(self.decoder),
            "train": {**asdict(self.train), "unseen_sensors": list(self.train.unseen_sensors)},
            "eval": asdict(self.eval),
            "world": self.world.to_json() if self.world is not None else None,
        }
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        world = obj.get("world")
        return cls(
            patch=PatchConfig(**obj.get("patch", {})),
            encoder=EncoderConfig(**obj.get("encoder", {})),
            decoder=DecoderConfig(**obj.get("decoder", {})),
            train=TrainConfig(**obj.get("train", {})),
            eval=EvalConfig(**obj.get("eval", {})),
            world=WorldSpec.from_json(world) if world else None,
        )

    def architecture(self) -> dict:
        return {"patch": asdict(self.patch), "encoder": asdict(self.encoder),
                "decoder": asdict(self.decoder)}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, section: str, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        if not kw:
            return self
        return replace(self, **{section: replace(getattr(self, section), **kw)})


def load_run_config(path: str | Path | None) -> RunConfig:
    """Config file sections override built-in defaults; missing keys keep defaults.

    A file whose top level looks like a WorldSpec is accepted as the world section.
    """
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        obj: dict[str, Any] = json.load(fh)
    sections = {"patch", "encoder", "decoder", "train", "eval", "world"}
    if obj and not set(obj) & sections:
        world_keys = {f.name for f in fields(WorldSpec)}
        if set(obj) <= world_keys:
            obj = {"world": obj}
    cfg = RunConfig.from_json(obj)
    cfg.provenance = {"config_file": str(path)}
    return cfg
