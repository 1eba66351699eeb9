"""Parameter container holding every learnable piece of the framework."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn

from .encoder import EncoderConfig, SensorTokenBank, TextEncoder, TouchEncoder, VisionEncoder
from .masked import DecoderConfig, MaskedDecoder
from .match import MatchHead
from .tokenizer import PatchConfig, PatchEmbed


class TactileModel(nn.Module):
    def __init__(self, patch: PatchConfig, enc: EncoderConfig, dec: DecoderConfig,
                 sensors: Sequence[str], seed: int = 0):
        super().__init__()
        if patch.d != enc.d:
            raise ValueError(f"patch width {patch.d} != encoder width {enc.d}")
        torch.manual_seed(seed)
        self.patch_cfg = patch
        self.enc_cfg = enc
        self.dec_cfg = dec
        self.sensor_names = list(sensors)
        self.patch_embed = PatchEmbed(patch)
        self.sensor_bank = SensorTokenBank(self.sensor_names, enc.n_sensor_tokens, enc.d)
        self.touch = TouchEncoder(enc)
        self.decoder = MaskedDecoder(patch, enc.d, dec)
        self.vision = VisionEncoder(patch, enc)
        self.text = TextEncoder(enc, seed=seed)
        self.match_head = MatchHead(enc.embed_dim)

    def embed_touch(self, media: torch.Tensor, sensors: Sequence[str],
                    use_universal: Sequence[bool]) -> torch.Tensor:
        """(B, F, H, W, 3) media -> (B, embed_dim) unit vectors."""
        z = self.patch_embed(media)
        s = self.sensor_bank.tokens(sensors, use_universal)
        pooled, _ = self.touch(z, s)
        return pooled

    def embed_vision(self, images: torch.Tensor) -> torch.Tensor:
        return self.vision(images)

    def embed_text(self, texts: Sequence[str]) -> torch.Tensor:
        return self.text(texts)

    def param_groups(self, stage: int, weight_decay: float) -> list[dict]:
        """Trainable parameters for a stage; the text encoder is never included."""
        if stage == 1:
            mods = {"patch_embed": self.patch_embed, "sensor_bank": self.sensor_bank,
                    "touch": self.touch, "decoder": self.decoder}
        else:
            mods = {"patch_embed": self.patch_embed, "sensor_bank": self.sensor_bank,
                    "touch": self.touch, "vision": self.vision, "match_head": self.match_head}
        decay, no_decay = [], []
        for prefix, mod in mods.items():
            for name, p in mod.named_parameters():
                if not p.requires_grad:
                    continue
                (decay if p.ndim == 2 and name.endswith("weight") else no_decay).append(p)
        return [{"params": decay, "weight_decay": weight_decay},
                {"params": no_decay, "weight_decay": 0.0}]
