"""Backbone + attentive fusion assembled into one trainable network."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from . import backbone as bb
from .afpf import Afpf, AfpfConfig
from .errors import ContractError


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = bb.VGG19_STYLE
    n_landmarks: int = 19
    network_height: int = 800
    network_width: int = 640
    fused_channels: int = 256
    lateral_channels: int = 128
    attn_hidden: int = 64
    seed: int = 0
    weights_source: Path | None = None

    def __post_init__(self):
        spec = bb.spec_for(self.backbone)
        stride = max(spec.max_stride, 32)  # stride-4 pyramid needs /8 pooling
        if self.network_height % stride or self.network_width % stride:
            raise ContractError(
                f"network extent {(self.network_height, self.network_width)} must be a multiple of {stride}"
            )

    @property
    def input_hw(self) -> tuple[int, int]:
        return (self.network_height, self.network_width)


class LandmarkNet(nn.Module):
    """Maps a grayscale image batch to per-landmark heat and offset maps."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.spec = bb.spec_for(cfg.backbone, cfg.weights_source)
        if cfg.weights_source is not None:
            self.backbone, self.backbone_digest = bb.load_weights(self.spec, cfg.weights_source)
        else:
            self.backbone = bb.build_backbone(self.spec, seed=cfg.seed)
            self.backbone_digest = bb.state_digest(self.backbone)
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed + 1)
            self.afpf = Afpf(
                AfpfConfig(
                    n_landmarks=cfg.n_landmarks,
                    fused_channels=cfg.fused_channels,
                    lateral_channels=cfg.lateral_channels,
                    attn_hidden=cfg.attn_hidden,
                ),
                tap_channels=self.spec.channels_per_tap,
                tap_strides=self.spec.tap_strides,
                input_hw=cfg.input_hw,
            )

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        features = bb.extract_features(self.backbone, image, self.spec)
        return self.afpf(features.levels)
