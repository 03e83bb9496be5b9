"""Attentive fusion of multi-level features and per-landmark map prediction.

Every backbone level passes a 1x1 lateral projection, is upsampled to the
stride-4 grid, and the concatenation runs through a dilated conv block
(rates 1, 2, 5) to form the fused pyramid F of shape (c, h_F, w_F). A pooled
descriptor of F drives per-landmark channel attention: three softmax vectors
per landmark (one for the heat map, two for the offset maps) reweight F
before per-landmark 1x1 heads produce one heat channel and two offset
channels, which are upsampled to the input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F_nn
from torch import nn

from .errors import ContractError

_DILATIONS = (1, 2, 5)
_POOL = 8  # average-pooling window feeding the attention descriptor


@dataclass(frozen=True)
class AfpfConfig:
    n_landmarks: int
    fused_channels: int = 256  # c, width of the fused pyramid
    lateral_channels: int = 128
    attn_hidden: int = 64
    pyramid_stride: int = 4

    def __post_init__(self):
        if self.n_landmarks < 1:
            raise ContractError("n_landmarks must be positive")
        for name in ("fused_channels", "lateral_channels", "attn_hidden", "pyramid_stride"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")


@dataclass
class FeaturePyramid:
    """Fused feature volume at a fixed stride relative to the network input."""

    volume: torch.Tensor  # (c, h_F, w_F)
    stride: int


@dataclass
class PooledDescriptor:
    matrix: torch.Tensor  # (c, h_F * w_F / 64)


@dataclass
class AttentionWeights:
    a: torch.Tensor  # (n, 3, c); softmax-normalized along the channel axis


@dataclass
class PredictionMaps:
    """Per-landmark heat probabilities and offset maps at network resolution."""

    heat: torch.Tensor  # (n, h, w), values in (0, 1)
    offsets: torch.Tensor  # (n, 2, h, w), x then y, in units of the target radius

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            self.heat.detach().cpu().numpy(),
            self.offsets.detach().cpu().numpy(),
        )

    @classmethod
    def from_batch(cls, heat: torch.Tensor, offsets: torch.Tensor, index: int) -> "PredictionMaps":
        return cls(heat=heat[index], offsets=offsets[index])


def pooled_columns(input_hw: tuple[int, int], stride: int) -> int:
    """Column count of the pooled descriptor for a given network extent."""
    h, w = input_hw
    if h % stride or w % stride:
        raise ContractError(f"input extent {(h, w)} not divisible by pyramid stride {stride}")
    h_f, w_f = h // stride, w // stride
    if h_f % _POOL or w_f % _POOL:
        raise ContractError(
            f"pyramid extent {(h_f, w_f)} must be divisible by {_POOL} for descriptor pooling"
        )
    return (h_f // _POOL) * (w_f // _POOL)


class Afpf(nn.Module):
    """Fusion, attention, and prediction heads for a fixed network input extent."""

    def __init__(
        self,
        cfg: AfpfConfig,
        tap_channels: tuple[int, ...],
        tap_strides: tuple[int, ...],
        input_hw: tuple[int, int],
    ):
        super().__init__()
        if len(tap_channels) != len(tap_strides) or not tap_channels:
            raise ContractError("need one channel count per tap stride, at least one level")
        if any(s < cfg.pyramid_stride for s in tap_strides):
            raise ContractError("tap strides must be >= the pyramid stride")
        self.cfg = cfg
        self.tap_strides = tuple(tap_strides)
        self.input_hw = tuple(input_hw)
        self.columns = pooled_columns(input_hw, cfg.pyramid_stride)

        c, n = cfg.fused_channels, cfg.n_landmarks
        self.laterals = nn.ModuleList(
            nn.Conv2d(ch, cfg.lateral_channels, kernel_size=1) for ch in tap_channels
        )
        concat = cfg.lateral_channels * len(tap_channels)
        self.fuse = nn.ModuleList(
            [
                nn.Conv2d(concat, c, kernel_size=3, padding=_DILATIONS[0], dilation=_DILATIONS[0]),
                nn.Conv2d(c, c, kernel_size=3, padding=_DILATIONS[1], dilation=_DILATIONS[1]),
                nn.Conv2d(c, c, kernel_size=3, padding=_DILATIONS[2], dilation=_DILATIONS[2]),
            ]
        )
        # Biasless attention MLP; zero init would freeze attention (zero descriptor
        # gradients), so start from small random weights.
        self.attn_w1 = nn.Parameter(0.1 * torch.randn(n, 3, cfg.attn_hidden))
        self.attn_w2 = nn.Parameter(0.1 * torch.randn(n, cfg.attn_hidden, self.columns))
        self.head_weight = nn.Parameter(torch.randn(n, 3, c) / np.sqrt(c))
        self.head_bias = nn.Parameter(torch.zeros(n, 3))

    # -- fusion ------------------------------------------------------------

    def build_pyramid(self, levels: list[torch.Tensor]) -> torch.Tensor:
        """Lateral 1x1, upsample to the stride-4 grid, concatenate, dilated block."""
        if len(levels) != len(self.laterals):
            raise ContractError(f"expected {len(self.laterals)} feature levels, got {len(levels)}")
        h, w = self.input_hw
        grid = (h // self.cfg.pyramid_stride, w // self.cfg.pyramid_stride)
        resized = []
        for level, stride, conv in zip(levels, self.tap_strides, self.laterals):
            expected = (h // stride, w // stride)
            if tuple(level.shape[-2:]) != expected:
                raise ContractError(
                    f"level at stride {stride} has extent {tuple(level.shape[-2:])}, expected {expected}"
                )
            x = conv(level)
            if tuple(x.shape[-2:]) != grid:
                x = F_nn.interpolate(x, size=grid, mode="bilinear", align_corners=False)
            resized.append(x)
        x = torch.cat(resized, dim=1)
        x = F_nn.relu(self.fuse[0](x))
        x = F_nn.relu(self.fuse[1](x))
        return self.fuse[2](x)

    # -- attention ---------------------------------------------------------

    def pool_descriptor(self, pyramid: torch.Tensor) -> torch.Tensor:
        """8x8 average pooling then row-major flattening: (B, c, h_F, w_F) -> (B, c, m)."""
        h_f, w_f = pyramid.shape[-2:]
        if h_f % _POOL or w_f % _POOL:
            raise ContractError(f"pyramid extent {(h_f, w_f)} not divisible by {_POOL}")
        pooled = F_nn.avg_pool2d(pyramid, kernel_size=_POOL)
        return pooled.reshape(pyramid.shape[0], pyramid.shape[1], -1)

    def attention_weights(self, descriptor: torch.Tensor) -> torch.Tensor:
        """softmax(W1 tanh(W2 descriptor^T)) per landmark: (B, c, m) -> (B, n, 3, c)."""
        if descriptor.shape[-1] != self.columns:
            raise ContractError(
                f"descriptor has {descriptor.shape[-1]} columns, expected {self.columns}"
            )
        hidden = torch.tanh(torch.einsum("kdm,bcm->bkdc", self.attn_w2, descriptor))
        logits = torch.einsum("kjd,bkdc->bkjc", self.attn_w1, hidden)
        return torch.softmax(logits, dim=-1)

    def apply_attention(self, pyramid: torch.Tensor, attention: torch.Tensor, k: int) -> torch.Tensor:
        """Channel-wise reweighting scaled by the channel count: (B, c, h, w) -> (B, 3, c, h, w)."""
        n = self.cfg.n_landmarks
        if not 0 <= k < n:
            raise ContractError(f"landmark index {k} out of range [0, {n})")
        c = pyramid.shape[1]
        weights = c * attention[:, k]  # (B, 3, c)
        return weights[:, :, :, None, None] * pyramid[:, None]

    # -- heads ---------------------------------------------------------------

    def predict_maps(self, weighted: torch.Tensor, k: int) -> torch.Tensor:
        """Per-landmark 1x1 heads on the weighted pyramids: (B, 3, c, h_F, w_F) -> (B, 3, h, w).

        Channel 0 is logistic-squashed heat; channels 1-2 are raw x/y offsets.
        All three are bilinearly upsampled to the network input extent.
        """
        pre = torch.einsum("jc,bjchw->bjhw", self.head_weight[k], weighted)
        pre = pre + self.head_bias[k][None, :, None, None]
        maps = torch.cat([torch.sigmoid(pre[:, :1]), pre[:, 1:]], dim=1)
        return F_nn.interpolate(maps, size=self.input_hw, mode="bilinear", align_corners=False)

    def analyze(
        self, levels: list[torch.Tensor]
    ) -> tuple[FeaturePyramid, PooledDescriptor, AttentionWeights]:
        """Typed single-sample intermediates for inspection and debug dumps."""
        pyramid = self.build_pyramid(levels)
        if pyramid.shape[0] != 1:
            raise ContractError(f"analyze expects batch size 1, got {pyramid.shape[0]}")
        descriptor = self.pool_descriptor(pyramid)
        attention = self.attention_weights(descriptor)
        return (
            FeaturePyramid(volume=pyramid[0], stride=self.cfg.pyramid_stride),
            PooledDescriptor(matrix=descriptor[0]),
            AttentionWeights(a=attention[0]),
        )

    # -- forward -------------------------------------------------------------

    def forward(self, levels: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """Full module: returns heat (B, n, h, w) and offsets (B, n, 2, h, w).

        Attention and the 1x1 heads are both linear in the pyramid, so they are
        folded into a single einsum instead of materializing n*3 weighted
        copies of F.
        """
        pyramid = self.build_pyramid(levels)
        descriptor = self.pool_descriptor(pyramid)
        attention = self.attention_weights(descriptor)
        c = pyramid.shape[1]
        effective = c * attention * self.head_weight[None]  # (B, n, 3, c)
        pre = torch.einsum("bkjc,bchw->bkjhw", effective, pyramid)
        pre = pre + self.head_bias[None, :, :, None, None]
        heat = torch.sigmoid(pre[:, :, 0])
        offsets = pre[:, :, 1:]
        b, n = heat.shape[:2]
        heat = F_nn.interpolate(heat, size=self.input_hw, mode="bilinear", align_corners=False)
        offsets = F_nn.interpolate(
            offsets.reshape(b, n * 2, *offsets.shape[-2:]),
            size=self.input_hw,
            mode="bilinear",
            align_corners=False,
        ).reshape(b, n, 2, *self.input_hw)
        return heat, offsets


def dump_prediction_maps(
    directory: Path,
    maps: PredictionMaps,
    attention: torch.Tensor | None = None,
) -> None:
    """Debug dump: per-landmark heat maps as 8-bit PNGs plus an attention table."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    heat, _ = maps.numpy()
    for k in range(heat.shape[0]):
        img = np.clip(heat[k] * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(directory / f"heat_{k:02d}.png")
    if attention is not None:
        table = attention.detach().cpu().numpy()
        with open(directory / "attention.txt", "w", encoding="ascii") as fh:
            for k in range(table.shape[0]):
                for j in range(table.shape[1]):
                    row = " ".join(f"{v:.6f}" for v in table[k, j])
                    fh.write(f"landmark {k} vector {j}: {row}\n")
