"""Convolutional feature extractors emitting multi-level feature maps.

Two variants: a VGG-19-style stack tapped at strides 4/8/16/32 for full-scale
work, and a five-conv TINY_TEST stack tapped at strides 4/8 that trains in
minutes on a CPU. Weight files are .npz containers with an embedded
architecture signature and per-layer shape table.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ContractError, FormatError

VGG19_STYLE = "vgg19_style"
TINY_TEST = "tiny_test"

_ALLOWED_STRIDES = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class BackboneSpec:
    variant: str
    tap_strides: tuple[int, ...]
    channels_per_tap: tuple[int, ...]
    weights_source: Path | None = None

    def __post_init__(self):
        if self.variant not in (VGG19_STYLE, TINY_TEST):
            raise ContractError(f"unknown backbone variant {self.variant!r}")
        if len(self.tap_strides) != len(self.channels_per_tap):
            raise ContractError("tap_strides and channels_per_tap must have equal length")
        if any(s not in _ALLOWED_STRIDES for s in self.tap_strides):
            raise ContractError(f"tap strides must be drawn from {_ALLOWED_STRIDES}")
        if list(self.tap_strides) != sorted(set(self.tap_strides)):
            raise ContractError("tap_strides must be strictly increasing")
        if self.variant == VGG19_STYLE and max(self.tap_strides) != 32:
            raise ContractError("VGG19_STYLE must include a stride-32 tap")

    @property
    def max_stride(self) -> int:
        return max(self.tap_strides)

    @property
    def signature(self) -> str:
        return (
            f"cephmark-backbone/{self.variant}"
            f"|taps={','.join(map(str, self.tap_strides))}"
            f"|ch={','.join(map(str, self.channels_per_tap))}"
        )


def vgg19_style(weights_source: Path | None = None) -> BackboneSpec:
    return BackboneSpec(
        variant=VGG19_STYLE,
        tap_strides=(4, 8, 16, 32),
        channels_per_tap=(256, 512, 512, 512),
        weights_source=weights_source,
    )


def tiny_test(weights_source: Path | None = None) -> BackboneSpec:
    return BackboneSpec(
        variant=TINY_TEST,
        tap_strides=(4, 8),
        channels_per_tap=(16, 32),
        weights_source=weights_source,
    )


def spec_for(variant: str, weights_source: Path | None = None) -> BackboneSpec:
    if variant == VGG19_STYLE:
        return vgg19_style(weights_source)
    if variant == TINY_TEST:
        return tiny_test(weights_source)
    raise ContractError(f"unknown backbone variant {variant!r}")


@dataclass
class MultiLevelFeatures:
    """One feature volume per tap, finest first; level i has extent input/stride_i."""

    levels: list[torch.Tensor]  # each (batch, channels_i, H/stride_i, W/stride_i)
    strides: tuple[int, ...]


class _VggStyleBackbone(nn.Module):
    """VGG-19 conv stack (2-2-4-4-4 convs of 64/128/256/512/512 channels).

    Taps: last conv of blocks 3, 4, 5 (strides 4, 8, 16) and the final pooled
    map (stride 32).
    """

    BLOCKS = ((2, 64), (2, 128), (4, 256), (4, 512), (4, 512))

    def __init__(self, in_channels: int = 1):
        super().__init__()
        blocks = []
        ch = in_channels
        for n_convs, width in self.BLOCKS:
            convs = []
            for _ in range(n_convs):
                convs.append(nn.Conv2d(ch, width, kernel_size=3, padding=1))
                convs.append(nn.ReLU(inplace=True))
                ch = width
            blocks.append(nn.Sequential(*convs))
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i >= 2:  # blocks 3..5 run at strides 4, 8, 16
                taps.append(x)
            x = self.pool(x)
        taps.append(x)  # stride 32
        return taps


class _TinyTestBackbone(nn.Module):
    """Five 3x3 convs with stride-2 downsampling; taps at strides 4 and 8."""

    def __init__(self, in_channels: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 8, 3, stride=1, padding=1)
        self.conv2 = nn.Conv2d(8, 16, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(16, 16, 3, stride=2, padding=1)
        self.conv4 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv5 = nn.Conv2d(32, 32, 3, stride=1, padding=1)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.act(self.conv1(x))
        x = self.act(self.conv2(x))
        tap4 = self.act(self.conv3(x))
        x = self.act(self.conv4(tap4))
        tap8 = self.act(self.conv5(x))
        return [tap4, tap8]


def build_backbone(spec: BackboneSpec, seed: int = 0, in_channels: int = 1) -> nn.Module:
    """Construct a backbone with seeded random initialization (the documented default
    when no weights_source is supplied)."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if spec.variant == VGG19_STYLE:
            module = _VggStyleBackbone(in_channels)
        else:
            module = _TinyTestBackbone(in_channels)
    return module


def extract_features(module: nn.Module, image: torch.Tensor, spec: BackboneSpec) -> MultiLevelFeatures:
    """Run the extractor; image is (batch, 1, H, W) with H, W multiples of the max tap stride."""
    if image.ndim != 4:
        raise ContractError(f"expected a (batch, 1, H, W) tensor, got shape {tuple(image.shape)}")
    h, w = image.shape[-2:]
    stride = spec.max_stride
    if h % stride or w % stride:
        raise ContractError(f"input extent {(h, w)} is not divisible by the max tap stride {stride}")
    levels = module(image)
    return MultiLevelFeatures(levels=levels, strides=spec.tap_strides)


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------


def state_digest(module: nn.Module) -> str:
    """SHA-256 over the module's parameters and buffers, sorted by name."""
    sha = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        sha.update(name.encode())
        sha.update(np.ascontiguousarray(state[name].detach().cpu().numpy()).tobytes())
    return sha.hexdigest()


def save_weights(module: nn.Module, spec: BackboneSpec, path: Path) -> str:
    """Write a weight container; returns its content digest."""
    state = {name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}
    shape_table = {name: list(arr.shape) for name, arr in state.items()}
    np.savez(
        path,
        __signature__=np.array(spec.signature),
        __shapes__=np.array(json.dumps(shape_table)),
        **{f"param/{name}": arr for name, arr in state.items()},
    )
    return state_digest(module)


def load_weights(spec: BackboneSpec, path: Path, in_channels: int = 1) -> tuple[nn.Module, str]:
    """Load a weight container into a fresh backbone; returns (module, content digest)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weights file not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if "__signature__" not in archive:
            raise FormatError(f"{path}: missing architecture signature")
        signature = str(archive["__signature__"])
        if signature != spec.signature:
            raise FormatError(f"{path}: signature {signature!r} does not match {spec.signature!r}")
        stored = {key[len("param/") :]: archive[key] for key in archive.files if key.startswith("param/")}
    module = build_backbone(spec, in_channels=in_channels)
    expected = module.state_dict()
    for name, tensor in expected.items():
        if name not in stored:
            raise FormatError(f"{path}: missing layer {name!r}")
        if tuple(stored[name].shape) != tuple(tensor.shape):
            raise FormatError(
                f"{path}: layer {name!r} has shape {tuple(stored[name].shape)}, expected {tuple(tensor.shape)}"
            )
    extra = set(stored) - set(expected)
    if extra:
        raise FormatError(f"{path}: unexpected layers {sorted(extra)}")
    module.load_state_dict({name: torch.from_numpy(arr) for name, arr in stored.items()})
    return module, state_digest(module)
