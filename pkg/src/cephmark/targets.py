"""Ground-truth heat/offset target construction and the combined training loss.

The heat target for landmark l is 1 on the radius-R disk around l (pixel
centers on the integer lattice) and 0 elsewhere; the offset target inside the
disk is (l - x) / R per axis. The loss is a convex combination of a mean
logistic (cross-entropy) term on the heat maps and a masked L1 term on the
offsets.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .data import Frame, LandmarkSet
from .errors import ContractError

_CLAMP = 1e-7


@dataclass(frozen=True)
class TargetConfig:
    radius: int = 40  # disk radius in NETWORK pixels
    alpha: float = 2.0 / 3.0  # weight of the heat term in the combined loss

    def __post_init__(self):
        if self.radius < 1:
            raise ContractError(f"radius must be a positive integer, got {self.radius}")
        if not 0.0 < self.alpha < 1.0:
            raise ContractError(f"alpha must lie in (0, 1), got {self.alpha}")


@dataclass
class TargetMaps:
    heat: torch.Tensor  # (n, h, w) binary
    offsets: torch.Tensor  # (n, 2, h, w); zero outside the mask
    mask: torch.Tensor  # (n, h, w) binary, 1 inside each landmark's disk


def make_targets(
    landmarks: LandmarkSet,
    extent: tuple[int, int],
    cfg: TargetConfig,
    dtype: torch.dtype = torch.float32,
) -> TargetMaps:
    """Build per-landmark disk targets on an (h, w) grid from NETWORK-frame landmarks.

    Disks may be clipped by the border. Landmark coordinates are kept as reals
    (never rounded), so inside the mask x + R * offset(x) reproduces the
    landmark; in float arithmetic the round-trip is bit-exact for power-of-two
    radii when l - x is representable, and within ~1e-12 otherwise.
    """
    if landmarks.frame is not Frame.NETWORK:
        raise ContractError(f"targets require NETWORK-frame landmarks, got {landmarks.frame.value}")
    h, w = extent
    landmarks.require_in_bounds((w, h))
    pts = torch.as_tensor(landmarks.points, dtype=torch.float64)  # (n, 2)
    n = pts.shape[0]
    ys = torch.arange(h, dtype=torch.float64)
    xs = torch.arange(w, dtype=torch.float64)
    dx = (pts[:, 0, None, None] - xs[None, None, :]).expand(n, h, w)  # l_x - x
    dy = (pts[:, 1, None, None] - ys[None, :, None]).expand(n, h, w)  # l_y - y
    inside = dx * dx + dy * dy <= float(cfg.radius) ** 2
    mask = inside.to(dtype)
    offsets = torch.stack([dx, dy], dim=1) / cfg.radius
    offsets = offsets * inside[:, None]
    return TargetMaps(heat=mask.clone(), offsets=offsets.to(dtype), mask=mask)


def stack_targets(per_sample: list[TargetMaps]) -> TargetMaps:
    """Stack per-sample targets into batched (B, ...) tensors for batched losses."""
    return TargetMaps(
        heat=torch.stack([t.heat for t in per_sample]),
        offsets=torch.stack([t.offsets for t in per_sample]),
        mask=torch.stack([t.mask for t in per_sample]),
    )


def heat_loss(pred_heat: torch.Tensor, targets: TargetMaps) -> torch.Tensor:
    """Mean binary cross-entropy over every map entry, probabilities clamped away from {0, 1}."""
    t = targets.heat.to(pred_heat.dtype)
    if pred_heat.shape != t.shape:
        raise ContractError(f"heat shape {tuple(pred_heat.shape)} does not match targets {tuple(t.shape)}")
    p = pred_heat.clamp(_CLAMP, 1.0 - _CLAMP)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


def offset_loss(pred_offsets: torch.Tensor, targets: TargetMaps) -> torch.Tensor:
    """Mean absolute offset error over masked pixels and both axes; 0 on an empty mask."""
    t = targets.offsets.to(pred_offsets.dtype)
    if pred_offsets.shape != t.shape:
        raise ContractError(
            f"offset shape {tuple(pred_offsets.shape)} does not match targets {tuple(t.shape)}"
        )
    mask = targets.mask.to(pred_offsets.dtype)
    weight = mask.unsqueeze(-3)  # broadcast across the two offset axes
    total = (torch.abs(pred_offsets - t) * weight).sum()
    count = weight.sum() * 2
    return total / torch.clamp(count, min=1.0)


def total_loss(lh: torch.Tensor, lo: torch.Tensor, cfg: TargetConfig) -> torch.Tensor:
    return cfg.alpha * lh + (1.0 - cfg.alpha) * lo


def combined_loss(
    pred_heat: torch.Tensor,
    pred_offsets: torch.Tensor,
    targets: TargetMaps,
    cfg: TargetConfig,
) -> torch.Tensor:
    return total_loss(heat_loss(pred_heat, targets), offset_loss(pred_offsets, targets), cfg)
