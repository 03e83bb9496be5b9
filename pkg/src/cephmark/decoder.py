"""Pixel-wise regression voting: heat + offset maps -> landmark coordinates.

For each landmark the floor(pi R^2) hottest pixels form the voter set; every
voter x casts one vote at x + floor(offset(x) * R) per axis, votes landing
outside the grid are discarded, and the most-voted pixel wins. All tie-breaks
use ascending row-major index (y * w + x), so results are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .afpf import PredictionMaps
from .data import Frame, LandmarkSet
from .errors import ContractError, EmptyActivationError


@dataclass
class VoterSet:
    """The pixels allowed to vote for one landmark."""

    pixels: np.ndarray  # (count, 2) int64, columns (x, y)
    count: int


@dataclass
class ActivationMap:
    votes: np.ndarray  # (h, w) int64 vote counts


def voter_count(radius: int) -> int:
    return math.floor(math.pi * radius * radius)


def select_voters(heat: np.ndarray, radius: int) -> VoterSet:
    """Pick the floor(pi R^2) highest-heat pixels; ties by ascending row-major index."""
    heat = np.asarray(heat)
    if heat.ndim != 2:
        raise ContractError(f"heat map must be 2-D, got shape {heat.shape}")
    if radius < 1:
        raise ContractError(f"radius must be >= 1, got {radius}")
    count = voter_count(radius)
    h, w = heat.shape
    if count > h * w:
        raise ContractError(f"voter count {count} exceeds grid size {h * w}")
    order = np.argsort(-heat.ravel(), kind="stable")[:count]
    pixels = np.stack([order % w, order // w], axis=1).astype(np.int64)
    return VoterSet(pixels=pixels, count=count)


def cast_votes(
    voters: VoterSet,
    offsets: np.ndarray,
    radius: int,
    extent: tuple[int, int],
) -> ActivationMap:
    """Accumulate one vote per voter at x + floor(offset * R); out-of-bounds votes are dropped."""
    offsets = np.asarray(offsets)
    h, w = extent
    if offsets.shape != (2, h, w):
        raise ContractError(f"offsets must have shape (2, {h}, {w}), got {offsets.shape}")
    xs, ys = voters.pixels[:, 0], voters.pixels[:, 1]
    if voters.count and (xs.min() < 0 or ys.min() < 0 or xs.max() >= w or ys.max() >= h):
        raise ContractError(f"voter pixels fall outside the {extent} grid")
    step_x = np.floor(offsets[0, ys, xs].astype(np.float64) * radius).astype(np.int64)
    step_y = np.floor(offsets[1, ys, xs].astype(np.float64) * radius).astype(np.int64)
    tx = xs + step_x
    ty = ys + step_y
    keep = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    votes = np.zeros((h, w), dtype=np.int64)
    np.add.at(votes, (ty[keep], tx[keep]), 1)
    return ActivationMap(votes=votes)


def argmax_landmark(activation: ActivationMap) -> tuple[int, int]:
    """Coordinates of the highest vote count; first row-major pixel wins ties."""
    votes = activation.votes
    if votes.sum() == 0:
        raise EmptyActivationError("every vote was discarded; fall back to the heat-map argmax")
    flat = int(np.argmax(votes))
    w = votes.shape[1]
    return (flat % w, flat // w)


def _heat_argmax(heat: np.ndarray) -> tuple[int, int]:
    flat = int(np.argmax(heat))
    w = heat.shape[1]
    return (flat % w, flat // w)


def decode(
    maps: PredictionMaps | tuple[np.ndarray, np.ndarray],
    radius: int,
    return_activations: bool = False,
):
    """Decode every landmark; returns a NETWORK-frame LandmarkSet.

    A landmark whose votes all land out of bounds falls back to its heat-map
    argmax. Pass ``return_activations=True`` to also get the vote grids.
    """
    if isinstance(maps, PredictionMaps):
        heat, offsets = maps.numpy()
    else:
        heat, offsets = (np.asarray(m) for m in maps)
    if heat.ndim != 3 or offsets.ndim != 4 or offsets.shape[1] != 2:
        raise ContractError(
            f"expected heat (n, h, w) and offsets (n, 2, h, w), got {heat.shape} and {offsets.shape}"
        )
    n, h, w = heat.shape
    points = np.zeros((n, 2), dtype=np.float64)
    activations = []
    for k in range(n):
        voters = select_voters(heat[k], radius)
        activation = cast_votes(voters, offsets[k], radius, (h, w))
        try:
            points[k] = argmax_landmark(activation)
        except EmptyActivationError:
            points[k] = _heat_argmax(heat[k])
        activations.append(activation)
    result = LandmarkSet(points=points, frame=Frame.NETWORK)
    if return_activations:
        return result, activations
    return result


def dump_activation_maps(directory: Path, activations: list[ActivationMap]) -> None:
    """Write vote grids as 16-bit grayscale PNGs for inspection."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, activation in enumerate(activations):
        grid = np.clip(activation.votes, 0, 65535).astype(np.uint16)
        Image.fromarray(grid).save(directory / f"activation_{k:02d}.png")
