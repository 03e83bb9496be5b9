"""Radiograph and annotation ingestion, coordinate frames, and synthetic data.

Coordinates are (x, y) pairs with pixel centers on the integer lattice;
``pixels[y, x]`` indexes the grid. Two frames exist: ORIGINAL (native image
resolution) and NETWORK (the resized grid the model consumes, 800x640 by
default). Annotation files are plain text, one "x,y" line per landmark, in
ORIGINAL pixel units.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ContractError, FormatError

# Default network-input extent: height 800, width 640 (aspect matches the
# ~1935x2400 originals without padding).
NETWORK_HEIGHT = 800
NETWORK_WIDTH = 640

DEFAULT_SPACING_MM = 0.1


class Frame(str, Enum):
    ORIGINAL = "original"
    NETWORK = "network"


class Direction(str, Enum):
    FORWARD = "forward"  # ORIGINAL -> NETWORK
    INVERSE = "inverse"  # NETWORK -> ORIGINAL


@dataclass(frozen=True)
class CephImage:
    """Grayscale image with intensities in [0, 1] and a physical pixel spacing."""

    pixels: np.ndarray  # (height, width) float32
    spacing_mm: float = DEFAULT_SPACING_MM

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise ContractError(f"expected a non-empty 2-D pixel grid, got shape {self.pixels.shape}")
        if not self.spacing_mm > 0:
            raise ContractError(f"spacing_mm must be positive, got {self.spacing_mm}")

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def extent(self) -> tuple[int, int]:
        """(width, height) in pixels."""
        return (self.width_px, self.height_px)


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered 2-D landmark coordinates tied to a coordinate frame."""

    points: np.ndarray  # (n, 2) float64, columns (x, y)
    frame: Frame

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
            raise ContractError(f"points must have shape (n, 2) with n >= 1, got {pts.shape}")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def require_in_bounds(self, extent: tuple[int, int]) -> None:
        """Raise unless every point lies in [0, width) x [0, height)."""
        w, h = extent
        x, y = self.points[:, 0], self.points[:, 1]
        if np.any(x < 0) or np.any(y < 0) or np.any(x >= w) or np.any(y >= h):
            bad = self.points[(x < 0) | (y < 0) | (x >= w) | (y >= h)]
            raise ContractError(f"landmarks out of bounds for extent {extent}: {bad.tolist()}")


@dataclass(frozen=True)
class CoordTransform:
    """Anisotropic scaling between the ORIGINAL and NETWORK pixel grids."""

    source_extent: tuple[int, int]  # (width, height), ORIGINAL
    target_extent: tuple[int, int]  # (width, height), NETWORK

    def __post_init__(self):
        for name, (w, h) in (("source", self.source_extent), ("target", self.target_extent)):
            if w <= 0 or h <= 0:
                raise ContractError(f"{name} extent must be positive, got {(w, h)}")

    @property
    def scale_x(self) -> float:
        return self.target_extent[0] / self.source_extent[0]

    @property
    def scale_y(self) -> float:
        return self.target_extent[1] / self.source_extent[1]

    def apply(self, points: np.ndarray, direction: Direction) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        scale = np.array([self.scale_x, self.scale_y])
        if direction is Direction.FORWARD:
            return pts * scale
        return pts / scale


@dataclass(frozen=True)
class DatasetSplit:
    """Pairwise-disjoint sample identifier lists."""

    train: tuple[str, ...] = ()
    validate: tuple[str, ...] = ()
    test: tuple[str, ...] = ()

    def __post_init__(self):
        seen: dict[str, str] = {}
        for name in ("train", "validate", "test"):
            for ident in getattr(self, name):
                if ident in seen:
                    raise ContractError(f"sample '{ident}' appears in both '{seen[ident]}' and '{name}'")
                seen[ident] = name


def read_annotation(path: Path, n: int) -> np.ndarray:
    """Parse the first n "x,y" lines of an annotation file into an (n, 2) array.

    Extra lines beyond the first n are ignored. LF and CRLF endings are both
    accepted.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"annotation file not found: {path}")
    points = []
    with open(path, "r", encoding="ascii", newline=None) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'x,y', got {line!r}")
            try:
                x, y = float(parts[0]), float(parts[1])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric coordinate in {line!r}") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise FormatError(f"{path}:{lineno}: non-finite coordinate in {line!r}")
            points.append((x, y))
            if len(points) == n:
                break
    if len(points) < n:
        raise FormatError(f"{path}: expected at least {n} coordinate lines, found {len(points)}")
    return np.array(points, dtype=np.float64)


def _to_unit_interval(img: Image.Image) -> np.ndarray:
    """Normalize a PIL grayscale image by its raster's maximum representable value."""
    if img.mode in ("I", "I;16", "I;16B", "I;16L"):
        return np.asarray(img, dtype=np.float32) / 65535.0
    if img.mode == "F":
        return np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)
    return np.asarray(img.convert("L"), dtype=np.float32) / 255.0


def load_image(path: Path, spacing_mm: float = DEFAULT_SPACING_MM) -> CephImage:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image file not found: {path}")
    with Image.open(path) as img:
        pixels = _to_unit_interval(img)
    return CephImage(pixels=pixels, spacing_mm=spacing_mm)


def load_sample(
    image_path: Path,
    annotation_path: Path,
    n: int,
    spacing_mm: float = DEFAULT_SPACING_MM,
) -> tuple[CephImage, LandmarkSet]:
    """Load one radiograph and its first n annotated landmarks (ORIGINAL frame).

    When two observers annotated the same image, load each file separately and
    combine with :func:`average_landmarks`.
    """
    image = load_image(image_path, spacing_mm=spacing_mm)
    points = read_annotation(annotation_path, n)
    return image, LandmarkSet(points=points, frame=Frame.ORIGINAL)


def average_landmarks(a: LandmarkSet, b: LandmarkSet) -> LandmarkSet:
    """Pointwise mean of two annotation sets; the usual ground-truth rule."""
    if a.frame is not b.frame:
        raise ContractError(f"cannot average landmarks across frames {a.frame} and {b.frame}")
    if a.n != b.n:
        raise ContractError(f"landmark count mismatch: {a.n} vs {b.n}")
    return LandmarkSet(points=(a.points + b.points) / 2.0, frame=a.frame)


def resize_to_network(
    image: CephImage,
    network_height: int = NETWORK_HEIGHT,
    network_width: int = NETWORK_WIDTH,
) -> tuple[np.ndarray, CoordTransform]:
    """Bilinearly resample to the network grid; returns the grid and the ORIGINAL->NETWORK transform."""
    if image.width_px < 1 or image.height_px < 1:
        raise ContractError("cannot resize a degenerate image")
    if network_height < 1 or network_width < 1:
        raise ContractError(f"degenerate network extent {(network_width, network_height)}")
    src = Image.fromarray(image.pixels.astype(np.float32), mode="F")
    resized = src.resize((network_width, network_height), resample=Image.Resampling.BILINEAR)
    grid = np.array(resized, dtype=np.float32)
    transform = CoordTransform(
        source_extent=image.extent,
        target_extent=(network_width, network_height),
    )
    return grid, transform


def map_coords(transform: CoordTransform, pts: LandmarkSet, direction: Direction) -> LandmarkSet:
    """Scale coordinates between frames and flip the frame tag."""
    expected = Frame.ORIGINAL if direction is Direction.FORWARD else Frame.NETWORK
    if pts.frame is not expected:
        raise ContractError(f"{direction.value} mapping expects {expected.value}-frame points, got {pts.frame.value}")
    mapped = transform.apply(pts.points, direction)
    target = Frame.NETWORK if direction is Direction.FORWARD else Frame.ORIGINAL
    return LandmarkSet(points=mapped, frame=target)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

_PRIMITIVES = ("disc", "cross", "corner")


def render_primitive(canvas: np.ndarray, kind: str, center: tuple[float, float], size: float) -> None:
    """Draw one bright primitive in place; intensity peaks at ``center``.

    Each primitive fades from 1.0 at the landmark to 0.6 at its rim so the
    landmark coincides with the intensity maximum of the shape.
    """
    h, w = canvas.shape
    cx, cy = center
    x0, x1 = max(0, int(cx - size) - 1), min(w, int(cx + size) + 2)
    y0, y1 = max(0, int(cy - size) - 1), min(h, int(cy + size) + 2)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx = xs - cx
    dy = ys - cy
    if kind == "disc":
        d = np.hypot(dx, dy)
        inside = d <= size
        profile = 1.0 - 0.4 * d / size
    elif kind == "cross":
        half = max(1.0, size / 5.0)
        inside = ((np.abs(dx) <= half) & (np.abs(dy) <= size)) | ((np.abs(dy) <= half) & (np.abs(dx) <= size))
        profile = 1.0 - 0.4 * np.maximum(np.abs(dx), np.abs(dy)) / size
    elif kind == "corner":
        # L shape: arms along +x and +y, vertex at the landmark.
        half = max(1.0, size / 5.0)
        inside = ((dx >= -half) & (dx <= size) & (np.abs(dy) <= half)) | (
            (dy >= -half) & (dy <= size) & (np.abs(dx) <= half)
        )
        profile = 1.0 - 0.4 * np.maximum(np.abs(dx), np.abs(dy)) / size
    else:
        raise ContractError(f"unknown primitive kind {kind!r}")
    patch = canvas[y0:y1, x0:x1]
    np.maximum(patch, np.where(inside, profile, 0.0).astype(np.float32), out=patch)


def _place_landmarks(
    rng: np.random.Generator, extent: tuple[int, int], n: int, min_separation: float
) -> np.ndarray:
    w, h = extent
    margin = min_separation
    if w - 1 - 2 * margin <= 0 or h - 1 - 2 * margin <= 0:
        raise ContractError(f"extent {extent} too small for border margin {margin}")
    points: list[np.ndarray] = []
    attempts = 0
    while len(points) < n:
        attempts += 1
        if attempts > 10_000:
            raise ContractError(
                f"could not place {n} landmarks at separation {min_separation} inside extent {extent}"
            )
        cand = np.array(
            [rng.uniform(margin, w - 1 - margin), rng.uniform(margin, h - 1 - margin)]
        )
        if all(np.hypot(*(cand - p)) >= min_separation for p in points):
            points.append(cand)
    return np.stack(points)


def generate_synthetic(
    count: int,
    extent: tuple[int, int],
    n_landmarks: int,
    seed: int,
    min_separation: float = 16.0,
    spacing_mm: float = 1.0,
) -> list[tuple[CephImage, LandmarkSet]]:
    """Deterministic synthetic dataset of bright primitives on a soft background.

    ``extent`` is (width, height). Landmark k of every image is rendered as the
    same primitive kind (disc/cross/corner cycling, growing with repetition) so
    each index has a consistent, learnable appearance. Landmarks are at least
    ``min_separation`` pixels apart and from the border.
    """
    if count <= 0 or n_landmarks <= 0:
        raise ContractError("count and n_landmarks must be positive")
    rng = np.random.default_rng(seed)
    w, h = extent
    samples = []
    for _ in range(count):
        points = _place_landmarks(rng, extent, n_landmarks, min_separation)
        ys, xs = np.mgrid[0:h, 0:w]
        gx, gy = rng.uniform(-0.15, 0.15, size=2)
        background = 0.2 + gx * (xs / max(w - 1, 1) - 0.5) + gy * (ys / max(h - 1, 1) - 0.5)
        background += rng.normal(0.0, 0.02, size=(h, w))
        canvas = np.clip(background, 0.0, 0.45).astype(np.float32)
        for k, (cx, cy) in enumerate(points):
            kind = _PRIMITIVES[k % len(_PRIMITIVES)]
            size = min_separation / 2.0 + 1.5 * (k // len(_PRIMITIVES))
            render_primitive(canvas, kind, (cx, cy), size)
        image = CephImage(pixels=canvas, spacing_mm=spacing_mm)
        samples.append((image, LandmarkSet(points=points, frame=Frame.ORIGINAL)))
    return samples


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------
#
# Layout:
#   root/images/<id>.png          16-bit grayscale rasters
#   root/annotations/<id>.txt     one "x,y" line per landmark
#   root/split.txt                identifiers under "train:", "validate:", "test:"
#   root/dataset.cfg              optional [dataset] spacing_mm / n_landmarks

SPLIT_HEADERS = ("train", "validate", "test")


def write_annotation(path: Path, points: np.ndarray) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for x, y in np.asarray(points, dtype=np.float64):
            fh.write(f"{x:.3f},{y:.3f}\n")


def write_split_file(path: Path, split: DatasetSplit) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for name in SPLIT_HEADERS:
            fh.write(f"{name}:\n")
            for ident in getattr(split, name):
                fh.write(f"  {ident}\n")


def read_split_file(path: Path) -> DatasetSplit:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"split file not found: {path}")
    buckets: dict[str, list[str]] = {name: [] for name in SPLIT_HEADERS}
    current: str | None = None
    with open(path, "r", encoding="ascii", newline=None) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.endswith(":"):
                header = line[:-1].strip()
                if header not in buckets:
                    raise FormatError(f"{path}:{lineno}: unknown split header {header!r}")
                current = header
            elif current is None:
                raise FormatError(f"{path}:{lineno}: identifier before any split header")
            else:
                buckets[current].append(line)
    return DatasetSplit(
        train=tuple(buckets["train"]),
        validate=tuple(buckets["validate"]),
        test=tuple(buckets["test"]),
    )


@dataclass
class Dataset:
    """A dataset directory resolved into per-sample file paths."""

    root: Path
    split: DatasetSplit
    n_landmarks: int
    spacing_mm: float = DEFAULT_SPACING_MM

    def sample_ids(self, split_name: str) -> tuple[str, ...]:
        if split_name not in SPLIT_HEADERS:
            raise ContractError(f"unknown split {split_name!r}; expected one of {SPLIT_HEADERS}")
        return getattr(self.split, split_name)

    def load(self, ident: str) -> tuple[CephImage, LandmarkSet]:
        image_path = self._find_image(ident)
        ann_path = self.root / "annotations" / f"{ident}.txt"
        return load_sample(image_path, ann_path, self.n_landmarks, spacing_mm=self.spacing_mm)

    def _find_image(self, ident: str) -> Path:
        images = self.root / "images"
        for ext in (".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg"):
            candidate = images / f"{ident}{ext}"
            if candidate.is_file():
                return candidate
        raise FileNotFoundError(f"no image for sample '{ident}' under {images}")


def open_dataset(root: Path, n_landmarks: int | None = None, spacing_mm: float | None = None) -> Dataset:
    """Resolve a dataset directory, preferring dataset.cfg values when present."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    cfg_path = root / "dataset.cfg"
    cfg_spacing, cfg_n = None, None
    if cfg_path.is_file():
        parser = configparser.ConfigParser()
        parser.read(cfg_path)
        if parser.has_section("dataset"):
            if parser.has_option("dataset", "spacing_mm"):
                cfg_spacing = parser.getfloat("dataset", "spacing_mm")
            if parser.has_option("dataset", "n_landmarks"):
                cfg_n = parser.getint("dataset", "n_landmarks")
    n = n_landmarks if n_landmarks is not None else cfg_n
    if n is None:
        raise ContractError(f"n_landmarks not given and not recorded in {cfg_path}")
    spacing = spacing_mm if spacing_mm is not None else (cfg_spacing if cfg_spacing is not None else DEFAULT_SPACING_MM)
    split = read_split_file(root / "split.txt")
    return Dataset(root=root, split=split, n_landmarks=n, spacing_mm=spacing)


def write_dataset(
    samples: Sequence[tuple[CephImage, LandmarkSet]],
    root: Path,
    split: DatasetSplit | None = None,
) -> Dataset:
    """Write samples as a dataset directory; all samples land in 'train' unless a split is given."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    ids = [f"{i:04d}" for i in range(len(samples))]
    n_landmarks = samples[0][1].n if samples else 0
    spacing = samples[0][0].spacing_mm if samples else DEFAULT_SPACING_MM
    for ident, (image, landmarks) in zip(ids, samples):
        raster = np.clip(image.pixels, 0.0, 1.0)
        raster16 = np.round(raster * 65535.0).astype(np.uint16)
        Image.fromarray(raster16).save(root / "images" / f"{ident}.png")
        write_annotation(root / "annotations" / f"{ident}.txt", landmarks.points)
    if split is None:
        split = DatasetSplit(train=tuple(ids))
    write_split_file(root / "split.txt", split)
    parser = configparser.ConfigParser()
    parser["dataset"] = {"spacing_mm": repr(spacing), "n_landmarks": str(n_landmarks)}
    with open(root / "dataset.cfg", "w", encoding="ascii") as fh:
        parser.write(fh)
    return Dataset(root=root, split=split, n_landmarks=n_landmarks, spacing_mm=spacing)
