"""Synthetic doctor-style marker generation.

Stamps crosshair / fork (X-shaped) annotation graphics onto clean images,
returning the corrupted image together with the exact binary mask and tight
bounding boxes of every stamped marker. All functions are pure and
deterministic given their inputs, so they can be called from any number of
workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MARKER_KINDS = ("crosshair", "fork")
CLASS_MARKER = "marker"
CLASS_FAKE_MARKER = "fake_marker"


class MarkerError(ValueError):
    """Invalid marker spec or policy."""


@dataclass(frozen=True)
class MarkerSpec:
    """One marker to stamp: what, where, how big, how bright."""

    kind: str                      # "crosshair" or "fork"
    center: tuple[int, int]        # (row, col), must lie inside the canvas
    arm_length: int                # half-length of each arm in pixels, >= 1
    thickness: int                 # stroke width in pixels, >= 1
    intensity: float | tuple[float, ...] = 1.0  # per-channel value in [0, 1]

    def __post_init__(self) -> None:
        if self.kind not in MARKER_KINDS:
            raise MarkerError(f"unknown marker kind {self.kind!r}")
        if self.arm_length < 1:
            raise MarkerError(f"arm_length must be >= 1, got {self.arm_length}")
        if self.thickness < 1:
            raise MarkerError(f"thickness must be >= 1, got {self.thickness}")
        vals = self.intensity if isinstance(self.intensity, tuple) else (self.intensity,)
        for v in vals:
            if not 0.0 <= v <= 1.0:
                raise MarkerError(f"intensity {v} outside [0, 1]")


@dataclass(frozen=True)
class MarkerAnnotation:
    """Tight axis-aligned bounding box of one marker's raster."""

    bbox: tuple[int, int, int, int]  # (x_min, y_min, width, height)
    class_label: str = CLASS_MARKER

    def __post_init__(self) -> None:
        x, y, w, h = self.bbox
        if w < 1 or h < 1:
            raise MarkerError(f"degenerate bbox {self.bbox}")
        if x < 0 or y < 0:
            raise MarkerError(f"bbox {self.bbox} outside image bounds")


@dataclass(frozen=True)
class MarkerPolicy:
    """Randomized stamping policy: how many markers, how big, what color."""

    count_range: tuple[int, int] = (1, 4)
    size_range: tuple[int, int] = (3, 9)        # arm_length bounds in pixels
    thickness_range: tuple[int, int] = (1, 2)
    intensity_mode: str = "fixed_white"         # fixed_white | fixed_black | sampled
    rng_seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.count_range
        if not (0 <= lo <= hi):
            raise MarkerError(f"bad count_range {self.count_range}")
        if not (1 <= self.size_range[0] <= self.size_range[1]):
            raise MarkerError(f"bad size_range {self.size_range}")
        if not (1 <= self.thickness_range[0] <= self.thickness_range[1]):
            raise MarkerError(f"bad thickness_range {self.thickness_range}")
        if self.intensity_mode not in ("fixed_white", "fixed_black", "sampled"):
            raise MarkerError(f"unknown intensity_mode {self.intensity_mode!r}")


def rasterize_marker(spec: MarkerSpec, canvas_size: tuple[int, int]) -> np.ndarray:
    """Rasterize one marker onto an H x W binary mask, clipped to the canvas.

    A crosshair is the horizontal plus vertical segment of half-length
    ``arm_length`` through the center; a fork is the two +/-45 degree
    diagonals. The 1-pixel skeleton is dilated by a square footprint of side
    ``thickness`` (offsets -(t-1)//2 .. t//2 in both axes).
    """
    h, w = canvas_size
    if h < 1 or w < 1:
        raise MarkerError(f"empty canvas {canvas_size}")
    r0, c0 = spec.center
    if not (0 <= r0 < h and 0 <= c0 < w):
        raise MarkerError(f"marker center {spec.center} outside canvas {canvas_size}")

    ks = np.arange(-spec.arm_length, spec.arm_length + 1)
    if spec.kind == "crosshair":
        rows = np.concatenate([np.full_like(ks, r0), r0 + ks])
        cols = np.concatenate([c0 + ks, np.full_like(ks, c0)])
    else:  # fork
        rows = np.concatenate([r0 + ks, r0 + ks])
        cols = np.concatenate([c0 + ks, c0 - ks])

    t = spec.thickness
    offs = np.arange(-((t - 1) // 2), t // 2 + 1)
    shape = (rows.size, t, t)
    rr = np.broadcast_to(rows[:, None, None] + offs[None, :, None], shape).ravel()
    cc = np.broadcast_to(cols[:, None, None] + offs[None, None, :], shape).ravel()

    keep = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[rr[keep], cc[keep]] = 1
    return mask


def sample_marker_specs(
    policy: MarkerPolicy, image_size: tuple[int, int], seed: int
) -> list[MarkerSpec]:
    """Draw a deterministic list of in-bounds marker specs.

    The draw depends only on (policy, image_size, seed). Markers are placed so
    the whole raster fits inside the image; if even the smallest marker cannot
    fit, an error is raised.
    """
    h, w = image_size
    rng = np.random.default_rng(np.random.SeedSequence([policy.rng_seed, int(seed) & 0xFFFFFFFF]))

    min_margin = policy.size_range[0] + policy.thickness_range[0] // 2
    limit = min((h - 1) // 2, (w - 1) // 2)  # largest margin with a nonempty center range
    if min_margin > limit:
        raise MarkerError(
            f"image {image_size} smaller than minimum marker extent "
            f"(needs center margin {min_margin})"
        )

    count = int(rng.integers(policy.count_range[0], policy.count_range[1] + 1))
    specs: list[MarkerSpec] = []
    for _ in range(count):
        kind = MARKER_KINDS[int(rng.integers(0, len(MARKER_KINDS)))]
        arm = int(rng.integers(policy.size_range[0], policy.size_range[1] + 1))
        thick = int(rng.integers(policy.thickness_range[0], policy.thickness_range[1] + 1))
        # shrink the marker rather than fail when the sampled one cannot fit
        while arm + thick // 2 > limit and arm > policy.size_range[0]:
            arm -= 1
        while arm + thick // 2 > limit and thick > policy.thickness_range[0]:
            thick -= 1
        margin = arm + thick // 2
        row = int(rng.integers(margin, h - margin))
        col = int(rng.integers(margin, w - margin))
        if policy.intensity_mode == "fixed_white":
            intensity: float = 1.0
        elif policy.intensity_mode == "fixed_black":
            intensity = 0.0
        else:
            intensity = float(rng.uniform(0.0, 1.0))
        specs.append(MarkerSpec(kind, (row, col), arm, thick, intensity))
    return specs


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """(x_min, y_min, width, height) of the nonzero pixels of a binary mask."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise MarkerError("empty mask has no bounding box")
    y0, y1 = int(rows.min()), int(rows.max())
    x0, x1 = int(cols.min()), int(cols.max())
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def stamp_markers(
    clean: np.ndarray, specs: Sequence[MarkerSpec]
) -> tuple[np.ndarray, np.ndarray, list[MarkerAnnotation]]:
    """Stamp markers onto a clean [0,1] image.

    Returns (corrupted, mask, annotations). The corrupted image equals the
    clean one outside the mask union; on overlaps, later specs overwrite
    earlier ones. Each annotation is the tight box of its own marker's raster.
    """
    if clean.min() < 0.0 or clean.max() > 1.0:
        raise MarkerError("clean image values must lie in [0, 1]")
    h, w = clean.shape[:2]
    corrupted = clean.astype(np.float32, copy=True)
    mask = np.zeros((h, w), dtype=np.uint8)
    annotations: list[MarkerAnnotation] = []

    for spec in specs:
        raster = rasterize_marker(spec, (h, w))
        mask |= raster
        where = raster.astype(bool)
        if corrupted.ndim == 3:
            intensity = np.asarray(spec.intensity, dtype=np.float32)
            corrupted[where, :] = intensity
        else:
            corrupted[where] = np.float32(np.mean(spec.intensity))
        annotations.append(MarkerAnnotation(tight_bbox(raster), CLASS_MARKER))

    return corrupted, mask, annotations
