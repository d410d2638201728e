"""Dataset scanning, sample loading, and deterministic batching.

On-disk layout (one directory per split):

    <root>/<split>/clean/*.png          always required
    <root>/<split>/corrupted/*.png      paired layout only, same filenames
    <root>/<split>/mask/*.png           optional, paired layout
    <root>/<split>/boxes.jsonl          optional, one JSON object per image

``boxes.jsonl`` lines look like
``{"file": "img_003.png", "boxes": [[x, y, w, h], ...], "classes": ["marker", ...]}``.

Clean-only corpora get their corruptions synthesized on the fly from a
MarkerPolicy, with the seed derived from (epoch_seed, entry index), so every
sample is a pure function of its inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from markerfree.markers import (
    MarkerAnnotation,
    MarkerPolicy,
    sample_marker_specs,
    stamp_markers,
)

SPLITS = ("train", "val", "test")
LAYOUTS = ("paired", "clean_only")
IMAGE_EXTENSIONS = (".png",)


class DatasetError(RuntimeError):
    """Problems with the on-disk corpus."""


# ---------------------------------------------------------------------------
# image file IO
# ---------------------------------------------------------------------------

def load_image(path: str | Path) -> np.ndarray:
    """Decode a PNG into an H x W x 3 float32 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except Exception as exc:  # noqa: BLE001 - report the offending path
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return arr.astype(np.float32) / 255.0


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write a [0, 1] float image (HxWx3 or HxW) as an 8-bit PNG."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_mask(path: str | Path) -> np.ndarray:
    """Decode a mask PNG into an H x W uint8 array in {0, 1}."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except Exception as exc:  # noqa: BLE001
        raise DatasetError(f"cannot decode mask {path}: {exc}") from exc
    return (arr >= 128).astype(np.uint8)


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear-resize a [0, 1] float image to (H, W)."""
    h, w = size
    if image.shape[:2] == (h, w):
        return image.astype(np.float32)
    src = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    out = Image.fromarray(src).resize((w, h), Image.BILINEAR)
    return np.asarray(out, dtype=np.float32) / 255.0


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize keeping the mask binary."""
    h, w = size
    if mask.shape == (h, w):
        return mask.astype(np.uint8)
    out = Image.fromarray((mask * 255).astype(np.uint8)).resize((w, h), Image.NEAREST)
    return (np.asarray(out, dtype=np.uint8) >= 128).astype(np.uint8)


def scale_bbox(
    bbox: tuple[int, int, int, int],
    from_size: tuple[int, int],
    to_size: tuple[int, int],
) -> tuple[int, int, int, int]:
    """Rescale an (x, y, w, h) box between image sizes, keeping coverage."""
    x, y, w, h = bbox
    sy = to_size[0] / from_size[0]
    sx = to_size[1] / from_size[1]
    x0 = int(np.floor(x * sx))
    y0 = int(np.floor(y * sy))
    x1 = min(int(np.ceil((x + w) * sx)), to_size[1])
    y1 = min(int(np.ceil((y + h) * sy)), to_size[0])
    return (x0, y0, max(x1 - x0, 1), max(y1 - y0, 1))


def write_boxes_jsonl(path: str | Path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_boxes_jsonl(path: str | Path) -> dict[str, list[MarkerAnnotation]]:
    """Map file name -> annotations from a boxes.jsonl file."""
    out: dict[str, list[MarkerAnnotation]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            anns = [
                MarkerAnnotation(tuple(int(v) for v in box), cls)
                for box, cls in zip(rec["boxes"], rec["classes"])
            ]
            out[rec["file"]] = anns
    return out


# ---------------------------------------------------------------------------
# index / sample / batch types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetEntry:
    clean_path: Path
    corrupted_path: Path | None = None
    mask_path: Path | None = None
    boxes: tuple[MarkerAnnotation, ...] = ()


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    split: str
    layout: str
    entries: tuple[DatasetEntry, ...]
    image_size: tuple[int, int] = (256, 256)

    def __len__(self) -> int:
        return len(self.entries)

    def with_image_size(self, size: tuple[int, int]) -> "DatasetIndex":
        return DatasetIndex(self.root, self.split, self.layout, self.entries, size)


@dataclass
class CorruptedSample:
    """One training example: corrupted input, clean target, mask, boxes."""

    corrupted: np.ndarray            # H x W x 3 float32 in [0, 1]
    clean: np.ndarray                # H x W x 3 float32 in [0, 1]
    mask: np.ndarray                 # H x W uint8 in {0, 1}
    boxes: list[MarkerAnnotation]


@dataclass
class Batch:
    clean: np.ndarray                # B x H x W x 3
    corrupted: np.ndarray            # B x H x W x 3
    mask: np.ndarray                 # B x H x W
    boxes: list[list[MarkerAnnotation]]
    indices: list[int]               # entry indices, for bookkeeping

    def __len__(self) -> int:
        return self.clean.shape[0]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def scan_dataset(
    root: str | Path,
    layout: str,
    split: str,
    image_size: tuple[int, int] = (256, 256),
) -> DatasetIndex:
    """Build a deterministic, lexicographically sorted index of one split.

    ``paired`` layout requires a corrupted twin for every clean image and
    picks up sibling masks and boxes.jsonl annotations when present.
    """
    root = Path(root)
    if layout not in LAYOUTS:
        raise DatasetError(f"unknown layout {layout!r} (expected one of {LAYOUTS})")
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r} (expected one of {SPLITS})")
    clean_dir = root / split / "clean"
    if not clean_dir.is_dir():
        raise DatasetError(f"no images found: missing directory {clean_dir}")

    clean_paths = sorted(
        p for p in clean_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
    )
    if not clean_paths:
        raise DatasetError(f"no images found under {clean_dir}")

    corrupted_dir = root / split / "corrupted"
    mask_dir = root / split / "mask"
    boxes_path = root / split / "boxes.jsonl"
    boxes_by_file = read_boxes_jsonl(boxes_path) if boxes_path.is_file() else {}

    entries = []
    for clean_path in clean_paths:
        corrupted_path = mask_path = None
        if layout == "paired":
            corrupted_path = corrupted_dir / clean_path.name
            if not corrupted_path.is_file():
                raise DatasetError(
                    f"paired layout: missing corrupted twin for {clean_path.name} "
                    f"(expected {corrupted_path})"
                )
            candidate_mask = mask_dir / clean_path.name
            mask_path = candidate_mask if candidate_mask.is_file() else None
        entries.append(
            DatasetEntry(
                clean_path=clean_path,
                corrupted_path=corrupted_path,
                mask_path=mask_path,
                boxes=tuple(boxes_by_file.get(clean_path.name, ())),
            )
        )
    return DatasetIndex(root, split, layout, tuple(entries), image_size)


def derive_sample_seed(epoch_seed: int, index: int) -> int:
    """Stable per-sample seed from (epoch_seed, entry index)."""
    ss = np.random.SeedSequence([int(epoch_seed) & 0xFFFFFFFF, int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def load_sample(
    index: DatasetIndex,
    i: int,
    policy: MarkerPolicy | None = None,
    epoch_seed: int = 0,
    augment: bool = False,
) -> CorruptedSample:
    """Load entry ``i`` at the index's image size, values scaled to [0, 1].

    clean_only: the corruption is synthesized from ``policy`` with a seed
    derived from (epoch_seed, i). paired: the stored corruption is loaded;
    with ``augment`` set, pseudo markers are additionally stamped onto the
    corrupted input only (the clean target is untouched).
    """
    if not 0 <= i < len(index):
        raise IndexError(f"sample index {i} out of range [0, {len(index)})")
    entry = index.entries[i]
    size = index.image_size
    clean = resize_image(load_image(entry.clean_path), size)

    if index.layout == "clean_only":
        if policy is None:
            policy = MarkerPolicy()
        specs = sample_marker_specs(policy, size, derive_sample_seed(epoch_seed, i))
        corrupted, mask, boxes = stamp_markers(clean, specs)
        return CorruptedSample(corrupted, clean, mask, boxes)

    raw_corrupted = load_image(entry.corrupted_path)
    native_size = raw_corrupted.shape[:2]
    clean_native = Image.open(entry.clean_path).size[::-1]
    if native_size != clean_native:
        raise DatasetError(
            f"{entry.corrupted_path} size {native_size} does not match "
            f"clean image size {clean_native}"
        )
    corrupted = resize_image(raw_corrupted, size)
    if entry.mask_path is not None:
        mask = resize_mask(load_mask(entry.mask_path), size)
    else:
        mask = np.zeros(size, dtype=np.uint8)
    boxes = [
        MarkerAnnotation(scale_bbox(ann.bbox, native_size, size), ann.class_label)
        for ann in entry.boxes
    ]

    if augment and policy is not None:
        specs = sample_marker_specs(policy, size, derive_sample_seed(epoch_seed, i))
        corrupted, extra_mask, extra_boxes = stamp_markers(corrupted, specs)
        mask = np.maximum(mask, extra_mask)
        boxes = boxes + extra_boxes

    return CorruptedSample(corrupted, clean, mask, boxes)


def epoch_order(n: int, shuffle_seed: int | None) -> list[int]:
    """Deterministic visit order of n entries for one epoch."""
    if shuffle_seed is None:
        return list(range(n))
    rng = np.random.default_rng(shuffle_seed)
    return [int(v) for v in rng.permutation(n)]


def make_batches(
    index: DatasetIndex,
    batch_size: int,
    shuffle_seed: int | None = None,
    policy: MarkerPolicy | None = None,
    epoch_seed: int = 0,
    augment: bool = False,
) -> Iterator[Batch]:
    """Yield batches covering every entry exactly once; short tail kept.

    The visit order is a deterministic permutation given shuffle_seed (index
    order when None), and the batch contents are bit-for-bit reproducible.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(index), shuffle_seed)
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        samples = [
            load_sample(index, i, policy=policy, epoch_seed=epoch_seed, augment=augment)
            for i in chunk
        ]
        yield Batch(
            clean=np.stack([s.clean for s in samples]),
            corrupted=np.stack([s.corrupted for s in samples]),
            mask=np.stack([s.mask for s in samples]),
            boxes=[s.boxes for s in samples],
            indices=chunk,
        )
