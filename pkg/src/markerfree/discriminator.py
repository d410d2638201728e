"""Object-aware discriminator: a dense anchor-based marker detector.

The discriminator scores images as a detection problem rather than with a
single realness scalar: every grid cell / anchor pair carries an objectness
probability plus per-class scores over {marker, fake_marker}, and a box
regression field. A small patch discriminator is also provided as the
non-detector ablation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .markers import CLASS_FAKE_MARKER, CLASS_MARKER, MarkerAnnotation
from .tensors import seeded_conv_init

CLASS_NAMES = (CLASS_MARKER, CLASS_FAKE_MARKER)
CLASS_TO_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}
NUM_CLASSES = len(CLASS_NAMES)

# Anchor/cell pairs overlapping a ground-truth box this much are excluded
# from the negative set so near-misses are not punished as background.
IGNORE_IOU = 0.5


class DiscriminatorError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorConfig:
    """Strides and per-scale anchor sizes (w, h) in input pixels."""

    scales: tuple = (8, 16)
    anchors_per_scale: tuple = (
        ((8, 8), (12, 12), (16, 16)),
        ((24, 24), (32, 32), (48, 48)),
    )

    def __post_init__(self):
        if len(self.scales) == 0:
            raise DiscriminatorError("at least one detection scale is required")
        if len(self.anchors_per_scale) != len(self.scales):
            raise DiscriminatorError(
                "anchors_per_scale must provide one anchor list per scale"
            )
        counts = {len(a) for a in self.anchors_per_scale}
        if len(counts) != 1:
            raise DiscriminatorError("every scale must use the same anchor count")
        for stride in self.scales:
            if int(stride) <= 0:
                raise DiscriminatorError(f"stride must be positive, got {stride}")
        for anchors in self.anchors_per_scale:
            for w, h in anchors:
                if w <= 0 or h <= 0:
                    raise DiscriminatorError(f"anchor sizes must be positive, got {(w, h)}")

    @property
    def num_anchors(self):
        return len(self.anchors_per_scale[0])

    @property
    def max_stride(self):
        return max(self.scales)


@dataclass
class DetectorOutput:
    """Per-scale classification probability and localization grids.

    cls_maps[s]: B x H_s x W_s x A x (1 + K), sigmoid probabilities
      (channel 0 objectness, channels 1.. per-class scores).
    loc_maps[s]: B x H_s x W_s x A x 4, raw (dx, dy, log dw, log dh).
    """

    cls_maps: tuple
    loc_maps: tuple


@dataclass
class TargetMap:
    """Supervision grids matching DetectorOutput geometry (no batch dim
    when produced per image; stack_target_maps adds one).

    objectness: {0,1} float per (cell, anchor); class_index: int, -1 except
    at positives; box_targets: finite only at positives; ignore: cells
    excluded from the negative objectness loss.
    """

    objectness: tuple
    class_index: tuple
    box_targets: tuple
    ignore: tuple


@dataclass(frozen=True)
class Detection:
    bbox: tuple  # (x, y, w, h) in input pixels
    class_label: str
    confidence: float


def _shape_iou(wa, ha, wb, hb):
    # Co-centred boxes: overlap depends on sizes only.
    inter = min(wa, wb) * min(ha, hb)
    return inter / (wa * ha + wb * hb - inter)


def box_iou(a, b):
    """IoU of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 0.0
    return inter / union


def assign_targets(boxes, config, image_size):
    """Build detection supervision for one image.

    For every ground-truth box, the cell containing its centre gets one
    positive anchor per scale (highest shape IoU with the box). Any other
    (cell, anchor) pair whose anchor box, placed at the cell centre,
    overlaps some ground truth with IoU > 0.5 is ignored. Positives win
    over ignores; later boxes overwrite earlier ones on collisions.
    """
    h, w = image_size
    objectness, class_index, box_targets, ignore = [], [], [], []
    for scale_idx, stride in enumerate(config.scales):
        if h % stride or w % stride:
            raise DiscriminatorError(
                f"image size {h}x{w} is not divisible by stride {stride}"
            )
        gh, gw = h // stride, w // stride
        anchors = config.anchors_per_scale[scale_idx]
        a = len(anchors)
        obj = torch.zeros(gh, gw, a)
        cls = torch.full((gh, gw, a), -1, dtype=torch.int64)
        loc = torch.zeros(gh, gw, a, 4)
        ign = torch.zeros(gh, gw, a, dtype=torch.bool)

        for ann in boxes:
            for gi in range(gh):
                for gj in range(gw):
                    cx = (gj + 0.5) * stride
                    cy = (gi + 0.5) * stride
                    for ai, (aw, ah) in enumerate(anchors):
                        anchor_box = (cx - aw / 2.0, cy - ah / 2.0, aw, ah)
                        if box_iou(anchor_box, ann.bbox) > IGNORE_IOU:
                            ign[gi, gj, ai] = True

        for ann in boxes:
            bx, by, bw, bh = ann.bbox
            cx, cy = bx + bw / 2.0, by + bh / 2.0
            gj = min(int(cx // stride), gw - 1)
            gi = min(int(cy // stride), gh - 1)
            best = max(
                range(a),
                key=lambda ai: _shape_iou(anchors[ai][0], anchors[ai][1], bw, bh),
            )
            aw, ah = anchors[best]
            obj[gi, gj, best] = 1.0
            cls[gi, gj, best] = CLASS_TO_INDEX[ann.class_label]
            ign[gi, gj, best] = False
            loc[gi, gj, best, 0] = (cx - (gj + 0.5) * stride) / stride
            loc[gi, gj, best, 1] = (cy - (gi + 0.5) * stride) / stride
            loc[gi, gj, best, 2] = float(np.log(bw / aw))
            loc[gi, gj, best, 3] = float(np.log(bh / ah))

        # A positive assigned by one box must not sit in another box's
        # ignore band, so clear ignores at positives last.
        ign &= obj == 0

        objectness.append(obj)
        class_index.append(cls)
        box_targets.append(loc)
        ignore.append(ign)

    return TargetMap(
        objectness=tuple(objectness),
        class_index=tuple(class_index),
        box_targets=tuple(box_targets),
        ignore=tuple(ignore),
    )


def stack_target_maps(maps):
    """Stack per-image TargetMaps into batched grids (leading B dim)."""
    if not maps:
        raise DiscriminatorError("cannot stack an empty target list")
    n_scales = len(maps[0].objectness)
    return TargetMap(
        objectness=tuple(
            torch.stack([m.objectness[s] for m in maps]) for s in range(n_scales)
        ),
        class_index=tuple(
            torch.stack([m.class_index[s] for m in maps]) for s in range(n_scales)
        ),
        box_targets=tuple(
            torch.stack([m.box_targets[s] for m in maps]) for s in range(n_scales)
        ),
        ignore=tuple(torch.stack([m.ignore[s] for m in maps]) for s in range(n_scales)),
    )


class DetectorNet(nn.Module):
    """Strided conv backbone with 1x1 detection heads at the config scales.

    backbone: sequence of (out_channels, stride) 3x3 conv stages. A head is
    attached wherever the cumulative stride matches a configured scale.
    """

    def __init__(
        self,
        config=None,
        in_channels=3,
        backbone=((32, 2), (64, 2), (96, 2), (128, 2)),
        seed=0,
    ):
        super().__init__()
        self.config = config if config is not None else AnchorConfig()
        self.backbone_spec = tuple(backbone)

        taps = {}
        layers = []
        ch = in_channels
        stride = 1
        for out_ch, s in self.backbone_spec:
            layers.append(nn.Conv2d(ch, out_ch, 3, stride=s, padding=1))
            ch = out_ch
            stride *= s
            # Last stage wins if two stages land on the same stride.
            taps[stride] = (len(layers) - 1, ch)
        self.layers = nn.ModuleList(layers)

        missing = [s for s in self.config.scales if s not in taps]
        if missing:
            raise DiscriminatorError(
                f"backbone strides {sorted(taps)} provide no feature map for "
                f"scales {missing}"
            )
        self._tap_layer = {s: taps[s][0] for s in self.config.scales}

        a = self.config.num_anchors
        self.cls_heads = nn.ModuleList(
            nn.Conv2d(taps[s][1], a * (1 + NUM_CLASSES), 1) for s in self.config.scales
        )
        self.loc_heads = nn.ModuleList(
            nn.Conv2d(taps[s][1], a * 4, 1) for s in self.config.scales
        )
        seeded_conv_init(self, seed)

    def forward(self, image):
        if image.dim() != 4:
            raise DiscriminatorError(
                f"expected a BCHW image batch, got shape {tuple(image.shape)}"
            )
        h, w = image.shape[2], image.shape[3]
        ms = self.config.max_stride
        if h % ms or w % ms:
            raise DiscriminatorError(
                f"input size {h}x{w} must be divisible by the largest stride {ms}"
            )

        feats = {}
        x = image
        for i, layer in enumerate(self.layers):
            x = F.leaky_relu(layer(x), 0.2)
            feats[i] = x

        a = self.config.num_anchors
        cls_maps, loc_maps = [], []
        for si, stride in enumerate(self.config.scales):
            feat = feats[self._tap_layer[stride]]
            b, _, gh, gw = feat.shape
            cls = torch.sigmoid(self.cls_heads[si](feat))
            cls = cls.view(b, a, 1 + NUM_CLASSES, gh, gw).permute(0, 3, 4, 1, 2)
            loc = self.loc_heads[si](feat)
            loc = loc.view(b, a, 4, gh, gw).permute(0, 3, 4, 1, 2)
            cls_maps.append(cls)
            loc_maps.append(loc)
        return DetectorOutput(cls_maps=tuple(cls_maps), loc_maps=tuple(loc_maps))


def decode_detections(out, config, conf_threshold=0.5, nms_iou=0.5):
    """Turn detector grids into boxes (single-image output only).

    Per-anchor confidence is objectness times the best class score; boxes
    invert the assignment encoding; greedy NMS runs per class.
    """
    if not 0.0 < conf_threshold < 1.0 or not 0.0 < nms_iou < 1.0:
        raise DiscriminatorError("thresholds must lie strictly inside (0, 1)")
    if out.cls_maps[0].shape[0] != 1:
        raise DiscriminatorError(
            f"decode_detections expects batch size 1, got {out.cls_maps[0].shape[0]}"
        )

    candidates = []
    for si, stride in enumerate(config.scales):
        cls = out.cls_maps[si][0].detach().cpu().numpy()
        loc = out.loc_maps[si][0].detach().cpu().numpy()
        gh, gw = cls.shape[0], cls.shape[1]
        ih, iw = gh * stride, gw * stride
        anchors = config.anchors_per_scale[si]
        for gi in range(gh):
            for gj in range(gw):
                for ai, (aw, ah) in enumerate(anchors):
                    obj = float(cls[gi, gj, ai, 0])
                    scores = cls[gi, gj, ai, 1:]
                    ci = int(np.argmax(scores))
                    conf = obj * float(scores[ci])
                    if conf < conf_threshold:
                        continue
                    dx, dy, dw, dh = loc[gi, gj, ai]
                    cx = (gj + 0.5 + float(dx)) * stride
                    cy = (gi + 0.5 + float(dy)) * stride
                    bw = aw * float(np.exp(dw))
                    bh = ah * float(np.exp(dh))
                    x0 = max(0.0, min(cx - bw / 2.0, iw))
                    y0 = max(0.0, min(cy - bh / 2.0, ih))
                    x1 = max(0.0, min(cx + bw / 2.0, iw))
                    y1 = max(0.0, min(cy + bh / 2.0, ih))
                    candidates.append(
                        Detection(
                            bbox=(x0, y0, x1 - x0, y1 - y0),
                            class_label=CLASS_NAMES[ci],
                            confidence=conf,
                        )
                    )

    kept = []
    for name in CLASS_NAMES:
        pool = sorted(
            (d for d in candidates if d.class_label == name),
            key=lambda d: -d.confidence,
        )
        while pool:
            best = pool.pop(0)
            kept.append(best)
            pool = [d for d in pool if box_iou(best.bbox, d.bbox) <= nms_iou]
    kept.sort(key=lambda d: -d.confidence)
    return kept


def perfect_output_from_targets(targets, config, batch=1):
    """DetectorOutput that reproduces a TargetMap exactly (test/debug aid):
    objectness 1 and a one-hot class at positives, 0 elsewhere."""
    cls_maps, loc_maps = [], []
    for s in range(len(config.scales)):
        obj = targets.objectness[s]
        gh, gw, a = obj.shape
        cls = torch.zeros(batch, gh, gw, a, 1 + NUM_CLASSES)
        loc = torch.zeros(batch, gh, gw, a, 4)
        pos = obj > 0
        cls[:, :, :, :, 0][:, pos] = 1.0
        for ci in range(NUM_CLASSES):
            sel = pos & (targets.class_index[s] == ci)
            cls[:, :, :, :, 1 + ci][:, sel] = 1.0
        loc[:, pos] = targets.box_targets[s][pos]
        cls_maps.append(cls)
        loc_maps.append(loc)
    return DetectorOutput(cls_maps=tuple(cls_maps), loc_maps=tuple(loc_maps))


class PatchDiscriminator(nn.Module):
    """SN-PatchGAN style score grid: stacked stride-2 convs, raw scores out.

    Ablation alternative to the detector; trained with hinge losses.
    """

    def __init__(self, in_channels=3, base_channels=32, num_layers=4, seed=0):
        super().__init__()
        layers = []
        ch = in_channels
        for i in range(num_layers - 1):
            out_ch = base_channels * (2**i)
            layers.append(nn.Conv2d(ch, out_ch, 3, stride=2, padding=1))
            ch = out_ch
        self.body = nn.ModuleList(layers)
        self.score = nn.Conv2d(ch, 1, 3, stride=2, padding=1)
        seeded_conv_init(self, seed)

    def forward(self, image):
        x = image
        for layer in self.body:
            x = F.leaky_relu(layer(x), 0.2)
        return self.score(x).squeeze(1)


def annotations_as_class(boxes, class_label):
    """Same boxes, relabelled; used to supervise reconstructed images where
    ground-truth marker regions count as the fake class."""
    if class_label not in CLASS_TO_INDEX:
        raise DiscriminatorError(f"unknown class label {class_label!r}")
    return [dataclasses.replace(b, class_label=class_label) for b in boxes]
