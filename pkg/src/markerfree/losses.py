"""Loss terms for the reconstruction/detection adversarial pair.

Generator side: pixel reconstruction, perceptual distance, and an
adversarial term that pushes per-anchor marker confidence toward zero on
reconstructed images. Detector side: objectness/class cross-entropy plus
box regression. Norms are realized per-element (mean / root-mean-square)
so the loss weights keep their balance at any image resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .discriminator import NUM_CLASSES
from .tensors import seeded_conv_init

# Marker confidence is clamped below 1 so log(1 - p) stays finite.
ADV_EPS = 1e-6


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 10.0
    lambda_per: float = 1.0
    lambda_adv: float = 0.1

    def __post_init__(self):
        for name in ("lambda_rec", "lambda_per", "lambda_adv"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise LossError(f"{name} must be a nonnegative finite real, got {v}")


@dataclass
class LossReport:
    rec: float
    per: float
    adv: float
    det_cls: float
    det_loc: float
    total_gen: float
    total_disc: float

    def as_dict(self):
        return {
            "rec": self.rec,
            "per": self.per,
            "adv": self.adv,
            "det_cls": self.det_cls,
            "det_loc": self.det_loc,
            "total_gen": self.total_gen,
            "total_disc": self.total_disc,
        }


def rec_loss(clean, inpainted, composed):
    """Mean |clean - inpainted| + mean |clean - composed|."""
    if clean.shape != inpainted.shape or clean.shape != composed.shape:
        raise LossError(
            f"shape mismatch: clean {tuple(clean.shape)}, inpainted "
            f"{tuple(inpainted.shape)}, composed {tuple(composed.shape)}"
        )
    return (clean - inpainted).abs().mean() + (clean - composed).abs().mean()


class PerceptualExtractor(nn.Module):
    """Fixed feature pyramid phi; parameters are frozen at construction.

    stages[i] maps the previous stage's output to the next feature level;
    perceptual distance is a weighted sum of per-stage rms differences.
    """

    def __init__(self, stages, weights):
        super().__init__()
        if len(stages) != len(weights):
            raise LossError("one weight per feature stage is required")
        self.stages = nn.ModuleList(stages)
        self.weights = tuple(float(w) for w in weights)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    @classmethod
    def identity(cls):
        return cls([nn.Identity()], [1.0])

    @classmethod
    def fixed_random(cls, seed=0, in_channels=3):
        # Seeded stand-in for a pre-trained classifier: three stride-2
        # stages with ELU (smooth, so finite-difference checks behave).
        channels = [in_channels, 16, 32, 64]
        stages = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            stages.append(
                nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ELU())
            )
        module = cls(stages, [1.0, 1.0, 1.0])
        seeded_conv_init(module, seed)
        return module

    @classmethod
    def vgg16(cls):
        # The three post-pooling activation stages of a pre-trained VGG-16.
        from torchvision.models import VGG16_Weights, vgg16

        features = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
        slices = [(0, 5), (5, 10), (10, 17)]
        stages = [nn.Sequential(*[features[i] for i in range(a, b)]) for a, b in slices]
        return cls(stages, [1.0, 1.0, 1.0])

    @classmethod
    def create(cls, name, seed=0):
        if name == "identity":
            return cls.identity()
        if name == "random":
            return cls.fixed_random(seed=seed)
        if name == "vgg16":
            return cls.vgg16()
        if name == "auto":
            try:
                return cls.vgg16()
            except Exception:
                # No pre-trained weights available (offline); the seeded
                # random pyramid still provides multi-scale structure.
                return cls.fixed_random(seed=seed)
        raise LossError(f"unknown perceptual extractor {name!r}")


def _rms(x):
    return torch.sqrt((x * x).mean())


def perceptual_loss(extractor, clean, inpainted, composed):
    """Weighted rms feature distances, both reconstructions vs clean."""
    f_clean = extractor(clean)
    f_inp = extractor(inpainted)
    f_comp = extractor(composed)
    total = clean.new_zeros(())
    for w, fc, fi, fo in zip(extractor.weights, f_clean, f_inp, f_comp):
        total = total + w * (_rms(fc - fi) + _rms(fc - fo))
    return total


def marker_confidence(out):
    """Flat per-anchor confidence p = objectness * best class score."""
    parts = []
    for cls in out.cls_maps:
        p = cls[..., 0] * cls[..., 1:].amax(dim=-1)
        parts.append(p.reshape(-1))
    return torch.cat(parts)


def adv_loss(out_inpainted, out_composed):
    """-mean log(1 - p) over both reconstructions and every anchor."""
    p = torch.cat([marker_confidence(out_inpainted), marker_confidence(out_composed)])
    p = p.clamp(max=1.0 - ADV_EPS)
    return -torch.log1p(-p).mean()


def det_loss(outputs, targets):
    """Detector supervision, summed over image roles.

    det_cls: objectness BCE over non-ignored anchors plus class BCE over
    positives. det_loc: smooth-L1 on box encodings over positives.
    Targets must be batched to match the outputs (stack_target_maps).
    """
    if set(outputs) != set(targets):
        raise LossError(
            f"role mismatch: outputs {sorted(outputs)} vs targets {sorted(targets)}"
        )
    det_cls = None
    det_loc = None
    for role in outputs:
        out, tgt = outputs[role], targets[role]
        obj_pred, obj_tgt = [], []
        cls_pred, cls_tgt = [], []
        loc_pred, loc_tgt = [], []
        for s in range(len(out.cls_maps)):
            cls_map = out.cls_maps[s]
            if tgt.objectness[s].shape != cls_map.shape[:-1]:
                raise LossError(
                    f"target grid {tuple(tgt.objectness[s].shape)} does not match "
                    f"detector output {tuple(cls_map.shape[:-1])} for role {role!r}"
                )
            keep = ~tgt.ignore[s]
            obj_pred.append(cls_map[..., 0][keep])
            obj_tgt.append(tgt.objectness[s][keep])
            pos = tgt.objectness[s] > 0
            if pos.any():
                one_hot = F.one_hot(
                    tgt.class_index[s][pos], num_classes=NUM_CLASSES
                ).to(cls_map.dtype)
                cls_pred.append(cls_map[..., 1:][pos])
                cls_tgt.append(one_hot)
                loc_pred.append(out.loc_maps[s][pos])
                loc_tgt.append(tgt.box_targets[s][pos])

        role_cls = F.binary_cross_entropy(
            torch.cat(obj_pred), torch.cat(obj_tgt).to(torch.cat(obj_pred).dtype)
        )
        if cls_pred:
            role_cls = role_cls + F.binary_cross_entropy(
                torch.cat(cls_pred), torch.cat(cls_tgt)
            )
            role_loc = F.smooth_l1_loss(torch.cat(loc_pred), torch.cat(loc_tgt))
        else:
            role_loc = role_cls.new_zeros(())
        det_cls = role_cls if det_cls is None else det_cls + role_cls
        det_loc = role_loc if det_loc is None else det_loc + role_loc
    if det_cls is None:
        raise LossError("det_loss requires at least one image role")
    return det_cls, det_loc


def hinge_d_loss(real_scores, fake_scores):
    """Patch-ablation discriminator hinge: relu(1-r) + relu(1+f), means."""
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def hinge_g_loss(fake_scores):
    return -fake_scores.mean()


def total_losses(rec, per, adv, det_cls, det_loc, weights=None):
    """Weighted generator total and detector total.

    Works on python floats or torch scalars; rejects non-finite parts as a
    divergence signal.
    """
    w = weights if weights is not None else LossWeights()
    parts = {"rec": rec, "per": per, "adv": adv, "det_cls": det_cls, "det_loc": det_loc}
    for name, v in parts.items():
        if not math.isfinite(float(v)):
            raise LossError(f"non-finite loss part {name}={float(v)}")
    total_gen = w.lambda_rec * rec + w.lambda_per * per + w.lambda_adv * adv
    total_disc = det_cls + det_loc
    return total_gen, total_disc


def make_loss_report(rec, per, adv, det_cls, det_loc, weights=None):
    total_gen, total_disc = total_losses(rec, per, adv, det_cls, det_loc, weights)
    return LossReport(
        rec=float(rec),
        per=float(per),
        adv=float(adv),
        det_cls=float(det_cls),
        det_loc=float(det_loc),
        total_gen=float(total_gen),
        total_disc=float(total_disc),
    )
