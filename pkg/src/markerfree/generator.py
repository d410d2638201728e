"""Mask-free two-branch reconstruction network.

One branch inpaints, the other predicts a soft corruption mask, and the two
are fused by compositing the inpainted content into the input wherever the
mask fires:

    composed = mask * inpainted + (1 - mask) * input

Both branches share the same gated-convolution encoder / dilated bottleneck /
decoder shape and differ only in their output head (3 channels vs 1). The
mask stays soft in [0, 1]; no thresholding happens anywhere in the forward
pass, so the whole composition is differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from markerfree.tensors import seeded_conv_init

# encoder has two stride-2 stages, so inputs must divide by this
DOWNSAMPLE_FACTOR = 4


class GatedConv2d(nn.Module):
    """Convolution whose output is modulated by a learned (0, 1) gate.

    Two parallel convolutions of identical geometry: one produces features,
    the other a sigmoid gate that soft-selects which pixels pass through.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, dilation=1):
        super().__init__()
        padding = dilation * (kernel_size // 2)
        self.feature = nn.Conv2d(
            in_channels, out_channels, kernel_size, stride, padding, dilation
        )
        self.gate = nn.Conv2d(
            in_channels, out_channels, kernel_size, stride, padding, dilation
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.feature.in_channels:
            raise ValueError(
                f"expected {self.feature.in_channels} input channels, got {x.shape[1]}"
            )
        return F.elu(self.feature(x)) * torch.sigmoid(self.gate(x))


class ReconstructionBranch(nn.Module):
    """Gated-conv encoder, dilated bottleneck, nearest-upsample decoder."""

    def __init__(self, in_channels=3, out_channels=3, base_channels=32,
                 dilations=(1, 2, 4, 2)):
        super().__init__()
        c = base_channels
        self.down1 = GatedConv2d(in_channels, c, stride=2)
        self.down2 = GatedConv2d(c, 2 * c, stride=2)
        self.bottleneck = nn.ModuleList(
            [GatedConv2d(2 * c, 2 * c, dilation=d) for d in dilations]
        )
        self.up1 = GatedConv2d(2 * c, c)
        self.up2 = GatedConv2d(c, c)
        self.head = nn.Conv2d(c, out_channels, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.down1(x)
        x = self.down2(x)
        for block in self.bottleneck:
            x = block(x)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.up1(x)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.up2(x)
        return torch.sigmoid(self.head(x))


@dataclass
class GeneratorOutput:
    """(inpainted, mask, composed) triple; mask is broadcast over channels."""

    inpainted: torch.Tensor   # B x C x H x W in [0, 1]
    mask: torch.Tensor        # B x 1 x H x W in [0, 1]
    composed: torch.Tensor    # B x C x H x W in [0, 1]


def compose(image: torch.Tensor, inpainted: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Blend inpainted content into the input: mask*inpainted + (1-mask)*image."""
    if image.shape[-2:] != inpainted.shape[-2:] or image.shape[-2:] != mask.shape[-2:]:
        raise ValueError(
            f"spatial sizes differ: image {tuple(image.shape)}, "
            f"inpainted {tuple(inpainted.shape)}, mask {tuple(mask.shape)}"
        )
    return mask * inpainted + (1.0 - mask) * image


class TwoBranchGenerator(nn.Module):
    """The full reconstruction network; optionally single-branch (no mask).

    With ``branches=1`` the mask branch is dropped, the mask is defined as
    all-ones and the composed output equals the inpainted one.
    """

    def __init__(self, in_channels=3, base_channels=32, dilations=(1, 2, 4, 2),
                 branches=2, seed: int | None = None):
        super().__init__()
        if branches not in (1, 2):
            raise ValueError(f"branches must be 1 or 2, got {branches}")
        self.branches = branches
        self.inpaint_branch = ReconstructionBranch(
            in_channels, in_channels, base_channels, dilations
        )
        self.mask_branch = (
            ReconstructionBranch(in_channels, 1, base_channels, dilations)
            if branches == 2
            else None
        )
        if seed is not None:
            seeded_conv_init(self, seed)

    def forward(self, image: torch.Tensor, mask: torch.Tensor | None = None) -> GeneratorOutput:
        """Run both branches and compose.

        ``mask`` overrides the predicted mask when given (e.g. to run the
        network as a conventional mask-guided inpainter); it must be
        B x 1 x H x W in [0, 1].
        """
        if image.ndim != 4:
            raise ValueError(f"expected B x C x H x W input, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ValueError(
                f"input size {h}x{w} must be divisible by {DOWNSAMPLE_FACTOR}"
            )
        inpainted = self.inpaint_branch(image)
        if mask is None:
            if self.mask_branch is None:
                mask = torch.ones_like(image[:, :1])
            else:
                mask = self.mask_branch(image)
        composed = compose(image, inpainted, mask)
        return GeneratorOutput(inpainted=inpainted, mask=mask, composed=composed)
