"""Blind removal of doctor-drawn markers from medical images.

A two-branch gated-convolution reconstruction network predicts the corrupted
regions and the restored content at the same time, trained adversarially
against a dense-detector discriminator that hunts for (fake) markers. No mask
is needed at inference. The package also ships the synthetic marker stamping
tooling, dataset plumbing, the evaluation metrics, and a CLI
(``markerfree synth | train | eval | infer``).
"""

from markerfree.markers import (
    MarkerAnnotation,
    MarkerPolicy,
    MarkerSpec,
    rasterize_marker,
    sample_marker_specs,
    stamp_markers,
)

__all__ = [
    "MarkerAnnotation",
    "MarkerPolicy",
    "MarkerSpec",
    "rasterize_marker",
    "sample_marker_specs",
    "stamp_markers",
]

__version__ = "0.1.0"
