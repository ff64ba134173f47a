"""driftwatch: container-instability detection from onboard video.

Stages: global affine motion compensation, dense optical flow,
mask-constrained residual motion extraction, robust temporal
classification, and multi-object tracking, plus a ground-truth scene
simulator used for verification.
"""

__version__ = "0.1.0"

from .imgcore import (  # noqa: F401
    AffineTransform,
    BoundingBox,
    GrayFrame,
    InstanceMask,
    iou,
    mask_to_bbox,
    warp_affine,
)
