"""Thin-plate-spline motion model: deterministic core and keypoint recovery.

Modules
-------
geometry
    Points, affine maps, TPS solve/evaluate, bending energy.
motion
    Contribution maps (softmax, TPS dropout) and dense flow composition.
sampler
    Bilinear backward warping, occlusion masks, mean-pool pyramids.
losses
    Equivariance, background consistency, warp and multi-scale L1 losses.
estimation
    Levenberg-Marquardt recovery of keypoints from an observed flow.
io, cli
    File formats and the ``tpsm`` command line.
"""

from .errors import ContractError, DegenerateError, DomainError, FlowFormatError, TpsMotionError
from .geometry import (
    AffineTransform,
    KeypointSet,
    TpsTransform,
    apply_affine,
    apply_tps,
    bending_energy,
    compose_affine,
    invert_affine,
    radial_basis,
    solve_tps,
)
from .motion import (
    DenseFlow,
    DropoutPlan,
    SamplingGrid,
    combine_flows,
    dropout_contributions,
    identity_grid,
    softmax_contributions,
)
from .sampler import apply_mask, bilinear_warp, build_pyramid, downsample, resize_flow, warp_mask_pyramid

__version__ = "0.1.0"
