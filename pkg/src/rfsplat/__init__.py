"""Desk-scale radio radiance fields with CSI-encoded Gaussian splatting."""

from .beamform import (
    ScanGrid,
    Snapshot,
    UpaConfig,
    array_manifold,
    cbf_spectrum,
    ideal_spectrum,
    mvdr_spectrum,
    per_view_normalize,
    synthesize_snapshots,
    tapered_cbf_spectrum,
    to_db_normalized,
)
from .channel import (
    SPEED_OF_LIGHT,
    ChannelRealization,
    Mpc,
    friis_gain,
    image_source_mpcs,
    rotate_to_array_frame,
)
from .csi import EncodeOptions, SpatialSpectrum, decode_csi, encode_target
from .geometry import Pose, ProjectionModel, look_at_pose
from .scene import Facet, SceneDescription, load_scene, lobby_lite, render_visual
from .splat import Gaussian, GaussianCloud, covariance3d, eval_sh, project, render

__version__ = "0.1.0"

__all__ = [
    "ScanGrid",
    "Snapshot",
    "UpaConfig",
    "array_manifold",
    "cbf_spectrum",
    "ideal_spectrum",
    "mvdr_spectrum",
    "per_view_normalize",
    "synthesize_snapshots",
    "tapered_cbf_spectrum",
    "to_db_normalized",
    "SPEED_OF_LIGHT",
    "ChannelRealization",
    "Mpc",
    "friis_gain",
    "image_source_mpcs",
    "rotate_to_array_frame",
    "EncodeOptions",
    "SpatialSpectrum",
    "decode_csi",
    "encode_target",
    "Pose",
    "ProjectionModel",
    "look_at_pose",
    "Facet",
    "SceneDescription",
    "load_scene",
    "lobby_lite",
    "render_visual",
    "Gaussian",
    "GaussianCloud",
    "covariance3d",
    "eval_sh",
    "project",
    "render",
]
