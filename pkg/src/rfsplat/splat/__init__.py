from .cloud import Gaussian, GaussianCloud, covariance3d
from .project import SplatProjection, project, project_cloud
from .rasterize import render, render_backward
from .sh import eval_sh, sh_basis, sh_basis_grad

__all__ = [
    "Gaussian",
    "GaussianCloud",
    "covariance3d",
    "SplatProjection",
    "project",
    "project_cloud",
    "render",
    "render_backward",
    "eval_sh",
    "sh_basis",
    "sh_basis_grad",
]
