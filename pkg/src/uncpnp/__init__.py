"""Uncertainty-aware PnP and PnPL pose estimation."""
from .bench import (NoiseSchedule, SceneSpec, generate_trial, rotation_error, run_benchmark,
                    translation_error)
from .dlsu import solve_dls, solve_dlsu
from .epnpu import solve_epnp, solve_epnpu
from .errors import PnPError
from .geometry import Pose
from .refine import RefineConfig, refine
from .residuals import Correspondences, LineObservation, PointObservation
from .robust import PipelineResult, RansacConfig, p3p, ransac, run_pipeline, solve
from .uncertainty import (PyramidDetectorSpec, isotropic_approximation, pyramid_covariance,
                          triangulate_line_with_covariance, triangulate_point_with_covariance)

__all__ = [
    "Correspondences", "LineObservation", "NoiseSchedule", "PipelineResult", "PnPError", "PointObservation",
    "Pose", "PyramidDetectorSpec", "RansacConfig", "RefineConfig", "SceneSpec", "generate_trial",
    "isotropic_approximation", "p3p", "pyramid_covariance", "ransac", "refine", "rotation_error",
    "run_benchmark", "run_pipeline", "solve", "solve_dls", "solve_dlsu", "solve_epnp", "solve_epnpu",
    "translation_error", "triangulate_line_with_covariance", "triangulate_point_with_covariance",
]
