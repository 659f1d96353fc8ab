"""helmstereo: depth and normal reconstruction from reciprocal image pairs.

Pipeline stages: silhouette carving of a voxel hull, per-candidate
radiometric scoring by SVD rank analysis, MAP labeling of the depth grid
with max-product belief propagation, and Fourier-domain integration of
the recovered normal field into a surface. A synthetic renderer produces
exactly reciprocal image pairs with analytic ground truth, so the whole
chain is verifiable end to end.
"""

__version__ = "0.1.0"

from .errors import HelmstereoError
from .evaluate import Method
from .geometry import ViewStation, make_station, project, view_vector
from .pipeline import PipelineConfig, reconstruct, run_compare
from .scene import ReciprocalPair, SceneConfig, load_calibration

__all__ = [
    "HelmstereoError",
    "Method",
    "PipelineConfig",
    "ReciprocalPair",
    "SceneConfig",
    "ViewStation",
    "__version__",
    "load_calibration",
    "make_station",
    "project",
    "reconstruct",
    "run_compare",
    "view_vector",
]
