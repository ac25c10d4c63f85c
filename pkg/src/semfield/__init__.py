"""semfield: language-embedded radiance fields on synthetic scenes.

Train a density+color+embedding voxel field with point-wise semantic
supervision, transfer it into a Gaussian-splat cloud with frozen centers and
attached embeddings, answer open-vocabulary relevancy queries in 3D and 2D,
and score geometry with a radius-based F1 protocol.
"""

__version__ = "0.1.0"

from .config import RunConfig
from .field import FieldConfig, LanguageField
from .gaussians import GaussianCloud, brute_force_rasterize, rasterize, transfer_from_field
from .metrics import F1Report, f1_3d, map_2d, miou_2d
from .query import QuerySpec, relevancy_2d, relevancy_3d, relevancy_of_embedding, segment_3d
from .scene import Primitive, SceneConfig, SemanticScene, generate_scene, render_gt_view, sample_object_surface
from .training import TrainConfig, train

__all__ = [
    "RunConfig", "FieldConfig", "LanguageField", "GaussianCloud",
    "brute_force_rasterize", "rasterize", "transfer_from_field",
    "F1Report", "f1_3d", "map_2d", "miou_2d",
    "QuerySpec", "relevancy_2d", "relevancy_3d", "relevancy_of_embedding",
    "segment_3d", "Primitive", "SceneConfig", "SemanticScene",
    "generate_scene", "render_gt_view", "sample_object_surface",
    "TrainConfig", "train", "__version__",
]
