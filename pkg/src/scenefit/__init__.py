"""Inverse-rendering reconstruction of tabletop scenes from one RGBD image."""

from .camera import CameraIntrinsics, ObservationSet, PointCloud, backproject
from .ellipsoid import EllipsoidParams, PriorConfig, fit_map
from .geometry import TriangleMesh, icosphere
from .mesh_opt import Cage, MeshOptConfig, MvcWeights, Pose, optimize_meshes, pca_pose
from .metrics import MetricReport, chamfer, hausdorff, mask_iou, vsd_recall
from .optim import AdamwConfig, LbfgsConfig, adamw_minimize, lbfgs_minimize
from .pipeline import PipelineConfig, reconstruct, run_benchmark
from .renderer import (
    FloorModel,
    Light,
    Material,
    RenderOutput,
    SceneModel,
    SceneObject,
    SoftMaskConfig,
    Sphere,
    render,
)
from .scene_opt import (
    BarrierConfig,
    LineConstraint,
    LossBreakdown,
    LossWeights,
    SceneOptConfig,
    optimize_scene,
)
from .synth import SceneSpec, generate_scene

__version__ = "0.1.0"
