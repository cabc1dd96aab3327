"""CLEVR-style synthetic tabletop scenes for round-trip evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, ObservationSet
from .errors import PlacementFailed
from .geometry import cube_mesh, cylinder_mesh, icosphere
from .renderer import (
    FloorModel,
    Light,
    Material,
    SceneModel,
    SceneObject,
    SoftMaskConfig,
    Sphere,
    render,
)

SHAPES = ("sphere", "cube", "cylinder")
SIZES = (0.03, 0.05, 0.07)          # object heights/diameters, meters
MATERIALS = ("rubber", "metal")
# mid-range palette: saturated channels sit hard against the material
# bounds and bias the barrier-constrained fits
PALETTE = (
    (0.72, 0.26, 0.22), (0.24, 0.62, 0.28), (0.25, 0.38, 0.72),
    (0.72, 0.62, 0.25), (0.58, 0.30, 0.62), (0.28, 0.62, 0.62),
    (0.70, 0.45, 0.28), (0.45, 0.45, 0.45),
)

BASE_INTRINSICS = CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0,
                                   width=640, height=480)
FLOOR_HEIGHT = 0.14
DEPTH_RANGE = (0.45, 0.85)
FRUSTUM_MARGIN_PX = 6.0


@dataclass
class ObjectSpec:
    shape: str
    size: float
    material: str
    color: tuple
    position: np.ndarray      # object center, meters
    yaw: float                # rotation about the vertical axis


@dataclass
class SceneSpec:
    objects: list
    light_position: np.ndarray
    light_intensity: float
    floor_colors: tuple
    seed: int

    @property
    def num_objects(self):
        return len(self.objects)


def material_preset(kind, color):
    """Named material presets; metal is strongly specular."""
    if kind == "rubber":
        return Material(ambient=0.25, diffuse=0.55, specular=0.05,
                        shininess=100.0, color=np.asarray(color))
    if kind == "metal":
        return Material(ambient=0.2, diffuse=0.45, specular=0.8,
                        shininess=100.0, color=np.asarray(color))
    raise ValueError(f"unknown material preset {kind!r}")


def _shape_object(spec: ObjectSpec, object_id):
    half = spec.size / 2.0
    c, s = np.cos(spec.yaw), np.sin(spec.yaw)
    yaw_rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if spec.shape == "sphere":
        shape = Sphere(center=spec.position, radii=np.full(3, half))
    elif spec.shape == "cube":
        shape = cube_mesh((half, half, half)).transformed(
            rotation=yaw_rot, translation=spec.position)
    elif spec.shape == "cylinder":
        shape = cylinder_mesh(radius=half * 0.75, height=spec.size,
                              segments=28).transformed(
            rotation=yaw_rot, translation=spec.position)
    else:
        raise ValueError(f"unknown shape {spec.shape!r}")
    return SceneObject(shape=shape, material=material_preset(spec.material,
                                                             spec.color),
                       id=object_id)


def scene_from_spec(spec: SceneSpec, intrinsics: CameraIntrinsics) -> SceneModel:
    objects = [_shape_object(o, k) for k, o in enumerate(spec.objects)]
    floor = FloorModel(
        height=FLOOR_HEIGHT,
        material=Material(ambient=0.25, diffuse=0.5, specular=0.05,
                          shininess=100.0, color=np.asarray(spec.floor_colors[0])),
        checker=True,
        color_a=np.asarray(spec.floor_colors[0]),
        color_b=np.asarray(spec.floor_colors[1]),
        cell_size=0.08,
    )
    light = Light(position=spec.light_position, intensity=spec.light_intensity)
    return SceneModel(objects=objects, light=light, intrinsics=intrinsics,
                      floor=floor)


def _in_frustum(position, radius, intr):
    """Projected bounding circle fully inside the image with a margin."""
    x, y, z = position
    if z - radius < 0.2:
        return False
    u = x / z * intr.fx + intr.cx
    v = y / z * intr.fy + intr.cy
    r_px = radius * max(intr.fx, intr.fy) / (z - radius)
    return (u - r_px >= FRUSTUM_MARGIN_PX
            and u + r_px <= intr.width - FRUSTUM_MARGIN_PX
            and v - r_px >= FRUSTUM_MARGIN_PX
            and v + r_px <= intr.height - FRUSTUM_MARGIN_PX)


def sample_scene_spec(seed, n_objects=None, max_objects=3,
                      intrinsics=None) -> SceneSpec:
    """Rejection-sample non-overlapping, fully-visible object layouts."""
    rng = np.random.default_rng(seed)
    intr = intrinsics or BASE_INTRINSICS
    if n_objects is None:
        n_objects = int(rng.integers(1, max_objects + 1))

    placed = []
    specs = []
    attempts = 0
    while len(specs) < n_objects:
        attempts += 1
        if attempts > 1000:
            raise PlacementFailed(f"after {attempts - 1} attempts")
        shape = SHAPES[rng.integers(0, len(SHAPES))]
        size = SIZES[rng.integers(0, len(SIZES))]
        material = MATERIALS[rng.integers(0, len(MATERIALS))]
        color = PALETTE[rng.integers(0, len(PALETTE))]
        z = rng.uniform(*DEPTH_RANGE)
        x = rng.uniform(-0.22, 0.22)
        y = FLOOR_HEIGHT - size / 2.0   # resting on the floor (y down)
        pos = np.array([x, y, z])
        radius = size / 2.0 * np.sqrt(2.0)
        if not _in_frustum(pos, radius, intr):
            continue
        if any(np.linalg.norm(pos - p) < (radius + r) * 1.1
               for p, r in placed):
            continue
        placed.append((pos, radius))
        specs.append(ObjectSpec(shape=shape, size=size, material=material,
                                color=color, position=pos,
                                yaw=float(rng.uniform(0.0, 2.0 * np.pi))))

    scene_center = (np.mean([s.position for s in specs], axis=0)
                    if specs else np.array([0.0, 0.0, 0.65]))
    light_pos = np.array([
        scene_center[0] + rng.uniform(-0.35, 0.35),
        rng.uniform(-0.9, -0.45),
        scene_center[2] + rng.uniform(-0.3, 0.3),
    ])
    grey = rng.uniform(0.55, 0.75)
    floor_colors = ((grey, grey * 0.98, grey * 0.96),
                    (grey * 0.65, grey * 0.66, grey * 0.68))
    return SceneSpec(objects=specs, light_position=light_pos,
                     light_intensity=float(rng.uniform(1.0, 1.8)),
                     floor_colors=floor_colors, seed=int(seed))


def generate_scene(seed, resolution_fraction=0.2, n_objects=None,
                   max_objects=3, smcfg=None):
    """Sample a scene spec and render its observation.

    Returns (spec, gt_scene, obs); masks are the exact per-object hard
    hit-ids of the ground-truth render. Deterministic per seed.
    """
    intr = BASE_INTRINSICS.scaled(resolution_fraction)
    spec = sample_scene_spec(seed, n_objects=n_objects,
                             max_objects=max_objects, intrinsics=intr)
    gt_scene = scene_from_spec(spec, intr)
    out = render(gt_scene, smcfg or SoftMaskConfig())
    masks = [(out.hit_ids == k).astype(np.uint8)
             for k in range(len(gt_scene.objects))]
    obs = ObservationSet(rgb=out.rgb, depth=out.depth, masks=masks,
                         intrinsics=intr)
    return spec, gt_scene, obs


def gt_object_mesh(spec: ObjectSpec, samples=0, seed=0):
    """Ground-truth geometry of one object as a mesh (spheres subdivided)."""
    obj = _shape_object(spec, 0)
    if isinstance(obj.shape, Sphere):
        return icosphere(3).transformed(scale=obj.shape.radii,
                                        translation=obj.shape.center)
    return obj.shape
