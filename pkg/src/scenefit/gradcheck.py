"""Finite-difference validation of scene-loss gradients on random scenes."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from ._objective import (
    FloorNode,
    LightNode,
    ObsPack,
    SphereNode,
    data_terms,
    material_barriers,
    scene_terms,
)
from .camera import CameraIntrinsics, ObservationSet
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
from .scene_opt import BarrierConfig, LossWeights

SHADING_SEGMENTS = ("light_pos", "light_int", "mat", "color")
GEOMETRIC_SEGMENTS = ("pos", "lograd")


def random_scene(rng, resolution=(32, 24)):
    """Random single-sphere tabletop scene at a small resolution."""
    U, V = resolution
    intr = CameraIntrinsics(fx=60.0 * U / 32, fy=60.0 * U / 32,
                            cx=U / 2.0, cy=V / 2.0, width=U, height=V)
    # shading ranges keep rendered values inside the clamp (differentiable
    # regime): saturated pixels have exactly zero reverse-mode gradient but
    # finite differences step across the clamp boundary
    # ranges keep every rendered value strictly inside the clamp, highlights
    # included: saturation crossings at the FD step would register as
    # spurious gradient mismatches
    r = rng.uniform(0.03, 0.06)
    center = np.array([rng.uniform(-0.05, 0.05),
                       rng.uniform(0.04, 0.09),
                       rng.uniform(0.5, 0.75)])
    mat = Material(ambient=rng.uniform(0.15, 0.28),
                   diffuse=rng.uniform(0.3, 0.45),
                   specular=rng.uniform(0.05, 0.2),
                   shininess=rng.uniform(20.0, 120.0),
                   color=rng.uniform(0.2, 0.65, size=3))
    floor = FloorModel(height=center[1] + r + 0.01,
                       material=Material(ambient=0.25, diffuse=0.4,
                                         specular=0.05, shininess=100.0,
                                         color=[0.6, 0.6, 0.6]),
                       checker=True,
                       color_a=rng.uniform(0.5, 0.62, size=3),
                       color_b=rng.uniform(0.3, 0.42, size=3))
    light = Light(position=np.array([rng.uniform(-0.4, 0.4),
                                     rng.uniform(-0.9, -0.4),
                                     center[2] + rng.uniform(-0.3, 0.3)]),
                  intensity=rng.uniform(0.7, 1.1))
    scene = SceneModel(objects=[SceneObject(shape=Sphere(center, np.full(3, r)),
                                            material=mat, id=0)],
                       light=light, intrinsics=intr, floor=floor)
    return scene


def scene_objective_and_params(scene: SceneModel, obs: ObservationSet,
                               smcfg: SoftMaskConfig, weights=None,
                               barrier=None):
    """Full scene loss with every shading and geometric parameter as a leaf."""
    weights = weights or LossWeights()
    barrier = barrier or BarrierConfig()
    pack = ObsPack.from_observation(obs)
    floor = scene.floor
    floor_node = FloorNode(
        height=floor.height,
        material={"ambient": floor.material.ambient,
                  "diffuse": floor.material.diffuse,
                  "specular": floor.material.specular,
                  "shininess": floor.material.shininess,
                  "color": floor.material.color},
        checker=floor.checker, color_a=floor.color_a, color_b=floor.color_b,
        cell_size=floor.cell_size)
    obj = scene.objects[0]

    def objective(leaves):
        light = LightNode(position=leaves["light_pos"],
                          intensity=leaves["light_int"])
        mat = {"ambient": leaves["mat"][0], "diffuse": leaves["mat"][1],
               "specular": leaves["mat"][2], "shininess": leaves["mat"][3],
               "color": leaves["color"]}
        node = SphereNode(center=leaves["pos"],
                          radii=ad.exp(leaves["lograd"]), material=mat)
        terms = scene_terms([node], floor_node, light, pack, smcfg)
        _, _, _, total = data_terms(terms, pack, weights)
        bar = material_barriers([mat, floor_node.material], barrier, 200.0)
        return ad.add(total, ad.mul(weights.data_mean, bar))

    layout = ad.ParamLayout(segments=(
        ("light_pos", (3,)), ("light_int", (1,)),
        ("mat", (4,)), ("color", (3,)),
        ("pos", (3,)), ("lograd", (3,)),
    ))
    x0 = ad.ParamVector(layout.pack({
        "light_pos": scene.light.position,
        "light_int": [scene.light.intensity],
        "mat": [obj.material.ambient, obj.material.diffuse,
                obj.material.specular, obj.material.shininess],
        "color": obj.material.color,
        "pos": obj.shape.center,
        "lograd": np.log(obj.shape.radii),
    }), layout)
    return objective, x0


def shading_geometry_check(seed=0, n_scenes=20, resolution=(32, 24),
                           step=1e-4, verbose=False):
    """FD validation of dL/dtheta on random single-object scenes.

    Shading/light parameters must match central differences at 1e-3; at
    least 90% of geometric parameters at 5e-2 (silhouette pixels are
    near-discontinuous).
    """
    rng = np.random.default_rng(seed)
    shading_errs = []
    geometric_errs = []
    for i in range(n_scenes):
        gt = random_scene(rng, resolution)
        smcfg = SoftMaskConfig(d_min=0.25, d_max=1.3)
        out = render(gt, smcfg)
        obs = ObservationSet(rgb=out.rgb, depth=out.depth,
                             masks=[(out.hit_ids == 0).astype(np.uint8)],
                             intrinsics=gt.intrinsics)
        # evaluate the loss near, not at, the observation parameters; every
        # part of the scene is perturbed so per-pixel residuals sit well away
        # from the |.| kink at the FD step size
        floor = gt.floor
        eval_floor = FloorModel(
            height=floor.height,
            material=Material(ambient=floor.material.ambient * 0.94,
                              diffuse=floor.material.diffuse * 1.06,
                              specular=floor.material.specular,
                              shininess=floor.material.shininess,
                              color=floor.material.color),
            checker=floor.checker,
            color_a=np.clip(floor.color_a + rng.uniform(0.01, 0.04, 3), 0, 1),
            color_b=np.clip(floor.color_b - rng.uniform(0.01, 0.04, 3), 0, 1),
            cell_size=floor.cell_size)
        gt_mat = gt.objects[0].material
        eval_mat = Material(ambient=min(gt_mat.ambient * 1.08, 1.0),
                            diffuse=gt_mat.diffuse * 0.92,
                            specular=gt_mat.specular * 1.1,
                            shininess=gt_mat.shininess * 0.95,
                            color=np.clip(gt_mat.color + rng.uniform(-0.05, 0.05, 3),
                                          0.05, 0.95))
        eval_scene = SceneModel(
            objects=[SceneObject(
                shape=Sphere(gt.objects[0].shape.center + rng.uniform(-0.02, 0.02, 3),
                             gt.objects[0].shape.radii * rng.uniform(0.8, 1.2, 3)),
                material=eval_mat, id=0)],
            light=Light(gt.light.position + rng.uniform(-0.1, 0.1, 3),
                        gt.light.intensity * rng.uniform(0.85, 1.15)),
            intrinsics=gt.intrinsics, floor=eval_floor)
        objective, x0 = scene_objective_and_params(eval_scene, obs, smcfg)
        offsets = x0.layout.offsets()
        shading_idx = [i for name in SHADING_SEGMENTS
                       for i in range(*offsets[name][:2])]
        geometric_idx = [i for name in GEOMETRIC_SEGMENTS
                         for i in range(*offsets[name][:2])]
        rel_s = ad.finite_diff_check(objective, x0, step, shading_idx)
        rel_g = ad.finite_diff_check(objective, x0, step, geometric_idx)
        shading_errs.append(rel_s)
        geometric_errs.append(rel_g)
        if verbose:
            print(f"scene {i}: shading max {rel_s.max():.2e}, "
                  f"geometric ok {(rel_g <= 5e-2).mean()*100:.0f}%")

    shading = np.concatenate(shading_errs)
    geometric = np.concatenate(geometric_errs)
    return {
        "shading_max": float(shading.max()),
        "shading_errors": shading,
        "geometric_frac_ok": float((geometric <= 5e-2).mean()),
        "geometric_errors": geometric,
    }
