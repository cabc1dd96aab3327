"""Taped objective construction for the scene and mesh fitting stages.

The expensive nearest-hit searches run on plain values every evaluation; the
winning hits are then re-derived on the tape from the selected primitive's
parameters, so gradients are exact for the fixed visibility selection while
the search itself stays out of the tape. Full-frame composition happens on
flattened pixel arrays (P = U*V).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import bounding_sphere
from .render_kernels import T_EPS, mesh_nearest_hit, sphere_hit_t
from .renderer import (
    checker_parity,
    shade_formula,
    soft_mask_formula,
    sphere_t_formula,
    triangle_t_formula,
)


@dataclass
class ObsPack:
    """Flattened observation constants shared by every evaluation."""

    dirs: np.ndarray        # (P, 3) unit rays
    image: np.ndarray       # (P, 3)
    depth: np.ndarray       # (P,)
    masks: list             # K bool arrays (P,)
    depth_valid: np.ndarray  # (P,) bool
    shape: tuple            # (V, U)

    @classmethod
    def from_observation(cls, obs):
        V, U = obs.intrinsics.height, obs.intrinsics.width
        return cls(
            dirs=obs.intrinsics.ray_directions().reshape(-1, 3),
            image=obs.rgb.reshape(-1, 3).astype(np.float64),
            depth=obs.depth.reshape(-1).astype(np.float64),
            masks=[m.reshape(-1) for m in obs.masks],
            depth_valid=obs.depth.reshape(-1) > 0,
            shape=(V, U),
        )


def barrier_formula(x, x_min, x_max, curvature):
    """exp(-c (x - x_min)) + exp(c (x - x_max)); differentiable everywhere."""
    return ad.add(ad.exp(ad.mul(ad.sub(x, x_min), -curvature)),
                  ad.exp(ad.mul(ad.sub(x, x_max), curvature)))


# Tighter smoothing than the Laplace densities: a self-rendered scene must
# reach data terms <= 1e-9, so the smoothing floor sqrt(eps) sits at 1e-9.
MAE_EPS = 1e-18


def masked_mae_formula(a, b, mask):
    """Mean smooth-|a - b| over mask pixels (channels included); 0 if empty."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return ad.Tensor(0.0) if ad._is_taped(a, b) else np.float64(0.0)
    av = a[mask.nonzero()[0]] if isinstance(a, ad.Tensor) else np.asarray(a)[mask]
    bv = b[mask.nonzero()[0]] if isinstance(b, ad.Tensor) else np.asarray(b)[mask]
    diff = ad.smooth_abs(ad.sub(av, bv), eps=MAE_EPS)
    return ad.tmean(diff)


def full_frame_mae_formula(a, b):
    return ad.tmean(ad.smooth_abs(ad.sub(a, b), eps=MAE_EPS))


# -- scene descriptions ----------------------------------------------------
@dataclass
class SphereNode:
    center: object           # Tensor (3,) | ndarray
    radii: object            # Tensor (3,) | ndarray (positive)
    material: dict           # keys ambient/diffuse/specular/shininess/color


@dataclass
class MeshNode:
    vertices: object         # Tensor (N, 3) | ndarray
    faces: np.ndarray
    material: dict


@dataclass
class FloorNode:
    height: float
    material: dict
    checker: bool
    color_a: object
    color_b: object
    cell_size: float


@dataclass
class LightNode:
    position: object         # Tensor (3,) | ndarray
    intensity: object        # Tensor (1,) | scalar


def _scalar(x):
    """Scalar leaf segments arrive as shape-(1,) tensors; index them."""
    if isinstance(x, ad.Tensor) and x.value.shape == (1,):
        return x[0]
    if isinstance(x, np.ndarray) and x.shape == (1,):
        return float(x[0])
    return x


# Grazing rays have d t / d params ~ 1 / sqrt(disc): a handful of silhouette
# pixels would otherwise dominate the gradient with near-infinite entries.
DISC_FLOOR = 1e-4


def _sphere_layer(node: SphereNode, pack: ObsPack):
    """(hit_idx, taped t on hits) for a sphere object."""
    center_v = ad.val(node.center)
    radii_v = ad.val(node.radii)
    dp = pack.dirs / radii_v
    op = -center_v / radii_v
    a = np.einsum("ij,ij->i", dp, dp)
    b = 2.0 * dp @ op
    c = float(op @ op) - 1.0
    disc = b * b - 4.0 * a * c
    with np.errstate(invalid="ignore"):
        t_all = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
    hit_idx = np.nonzero((disc > DISC_FLOOR) & (t_all > T_EPS))[0]
    if len(hit_idx) == 0:
        return hit_idx, None
    dirs = pack.dirs[hit_idx]
    valid = np.ones(len(hit_idx), dtype=bool)
    t = sphere_t_formula(dirs, node.center, node.radii, valid)
    return hit_idx, t


def _sphere_normals(node: SphereNode, dirs, t):
    pts = ad.mul(dirs, ad.reshape(t, (-1, 1)))
    inv_r2 = ad.div(1.0, ad.mul(node.radii, node.radii))
    n_raw = ad.mul(ad.sub(pts, node.center), inv_r2)
    n = ad.norm(n_raw)
    return ad.mul(n_raw, ad.reshape(ad.div(1.0, n), (-1, 1))), pts


def _mesh_layer(node: MeshNode, pack: ObsPack, use_numba):
    """(hit_idx, taped t, taped unit normals oriented to camera, hit points)."""
    verts_v = ad.val(node.vertices)
    center, radius = bounding_sphere(verts_v)
    cand = np.nonzero(np.isfinite(
        sphere_hit_t(pack.dirs, center, np.full(3, radius * 1.05))))[0]
    if len(cand) == 0:
        return cand, None, None, None
    t_sub, f_sub = mesh_nearest_hit(pack.dirs[cand], verts_v, node.faces,
                                    use_numba=use_numba)
    hit = np.isfinite(t_sub)
    hit_idx = cand[hit]
    if len(hit_idx) == 0:
        return hit_idx, None, None, None
    faces = node.faces[f_sub[hit]]
    dirs = pack.dirs[hit_idx]
    v0 = ad.gather_rows(node.vertices, faces[:, 0])
    v1 = ad.gather_rows(node.vertices, faces[:, 1])
    v2 = ad.gather_rows(node.vertices, faces[:, 2])
    t, n_raw = triangle_t_formula(dirs, v0, v1, v2)
    n_len = ad.norm(n_raw)
    n_unit = ad.mul(n_raw, ad.reshape(ad.div(1.0, n_len), (-1, 1)))
    # orient toward the camera (selection by value, constant per evaluation)
    flip = np.where(np.einsum("ij,ij->i", ad.val(n_unit), dirs) > 0, -1.0, 1.0)
    n_unit = ad.mul(n_unit, flip[:, None])
    pts = ad.mul(dirs, ad.reshape(t, (-1, 1)))
    return hit_idx, t, n_unit, pts


def _shade(node_mat, light: LightNode, pack, hit_idx, normals, pts, base_color=None):
    color = node_mat["color"] if base_color is None else base_color
    return shade_formula(
        normals=normals, points=pts, view_dirs=-pack.dirs[hit_idx],
        ambient=_scalar(node_mat["ambient"]), diffuse=_scalar(node_mat["diffuse"]),
        specular=_scalar(node_mat["specular"]), shininess=_scalar(node_mat["shininess"]),
        color=color, light_pos=light.position, light_int=_scalar(light.intensity),
    )


def _floor_layer(floor: FloorNode, light: LightNode, pack: ObsPack):
    """(hit_idx, const z, taped rgb) of the floor plane."""
    dy = pack.dirs[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = floor.height / dy
    ok = (dy > 1e-12) & (t > T_EPS)
    hit_idx = np.nonzero(ok)[0]
    z = t[hit_idx] * pack.dirs[hit_idx, 2]
    pts = pack.dirs[hit_idx] * t[hit_idx, None]
    if floor.checker:
        par = checker_parity(pts[:, 0], pts[:, 2], floor.cell_size)
        base = ad.where(par[:, None],
                        ad.mul(np.ones((len(hit_idx), 3)), floor.color_a),
                        ad.mul(np.ones((len(hit_idx), 3)), floor.color_b))
    else:
        base = ad.mul(np.ones((len(hit_idx), 3)), floor.material["color"])
    normals = np.broadcast_to(np.array([0.0, -1.0, 0.0]), (len(hit_idx), 3))
    rgb = _shade(floor.material, light, pack, hit_idx, normals, pts, base_color=base)
    return hit_idx, z, rgb


def scene_terms(objects, floor, light, pack: ObsPack, smcfg, use_numba=True):
    """Per-object soft masks and the composite depth/rgb, all taped.

    Returns dict with:
      soft_masks: list of (P,) tensors
      own_depths: list of (P,) tensors (0 where the object misses)
      depth: (P,) composite nearest-hit depth (0 = no hit)
      rgb: (P, 3) composite shaded image
    """
    P = len(pack.dirs)
    layers = []
    for node in objects:
        if isinstance(node, SphereNode):
            hit_idx, t = _sphere_layer(node, pack)
            if t is None:
                layers.append((hit_idx, None, None))
                continue
            normals, pts = _sphere_normals(node, pack.dirs[hit_idx], t)
            rgb = _shade(node.material, light, pack, hit_idx, normals, pts)
            layers.append((hit_idx, ad.mul(t, pack.dirs[hit_idx, 2]), rgb))
        elif isinstance(node, MeshNode):
            hit_idx, t, normals, pts = _mesh_layer(node, pack, use_numba)
            if t is None:
                layers.append((hit_idx, None, None))
                continue
            rgb = _shade(node.material, light, pack, hit_idx, normals, pts)
            layers.append((hit_idx, ad.mul(t, pack.dirs[hit_idx, 2]), rgb))
        else:
            raise TypeError(f"unknown node {type(node)!r}")

    own_depths = []
    soft_masks = []
    for hit_idx, z, _ in layers:
        if z is None:
            own = np.zeros(P)
            own_depths.append(own)
            soft_masks.append(soft_mask_formula(own, smcfg))
        else:
            own = ad.put_rows(np.zeros(P), hit_idx, z)
            own_depths.append(own)
            soft_masks.append(soft_mask_formula(own, smcfg))

    # nearest-hit composition (selection on values)
    z_stack = np.full((len(layers) + 1, P), np.inf)
    for k, (hit_idx, z, _) in enumerate(layers):
        if z is not None:
            z_stack[k, hit_idx] = ad.val(z)
    if floor is not None:
        f_idx, f_z, f_rgb = _floor_layer(floor, light, pack)
        z_stack[len(layers), f_idx] = f_z
    winner = np.argmin(z_stack, axis=0)
    any_hit = np.isfinite(z_stack[winner, np.arange(P)])

    depth = np.zeros(P)
    rgb = np.zeros((P, 3))
    for k, (hit_idx, z, rgb_k) in enumerate(layers):
        if z is None:
            continue
        sel = winner[hit_idx] == k
        keep = hit_idx[sel]
        depth = ad.add(depth, ad.put_rows(np.zeros(P), keep,
                                          z[sel.nonzero()[0]] if isinstance(z, ad.Tensor)
                                          else ad.val(z)[sel]))
        rgb_sel = rgb_k[sel.nonzero()[0]] if isinstance(rgb_k, ad.Tensor) else np.asarray(rgb_k)[sel]
        rgb = ad.add(rgb, ad.put_rows(np.zeros((P, 3)), keep, rgb_sel))
    if floor is not None and len(f_idx):
        sel = winner[f_idx] == len(layers)
        keep = f_idx[sel]
        depth = ad.add(depth, ad.put_rows(np.zeros(P), keep, f_z[sel]))
        f_rgb_sel = f_rgb[sel.nonzero()[0]] if isinstance(f_rgb, ad.Tensor) else np.asarray(f_rgb)[sel]
        rgb = ad.add(rgb, ad.put_rows(np.zeros((P, 3)), keep, f_rgb_sel))

    return {"soft_masks": soft_masks, "own_depths": own_depths,
            "depth": depth, "rgb": rgb, "any_hit": any_hit}


def data_terms(terms, pack: ObsPack, weights):
    """Per-object image/depth/mask MAEs and the weighted data total."""
    mae_i, mae_d, mae_m = [], [], []
    total = 0.0
    for k, mask in enumerate(pack.masks):
        mi = masked_mae_formula(pack.image, terms["rgb"], mask)
        md = masked_mae_formula(pack.depth, terms["depth"], mask & pack.depth_valid)
        mm = full_frame_mae_formula(np.asarray(mask, dtype=np.float64),
                                    terms["soft_masks"][k])
        mae_i.append(mi)
        mae_d.append(md)
        mae_m.append(mm)
        total = ad.add(total, ad.add(ad.mul(weights.w_i, mi),
                                     ad.add(ad.mul(weights.w_d, md),
                                            ad.mul(weights.w_m, mm))))
    return mae_i, mae_d, mae_m, total


def material_barriers(materials, barrier_cfg, delta_max):
    """Sum of barrier terms over every bounded material parameter."""
    total = 0.0
    c = barrier_cfg.curvature
    for mat in materials:
        for key, lo, hi in (("ambient", 0.0, 1.0), ("diffuse", 0.0, 1.0),
                            ("specular", 0.0, 1.0), ("shininess", 1.0, delta_max)):
            total = ad.add(total, barrier_formula(_scalar(mat[key]), lo, hi, c))
        col = mat["color"]
        for j in range(3):
            cj = col[j] if isinstance(col, ad.Tensor) else float(np.asarray(col)[j])
            total = ad.add(total, barrier_formula(cj, 0.0, 1.0, c))
    return total
