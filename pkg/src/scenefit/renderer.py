"""Differentiable ray-traced renderer for sphere/mesh scenes.

One primary ray per pixel through the pinhole model, nearest hit across all
objects plus an optional checkered floor plane, Phong shading under a single
point light, and per-object soft masks computed from each object's own depth
layer. Depth means camera-space z throughout, so ``render`` and
``camera.backproject`` are mutually inverse on hit pixels.

The shading/soft-mask formulas are written against the autodiff primitive
set, so the exact same code runs on plain arrays (fast forward path) and on
tape nodes (optimization path).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .camera import CameraIntrinsics
from .errors import NotRenderable
from .geometry import TriangleMesh, bounding_sphere
from .render_kernels import T_EPS, mesh_nearest_hit, sphere_hit_t

DEFAULT_DELTA_MAX = 200.0
FLOOR_ID = -2
NO_HIT_ID = -1
MESH_CULL_MARGIN = 1.05


@dataclass
class Material:
    ambient: float = 0.1
    diffuse: float = 0.1
    specular: float = 0.1
    shininess: float = 100.0
    color: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5, 0.5]))
    delta_max: float = DEFAULT_DELTA_MAX

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        for name in ("ambient", "diffuse", "specular"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not (1.0 <= self.shininess <= self.delta_max):
            raise ValueError(f"shininess={self.shininess} outside [1, {self.delta_max}]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("color channels must lie in [0, 1]")

    def bounded_params(self):
        """(value, lower, upper) triples for the barrier terms."""
        out = [(self.ambient, 0.0, 1.0), (self.diffuse, 0.0, 1.0),
               (self.specular, 0.0, 1.0), (self.shininess, 1.0, self.delta_max)]
        out += [(float(c), 0.0, 1.0) for c in self.color]
        return out


@dataclass
class Light:
    position: np.ndarray
    intensity: float = 1.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.intensity < 0:
            raise ValueError("light intensity must be >= 0")


@dataclass
class FloorModel:
    height: float = 0.15                 # plane y = height (y points down)
    material: Material = field(default_factory=Material)
    checker: bool = True
    color_a: np.ndarray = field(default_factory=lambda: np.array([0.65, 0.65, 0.65]))
    color_b: np.ndarray = field(default_factory=lambda: np.array([0.45, 0.45, 0.45]))
    cell_size: float = 0.08

    def __post_init__(self):
        self.color_a = np.asarray(self.color_a, dtype=np.float64).reshape(3)
        self.color_b = np.asarray(self.color_b, dtype=np.float64).reshape(3)
        if self.cell_size <= 0:
            raise ValueError("cell size must be positive")


@dataclass
class Sphere:
    center: np.ndarray
    radii: np.ndarray   # per-axis, anisotropic allowed

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(3)
        if np.any(self.radii <= 0):
            raise ValueError("sphere radii must be positive")


@dataclass
class SceneObject:
    shape: object       # Sphere | TriangleMesh
    material: Material
    id: int = 0


@dataclass
class SceneModel:
    objects: list
    light: Light
    intrinsics: CameraIntrinsics
    floor: FloorModel = None


@dataclass
class SoftMaskConfig:
    d_min: float = 0.1       # nearest observable depth, meters
    d_max: float = 2.0       # farthest observable depth
    background: float = -10.0  # constant assigned to no-hit pixels
    steepness: float = 50.0
    eps_d: float = 1e-6

    def __post_init__(self):
        if self.d_min >= self.d_max:
            raise ValueError("d_min must be below d_max")
        if self.background >= 0:
            raise ValueError("background constant must be negative")
        if self.steepness <= 0:
            raise ValueError("steepness must be positive")


@dataclass
class RenderOutput:
    rgb: np.ndarray           # (V, U, 3) in [0, 1]
    depth: np.ndarray         # (V, U) camera-space z, 0 = no hit
    soft_masks: list          # K arrays (V, U) in (0, 1)
    hit_ids: np.ndarray       # (V, U) int: object index, FLOOR_ID, NO_HIT_ID
    object_depths: list       # K per-object own-layer depths (V, U), 0 = miss


# -- public single-ray operations ----------------------------------------
def ray_sphere_intersect(origin, direction, center, radii, t_eps=T_EPS):
    """Nearest hit of a ray with an axis-scaled sphere, or None.

    Returns (t, outward unit normal).
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64).reshape(3)
    dp = direction / radii
    op = (origin - center) / radii
    a = dp @ dp
    b = 2.0 * (op @ dp)
    c = op @ op - 1.0
    disc = b * b - 4.0 * a * c
    if disc < 0:
        return None
    sq = np.sqrt(disc)
    t = (-b - sq) / (2.0 * a)
    if t <= t_eps:
        t = (-b + sq) / (2.0 * a)
    if t <= t_eps:
        return None
    hit = origin + t * direction
    n = (hit - center) / (radii * radii)
    return t, n / np.linalg.norm(n)


def ray_triangle_intersect(origin, direction, v0, v1, v2, t_eps=T_EPS):
    """Moller-Trumbore solve, double-sided; None on miss or degeneracy.

    Returns (t, (b0, b1, b2), unit geometric normal).
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    v0 = np.asarray(v0, dtype=np.float64)
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    e1 = v1 - v0
    e2 = v2 - v0
    n_raw = np.cross(e1, e2)
    if 0.5 * np.linalg.norm(n_raw) < 1e-12:  # degenerate triangle
        return None
    pvec = np.cross(direction, e2)
    det = e1 @ pvec
    if abs(det) < 1e-14:
        return None
    inv = 1.0 / det
    tvec = origin - v0
    u = (tvec @ pvec) * inv
    if u < 0.0 or u > 1.0:
        return None
    qvec = np.cross(tvec, e1)
    v = (direction @ qvec) * inv
    if v < 0.0 or u + v > 1.0:
        return None
    t = (e2 @ qvec) * inv
    if t <= t_eps:
        return None
    return t, (1.0 - u - v, u, v), n_raw / np.linalg.norm(n_raw)


def phong_shade(point, normal, view_dir, material: Material, light: Light,
                base_color=None):
    """Phong shading of a single surface sample, clamped to [0, 1]."""
    point = np.asarray(point, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    color = material.color if base_color is None else np.asarray(base_color, dtype=np.float64)
    rgb = shade_formula(
        normals=normal.reshape(1, 3), points=point.reshape(1, 3),
        view_dirs=np.asarray(view_dir, dtype=np.float64).reshape(1, 3),
        ambient=material.ambient, diffuse=material.diffuse,
        specular=material.specular, shininess=material.shininess,
        color=color.reshape(1, 3), light_pos=light.position,
        light_int=light.intensity,
    )
    return np.asarray(ad.val(rgb)).reshape(3)


# -- generic formulas (ndarray or Tensor inputs) --------------------------
def shade_formula(normals, points, view_dirs, ambient, diffuse, specular,
                  shininess, color, light_pos, light_int):
    """rgb = color * (alpha + li*beta*max(0, n.l)) + li*gamma*max(0, r.v)^delta.

    ``normals``/``points``/``view_dirs`` are (n, 3); material scalars may be
    taped; ``color`` broadcasts to (n, 3). The reflection r mirrors -l about
    the normal. Output clamped to [0, 1].
    """
    l_vec = ad.sub(light_pos, points)
    l_norm = ad.norm(l_vec)
    inv_ln = ad.div(1.0, l_norm)
    lx = ad.mul(ad.col(l_vec, 0), inv_ln)
    ly = ad.mul(ad.col(l_vec, 1), inv_ln)
    lz = ad.mul(ad.col(l_vec, 2), inv_ln)
    l_unit = ad.stack_cols([lx, ly, lz])
    n_dot_l = ad.dot(normals, l_unit)
    diff = ad.mul(ad.mul(light_int, diffuse), ad.relu(n_dot_l))
    # r = 2 (n.l) n - l
    two_ndl = ad.mul(2.0, n_dot_l)
    r = ad.sub(ad.mul(normals, ad.reshape(two_ndl, (-1, 1))), l_unit)
    r_dot_v = ad.dot(r, view_dirs)
    spec = ad.mul(ad.mul(light_int, specular),
                  ad.powpos(ad.relu(r_dot_v), shininess))
    shade = ad.add(ambient, diff)
    rgb = ad.add(ad.mul(color, ad.reshape(shade, (-1, 1))),
                 ad.reshape(spec, (-1, 1)))
    return ad.clamp01(rgb)


def soft_mask_formula(depth, cfg: SoftMaskConfig):
    """Eq-style soft mask: sigmoid(kappa * d') with min-max normalized d'.

    d' = (-d + d_max) / (d_max - d_min) - 0.5 where d > eps_d, else the
    negative background constant. Differentiable w.r.t. depth everywhere a
    hit exists.
    """
    valid = ad.val(depth) > cfg.eps_d
    d_norm = ad.sub(ad.mul(ad.sub(cfg.d_max, depth), 1.0 / (cfg.d_max - cfg.d_min)),
                    0.5)
    d_prime = ad.where(valid, d_norm, np.full(np.shape(ad.val(depth)), cfg.background))
    return ad.sigmoid(ad.mul(cfg.steepness, d_prime))


def soft_mask(depth, cfg: SoftMaskConfig = None):
    """Soft mask of a depth layer (plain-array entry point)."""
    cfg = cfg or SoftMaskConfig()
    return np.asarray(ad.val(soft_mask_formula(np.asarray(depth, dtype=np.float64), cfg)))


def sphere_t_formula(dirs, center, radii, valid):
    """Taped nearest-t of rays against a scaled sphere on pre-selected rays.

    ``valid`` flags rays known to hit (from the value-level search); invalid
    lanes get a placeholder discriminant to keep sqrt differentiable.
    """
    inv_r = ad.div(1.0, radii)
    dp = ad.mul(dirs, inv_r)
    op = ad.mul(ad.mul(center, -1.0), inv_r)
    a = ad.dot(dp, dp)
    b = ad.mul(2.0, ad.dot(dp, ad.reshape(op, (1, 3))))
    c = ad.sub(ad.dot(ad.reshape(op, (1, 3)), ad.reshape(op, (1, 3))), 1.0)
    disc = ad.sub(ad.mul(b, b), ad.mul(ad.mul(4.0, a), c))
    disc_safe = ad.where(valid, disc, np.ones(np.shape(ad.val(disc))))
    sq = ad.sqrt(disc_safe)
    t = ad.div(ad.sub(ad.mul(b, -1.0), sq), ad.mul(2.0, a))
    return t


def triangle_t_formula(dirs, v0, v1, v2):
    """Taped Moller-Trumbore t and raw normal for pre-matched ray/triangle rows."""
    e1 = ad.sub(v1, v0)
    e2 = ad.sub(v2, v0)
    pvec = ad.cross(dirs, e2)
    det = ad.dot(e1, pvec)
    inv = ad.div(1.0, det)
    tvec = ad.mul(v0, -1.0)
    qvec = ad.cross(tvec, e1)
    t = ad.mul(ad.dot(e2, qvec), inv)
    n_raw = ad.cross(e1, e2)
    return t, n_raw


def normalize_rows(m):
    n = ad.norm(m)
    return ad.mul(m, ad.reshape(ad.div(1.0, n), (-1, 1)))


def checker_parity(x, z, cell_size):
    """Boolean parity of the floor checker at plane coordinates (x, z)."""
    ix = np.floor(np.asarray(x) / cell_size).astype(np.int64)
    iz = np.floor(np.asarray(z) / cell_size).astype(np.int64)
    return ((ix + iz) % 2) == 0


# -- forward rendering -----------------------------------------------------
def _floor_t(dirs_flat, height):
    dy = dirs_flat[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = height / dy
    return np.where((dy > 1e-12) & (t > T_EPS), t, np.inf)


def _mesh_t(dirs_flat, mesh: TriangleMesh, use_numba, n_threads):
    """Nearest mesh hit per ray with an exact bounding-sphere cull."""
    center, radius = bounding_sphere(mesh.vertices)
    cand = np.isfinite(sphere_hit_t(dirs_flat, center,
                                    np.full(3, radius * MESH_CULL_MARGIN)))
    t = np.full(len(dirs_flat), np.inf)
    fidx = np.full(len(dirs_flat), -1, dtype=np.int64)
    idx = np.nonzero(cand)[0]
    if len(idx) == 0:
        return t, fidx
    sub = np.ascontiguousarray(dirs_flat[idx])
    if n_threads > 1 and len(idx) > 4096:
        chunks = np.array_split(np.arange(len(idx)), n_threads)
        results = [None] * len(chunks)

        def work(ci):
            rows = chunks[ci]
            results[ci] = mesh_nearest_hit(sub[rows], mesh.vertices, mesh.faces,
                                           use_numba=use_numba)
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(work, range(len(chunks))))
        t_sub = np.concatenate([r[0] for r in results])
        f_sub = np.concatenate([r[1] for r in results])
    else:
        t_sub, f_sub = mesh_nearest_hit(sub, mesh.vertices, mesh.faces,
                                        use_numba=use_numba)
    t[idx] = t_sub
    fidx[idx] = f_sub
    return t, fidx


def _shade_pixels(dirs, t, normals_raw, material, light, base_color):
    """Shade hit pixels given raw (unnormalized, unoriented) normals."""
    pts = dirs * t[:, None]
    nrm = normals_raw / np.linalg.norm(normals_raw, axis=1, keepdims=True)
    # double-sided: orient toward the camera
    flip = np.sign(np.einsum("ij,ij->i", nrm, dirs))
    nrm = nrm * np.where(flip > 0, -1.0, 1.0)[:, None]
    rgb = shade_formula(
        normals=nrm, points=pts, view_dirs=-dirs,
        ambient=material.ambient, diffuse=material.diffuse,
        specular=material.specular, shininess=material.shininess,
        color=base_color, light_pos=light.position, light_int=light.intensity,
    )
    return np.asarray(ad.val(rgb))


def render(scene: SceneModel, smcfg: SoftMaskConfig = None, n_threads=1,
           use_numba=None) -> RenderOutput:
    """Forward render: rgb, composite depth, per-object soft masks, hit ids.

    Per-object soft masks come from each object's own depth layer (other
    objects and the floor ignored), so masks stay differentiable under
    occlusion in the optimization path; the composite depth/rgb use the
    global nearest hit. Deterministic for fixed inputs and any thread count.
    """
    smcfg = smcfg or SoftMaskConfig()
    intr = scene.intrinsics
    U, V = intr.width, intr.height
    dirs = intr.ray_directions().reshape(-1, 3)
    P = dirs.shape[0]
    K = len(scene.objects)

    t_layers = np.full((K + 1, P), np.inf)
    face_idx = [None] * K
    for k, obj in enumerate(scene.objects):
        if isinstance(obj.shape, Sphere):
            t_layers[k] = sphere_hit_t(dirs, obj.shape.center, obj.shape.radii)
        elif isinstance(obj.shape, TriangleMesh):
            t_layers[k], face_idx[k] = _mesh_t(dirs, obj.shape, use_numba, n_threads)
        else:
            raise NotRenderable(f"unsupported shape {type(obj.shape)!r}")
    if scene.floor is not None:
        t_layers[K] = _floor_t(dirs, scene.floor.height)

    winner = np.argmin(t_layers, axis=0)
    t_min = t_layers[winner, np.arange(P)]
    hit = np.isfinite(t_min)
    hit_ids = np.full(P, NO_HIT_ID, dtype=np.int16)
    hit_ids[hit & (winner < K)] = winner[hit & (winner < K)].astype(np.int16)
    hit_ids[hit & (winner == K)] = FLOOR_ID

    depth = np.where(hit, t_min * dirs[:, 2], 0.0)
    rgb = np.zeros((P, 3))

    # floor shading
    if scene.floor is not None:
        sel = np.nonzero(hit & (winner == K))[0]
        if len(sel):
            tf = t_min[sel]
            pts = dirs[sel] * tf[:, None]
            if scene.floor.checker:
                par = checker_parity(pts[:, 0], pts[:, 2], scene.floor.cell_size)
                base = np.where(par[:, None], scene.floor.color_a, scene.floor.color_b)
            else:
                base = np.broadcast_to(scene.floor.material.color, (len(sel), 3))
            normals = np.broadcast_to(np.array([0.0, -1.0, 0.0]), (len(sel), 3))
            rgb[sel] = np.asarray(ad.val(shade_formula(
                normals=normals, points=pts, view_dirs=-dirs[sel],
                ambient=scene.floor.material.ambient,
                diffuse=scene.floor.material.diffuse,
                specular=scene.floor.material.specular,
                shininess=scene.floor.material.shininess,
                color=base, light_pos=scene.light.position,
                light_int=scene.light.intensity,
            )))

    object_depths = []
    soft_masks = []
    for k, obj in enumerate(scene.objects):
        own_t = t_layers[k]
        own_hit = np.isfinite(own_t)
        own_depth = np.where(own_hit, own_t * dirs[:, 2], 0.0)
        object_depths.append(own_depth.reshape(V, U))
        soft_masks.append(soft_mask(own_depth, smcfg).reshape(V, U))

        sel = np.nonzero(hit & (winner == k))[0]
        if not len(sel):
            continue
        tk = t_min[sel]
        if isinstance(obj.shape, Sphere):
            pts = dirs[sel] * tk[:, None]
            n_raw = (pts - obj.shape.center) / (obj.shape.radii ** 2)
        else:
            f = obj.shape.faces[face_idx[k][sel]]
            v = obj.shape.vertices
            n_raw = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        rgb[sel] = _shade_pixels(dirs[sel], tk, n_raw, obj.material, scene.light,
                                 np.broadcast_to(obj.material.color, (len(sel), 3)))

    return RenderOutput(
        rgb=rgb.reshape(V, U, 3),
        depth=depth.reshape(V, U),
        soft_masks=soft_masks,
        hit_ids=hit_ids.reshape(V, U),
        object_depths=object_depths,
    )
