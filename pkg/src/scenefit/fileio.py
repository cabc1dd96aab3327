"""File formats: PNGs for images/depth/masks, OBJ meshes, JSON metadata.

All writers are bit-deterministic for identical inputs: fixed-precision
ASCII for meshes/JSON, lossless PNG for rasters, depth as 16-bit
millimeters (0 = invalid).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics, ObservationSet
from .errors import InvalidInput
from .geometry import TriangleMesh
from .renderer import FloorModel, Light, Material, SceneModel, SceneObject, Sphere


# -- rasters ---------------------------------------------------------------
def save_rgb(path, rgb):
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_rgb(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_depth(path, depth):
    mm = np.clip(np.round(np.asarray(depth) * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm, mode="I;16").save(path)


def load_depth(path):
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64)
    return arr / 1000.0


def save_mask(path, mask):
    arr = (np.asarray(mask).astype(bool) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_mask(path):
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.uint8)


# -- meshes ----------------------------------------------------------------
def save_obj(path, mesh: TriangleMesh):
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9f} {v[1]:.9f} {v[2]:.9f}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path):
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    if not verts:
        raise InvalidInput(f"no vertices in {path}")
    return TriangleMesh(np.array(verts), np.array(faces))


# -- json ------------------------------------------------------------------
def save_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


def intrinsics_to_dict(intr: CameraIntrinsics):
    return {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
            "width": intr.width, "height": intr.height}


def intrinsics_from_dict(d):
    return CameraIntrinsics(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                            width=int(d["width"]), height=int(d["height"]))


def material_to_dict(m: Material):
    return {"ambient": m.ambient, "diffuse": m.diffuse, "specular": m.specular,
            "shininess": m.shininess, "color": [float(c) for c in m.color],
            "delta_max": m.delta_max}


def material_from_dict(d):
    return Material(ambient=d["ambient"], diffuse=d["diffuse"],
                    specular=d["specular"], shininess=d["shininess"],
                    color=np.asarray(d["color"]),
                    delta_max=d.get("delta_max", 200.0))


def scene_to_dict(scene: SceneModel, mesh_paths=None):
    """Scene as JSON; mesh shapes reference OBJ files by relative path."""
    objs = []
    for k, o in enumerate(scene.objects):
        entry = {"id": int(o.id), "material": material_to_dict(o.material)}
        if isinstance(o.shape, Sphere):
            entry["shape"] = "sphere"
            entry["center"] = [float(x) for x in o.shape.center]
            entry["radii"] = [float(x) for x in o.shape.radii]
        else:
            entry["shape"] = "mesh"
            entry["obj_file"] = mesh_paths[k] if mesh_paths else f"mesh_{k:03d}.obj"
        objs.append(entry)
    d = {
        "intrinsics": intrinsics_to_dict(scene.intrinsics),
        "light": {"position": [float(x) for x in scene.light.position],
                  "intensity": float(scene.light.intensity)},
        "objects": objs,
    }
    if scene.floor is not None:
        d["floor"] = {
            "height": float(scene.floor.height),
            "material": material_to_dict(scene.floor.material),
            "checker": bool(scene.floor.checker),
            "color_a": [float(x) for x in scene.floor.color_a],
            "color_b": [float(x) for x in scene.floor.color_b],
            "cell_size": float(scene.floor.cell_size),
        }
    return d


def scene_from_dict(d, base_dir=None):
    base = Path(base_dir) if base_dir else Path(".")
    objects = []
    for entry in d["objects"]:
        mat = material_from_dict(entry["material"])
        if entry["shape"] == "sphere":
            shape = Sphere(center=np.asarray(entry["center"]),
                           radii=np.asarray(entry["radii"]))
        elif entry["shape"] == "mesh":
            shape = load_obj(base / entry["obj_file"])
        else:
            raise InvalidInput(f"unknown shape {entry['shape']!r}")
        objects.append(SceneObject(shape=shape, material=mat,
                                   id=int(entry["id"])))
    floor = None
    if "floor" in d:
        f = d["floor"]
        floor = FloorModel(height=f["height"],
                           material=material_from_dict(f["material"]),
                           checker=f["checker"],
                           color_a=np.asarray(f["color_a"]),
                           color_b=np.asarray(f["color_b"]),
                           cell_size=f["cell_size"])
    return SceneModel(
        objects=objects,
        light=Light(position=np.asarray(d["light"]["position"]),
                    intensity=d["light"]["intensity"]),
        intrinsics=intrinsics_from_dict(d["intrinsics"]),
        floor=floor,
    )


def pose_to_matrix_list(pose):
    return [[float(x) for x in row] for row in pose.matrix]


# -- observation directories -------------------------------------------------
def save_observation(out_dir, obs: ObservationSet):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_rgb(out / "rgb.png", obs.rgb)
    save_depth(out / "depth.png", obs.depth)
    mask_files = []
    for k, m in enumerate(obs.masks):
        name = f"mask_{k:03d}.png"
        save_mask(out / name, m)
        mask_files.append(name)
    save_json(out / "masks.json", {"masks": mask_files})
    save_json(out / "intrinsics.json", intrinsics_to_dict(obs.intrinsics))


def load_observation(rgb_path, depth_path, mask_paths, intrinsics_path):
    intr = intrinsics_from_dict(load_json(intrinsics_path))
    rgb = load_rgb(rgb_path)
    depth = load_depth(depth_path)
    masks = [load_mask(p) for p in mask_paths]
    try:
        return ObservationSet(rgb=rgb, depth=depth, masks=masks, intrinsics=intr)
    except ValueError as e:
        raise InvalidInput(str(e)) from e


def load_observation_dir(obs_dir):
    obs_dir = Path(obs_dir)
    manifest = load_json(obs_dir / "masks.json")
    mask_paths = [obs_dir / m for m in manifest["masks"]]
    return load_observation(obs_dir / "rgb.png", obs_dir / "depth.png",
                            mask_paths, obs_dir / "intrinsics.json")


def config_hash(config_dict):
    return hashlib.sha256(
        json.dumps(config_dict, sort_keys=True).encode()).hexdigest()[:16]


def write_trace_jsonl(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
