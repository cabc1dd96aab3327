"""End-to-end reconstruction pipeline and the round-trip benchmark."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fileio
from .camera import ObservationSet, backproject, cloud_stats, partition_by_masks
from .ellipsoid import EllipsoidParams, PriorConfig, fit_map
from .errors import EmptyCloud, SceneFitError
from .geometry import TriangleMesh, icosphere, sample_surface, signed_volume
from .mesh_opt import MeshOptConfig, Pose, optimize_meshes, pca_pose
from .metrics import MetricReport, chamfer, hausdorff, mask_iou, vsd_recall
from .optim import AdamwConfig, LbfgsConfig
from .renderer import SceneModel, SceneObject, SoftMaskConfig, Sphere, render
from .scene_opt import LossWeights, SceneOptConfig, optimize_scene
from .synth import generate_scene, gt_object_mesh, scene_from_spec

METRIC_SAMPLES = 1000


@dataclass
class PipelineConfig:
    resolution_fraction: float = 0.2
    seed: int = 0
    line_constraint: bool = True
    prior: PriorConfig = field(default_factory=PriorConfig)
    scene: SceneOptConfig = None
    mesh: MeshOptConfig = None
    mesh_steps: int = 4000
    max_objects: int = 3
    n_threads: int = 1
    emit_every: int = 500

    def __post_init__(self):
        if not (0.0 < self.resolution_fraction <= 1.0):
            raise ValueError("resolution fraction must lie in (0, 1]")
        if self.scene is None:
            self.scene = SceneOptConfig(
                seed=self.seed,
                line_constraint=self.line_constraint,
                lbfgs_objects=LbfgsConfig(max_iters=60, grad_tol=1e-10),
            )
        if self.mesh is None:
            self.mesh = MeshOptConfig(
                adamw=AdamwConfig(lr=5e-3, steps=self.mesh_steps),
                emit_every=self.emit_every,
            )

    def to_dict(self):
        return {
            "resolution_fraction": self.resolution_fraction,
            "seed": self.seed,
            "line_constraint": self.line_constraint,
            "mesh_steps": self.mesh_steps,
            "max_objects": self.max_objects,
            "weights": asdict(self.scene.weights),
            "prior": asdict(self.prior),
        }


@dataclass
class ReconstructionResult:
    scene: SceneModel              # final scene (meshes where fitting ran)
    poses: list                    # per-object Pose or None
    ellipsoids: list               # per-object EllipsoidParams or None
    object_ok: list                # stage isolation flags
    traces: dict                   # stage -> list of records
    timings: dict                  # stage -> seconds
    metrics: MetricReport = None
    diverged: bool = False


def reconstruct(obs: ObservationSet, cfg: PipelineConfig = None,
                gt_scene: SceneModel = None, gt_spec=None,
                emit_callback=None) -> ReconstructionResult:
    """Full cascade: backproject -> ellipsoids -> scene fit -> mesh fit -> poses.

    Per-object failures (unusable masks) skip that object and leave the
    others untouched. Metrics are filled in when ground truth is supplied.
    """
    cfg = cfg or PipelineConfig()
    timings = {}
    traces = {}

    t0 = time.perf_counter()
    cloud = backproject(obs.depth, obs.intrinsics)
    clouds, empty_flags = partition_by_masks(cloud, obs.masks)
    object_ok = [not f for f in empty_flags]
    ellipsoids = []
    for k, (sub, ok) in enumerate(zip(clouds, object_ok)):
        if not ok:
            ellipsoids.append(None)
            continue
        try:
            ellipsoids.append(fit_map(sub, cfg=cfg.prior).params)
        except SceneFitError:
            object_ok[k] = False
            ellipsoids.append(None)
    timings["ellipsoid"] = time.perf_counter() - t0

    live = [k for k, ok in enumerate(object_ok) if ok]
    if not live:
        raise EmptyCloud("no object produced a usable point cloud")

    live_obs = ObservationSet(rgb=obs.rgb, depth=obs.depth,
                              masks=[obs.masks[k] for k in live],
                              intrinsics=obs.intrinsics)
    t0 = time.perf_counter()
    scene_cfg = replace(cfg.scene, seed=cfg.seed,
                        line_constraint=cfg.line_constraint)
    res3 = optimize_scene(live_obs, [ellipsoids[k] for k in live], scene_cfg)
    timings["scene"] = time.perf_counter() - t0
    traces["scene"] = res3.trace

    t0 = time.perf_counter()
    mesh_cfg = cfg.mesh
    if mesh_cfg.smcfg is None:
        mesh_cfg = replace(mesh_cfg, smcfg=res3.smcfg)
    res4 = optimize_meshes(live_obs, res3.scene, mesh_cfg,
                           emit_callback=emit_callback)
    timings["mesh"] = time.perf_counter() - t0
    traces["mesh"] = [{"step": i, "total": float(v)}
                      for i, v in enumerate(res4.trace)]

    poses = [None] * len(obs.masks)
    final_objects = []
    for j, k in enumerate(live):
        mesh = res4.scene.objects[j].shape
        poses[k] = pca_pose(mesh)
        final_objects.append(SceneObject(shape=mesh,
                                         material=res4.scene.objects[j].material,
                                         id=k))
    final_scene = SceneModel(objects=final_objects, light=res4.scene.light,
                             intrinsics=obs.intrinsics, floor=res4.scene.floor)

    metrics = None
    if gt_scene is not None and gt_spec is not None:
        metrics = evaluate_against_gt(final_scene, gt_scene, gt_spec, obs,
                                      live, res3.smcfg)

    return ReconstructionResult(scene=final_scene, poses=poses,
                                ellipsoids=ellipsoids, object_ok=object_ok,
                                traces=traces, timings=timings,
                                metrics=metrics, diverged=res3.diverged)


def evaluate_against_gt(est_scene: SceneModel, gt_scene: SceneModel, gt_spec,
                        obs, live_indices=None, smcfg=None) -> MetricReport:
    """Chamfer/Hausdorff on sampled surfaces, VSD recall, mask IoU, centers."""
    report = MetricReport()
    live_indices = live_indices or list(range(len(gt_scene.objects)))
    est_out = render(est_scene, smcfg or SoftMaskConfig())
    for j, k in enumerate(live_indices):
        est_mesh = est_scene.objects[j].shape
        gt_mesh = gt_object_mesh(gt_spec.objects[k])
        est_pts = sample_surface(est_mesh, METRIC_SAMPLES, seed=17)
        gt_pts = sample_surface(gt_mesh, METRIC_SAMPLES, seed=18)
        report.chamfer.append(chamfer(est_pts, gt_pts) * 1e3)
        report.hausdorff.append(hausdorff(est_pts, gt_pts))
        report.ar_vsd.append(vsd_recall(est_scene, gt_scene, j, smcfg=smcfg))
        pred_mask = est_out.hit_ids == j
        report.iou.append(mask_iou(pred_mask, obs.masks[k]))
        gt_center = np.asarray(gt_spec.objects[k].position)
        report.center_error.append(
            float(np.linalg.norm(est_mesh.vertices.mean(axis=0) - gt_center)))
    return report


def stage3_sphere_chamfer(res3_scene: SceneModel, gt_spec, live_indices=None):
    """Chamfer of the stage-3 spheres, discretized as the mesh-stage init."""
    base = icosphere(2)
    vol_match = (4.0 / 3.0 * np.pi / signed_volume(base)) ** (1.0 / 3.0)
    live_indices = live_indices or list(range(len(gt_spec.objects)))
    out = []
    for j, k in enumerate(live_indices):
        sph = res3_scene.objects[j].shape
        mesh = base.transformed(scale=sph.radii * vol_match,
                                translation=sph.center)
        gt_pts = sample_surface(gt_object_mesh(gt_spec.objects[k]),
                                METRIC_SAMPLES, seed=18)
        out.append(chamfer(sample_surface(mesh, METRIC_SAMPLES, seed=17),
                           gt_pts) * 1e3)
    return out


def save_reconstruction(out_dir, result: ReconstructionResult,
                        cfg: PipelineConfig):
    """Write meshes, poses, scene, previews, traces, and provenance."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh_paths = []
    for j, obj in enumerate(result.scene.objects):
        name = f"mesh_{obj.id:03d}.obj"
        fileio.save_obj(out / name, obj.shape)
        mesh_paths.append(name)
    fileio.save_json(out / "scene.json",
                     fileio.scene_to_dict(result.scene, mesh_paths))
    fileio.save_json(out / "poses.json", {
        "poses": [fileio.pose_to_matrix_list(p) if p is not None else None
                  for p in result.poses],
        "degenerate": [bool(p.degenerate) if p is not None else None
                       for p in result.poses],
    })
    preview = render(result.scene)
    fileio.save_rgb(out / "preview_rgb.png", preview.rgb)
    fileio.save_depth(out / "preview_depth.png", preview.depth)
    for stage, recs in result.traces.items():
        fileio.write_trace_jsonl(out / f"trace_{stage}.jsonl", recs)
    if result.metrics is not None:
        fileio.save_json(out / "metrics.json", result.metrics.to_dict())
    # timings are wall clock and live only here (outputs stay byte-stable)
    fileio.save_json(out / "provenance.json", {
        "config_hash": fileio.config_hash(cfg.to_dict()),
        "seed": cfg.seed,
        "timings": {k: round(v, 3) for k, v in result.timings.items()},
        "object_ok": list(map(bool, result.object_ok)),
        "diverged": bool(result.diverged),
    })


def plot_traces(out_dir, traces):
    """Convergence curves per stage (diagnostic, not a benchmark output)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, max(len(traces), 1), figsize=(5 * len(traces), 3.2))
    if len(traces) == 1:
        axes = [axes]
    for ax, (stage, recs) in zip(axes, traces.items()):
        ys = [r["total"] for r in recs]
        ax.plot(ys)
        ax.set_title(stage)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(Path(out_dir) / "convergence.png", dpi=110)
    plt.close(fig)


def run_benchmark(n_scenes, cfg: PipelineConfig = None, out_dir=None,
                  make_plots=False):
    """Generate, reconstruct, and score ``n_scenes`` synthetic scenes.

    Returns a summary dict with mean/std of each metric plus per-stage wall
    clock. Per-scene failures are counted, not fatal. Deterministic apart
    from the timing fields (kept out of the summary report file).
    """
    cfg = cfg or PipelineConfig()
    out = Path(out_dir) if out_dir else None
    per_scene = []
    failures = 0
    stage_times = {"ellipsoid": [], "scene": [], "mesh": []}

    for i in range(n_scenes):
        seed = cfg.seed + i
        spec, gt_scene, obs = generate_scene(
            seed, resolution_fraction=cfg.resolution_fraction,
            max_objects=cfg.max_objects)
        scene_dir = out / f"scene_{i:03d}" if out else None
        if scene_dir:
            fileio.save_observation(scene_dir / "gt", obs)
            fileio.save_json(scene_dir / "gt" / "scene.json",
                             fileio.scene_to_dict(gt_scene))
        try:
            result = reconstruct(obs, replace(cfg, seed=seed),
                                 gt_scene=gt_scene, gt_spec=spec)
        except SceneFitError:
            failures += 1
            continue
        for stage, dt in result.timings.items():
            stage_times[stage].append(dt)
        per_scene.append(result.metrics.summary())
        if scene_dir:
            save_reconstruction(scene_dir / "pred", result, cfg)
            if make_plots:
                plot_traces(scene_dir / "pred", result.traces)

    def agg(key):
        vals = [s[key] for s in per_scene if np.isfinite(s[key])]
        if not vals:
            return {"mean": float("nan"), "std": float("nan")}
        return {"mean": float(np.mean(vals)), "std": float(np.std(vals))}

    summary = {
        "n_scenes": n_scenes,
        "n_failures": failures,
        "ar_vsd": agg("ar_vsd_mean"),
        "chamfer_x1e3": agg("chamfer_x1e3_mean"),
        "hausdorff": agg("hausdorff_mean"),
        "center_error": agg("center_error_mean"),
        "iou": agg("iou_mean"),
        "config_hash": fileio.config_hash(cfg.to_dict()),
        "seed": cfg.seed,
    }
    if out:
        fileio.save_json(out / "summary.json", summary)
        fileio.save_json(out / "timings.json", {
            k: {"mean": float(np.mean(v)) if v else float("nan"),
                "total": float(np.sum(v)) if v else 0.0}
            for k, v in stage_times.items()})
    summary["stage_times"] = {k: (float(np.mean(v)) if v else float("nan"))
                              for k, v in stage_times.items()}
    return summary
