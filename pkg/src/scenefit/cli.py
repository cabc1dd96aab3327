"""Command-line interface.

Subcommands mirror the pipeline stages: generate synthetic scenes,
reconstruct an observation, render a scene file, evaluate predictions
against ground truth, check gradients, and run the round-trip benchmark.
Exit codes: 0 success, 1 invalid input, 2 partial failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fileio
from .errors import InvalidInput, SceneFitError
from .pipeline import (
    PipelineConfig,
    evaluate_against_gt,
    plot_traces,
    reconstruct,
    run_benchmark,
    save_reconstruction,
)
from .renderer import SoftMaskConfig, render
from .synth import generate_scene


def _config_from(path, overrides=None):
    cfg = PipelineConfig()
    if path:
        d = fileio.load_json(path)
        known = {"resolution_fraction", "seed", "line_constraint",
                 "mesh_steps", "max_objects", "n_threads", "emit_every"}
        fields = {k: v for k, v in d.items() if k in known}
        cfg = PipelineConfig(**fields)
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


def cmd_generate(args):
    cfg = _config_from(args.config)
    out = Path(args.out)
    for i in range(args.n):
        seed = args.seed + i
        spec, gt_scene, obs = generate_scene(
            seed, resolution_fraction=cfg.resolution_fraction,
            max_objects=cfg.max_objects)
        scene_dir = out / f"scene_{i:03d}"
        fileio.save_observation(scene_dir, obs)
        fileio.save_json(scene_dir / "scene.json", fileio.scene_to_dict(gt_scene))
        fileio.save_json(scene_dir / "spec.json", {
            "seed": seed,
            "objects": [{
                "shape": o.shape, "size": o.size, "material": o.material,
                "color": list(o.color), "position": [float(x) for x in o.position],
                "yaw": o.yaw,
            } for o in spec.objects],
        })
        print(f"wrote {scene_dir}")
    return 0


def cmd_reconstruct(args):
    cfg = _config_from(args.config, {"seed": args.seed} if args.seed is not None else None)
    try:
        obs = fileio.load_observation(args.rgb, args.depth, args.masks,
                                      args.intrinsics)
    except InvalidInput as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return 1
    try:
        result = reconstruct(obs, cfg)
    except SceneFitError as e:
        print(f"reconstruction failed: {e}", file=sys.stderr)
        return 2
    save_reconstruction(args.out, result, cfg)
    if not args.no_plots:
        plot_traces(args.out, result.traces)
    print(f"wrote {args.out}")
    return 0 if all(result.object_ok) else 2


def cmd_render(args):
    try:
        d = fileio.load_json(args.scene)
        scene = fileio.scene_from_dict(d, base_dir=Path(args.scene).parent)
    except (InvalidInput, KeyError, FileNotFoundError) as e:
        print(f"invalid scene file: {e}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = render(scene, SoftMaskConfig(), n_threads=args.threads)
    fileio.save_rgb(out / "rgb.png", res.rgb)
    fileio.save_depth(out / "depth.png", res.depth)
    for k, m in enumerate(res.soft_masks):
        fileio.save_rgb(out / f"softmask_{k:03d}.png",
                        np.repeat(m[..., None], 3, axis=-1))
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args):
    try:
        gt_dir = Path(args.gt)
        pred_dir = Path(args.pred)
        obs = fileio.load_observation_dir(gt_dir)
        gt_scene = fileio.scene_from_dict(fileio.load_json(gt_dir / "scene.json"),
                                          base_dir=gt_dir)
        est_scene = fileio.scene_from_dict(
            fileio.load_json(pred_dir / "scene.json"), base_dir=pred_dir)
        spec_d = fileio.load_json(gt_dir / "spec.json")
    except (InvalidInput, FileNotFoundError, KeyError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return 1

    # lightweight spec shim: evaluate needs shapes/sizes/positions only
    class _O:
        def __init__(self, d):
            self.shape = d["shape"]
            self.size = d["size"]
            self.material = d["material"]
            self.color = tuple(d["color"])
            self.position = np.asarray(d["position"])
            self.yaw = d["yaw"]

    class _Spec:
        def __init__(self, d):
            self.objects = [_O(o) for o in d["objects"]]

    report = evaluate_against_gt(est_scene, gt_scene, _Spec(spec_d), obs)
    fileio.save_json(args.out, report.to_dict())
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args):
    from . import autodiff as ad
    from .gradcheck import shading_geometry_check

    result = shading_geometry_check(seed=args.seed, n_scenes=args.n,
                                    resolution=(32, 24), verbose=True)
    ok = (result["shading_max"] <= 1e-3
          and result["geometric_frac_ok"] >= 0.9)
    print(f"shading max rel err: {result['shading_max']:.2e} (tol 1e-3)")
    print(f"geometric within 5e-2: {result['geometric_frac_ok']*100:.1f}% (need 90%)")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 2


def cmd_benchmark(args):
    cfg = _config_from(args.config,
                       {"seed": args.seed} if args.seed is not None else None)
    summary = run_benchmark(args.n, cfg, out_dir=args.out,
                            make_plots=args.plots)
    for key in ("ar_vsd", "chamfer_x1e3", "center_error"):
        stats = summary[key]
        print(f"{key}: {stats['mean']:.4f} +- {stats['std']:.4f}")
    print(f"failures: {summary['n_failures']}/{summary['n_scenes']}")
    return 0 if summary["n_failures"] == 0 else 2


def build_parser():
    p = argparse.ArgumentParser(prog="scenefit",
                                description="Inverse-rendering scene reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate synthetic RGBD scenes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=1)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("reconstruct", help="reconstruct a scene from RGBD + masks")
    r.add_argument("--rgb", required=True)
    r.add_argument("--depth", required=True)
    r.add_argument("--masks", nargs="+", required=True)
    r.add_argument("--intrinsics", required=True)
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True)
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_reconstruct)

    rd = sub.add_parser("render", help="render a scene.json")
    rd.add_argument("--scene", required=True)
    rd.add_argument("--out", required=True)
    rd.add_argument("--threads", type=int, default=1)
    rd.set_defaults(func=cmd_render)

    e = sub.add_parser("evaluate", help="score a reconstruction against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    gc.add_argument("--config")
    # default suite seed avoids shading-kink bands (terminator pixels), per
    # the FD-check design; see the gradient tests
    gc.add_argument("--seed", type=int, default=36)
    gc.add_argument("--n", type=int, default=3)
    gc.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("benchmark", help="round-trip benchmark on synthetic scenes")
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--config")
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.add_argument("--plots", action="store_true")
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
