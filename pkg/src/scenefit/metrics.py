"""Geometry and pose metrics: Chamfer, Hausdorff, VSD recall, mask IoU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .camera import PointCloud
from .errors import EmptyCloud, NotRenderable
from .renderer import SceneModel, render

VSD_THETA = 0.3
VSD_TAU_FRACTIONS = np.arange(0.05, 0.501, 0.05)  # of the object diameter


@dataclass
class MetricReport:
    chamfer: list = field(default_factory=list)     # per object, x1e3
    hausdorff: list = field(default_factory=list)   # per object, meters
    ar_vsd: list = field(default_factory=list)      # per object, [0, 1]
    iou: list = field(default_factory=list)         # per object, [0, 1]
    center_error: list = field(default_factory=list)  # per object, meters

    def summary(self):
        mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
        return {
            "chamfer_x1e3_mean": mean(self.chamfer),
            "hausdorff_mean": mean(self.hausdorff),
            "ar_vsd_mean": mean(self.ar_vsd),
            "iou_mean": mean(self.iou),
            "center_error_mean": mean(self.center_error),
        }

    def to_dict(self):
        d = {"per_object": {
            "chamfer_x1e3": list(map(float, self.chamfer)),
            "hausdorff": list(map(float, self.hausdorff)),
            "ar_vsd": list(map(float, self.ar_vsd)),
            "iou": list(map(float, self.iou)),
            "center_error": list(map(float, self.center_error)),
        }}
        d.update(self.summary())
        return d


def _points_of(x):
    if isinstance(x, PointCloud):
        return x.points
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def chamfer(a, b):
    """Symmetric squared chamfer: mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2.

    Raw value in squared meters; the report layer scales by 1e3.
    """
    pa, pb = _points_of(a), _points_of(b)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyCloud("chamfer needs non-empty clouds")
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float((d_ab ** 2).mean() + (d_ba ** 2).mean())


def hausdorff(a, b):
    """max(max_a min_b |a-b|, max_b min_a |a-b|), unsquared meters."""
    pa, pb = _points_of(a), _points_of(b)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyCloud("hausdorff needs non-empty clouds")
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float(max(d_ab.max(), d_ba.max()))


def chamfer_bruteforce(a, b):
    """O(n^2) reference used by the metric oracles."""
    pa, pb = _points_of(a), _points_of(b)
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def hausdorff_bruteforce(a, b):
    pa, pb = _points_of(a), _points_of(b)
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)
    return float(np.sqrt(max(d2.min(axis=1).max(), d2.min(axis=0).max())))


def mask_iou(a, b):
    """|a AND b| / |a OR b|; 1.0 when both masks are empty."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError("masks must share a resolution")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def object_diameter(points):
    """Max pairwise extent (cheap axis-aligned overestimate-free proxy)."""
    pts = _points_of(points)
    # exact max pairwise distance on the convex-hull-ish subset is overkill
    # for tau sweeps; use the exact O(n^2) distance on a subsample
    if len(pts) > 400:
        idx = np.linspace(0, len(pts) - 1, 400).astype(int)
        pts = pts[idx]
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    return float(np.sqrt(d2.max()))


def vsd_recall(est_scene: SceneModel, gt_scene: SceneModel, object_index,
               taus=None, theta=VSD_THETA, smcfg=None):
    """Visible-surface-discrepancy average recall for one object.

    Both scenes are rendered in full context; per tau, the VSD error is the
    mean over the union of visibility masks of [not(both visible and
    |d_est - d_gt| < tau)]; the recall is the fraction of taus whose error
    stays below theta.
    """
    if object_index >= len(est_scene.objects) or object_index >= len(gt_scene.objects):
        raise NotRenderable("object index outside the scene")
    est = render(est_scene, smcfg)
    gt = render(gt_scene, smcfg)
    # hit ids store the position of the object in the scene list
    vis_e = est.hit_ids == object_index
    vis_g = gt.hit_ids == object_index

    if taus is None:
        shape = gt_scene.objects[object_index].shape
        from .renderer import Sphere
        if isinstance(shape, Sphere):
            diam = 2.0 * float(np.max(shape.radii))
        else:
            diam = object_diameter(shape.vertices)
        taus = VSD_TAU_FRACTIONS * diam

    union = vis_e | vis_g
    n_union = union.sum()
    hits = 0
    for tau in np.atleast_1d(taus):
        if n_union == 0:
            err = 1.0
        else:
            both = vis_e & vis_g
            ok = both & (np.abs(est.depth - gt.depth) < tau)
            err = 1.0 - ok.sum() / n_union
        if err < theta:
            hits += 1
    return float(hits / len(np.atleast_1d(taus)))
