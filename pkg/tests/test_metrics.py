"""Metric oracles: brute-force equality, VSD extremes, IoU fixtures."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenefit.camera import CameraIntrinsics
from scenefit.errors import EmptyCloud
from scenefit.geometry import icosphere
from scenefit.metrics import (
    chamfer,
    chamfer_bruteforce,
    hausdorff,
    hausdorff_bruteforce,
    mask_iou,
    vsd_recall,
)
from scenefit.renderer import (
    FloorModel,
    Light,
    Material,
    SceneModel,
    SceneObject,
    Sphere,
)

INTR = CameraIntrinsics(fx=120.0, fy=120.0, cx=32.0, cy=24.0, width=64, height=48)


class TestChamfer:
    def test_identical_zero(self):
        pts = np.random.default_rng(0).normal(size=(50, 3))
        assert chamfer(pts, pts) == 0.0

    def test_single_point_pair(self):
        assert chamfer(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])) == 2.0

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**20), n=st.integers(3, 200))
    def test_equals_bruteforce(self, seed, n):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(n, 3))
        b = rng.normal(size=(rng.integers(3, 200), 3))
        assert chamfer(a, b) == pytest.approx(chamfer_bruteforce(a, b), abs=0, rel=1e-14)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**20))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(40, 3))
        b = rng.normal(size=(30, 3))
        assert chamfer(a, b) == chamfer(b, a)

    def test_empty_raises(self):
        with pytest.raises(EmptyCloud):
            chamfer(np.zeros((0, 3)), np.ones((3, 3)))


class TestHausdorff:
    def test_identical_zero(self):
        pts = np.random.default_rng(1).normal(size=(30, 3))
        assert hausdorff(pts, pts) == 0.0

    def test_single_point_pair(self):
        assert hausdorff(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])) == 1.0

    def test_subset_relation(self):
        rng = np.random.default_rng(2)
        b = rng.normal(size=(50, 3))
        a = b[:20]
        d_ba = max(np.min(np.linalg.norm(b[:, None] - a[None], axis=-1), axis=1))
        assert hausdorff(a, b) == pytest.approx(d_ba, rel=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**20))
    def test_equals_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(60, 3))
        b = rng.normal(size=(45, 3))
        assert hausdorff(a, b) == pytest.approx(hausdorff_bruteforce(a, b),
                                                abs=0, rel=1e-12)


class TestIoU:
    def test_identical(self):
        m = np.zeros((8, 8), dtype=bool)
        m[2:5, 3:6] = True
        assert mask_iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((8, 8), dtype=bool)
        b = np.zeros((8, 8), dtype=bool)
        a[0:2, 0:2] = True
        b[5:7, 5:7] = True
        assert mask_iou(a, b) == 0.0

    def test_half_overlap_hand_count(self):
        a = np.zeros((10, 10), dtype=bool)
        b = np.zeros((10, 10), dtype=bool)
        a[0:4, 0:4] = True    # 16 px
        b[0:4, 2:6] = True    # 16 px, overlap 4x2=8
        assert mask_iou(a, b) == pytest.approx(8 / 24)

    def test_both_empty(self):
        assert mask_iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def _scene_with_sphere(center):
    return SceneModel(
        objects=[SceneObject(shape=Sphere(center, [0.04, 0.04, 0.04]),
                             material=Material(color=[0.6, 0.3, 0.3]), id=0)],
        light=Light([0.2, -0.6, 0.3], 1.2),
        intrinsics=INTR,
        floor=FloorModel(height=0.12, checker=False))


class TestVsd:
    def test_identical_scene_full_recall(self):
        s = _scene_with_sphere([0.0, 0.08, 0.55])
        assert vsd_recall(s, s, 0) == 1.0

    def test_out_of_frustum_zero(self):
        gt = _scene_with_sphere([0.0, 0.08, 0.55])
        est = _scene_with_sphere([5.0, 0.08, 0.55])
        assert vsd_recall(est, gt, 0) == 0.0

    def test_axial_displacement_below_tau(self):
        gt = _scene_with_sphere([0.0, 0.08, 0.55])
        est = _scene_with_sphere([0.0, 0.08, 0.552])  # 2 mm along the axis
        # diameter 0.08: taus from 4 mm to 40 mm all exceed the 2 mm offset
        assert vsd_recall(est, gt, 0) == 1.0

    def test_monotone_in_tau(self):
        gt = _scene_with_sphere([0.0, 0.08, 0.55])
        est = _scene_with_sphere([0.004, 0.08, 0.556])
        taus = np.linspace(0.002, 0.05, 12)
        errs = []
        for tau in taus:
            r = vsd_recall(est, gt, 0, taus=[tau])
            errs.append(r)
        assert np.all(np.diff(errs) >= 0)
