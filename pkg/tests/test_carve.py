"""Feasible regions and space carving."""

from __future__ import annotations

import numpy as np
import pytest

from sonar3d.carve import EmptyCarve, VoxelGrid, carve, carve_occupancy, feasible_region
from sonar3d.forward import project_point, render, segment
from sonar3d.metrics import nve
from sonar3d.multipath import ComponentMasks
from sonar3d.scene import SceneConfig, carve_views, pose_schedule, synthesize


def test_empty_mask_gives_empty_region():
    assert not feasible_region(np.zeros((5, 6), bool)).any()


def test_single_pixel_corridor():
    m = np.zeros((5, 6), bool)
    m[2, 3] = True
    fr = feasible_region(m)
    want = np.zeros_like(m)
    want[2, 3:] = True
    np.testing.assert_array_equal(fr, want)


def test_ghost_pixels_are_not_evidence():
    m = np.zeros((5, 6), bool)
    m[1, 2] = m[3, 4] = True
    ghost = np.zeros_like(m)
    ghost[3, 4] = True
    masks = ComponentMasks(object=m, mirror=np.zeros_like(m), ghost=ghost)
    fr = feasible_region(m, masks)
    assert fr[1, 2:].all() and not fr[3].any()


def test_beam_dilation_widens_corridor():
    m = np.zeros((7, 6), bool)
    m[3, 2] = True
    fr = feasible_region(m, dilate_beams=2)
    assert fr[1:6, 2:].all() and not fr[0].any() and not fr[6].any()


@pytest.fixture(scope="module")
def clean_views(truth_mesh):
    from sonar3d.geom import SonarGeometry

    g = SonarGeometry()
    cfg = SceneConfig(noise=0.0, multipath=False)
    poses = pose_schedule(cfg)
    images = [render(truth_mesh, p, g).intensities for p in poses]
    return g, images, poses


def test_region_contains_object_mask(clean_views):
    g, images, poses = clean_views
    for img in images:
        mask = segment(img, 0.2)
        assert np.all(feasible_region(mask)[mask])


def test_surface_points_project_into_regions(clean_views, truth_mesh):
    g, images, poses = clean_views
    pts = truth_mesh.vertices * 0.999
    for img, pose in zip(images, poses):
        fr = feasible_region(img > 0, dilate_beams=1)
        b, bb, inside = project_point(pts, pose, g)
        assert np.all(fr[b[inside] - 1, bb[inside] - 1])


def test_more_views_never_grow(clean_views):
    g, images, poses = clean_views
    views = carve_views(images, poses, g)
    grid = VoxelGrid(np.full(3, -0.2), np.full(3, 0.2), (48, 48, 48))
    prev = None
    for k in (1, 4, 8, 16):
        occ = carve_occupancy(views[:k], grid, g)
        if prev is not None:
            assert not (occ & ~prev).any()
        prev = occ


def _inside_fraction(grid, pts):
    idx = np.floor((pts - grid.lo) / grid.spacing).astype(int)
    assert np.all((idx >= 0) & (idx < grid.resolution))
    return grid.occupancy[tuple(idx.T)].mean()


def test_noise_free_carve_contains_truth(clean_views, truth_mesh):
    g, images, poses = clean_views
    mesh, grid = carve(carve_views(images, poses, g, seg_threshold=0.05), g)
    mesh.validate()
    assert _inside_fraction(grid, truth_mesh.vertices * 0.97) == 1.0
    assert mesh.volume() >= truth_mesh.volume()
    assert nve(mesh, truth_mesh) <= 0.5


def test_noisy_carve_is_close(truth_mesh):
    from sonar3d.geom import SonarGeometry

    g = SonarGeometry()
    syn = synthesize(truth_mesh, SceneConfig(), g)
    mesh, grid = carve(carve_views([s.image for s in syn], [s.pose for s in syn], g), g)
    mesh.validate()
    assert 1000 <= mesh.n_triangles <= 4000
    assert mesh.volume() >= truth_mesh.volume()
    assert nve(mesh, truth_mesh) <= 0.5


def test_empty_carve_raises(geometry):
    fr = np.zeros(geometry.shape, bool)
    from sonar3d.geom import SonarPose

    with pytest.raises(EmptyCarve):
        carve([(fr, SonarPose())], geometry)


def test_mirror_blob_above_interface_is_removed(truth_mesh):
    from sonar3d.geom import SonarGeometry

    g = SonarGeometry()
    scene = SceneConfig(sigma=0.1, seed=0, noise_seed=0)
    syn = synthesize(truth_mesh, scene, g)
    mesh, grid = carve(carve_views([s.image for s in syn], [s.pose for s in syn], g), g)
    assert mesh.vertices[:, 2].max() <= scene.surface_z + grid.spacing[2]
    assert nve(mesh, truth_mesh) <= 0.5


def test_best_blob_prefers_observed_evidence():
    from sonar3d.carve import _best_blob

    occ = np.zeros((20, 10, 10), bool)
    occ[1:4, 1:4, 1:4] = True        # 27 voxels seen by many views
    occ[8:18, 1:9, 1:9] = True       # 640 voxels seen by one view
    seen = np.where(np.arange(20)[:, None, None] < 5, 30, 1) * np.ones((1, 10, 10))
    assert _best_blob(occ).sum() == 640
    kept = _best_blob(occ, seen)
    assert kept.sum() == 27 and kept[2, 2, 2]
