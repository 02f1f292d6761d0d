"""Space carving of an initial closed mesh from per-view feasible regions."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage import measure

from .forward import project_point
from .geom import SonarGeometry, SonarPose, sph_to_cart
from .mesh import MeshError, TriangleMesh
from .multipath import ComponentMasks

logger = logging.getLogger(__name__)


class EmptyCarve(RuntimeError):
    """No voxel survived carving."""


@dataclass
class VoxelGrid:
    """Axis-aligned voxel grid; occupancy is stored per voxel center."""

    lo: np.ndarray
    hi: np.ndarray
    resolution: tuple = (96, 96, 96)
    occupancy: np.ndarray | None = None

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self.resolution = tuple(int(n) for n in np.broadcast_to(self.resolution, (3,)))
        if min(self.resolution) < 8:
            raise ValueError("voxel grid needs at least 8 cells per axis")
        if np.any(self.hi <= self.lo):
            raise ValueError("empty voxel box")

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / np.array(self.resolution)

    def centers(self) -> np.ndarray:
        """Voxel centers, shape ``(nx, ny, nz, 3)``."""
        axes = [self.lo[k] + (np.arange(n) + 0.5) * self.spacing[k]
                for k, n in enumerate(self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def save(self, path) -> None:
        """Raw packed occupancy bits plus a ``.json`` sidecar."""
        import json
        from pathlib import Path

        path = Path(path)
        occ = np.zeros(self.resolution, dtype=bool) if self.occupancy is None else self.occupancy
        path.write_bytes(np.packbits(occ.ravel()).tobytes())
        meta = {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "resolution": list(self.resolution),
                "order": "C", "bits": "numpy.packbits big-endian"}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))


def feasible_region(object_mask, masks: ComponentMasks | None = None,
                    dilate_beams: int = 0) -> np.ndarray:
    """Highlight plus shadow corridor: each object column extended to ``R_max``.

    Ghost-labeled pixels are not accepted as highlight evidence. Grazing
    silhouette beams are dim and often fall below the segmentation threshold;
    ``dilate_beams`` widens the highlight across beams to keep the region
    conservative.
    """
    obj = np.asarray(object_mask, dtype=bool)
    if masks is not None:
        obj = obj & ~masks.ghost
    if dilate_beams > 0:
        obj = ndimage.binary_dilation(obj, structure=np.ones((3, 1), bool),
                                      iterations=int(dilate_beams))
    first = np.where(obj.any(axis=1), obj.argmax(axis=1), obj.shape[1])
    return np.arange(obj.shape[1])[None, :] >= first[:, None]


def support_box(views, g: SonarGeometry, pad: float = 0.15, n_elevation: int = 9):
    """Box around the back-projected near edges of every view's feasible region.

    Each FR column contributes its elevation arc at the corridor's first
    range; the union bounding box is inflated by ``pad`` of its extent.
    """
    pts = []
    ph = np.linspace(-g.w_phi, g.w_phi, n_elevation)
    for fr, pose in views:
        fr = np.asarray(fr, dtype=bool)
        cols = np.flatnonzero(fr.any(axis=1))
        if len(cols) == 0:
            continue
        r0 = g.r_min + fr[cols].argmax(axis=1) * g.delta_r
        th = g.theta_min + cols * g.delta_theta
        rr, pp = np.meshgrid(r0, ph, indexing="ij")
        tt = np.broadcast_to(th[:, None], rr.shape)
        sph = np.stack([rr, tt, pp], axis=-1).reshape(-1, 3)
        pts.append(pose.to_world(sph_to_cart(sph)))
    if not pts:
        raise EmptyCarve("all feasible regions are empty")
    pts = np.concatenate(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    ext = np.maximum(hi - lo, 1e-3)
    return lo - pad * ext, hi + pad * ext


def carve_occupancy(views, grid: VoxelGrid, g: SonarGeometry, return_counts: bool = False):
    """Voxels whose center lands in FR in every view that sees it; unseen voxels pass.

    With ``return_counts`` also returns how many views see each voxel.
    """
    if len(views) < 1:
        raise ValueError("carving needs at least one view")
    pts = grid.centers().reshape(-1, 3)
    occ = np.ones(len(pts), dtype=bool)
    seen = np.zeros(len(pts), dtype=np.int32)
    for fr, pose in views:
        fr = np.asarray(fr, dtype=bool)
        b, bb, inside = project_point(pts, pose, g)
        ok = np.zeros(len(pts), dtype=bool)
        ok[inside] = fr[b[inside] - 1, bb[inside] - 1]
        occ &= ~inside | ok
        seen += inside
    occ = occ.reshape(grid.resolution)
    return (occ, seen.reshape(grid.resolution)) if return_counts else occ


def _best_blob(occ: np.ndarray, weight: np.ndarray | None = None) -> np.ndarray:
    """Connected component with the largest total weight (voxel count by default)."""
    lab, n = ndimage.label(occ)
    if n <= 1:
        return occ
    w = np.ones(occ.shape) if weight is None else weight
    score = np.bincount(lab.ravel(), weights=w.ravel())
    score[0] = -np.inf
    return lab == np.argmax(score)


def clean_mesh(verts, faces) -> TriangleMesh:
    """Drop zero-area and repeated-vertex faces, merge coincident vertices."""
    verts = np.asarray(verts, dtype=float)
    faces = np.asarray(faces, dtype=np.int64)
    key = np.round(verts / 1e-9).astype(np.int64)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    faces = inv.reshape(-1)[faces]
    verts = verts[first]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[ok]
    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(verts[used], remap[faces])


def surface_from_occupancy(occ: np.ndarray, grid: VoxelGrid, target_triangles: int = 2000,
                           smooth_sigma: float = 1.0) -> TriangleMesh:
    """Closed isosurface of a binary volume with roughly ``target_triangles`` faces.

    The marching-cubes step size is chosen from a full-resolution pass so the
    triangle count lands near the budget.
    """
    vol = np.pad(occ.astype(float), 2)
    if smooth_sigma > 0:
        vol = ndimage.gaussian_filter(vol, smooth_sigma)
    spacing = tuple(grid.spacing)
    origin = grid.lo - 2 * grid.spacing + 0.5 * grid.spacing

    def extract(step):
        v, f, _, _ = measure.marching_cubes(vol, 0.5, spacing=spacing, step_size=step,
                                            allow_degenerate=False)
        return clean_mesh(v + origin, f)

    mesh = extract(1)
    step = 1
    if target_triangles and mesh.n_triangles > target_triangles:
        step = max(1, int(round(np.sqrt(mesh.n_triangles / target_triangles))))
        while step > 1:
            cand = extract(step)
            try:
                cand.validate()
            except MeshError:
                step -= 1
                continue
            mesh = cand
            break
    mesh = mesh.oriented_outward()
    mesh.validate()
    logger.info("carved surface: %d vertices, %d triangles (step %d)",
                mesh.n_vertices, mesh.n_triangles, step)
    return mesh


def carve(views, g: SonarGeometry, grid: VoxelGrid | None = None, resolution: int = 96,
          target_triangles: int = 2000, smooth_sigma: float = 1.0, refine_box: bool = True,
          clip_to_interface: bool = True):
    """Carve a closed mesh from ``views = [(FR, pose), ...]``.

    Without an explicit grid the box surrounds the back-projected feasible
    regions; with ``refine_box`` a coarse pass first shrinks it around the
    surviving voxels. With ``clip_to_interface`` voxels above the lowest
    nominal interface of the poses are removed, since mirror echoes otherwise
    carve an apparent object above the water.

    Returns:
        ``(mesh, grid)`` with ``grid.occupancy`` filled in.
    """
    if len(views) < 1:
        raise EmptyCarve("no view with a non-empty feasible region")
    surfaces = [p.surface_z for _, p in views if p.depth_d > 0]
    ceiling = min(surfaces) if clip_to_interface and surfaces else None

    def occupancy(grd):
        occ, seen = carve_occupancy(views, grd, g, return_counts=True)
        if ceiling is not None:
            occ &= (grd.centers()[..., 2] < ceiling)
        # weakly observed blobs are mostly multipath: keep the best-evidenced one
        return _best_blob(occ, seen)

    if grid is None:
        lo, hi = support_box(views, g)
        if refine_box:
            coarse = VoxelGrid(lo, hi, (32, 32, 32))
            occ = occupancy(coarse)
            if not occ.any():
                raise EmptyCarve("no voxel survived the coarse pass")
            idx = np.argwhere(occ)
            pad = 2 * coarse.spacing
            lo = np.maximum(lo, coarse.lo + idx.min(axis=0) * coarse.spacing - pad)
            hi = np.minimum(hi, coarse.lo + (idx.max(axis=0) + 1) * coarse.spacing + pad)
        grid = VoxelGrid(lo, hi, (resolution,) * 3)
    occ = occupancy(grid)
    if not occ.any():
        raise EmptyCarve("no voxel survived carving")
    grid.occupancy = occ
    mesh = surface_from_occupancy(occ, grid, target_triangles, smooth_sigma)
    return mesh, grid
