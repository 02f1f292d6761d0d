"""Direct-echo image synthesis, segmentation and contour extraction.

The image-formation model is a ray-sampled diffuse backscatter kernel: every
beam is sampled by a fan of elevation rays, the nearest surface hit of each
ray wins (occlusion), and the hit deposits ``cos(incidence)`` into the range
bin of its distance. Surface patches at the same range inside one elevation
arc therefore sum into one pixel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geom import SonarGeometry, SonarPose, cart_to_sph, polar_project
from .mesh import TriangleMesh, patch_centers

logger = logging.getLogger(__name__)


class EmptyMask(ValueError):
    """Nothing above the segmentation threshold."""


class EmptyImage(UserWarning):
    """Mesh is entirely outside the field of view."""


@dataclass
class RenderConfig:
    n_elevation: int = 64
    n_azimuth: int = 1
    cos_power: float = 1.0


@dataclass
class BeamBinImage:
    intensities: np.ndarray
    geometry: SonarGeometry
    pose: SonarPose

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=float)
        if self.intensities.shape != self.geometry.shape:
            raise ValueError(f"image shape {self.intensities.shape} != {self.geometry.shape}")

    def peak_normalized(self) -> np.ndarray:
        peak = self.intensities.max()
        return self.intensities / peak if peak > 0 else self.intensities.copy()


@dataclass
class RayHits:
    """Nearest surface hits of the elevation-ray fan of one view.

    Arrays are aligned per hit: ``beam``/``bin`` are 0-based pixel indices
    (``bin`` is -1 when the range falls outside the window).
    """

    beam: np.ndarray
    bin: np.ndarray
    triangle: np.ndarray
    points: np.ndarray       # sonar frame
    ranges: np.ndarray
    weight: np.ndarray

    @property
    def in_window(self) -> np.ndarray:
        return self.bin >= 0


def backscatter(cos_incidence, cos_power: float = 1.0):
    """Per-ray echo strength; swap this for another image-formation kernel."""
    return np.clip(cos_incidence, 0.0, None) ** cos_power


def ray_directions(g: SonarGeometry, cfg: RenderConfig):
    """Unit directions of the ray fan plus the beam index of each azimuth sample."""
    off = (np.arange(cfg.n_azimuth) + 0.5) / cfg.n_azimuth - 0.5
    az = (g.azimuths()[:, None] + off[None, :] * g.delta_theta).ravel()
    beam_of_az = np.repeat(np.arange(g.n_beams), cfg.n_azimuth)
    el = np.linspace(-g.w_phi, g.w_phi, cfg.n_elevation)
    return az, el, beam_of_az


def _candidate_pairs(tri_sph, az, el):
    """Ray/triangle pairs whose angular bounding boxes overlap."""
    th = tri_sph[..., 1]
    ph = tri_sph[..., 2]
    ok = (tri_sph[..., 0].min(axis=1) > 1e-9) & (np.abs(th).max(axis=1) < np.pi / 2)
    tri_idx = np.flatnonzero(ok)
    a_lo = np.searchsorted(az, th[ok].min(axis=1), side="left")
    a_hi = np.searchsorted(az, th[ok].max(axis=1), side="right")
    e_lo = np.searchsorted(el, ph[ok].min(axis=1), side="left")
    e_hi = np.searchsorted(el, ph[ok].max(axis=1), side="right")
    na = np.maximum(a_hi - a_lo, 0)
    ne = np.maximum(e_hi - e_lo, 0)
    counts = na * ne
    keep = counts > 0
    tri_idx, a_lo, e_lo, na, ne, counts = (x[keep] for x in (tri_idx, a_lo, e_lo, na, ne, counts))
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64)
    owner = np.repeat(np.arange(len(tri_idx)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    ai = a_lo[owner] + local // ne[owner]
    ei = e_lo[owner] + local % ne[owner]
    return tri_idx[owner], ai, ei


def cast_rays(mesh: TriangleMesh, pose: SonarPose, g: SonarGeometry,
              cfg: RenderConfig | None = None) -> RayHits:
    """Nearest hit of every elevation ray of every beam."""
    cfg = cfg or RenderConfig()
    az, el, beam_of_az = ray_directions(g, cfg)
    v = pose.to_sonar(mesh.vertices)
    corners = v[mesh.triangles]
    tri, ai, ei = _candidate_pairs(cart_to_sph(corners), az, el)
    empty = RayHits(*(np.zeros(0, np.int64),) * 3, np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    if len(tri) == 0:
        return empty
    ce = np.cos(el[ei])
    d = np.stack([ce * np.sin(az[ai]), ce * np.cos(az[ai]), np.sin(el[ei])], axis=1)
    # Moeller-Trumbore with the ray origin at the sonar
    p0 = corners[tri, 0]
    e1 = corners[tri, 1] - p0
    e2 = corners[tri, 2] - p0
    pv = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pv)
    good = np.abs(det) > 1e-15
    inv = np.where(good, 1.0 / np.where(good, det, 1.0), 0.0)
    tv = -p0
    u = np.einsum("ij,ij->i", tv, pv) * inv
    qv = np.cross(tv, e1)
    w = np.einsum("ij,ij->i", d, qv) * inv
    t = np.einsum("ij,ij->i", e2, qv) * inv
    eps = 1e-12
    hit = good & (u >= -eps) & (w >= -eps) & (u + w <= 1 + eps) & (t > 1e-9)
    if not hit.any():
        return empty
    tri, ai, ei, t, d = tri[hit], ai[hit], ei[hit], t[hit], d[hit]
    ray = ai * len(el) + ei
    order = np.lexsort((t, ray))
    first = order[np.r_[True, ray[order][1:] != ray[order][:-1]]]
    tri, ai, t, d = tri[first], ai[first], t[first], d[first]
    n = mesh.face_normals()
    normals = n[tri] @ pose.rotation
    cos_inc = -np.einsum("ij,ij->i", normals, d)
    bins = np.rint((t - g.r_min) / g.delta_r).astype(np.int64)
    bins[(bins < 0) | (bins >= g.n_bins)] = -1
    weight = backscatter(cos_inc, cfg.cos_power) / cfg.n_azimuth
    return RayHits(beam=beam_of_az[ai], bin=bins, triangle=tri, points=d * t[:, None],
                   ranges=t, weight=weight)


def accumulate(beam, bins, weight, g: SonarGeometry) -> np.ndarray:
    img = np.zeros(g.shape)
    ok = (bins >= 0) & (beam >= 0) & (beam < g.n_beams) & (weight > 0)
    np.add.at(img, (beam[ok], bins[ok]), weight[ok])
    return img


def render(mesh: TriangleMesh, pose: SonarPose, g: SonarGeometry,
           cfg: RenderConfig | None = None, hits: RayHits | None = None) -> BeamBinImage:
    """Peak-normalized direct-echo image of ``mesh`` seen from ``pose``."""
    hits = hits if hits is not None else cast_rays(mesh, pose, g, cfg)
    img = accumulate(hits.beam, hits.bin, hits.weight, g)
    peak = img.max()
    if peak <= 0:
        logger.warning("mesh produces an empty image at this pose")
        return BeamBinImage(img, g, pose)
    return BeamBinImage(img / peak, g, pose)


def visible_triangles(hits: RayHits, n_triangles: int) -> np.ndarray:
    """Boolean mask of triangles that win at least one in-window ray with positive echo."""
    vis = np.zeros(n_triangles, dtype=bool)
    ok = hits.in_window & (hits.weight > 0)
    vis[hits.triangle[ok]] = True
    return vis


def project_point(p, pose: SonarPose, g: SonarGeometry):
    """World points to nearest 1-based ``(b, B)`` and an in-FoV flag."""
    s = cart_to_sph(pose.to_sonar(np.asarray(p, dtype=float)))
    r, th, ph = s[..., 0], s[..., 1], s[..., 2]
    b = np.rint(1 + (th - g.theta_min) / g.delta_theta).astype(np.int64)
    bb = np.rint(1 + (r - g.r_min) / g.delta_r).astype(np.int64)
    tol = 1e-9
    in_fov = ((np.abs(th) <= g.w_theta + tol) & (np.abs(ph) <= g.w_phi + tol)
              & (r >= g.r_min - g.delta_r / 2) & (r <= g.r_max + g.delta_r / 2)
              & (b >= 1) & (b <= g.n_beams) & (bb >= 1) & (bb <= g.n_bins))
    return b, bb, in_fov


def project_patch_centers(mesh: TriangleMesh, pose: SonarPose, g: SonarGeometry):
    return project_point(patch_centers(mesh), pose, g)


_EIGHT = np.ones((3, 3), dtype=bool)


def largest_component(mask) -> np.ndarray:
    lab, n = ndimage.label(mask, structure=_EIGHT)
    if n <= 1:
        return lab > 0
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return lab == np.argmax(sizes)


def segment(intensities, threshold: float = 0.2) -> np.ndarray:
    """Object mask: pixels at or above ``threshold`` of the peak, largest blob, holes filled."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    img = np.asarray(intensities, dtype=float)
    peak = img.max()
    if peak <= 0:
        raise EmptyMask("image has no positive intensity")
    mask = img >= threshold * peak
    if not mask.any():
        raise EmptyMask("nothing above threshold")
    return ndimage.binary_fill_holes(largest_component(mask))


@dataclass
class Contour:
    """Ordered closed boundary of a mask.

    ``pixels`` are 0-based ``(beam, bin)`` indices; ``xy`` the polar image
    coordinates in meters; ``frontal`` flags the near-range third.
    """

    pixels: np.ndarray
    xy: np.ndarray
    frontal: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def frontal_xy(self) -> np.ndarray:
        return self.xy[self.frontal]

    def length(self) -> float:
        """Closed-polyline length in pixel units."""
        if len(self.pixels) < 2:
            return 0.0
        step = np.diff(np.vstack([self.pixels, self.pixels[:1]]), axis=0)
        return float(np.linalg.norm(step, axis=1).sum())


# clockwise Moore neighbourhood starting west
_MOORE = np.array([(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)])


def trace_boundary(mask) -> np.ndarray:
    """Moore-neighbour trace of the first blob in raster order; ``(K, 2)`` indices."""
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    idx = np.argwhere(m)
    if len(idx) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    start = tuple(idx[0])
    lookup = {tuple(d): k for k, d in enumerate(_MOORE)}
    cur, back = start, 0
    out = [start]
    init_state = None
    for _ in range(8 * m.size):
        nxt = None
        for k in range(1, 9):
            dk = (back + k) % 8
            cand = (cur[0] + _MOORE[dk][0], cur[1] + _MOORE[dk][1])
            if m[cand]:
                prev = (back + k - 1) % 8
                bg = (cur[0] + _MOORE[prev][0], cur[1] + _MOORE[prev][1])
                nxt = cand
                back = lookup[(bg[0] - cand[0], bg[1] - cand[1])]
                break
        if nxt is None:
            break
        state = (nxt, back)
        if init_state is None:
            init_state = state
        elif state == init_state:
            out.pop()
            break
        cur = nxt
        out.append(cur)
    return np.array(out, dtype=np.int64) - 1


def frontal_flags(ranges, lo: float, hi: float) -> np.ndarray:
    return np.asarray(ranges) <= lo + (hi - lo) / 3.0 + 1e-12


def extract_contour(mask, g: SonarGeometry, window_rule: bool = False) -> Contour:
    """Ordered 8-connected boundary of the largest blob with frontal flags.

    The frontal third is taken over the blob's own range extent, or over the
    sonar range window when ``window_rule`` is set.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("cannot trace an empty mask")
    blob = largest_component(mask)
    pix = trace_boundary(blob)
    r = g.r_min + pix[:, 1] * g.delta_r
    th = g.theta_min + pix[:, 0] * g.delta_theta
    xy = polar_project(r, th)
    if window_rule:
        lo, hi = g.r_min, g.r_max
    else:
        bins = np.flatnonzero(blob.any(axis=0))
        lo = g.r_min + bins.min() * g.delta_r
        hi = g.r_min + bins.max() * g.delta_r
    return Contour(pixels=pix, xy=xy, frontal=frontal_flags(r, lo, hi))
