"""Image, contour and volumetric error measures."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import MeshError, TriangleMesh


class EmptyRegion(ValueError):
    """No pixels to average over."""


class ZeroBaseline(UserWarning):
    """Initial aggregate error is zero; normalized value reported as 1."""


def _normalized(img):
    img = np.asarray(img, dtype=float)
    peak = img.max()
    return img / peak if peak > 0 else img


def intensity_error(synthetic, data, region) -> float:
    """Mean absolute difference of the peak-normalized images over ``region``."""
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise EmptyRegion("intensity error over an empty pixel set")
    diff = np.abs(_normalized(synthetic) - _normalized(data))
    return float(diff[region].mean())


def intensity_error_raw(synthetic, data, region) -> float:
    """Same as :func:`intensity_error` without peak normalization."""
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise EmptyRegion("intensity error over an empty pixel set")
    return float(np.abs(np.asarray(synthetic, float) - np.asarray(data, float))[region].mean())


def contour_quality(moved, target) -> float:
    """Mean Euclidean distance over matched ``(moved[j], target[j])`` pairs."""
    moved = np.asarray(moved, dtype=float)
    target = np.asarray(target, dtype=float)
    if len(moved) == 0:
        raise EmptyRegion("no matched contour pairs")
    return float(np.linalg.norm(moved - target, axis=1).mean())


def contour_error(match) -> float:
    """Contour error of a view: the match quality ``lambda``."""
    return float(match.lam)


def average(values) -> float:
    values = [float(v) for v in values]
    if not values:
        raise EmptyRegion("average over zero views")
    return float(np.mean(values))


@dataclass
class ErrorReport:
    ie: dict = field(default_factory=dict)
    ce: dict = field(default_factory=dict)
    aie: float = float("nan")
    ace: float = float("nan")
    naie: float = 1.0
    nace: float = 1.0
    e_i: float = 1.0
    nve: float | None = None
    flags: list = field(default_factory=list)

    def as_row(self) -> dict:
        return {"aie": self.aie, "ace": self.ace, "naie": self.naie, "nace": self.nace,
                "e_i": self.e_i, "nve": self.nve}


def image_error(aie_t: float, ace_t: float, aie_0: float, ace_0: float):
    """``(NAIE, NACE, E_I)``; the contour term is normalized by the initial ACE.

    A zero baseline reports that component as 1 and returns the flag names.
    """
    flags = []
    if aie_0 > 0:
        naie = aie_t / aie_0
    else:
        naie, flags = 1.0, flags + ["zero_aie_baseline"]
    if ace_0 > 0:
        nace = ace_t / ace_0
    else:
        nace, flags = 1.0, flags + ["zero_ace_baseline"]
    return naie, nace, 0.5 * (naie + nace), flags


# sub-voxel column offset so rays never pass exactly through mesh edges
_JITTER = np.array([1.2345e-6, 2.3456e-6])


def voxelize(mesh: TriangleMesh, lo, hi, resolution: int | tuple = 128) -> np.ndarray:
    """Boolean occupancy of a closed mesh on a regular grid of voxel centers.

    Inside/outside by crossing parity of +Z rays through every ``(x, y)``
    column of voxel centers.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    h = (hi - lo) / res
    c = mesh.corners()
    # continuous column coordinates of the triangle corners
    fx = (c[:, :, 0] - lo[0]) / h[0] - 0.5 - _JITTER[0]
    fy = (c[:, :, 1] - lo[1]) / h[1] - 0.5 - _JITTER[1]
    i_lo = np.clip(np.ceil(fx.min(axis=1)), 0, res[0]).astype(np.int64)
    i_hi = np.clip(np.floor(fx.max(axis=1)) + 1, 0, res[0]).astype(np.int64)
    j_lo = np.clip(np.ceil(fy.min(axis=1)), 0, res[1]).astype(np.int64)
    j_hi = np.clip(np.floor(fy.max(axis=1)) + 1, 0, res[1]).astype(np.int64)
    ni = np.maximum(i_hi - i_lo, 0)
    nj = np.maximum(j_hi - j_lo, 0)
    counts = ni * nj
    crossings = np.zeros((res[0], res[1], res[2] + 1), dtype=np.int32)
    total = int(counts.sum())
    if total:
        owner = np.repeat(np.arange(len(c)), counts)
        local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        ii = i_lo[owner] + local // nj[owner]
        jj = j_lo[owner] + local % nj[owner]
        px, py = ii.astype(float), jj.astype(float)
        ax, ay = fx[owner, 0], fy[owner, 0]
        bx, by = fx[owner, 1], fy[owner, 1]
        cx, cy = fx[owner, 2], fy[owner, 2]
        den = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
        ok = np.abs(den) > 1e-18
        den = np.where(ok, den, 1.0)
        l1 = ((by - cy) * (px - cx) + (cx - bx) * (py - cy)) / den
        l2 = ((cy - ay) * (px - cx) + (ax - cx) * (py - cy)) / den
        l3 = 1.0 - l1 - l2
        inside = ok & (l1 >= 0) & (l2 >= 0) & (l3 >= 0)
        z = l1 * c[owner, 0, 2] + l2 * c[owner, 1, 2] + l3 * c[owner, 2, 2]
        fz = (z - lo[2]) / h[2] - 0.5
        k0 = np.clip(np.floor(fz) + 1, 0, res[2]).astype(np.int64)
        np.add.at(crossings, (ii[inside], jj[inside], k0[inside]), 1)
    return (np.cumsum(crossings, axis=2)[:, :, :res[2]] % 2).astype(bool)


def _check_closed(mesh: TriangleMesh):
    try:
        mesh.validate()
    except MeshError as exc:
        raise MeshError(f"NVE needs closed meshes: {exc}") from exc


def nve(a: TriangleMesh, b: TriangleMesh, resolution: int = 128, margin: float = 0.05,
        check: bool = True) -> float:
    """Normalized volumetric error: symmetric difference over union, in [0, 1]."""
    if check:
        _check_closed(a)
        _check_closed(b)
    lo = np.minimum(a.vertices.min(axis=0), b.vertices.min(axis=0))
    hi = np.maximum(a.vertices.max(axis=0), b.vertices.max(axis=0))
    pad = (hi - lo) * margin
    lo, hi = lo - pad, hi + pad
    va = voxelize(a, lo, hi, resolution)
    vb = voxelize(b, lo, hi, resolution)
    sa, sb, si = int(va.sum()), int(vb.sum()), int((va & vb).sum())
    union = sa + sb - si
    if union == 0:
        return 0.0
    return (sa + sb - 2 * si) / union
