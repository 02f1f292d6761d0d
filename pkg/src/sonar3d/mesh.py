"""Closed triangle meshes, connectivity algebra and vertex-motion updates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.linalg import lsqr

logger = logging.getLogger(__name__)

# dense least squares below this vertex count, sparse LSQR above
DENSE_SOLVE_LIMIT = 6000


class MeshError(ValueError):
    """Mesh fails the closed/orientable/non-degenerate contract."""


class RankDeficient(UserWarning):
    """Some vertices have no valid incident patch."""


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices.copy(), self.triangles.copy())

    def corners(self) -> np.ndarray:
        """Vertex positions per triangle, shape ``(N_T, 3, 3)``."""
        return self.vertices[self.triangles]

    def face_normals(self, unit: bool = True) -> np.ndarray:
        c = self.corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        if unit:
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.where(norm > 0, norm, 1.0)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def volume(self) -> float:
        """Signed enclosed volume; positive for outward-oriented meshes."""
        c = self.corners()
        return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, shape ``(E, 2)`` with ``i < j``."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def neighbors(self) -> list[np.ndarray]:
        """1-ring vertex neighbours of every vertex."""
        e = self.edges()
        adj = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])),
                            shape=(self.n_vertices, self.n_vertices)).tocsr()
        adj = (adj + adj.T).tocsr()
        return [adj.indices[adj.indptr[i]:adj.indptr[i + 1]] for i in range(self.n_vertices)]

    def validate(self) -> None:
        """Raise :class:`MeshError` unless the mesh is closed, oriented and non-degenerate."""
        t = self.triangles
        if self.n_vertices < 4 or self.n_triangles < 4:
            raise MeshError("a closed mesh needs at least 4 vertices and 4 triangles")
        if t.min() < 0 or t.max() >= self.n_vertices:
            raise MeshError("triangle references a missing vertex")
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise MeshError("triangle with repeated vertex")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinates")
        directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        key = directed[:, 0] * self.n_vertices + directed[:, 1]
        if len(np.unique(key)) != len(key):
            raise MeshError("mesh is not consistently oriented (repeated directed edge)")
        rev = directed[:, 1] * self.n_vertices + directed[:, 0]
        if not np.all(np.isin(rev, key)):
            raise MeshError("mesh is not closed (boundary edge)")

    def oriented_outward(self) -> "TriangleMesh":
        """Copy with triangle winding flipped if the signed volume is negative."""
        if self.volume() < 0:
            return TriangleMesh(self.vertices.copy(), self.triangles[:, ::-1].copy())
        return self.copy()


def load_obj(path, validate: bool = True) -> TriangleMesh:
    """Read the ``v x y z`` / ``f i j k`` subset of OBJ (1-based indices)."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise MeshError(f"only triangles supported, got {len(idx)}-gon")
                faces.append([i - 1 for i in idx])
    m = TriangleMesh(np.array(verts), np.array(faces))
    if validate:
        m.validate()
    return m


def save_obj(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.triangles + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def patch_centers(mesh: TriangleMesh) -> np.ndarray:
    """Centroid of every triangle, shape ``(N_T, 3)``."""
    return mesh.corners().mean(axis=1)


def build_connectivity(mesh: TriangleMesh) -> sp.csr_matrix:
    """Binary ``N_T x N_P`` matrix with ``c_ij = 1`` iff triangle i uses vertex j."""
    nt = mesh.n_triangles
    rows = np.repeat(np.arange(nt), 3)
    c = sp.csr_matrix((np.ones(3 * nt), (rows, mesh.triangles.ravel())),
                      shape=(nt, mesh.n_vertices))
    c.sum_duplicates()
    return c


@dataclass
class VertexSolve:
    motions: np.ndarray
    residual: float
    unsupported: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def vertex_laplacian(conn) -> sp.csr_matrix:
    """Graph Laplacian of the vertex adjacency implied by the connectivity matrix."""
    conn = sp.csr_matrix(conn, dtype=float)
    adj = (conn.T @ conn).tocsr()
    adj.setdiag(0)
    adj.eliminate_zeros()
    adj.data[:] = 1.0
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return (sp.diags(deg) - adj).tocsr()


def solve_vertex_motions(conn, patch_motions, valid=None, smooth: float = 0.0,
                         centroid: bool = True) -> VertexSolve:
    """Least-squares vertex motions whose triangle centroids follow ``patch_motions``.

    Each row of the binary connectivity is divided by 3 so that the model is
    the centroid operator (a uniform patch field is reproduced exactly).
    Rows flagged invalid are dropped. With ``smooth == 0`` vertices without
    any valid incident patch receive zero motion; they are always reported
    in ``unsupported``. ``centroid=False`` keeps the binary rows, so a
    patch motion is matched by the sum of its three vertex motions.

    ``smooth > 0`` adds ``smooth * sum_edges |V_i - V_j|^2`` to the
    objective. This damps noise amplified by near-singular directions of the
    centroid operator, and unsupported vertices then follow the smooth
    (harmonic) extension of their neighbours. Uniform fields stay exact.
    """
    full = sp.csr_matrix(conn, dtype=float)
    vc = np.asarray(patch_motions, dtype=float).reshape(full.shape[0], 3)
    conn = full
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        conn = full[valid]
        vc = vc[valid]
    a = conn / 3.0 if centroid else conn
    n_p = a.shape[1]
    support = np.asarray((conn != 0).sum(axis=0)).ravel()
    unsupported = np.flatnonzero(support == 0)
    if len(unsupported):
        logger.debug("%d vertices without valid patches", len(unsupported))
    out = np.zeros((n_p, 3))
    if a.shape[0] == 0:
        return VertexSolve(out, 0.0, unsupported)
    if smooth > 0:
        lap = vertex_laplacian(full)
        # tiny ridge keeps components without any valid patch well-posed
        lhs = (a.T @ a + smooth * lap + 1e-12 * sp.eye(n_p)).tocsc()
        out = np.asarray(spla.spsolve(lhs, np.asarray(a.T @ vc)))
        out = out.reshape(n_p, 3)
    elif n_p <= DENSE_SOLVE_LIMIT:
        out, *_ = np.linalg.lstsq(a.toarray(), vc, rcond=None)
        out[unsupported] = 0.0
    else:
        for k in range(3):
            out[:, k] = lsqr(a, vc[:, k], atol=1e-14, btol=1e-14, iter_lim=20 * n_p)[0]
        out[unsupported] = 0.0
    residual = float(np.sqrt(np.sum((a @ out - vc) ** 2)))
    return VertexSolve(out, residual, unsupported)


@dataclass
class OutlierReport:
    threshold: float
    replaced: np.ndarray
    zeroed: np.ndarray


def mad_threshold(motions) -> float:
    mag = np.linalg.norm(np.asarray(motions, dtype=float), axis=1)
    med = np.median(mag)
    return float(med + 3.0 * np.median(np.abs(mag - med)))


def mad_outlier_replace(motions, mesh: TriangleMesh, threshold: float | None = None,
                        inverse_distance: bool = False, active=None):
    """Replace vertex motions above ``median + 3 MAD`` of the magnitudes.

    Each outlier takes the distance-weighted mean of its non-outlier 1-ring
    neighbours; weights are the edge lengths ``d_ij`` (or ``1/d_ij`` with
    ``inverse_distance``). An outlier whose neighbours are all outliers is
    zeroed. Only magnitudes strictly above the threshold count as outliers.

    ``active`` restricts the statistics, the outlier test and the donor
    neighbours to a vertex subset (e.g. vertices with measured motion).
    """
    v = np.asarray(motions, dtype=float)
    act = np.ones(len(v), dtype=bool) if active is None else np.asarray(active, dtype=bool)
    if threshold is None:
        threshold = mad_threshold(v[act]) if act.any() else 0.0
    mag = np.linalg.norm(v, axis=1)
    outlier = (mag > threshold) & act
    out = v.copy()
    replaced, zeroed = [], []
    if outlier.any():
        nbrs = mesh.neighbors()
        for i in np.flatnonzero(outlier):
            nb = nbrs[i][~outlier[nbrs[i]] & act[nbrs[i]]]
            if len(nb) == 0:
                out[i] = 0.0
                zeroed.append(i)
                continue
            d = np.linalg.norm(mesh.vertices[nb] - mesh.vertices[i], axis=1)
            w = 1.0 / np.maximum(d, 1e-12) if inverse_distance else d
            if w.sum() <= 0:
                w = np.ones_like(w)
            out[i] = (w[:, None] * v[nb]).sum(axis=0) / w.sum()
            replaced.append(i)
    return out, OutlierReport(float(threshold), np.array(replaced, dtype=np.int64),
                              np.array(zeroed, dtype=np.int64))


def apply_motions(mesh: TriangleMesh, motions) -> TriangleMesh:
    motions = np.asarray(motions, dtype=float)
    if motions.shape != mesh.vertices.shape:
        raise ValueError(f"motion shape {motions.shape} != vertex shape {mesh.vertices.shape}")
    return TriangleMesh(mesh.vertices + motions, mesh.triangles.copy())


def icosphere(radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Outward-oriented icosphere; ``20 * 4**subdivisions`` triangles."""
    phi = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
                  [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
                  [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]], dtype=float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        edges.sort(axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.ravel()
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        base = len(v)
        v = np.vstack([v, mid])
        n = len(f)
        a, b, c = (base + inv[:n], base + inv[n:2 * n], base + inv[2 * n:])
        f = np.concatenate([
            np.stack([f[:, 0], a, c], 1), np.stack([f[:, 1], b, a], 1),
            np.stack([f[:, 2], c, b], 1), np.stack([a, b, c], 1)])
    m = TriangleMesh(v * radius + np.asarray(center, dtype=float), f)
    return m.oriented_outward()


def box_mesh(lo, hi) -> TriangleMesh:
    """Axis-aligned box with outward winding."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    v = np.array([[lo[0], lo[1], lo[2]], [hi[0], lo[1], lo[2]], [hi[0], hi[1], lo[2]],
                  [lo[0], hi[1], lo[2]], [lo[0], lo[1], hi[2]], [hi[0], lo[1], hi[2]],
                  [hi[0], hi[1], hi[2]], [lo[0], hi[1], hi[2]]])
    f = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
                  [1, 2, 6], [1, 6, 5], [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]])
    return TriangleMesh(v, f).oriented_outward()


def bumpy_sphere(radius: float = 0.1, subdivisions: int = 4, bump_height: float = 0.3,
                 bump_width: float = 0.45, bump_dir=(0.6, 0.0, 0.8),
                 center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Sphere with one smooth radial Gaussian bump.

    ``bump_height`` is relative to ``radius``; ``bump_width`` is the angular
    Gaussian width in radians around ``bump_dir``.
    """
    m = icosphere(1.0, subdivisions)
    d = np.asarray(bump_dir, dtype=float)
    d /= np.linalg.norm(d)
    ang = np.arccos(np.clip(m.vertices @ d, -1, 1))
    scale = radius * (1.0 + bump_height * np.exp(-0.5 * (ang / bump_width) ** 2))
    return TriangleMesh(m.vertices * scale[:, None] + np.asarray(center, dtype=float),
                        m.triangles)
