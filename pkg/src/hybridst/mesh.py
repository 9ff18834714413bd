"""Triangulated rectangular domains, P1 finite-element matrices and projectors."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .sparse import SparseSymMatrix

CONTAIN_TOL = 1e-12


class PointOutsideMesh(ValueError):
    def __init__(self, index, point):
        super().__init__(f"point {index} at {tuple(point)} is not inside any triangle")
        self.index = index


@dataclass(frozen=True, eq=False)
class Mesh2D:
    vertices: np.ndarray   # (G, 2)
    triangles: np.ndarray  # (M, 3), counter-clockwise

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        t = np.asarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError("vertices must have shape (G, 2)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise ValueError("triangles must have shape (M, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle references a vertex that does not exist")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self):
        return len(self.vertices)

    def signed_areas(self):
        p = self.vertices[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    @property
    def bbox(self):
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return (lo[0], hi[0]), (lo[1], hi[1])

    def to_text(self):
        lines = [f"v {float(x)!r} {float(y)!r}" for x, y in self.vertices]
        lines += [f"t {i} {j} {k}" for i, j, k in self.triangles]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        verts, tris = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v" and len(parts) == 3:
                verts.append((float(parts[1]), float(parts[2])))
            elif parts[0] == "t" and len(parts) == 4:
                tris.append(tuple(int(p) for p in parts[1:]))
            else:
                raise ValueError(f"line {lineno}: cannot parse {line!r}")
        return cls(np.array(verts).reshape(-1, 2), np.array(tris, dtype=np.int64).reshape(-1, 3))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


def build_grid_mesh(x_range, y_range, nx, ny, margin=0.2):
    """Structured triangulation of a rectangle extended by a margin.

    ``margin`` is a fraction of the longest side of the rectangle, added on
    every side.  Each grid cell is split into two counter-clockwise triangles.
    """
    (x0, x1), (y0, y1) = x_range, y_range
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate ranges {x_range}, {y_range}")
    if nx < 2 or ny < 2:
        raise ValueError("nx and ny must be at least 2")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    ext = margin * max(x1 - x0, y1 - y0)
    xs = np.linspace(x0 - ext, x1 + ext, nx)
    ys = np.linspace(y0 - ext, y1 + ext, ny)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange(nx * ny).reshape(ny, nx)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    triangles = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return Mesh2D(vertices, triangles)


@dataclass(frozen=True, eq=False)
class FemMatrices:
    C: SparseSymMatrix  # lumped mass, diagonal
    G: SparseSymMatrix  # stiffness

    @property
    def c_diag(self):
        return self.C.diagonal()


def fem_matrices(mesh):
    """Lumped mass and stiffness matrices of piecewise-linear basis functions."""
    areas = mesh.signed_areas()
    if np.any(np.abs(areas) <= 1e-14):
        bad = int(np.flatnonzero(np.abs(areas) <= 1e-14)[0])
        raise ValueError(f"triangle {bad} has zero area")
    tri = mesh.triangles
    p = mesh.vertices[tri]
    area = np.abs(areas)
    # gradients of the three barycentric functions, scaled by 2*signed area
    b = np.stack([p[:, 1, 1] - p[:, 2, 1], p[:, 2, 1] - p[:, 0, 1], p[:, 0, 1] - p[:, 1, 1]], axis=1)
    c = np.stack([p[:, 2, 0] - p[:, 1, 0], p[:, 0, 0] - p[:, 2, 0], p[:, 1, 0] - p[:, 0, 0]], axis=1)
    local = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (4.0 * area[:, None, None])
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_vertices
    G = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    cdiag = np.bincount(tri.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    return FemMatrices(SparseSymMatrix.diag(cdiag), SparseSymMatrix.from_scipy(G))


def barycentric(mesh, points):
    """Barycentric coordinates of every point in every triangle, shape (n, M, 3)."""
    p = mesh.vertices[mesh.triangles]
    pts = np.asarray(points, dtype=float)
    v0 = p[None, :, 0, :]
    e1 = p[None, :, 1, :] - v0
    e2 = p[None, :, 2, :] - v0
    d = pts[:, None, :] - v0
    det = e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]
    l1 = (d[..., 0] * e2[..., 1] - d[..., 1] * e2[..., 0]) / det
    l2 = (e1[..., 0] * d[..., 1] - e1[..., 1] * d[..., 0]) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def projector(mesh, points, chunk=512):
    """Sparse ``n_points x G`` matrix of barycentric weights.

    Ties on shared edges go to the lowest-index containing triangle.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    rows, cols, vals = [], [], []
    for start in range(0, n, chunk):
        block = pts[start:start + chunk]
        lam = barycentric(mesh, block)
        inside = np.all(lam >= -CONTAIN_TOL, axis=2)
        has = inside.any(axis=1)
        if not has.all():
            k = int(np.flatnonzero(~has)[0])
            raise PointOutsideMesh(start + k, block[k])
        which = np.argmax(inside, axis=1)
        w = lam[np.arange(len(block)), which]
        w = np.clip(w, 0.0, 1.0)
        w /= w.sum(axis=1, keepdims=True)
        rows.append(np.repeat(np.arange(start, start + len(block)), 3))
        cols.append(mesh.triangles[which].ravel())
        vals.append(w.ravel())
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, mesh.n_vertices))
    A.eliminate_zeros()
    return A
