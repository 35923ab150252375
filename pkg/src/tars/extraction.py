"""Inference-time geometry: dense SDF grids, marching cubes, mesh IO,
canonical-space coloring, texture transfer, and surface sampling.

Field evaluation here is detached (plain numpy through the trained
networks); meshes live in the [-1,1]^3 object frame. Isosurfacing is
delegated to scikit-image's marching cubes behind this module's contracts
(watertightness, exact vertex welding, topology) which the test suite
checks directly on analytic fields.
"""

from __future__ import annotations

import logging
import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np
from skimage import measure

from .rng import substream

log = logging.getLogger(__name__)


@dataclass
class GridField:
    """Dense field samples on a [-1,1]^3 lattice; `values` is flat with x
    varying fastest (index = ix + R*iy + R^2*iz)."""
    resolution: int
    values: np.ndarray

    def volume(self) -> np.ndarray:
        """(R,R,R) array indexed [ix, iy, iz]."""
        r = self.resolution
        return self.values.reshape(r, r, r).transpose(2, 1, 0)


def grid_points(resolution: int) -> np.ndarray:
    """Lattice points in the flat x-fastest order."""
    lin = np.linspace(-1.0, 1.0, resolution)
    Z, Y, X = np.meshgrid(lin, lin, lin, indexing="ij")
    return np.stack([X, Y, Z], axis=-1).reshape(-1, 3)


def sample_grid(field_fn, resolution: int, chunk: int = 65536) -> GridField:
    """Evaluate a (B,3)->(B,) field over the dense lattice in chunks."""
    pts = grid_points(resolution)
    values = np.empty(len(pts))
    for lo in range(0, len(pts), chunk):
        hi = min(lo + chunk, len(pts))
        values[lo:hi] = np.asarray(field_fn(pts[lo:hi])).reshape(-1)
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("sample_grid: non-finite field values")
    return GridField(resolution=resolution, values=values)


@dataclass
class Mesh:
    vertices: np.ndarray              # (N,3)
    triangles: np.ndarray             # (M,3) int indices
    colors: np.ndarray | None = None  # (N,3) in [0,1]

    def is_empty(self) -> bool:
        return len(self.vertices) == 0 or len(self.triangles) == 0

    def copy(self) -> "Mesh":
        return Mesh(self.vertices.copy(), self.triangles.copy(),
                    None if self.colors is None else self.colors.copy())


def empty_mesh() -> Mesh:
    return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def marching_cubes(grid: GridField, iso: float = 0.0) -> Mesh:
    """Isosurface with linear edge interpolation; exact duplicate vertices
    are welded and degenerate triangles dropped. An empty level set yields
    an empty mesh."""
    vol = grid.volume()
    if not (vol.min() <= iso <= vol.max()) or vol.min() == vol.max():
        return empty_mesh()
    spacing = 2.0 / (grid.resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso,
                                                spacing=(spacing,) * 3)
    verts = verts - 1.0
    uverts, inverse = np.unique(verts, axis=0, return_inverse=True)
    faces = inverse[faces]
    a = uverts[faces[:, 1]] - uverts[faces[:, 0]]
    b = uverts[faces[:, 2]] - uverts[faces[:, 0]]
    areas = 0.5 * np.linalg.norm(np.cross(a, b), axis=1)
    distinct = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
                & (faces[:, 0] != faces[:, 2]))
    return Mesh(vertices=uverts,
                triangles=faces[distinct & (areas > 0)].astype(np.int64))


def edge_counts(mesh: Mesh) -> Counter:
    c: Counter = Counter()
    for tri in mesh.triangles:
        for i, j in ((0, 1), (1, 2), (0, 2)):
            a, b = int(tri[i]), int(tri[j])
            c[(a, b) if a < b else (b, a)] += 1
    return c


def is_watertight(mesh: Mesh) -> bool:
    if mesh.is_empty():
        return False
    return all(n == 2 for n in edge_counts(mesh).values())


def euler_characteristic(mesh: Mesh) -> int:
    """V - E + F over unique undirected edges; warns on non-manifold edges
    but still returns the value."""
    edges = edge_counts(mesh)
    bad = sum(1 for n in edges.values() if n != 2)
    if bad:
        log.warning("euler_characteristic: %d non-manifold edges", bad)
    return len(mesh.vertices) - len(edges) + len(mesh.triangles)


def canonical_colors(mesh: Mesh, canonical_fn) -> Mesh:
    """Color every vertex by its canonical-space position mapped to RGB."""
    out = mesh.copy()
    if mesh.is_empty():
        out.colors = np.zeros((0, 3))
        return out
    can = np.asarray(canonical_fn(mesh.vertices))
    out.colors = np.clip((can + 1.0) / 2.0, 0.0, 1.0)
    return out


def _nearest_indices(query: np.ndarray, ref: np.ndarray,
                     chunk: int = 512) -> np.ndarray:
    """Exact nearest neighbor; ties break to the lowest reference index."""
    out = np.empty(len(query), dtype=np.int64)
    for lo in range(0, len(query), chunk):
        hi = min(lo + chunk, len(query))
        d2 = ((query[lo:hi, None, :] - ref[None, :, :]) ** 2).sum(-1)
        out[lo:hi] = np.argmin(d2, axis=1)
    return out


def texture_transfer(source: Mesh, source_canonical_fn,
                     target: Mesh, target_canonical_fn) -> Mesh:
    """Carry per-vertex colors from source to target through canonical
    space: each target vertex takes the color of the nearest source vertex
    after both are mapped by their deformation fields (3D canonical
    coordinates only)."""
    if source.is_empty() or source.colors is None:
        raise ValueError("texture_transfer: source mesh must be painted")
    src_can = np.asarray(source_canonical_fn(source.vertices))
    tgt_can = np.asarray(target_canonical_fn(target.vertices))
    nn = _nearest_indices(tgt_can, src_can)
    out = target.copy()
    out.colors = source.colors[nn]
    return out


def paint_axis_stripes(mesh: Mesh, axis: int = 0, stripes: int = 8,
                       palette=None) -> Mesh:
    """Simple procedural painting used as the texture-transfer source."""
    if palette is None:
        palette = np.array([[0.9, 0.2, 0.2], [0.95, 0.85, 0.2],
                            [0.2, 0.55, 0.9], [0.2, 0.8, 0.4]])
    out = mesh.copy()
    coord = mesh.vertices[:, axis]
    idx = np.floor((coord + 1.0) / 2.0 * stripes).astype(int)
    out.colors = palette[np.mod(idx, len(palette))]
    return out


# ---------------------------------------------------------------------------
# surface sampling
# ---------------------------------------------------------------------------

def triangle_areas(mesh: Mesh) -> np.ndarray:
    a = mesh.vertices[mesh.triangles[:, 1]] - mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 2]] - mesh.vertices[mesh.triangles[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


def sample_surface_points(mesh: Mesh, count: int, seed: int) -> np.ndarray:
    """Area-weighted uniform surface samples, deterministic per seed."""
    if mesh.is_empty():
        raise ValueError("sample_surface_points: empty mesh")
    areas = triangle_areas(mesh)
    total = areas.sum()
    if total <= 0:
        raise ValueError("sample_surface_points: zero total area")
    rng = substream(seed, "surface_samples")
    tri = rng.choice(len(areas), size=count, p=areas / total)
    u = rng.uniform(size=count)
    v = rng.uniform(size=count)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    p0 = mesh.vertices[mesh.triangles[tri, 0]]
    p1 = mesh.vertices[mesh.triangles[tri, 1]]
    p2 = mesh.vertices[mesh.triangles[tri, 2]]
    return p0 + u[:, None] * (p1 - p0) + v[:, None] * (p2 - p0)


# ---------------------------------------------------------------------------
# mesh IO
# ---------------------------------------------------------------------------

def export_mesh(mesh: Mesh, path, header_comment: str | None = None) -> None:
    """OBJ (ascii, optional vertex colors) or PLY (binary little-endian)
    chosen by extension."""
    path = str(path)
    if path.endswith(".obj"):
        _write_obj(mesh, path, header_comment)
    elif path.endswith(".ply"):
        _write_ply(mesh, path, header_comment)
    else:
        raise ValueError(f"export_mesh: unsupported extension in {path}")


def load_mesh(path) -> Mesh:
    path = str(path)
    if path.endswith(".obj"):
        return _read_obj(path)
    if path.endswith(".ply"):
        return _read_ply(path)
    raise ValueError(f"load_mesh: unsupported extension in {path}")


def _write_obj(mesh: Mesh, path, comment=None):
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for i, v in enumerate(mesh.vertices):
            line = f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}"
            if mesh.colors is not None:
                c = mesh.colors[i]
                line += f" {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}"
            fh.write(line + "\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def _read_obj(path) -> Mesh:
    verts, colors, faces = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) >= 7:
                    colors.append([float(x) for x in parts[4:7]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return Mesh(
        vertices=np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        triangles=np.asarray(faces, dtype=np.int64).reshape(-1, 3),
        colors=np.asarray(colors) if colors else None)


def _write_ply(mesh: Mesh, path, comment=None):
    n, m = len(mesh.vertices), len(mesh.triangles)
    colors = mesh.colors
    if colors is None:
        colors = np.full((n, 3), 0.7)
    c_u8 = np.clip(np.round(colors * 255.0), 0, 255).astype(np.uint8)
    header = ["ply", "format binary_little_endian 1.0"]
    if comment:
        header.append(f"comment {comment}")
    header += [
        f"element vertex {n}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        f"element face {m}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        v32 = mesh.vertices.astype("<f4")
        for i in range(n):
            fh.write(v32[i].tobytes())
            fh.write(c_u8[i].tobytes())
        for t in mesh.triangles:
            fh.write(struct.pack("<Biii", 3, int(t[0]), int(t[1]), int(t[2])))


def _read_ply(path) -> Mesh:
    with open(path, "rb") as fh:
        n = m = 0
        while True:
            line = fh.readline().decode("ascii").strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("element face"):
                m = int(line.split()[-1])
            elif line == "end_header":
                break
        verts = np.empty((n, 3))
        colors = np.empty((n, 3))
        for i in range(n):
            verts[i] = np.frombuffer(fh.read(12), dtype="<f4")
            colors[i] = np.frombuffer(fh.read(3), dtype=np.uint8) / 255.0
        tris = np.empty((m, 3), dtype=np.int64)
        for i in range(m):
            cnt = fh.read(1)[0]
            if cnt != 3:
                raise ValueError("load_mesh: only triangle faces supported")
            tris[i] = np.frombuffer(fh.read(12), dtype="<i4")
    return Mesh(vertices=verts, triangles=tris, colors=colors)
