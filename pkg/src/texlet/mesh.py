"""Triangle mesh container, Wavefront OBJ loading and the face dual graph."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

AREA_EPS = 1e-12
UV_SLACK = 1e-4


class MeshError(ValueError):
    """Raised for meshes that cannot be used by the pipeline."""


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    face_uvs: np.ndarray  # (F, 3, 2) float64, per corner
    texture: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        for name in ("vertices", "faces", "face_uvs", "texture"):
            getattr(self, name).setflags(write=False)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def corners(self) -> np.ndarray:
        """(F, 3, 3) corner positions."""
        return self.vertices[self.faces]

    def with_texture(self, texture: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.faces, self.face_uvs, np.ascontiguousarray(texture))

    def validate(self) -> None:
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError(f"faces must have shape (F, 3), got {self.faces.shape}")
        if self.face_uvs.shape != (len(self.faces), 3, 2):
            raise MeshError(f"face_uvs must have shape (F, 3, 2), got {self.face_uvs.shape}")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")
        uv = self.face_uvs
        if not np.all(np.isfinite(uv)) or uv.min(initial=0.0) < -UV_SLACK or uv.max(initial=0.0) > 1 + UV_SLACK:
            raise MeshError("UV coordinates must be finite and inside [0, 1]")
        if self.texture.ndim != 3 or self.texture.shape[2] != 3 or self.texture.dtype != np.uint8:
            raise MeshError("texture must be an 8-bit RGB image")


@dataclass
class LoadSummary:
    path: str
    n_vertices: int
    n_faces: int
    removed_degenerate: int
    texture_shape: tuple
    scale: float
    center: tuple
    warnings: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"path: {self.path}",
            f"vertices: {self.n_vertices}",
            f"faces: {self.n_faces}",
            f"removed_degenerate: {self.removed_degenerate}",
            f"texture: {self.texture_shape[1]}x{self.texture_shape[0]}",
            f"normalize_scale: {self.scale:.17g}",
            "normalize_center: " + " ".join(f"{c:.17g}" for c in self.center),
        ]
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class FaceAttributes:
    centroid: np.ndarray  # (F, 3)
    normal: np.ndarray  # (F, 3), unit
    area: np.ndarray  # (F,)

    def __len__(self):
        return len(self.area)

    def __getitem__(self, i):
        return self.centroid[i], self.normal[i], self.area[i]


@dataclass(frozen=True, eq=False)
class DualGraph:
    """Face adjacency: one node per face, one edge per shared mesh edge."""

    n_faces: int
    edges: np.ndarray  # (E, 2) int64, u < v
    edge_length: np.ndarray  # (E,) length of the shared mesh edge
    nonmanifold_edges: np.ndarray  # (K, 2) vertex pairs shared by more than two faces
    perimeter: np.ndarray  # (F,) per-face perimeter

    @property
    def has_nonmanifold(self) -> bool:
        return len(self.nonmanifold_edges) > 0

    def neighbors_csr(self):
        """CSR adjacency (indptr, indices, edge ids), rows sorted by neighbor id."""
        u, v = self.edges[:, 0], self.edges[:, 1]
        src = np.concatenate([u, v])
        dst = np.concatenate([v, u])
        eid = np.concatenate([np.arange(len(u)), np.arange(len(u))])
        order = np.lexsort((dst, src))
        src, dst, eid = src[order], dst[order], eid[order]
        indptr = np.zeros(self.n_faces + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        return np.cumsum(indptr), dst, eid

    def components(self) -> np.ndarray:
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components

        n = self.n_faces
        adj = coo_matrix((np.ones(len(self.edges)), (self.edges[:, 0], self.edges[:, 1])), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
        return labels


def face_attributes(mesh: TriangleMesh) -> FaceAttributes:
    c = mesh.corners()
    cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    norm = np.linalg.norm(cross, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    return FaceAttributes(
        centroid=c.mean(axis=1),
        normal=cross / safe[:, None],
        area=0.5 * norm,
    )


def _edge_keys(faces: np.ndarray) -> np.ndarray:
    """(3F, 2) sorted vertex pairs; row 3f+k is the edge from corner k to k+1."""
    a = faces
    b = np.roll(faces, -1, axis=1)
    e = np.stack([a, b], axis=2).reshape(-1, 2)
    return np.sort(e, axis=1)


def build_dual_graph(mesh: TriangleMesh) -> DualGraph:
    faces = mesh.faces
    n = len(faces)
    keys = _edge_keys(faces)
    owner = np.repeat(np.arange(n), 3)
    order = np.lexsort((owner, keys[:, 1], keys[:, 0]))
    k = keys[order]
    o = owner[order]
    starts = np.flatnonzero(np.r_[True, np.any(k[1:] != k[:-1], axis=1)])
    counts = np.diff(np.r_[starts, len(k)])
    verts = mesh.vertices
    lens = np.linalg.norm(verts[k[starts, 0]] - verts[k[starts, 1]], axis=1)

    pairs = []
    plen = []
    two = counts == 2
    s2 = starts[two]
    pairs.append(np.stack([o[s2], o[s2 + 1]], axis=1))
    plen.append(lens[two])
    nm = np.flatnonzero(counts > 2)
    for i in nm:
        s, c = starts[i], counts[i]
        fs = o[s : s + c]
        for x in range(c):
            for y in range(x + 1, c):
                pairs.append(np.array([[fs[x], fs[y]]]))
                plen.append(np.array([lens[i]]))
    edges = np.concatenate(pairs).astype(np.int64) if pairs else np.zeros((0, 2), np.int64)
    elen = np.concatenate(plen) if plen else np.zeros(0)
    edges = np.sort(edges, axis=1)
    keep = edges[:, 0] != edges[:, 1]
    edges, elen = edges[keep], elen[keep]
    # faces sharing two edges (folded duplicates) keep one dual edge with the summed length
    if len(edges):
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        edges, elen = edges[order], elen[order]
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        summed = np.zeros(len(uniq))
        np.add.at(summed, inv, elen)
        edges, elen = uniq, summed
    c = mesh.corners()
    perim = np.linalg.norm(c - np.roll(c, -1, axis=1), axis=2).sum(axis=1)
    nonmanifold = k[starts[nm]] if len(nm) else np.zeros((0, 2), np.int64)
    if len(nm):
        log.warning("mesh has %d non-manifold edges", len(nm))
    return DualGraph(n, edges, elen, nonmanifold, perim)


def boundary_edge_mask(mesh: TriangleMesh) -> np.ndarray:
    """(F, 3) True where the edge from corner k to k+1 has no other incident face."""
    keys = _edge_keys(mesh.faces)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    return (counts[inv.reshape(-1)] == 1).reshape(-1, 3)


def normalize_vertices(vertices: np.ndarray):
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    diag = float(np.linalg.norm(hi - lo))
    scale = 1.0 / diag if diag > 0 else 1.0
    return (vertices - center) * scale, center, scale


def make_mesh(vertices, faces, face_uvs, texture, normalize=True, path="<memory>"):
    """Validate, optionally normalize, and drop degenerate faces. Returns (mesh, summary)."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    face_uvs = np.asarray(face_uvs, dtype=np.float64).reshape(-1, 3, 2)
    texture = np.ascontiguousarray(np.asarray(texture, dtype=np.uint8))
    if texture.ndim == 2:
        texture = np.repeat(texture[:, :, None], 3, axis=2)
    center, scale = np.zeros(3), 1.0
    if normalize and len(vertices):
        vertices, center, scale = normalize_vertices(vertices)
    mesh = TriangleMesh(vertices, faces, face_uvs, texture)
    mesh.validate()
    area = face_attributes(mesh).area
    keep = area > AREA_EPS
    removed = int((~keep).sum())
    if removed:
        mesh = TriangleMesh(vertices, faces[keep], face_uvs[keep], texture)
    summary = LoadSummary(
        path=str(path),
        n_vertices=len(vertices),
        n_faces=mesh.n_faces,
        removed_degenerate=removed,
        texture_shape=texture.shape,
        scale=float(scale),
        center=tuple(float(c) for c in center),
    )
    if removed:
        summary.warnings.append(f"dropped {removed} degenerate faces (area <= {AREA_EPS:g})")
    return mesh, summary


def _parse_obj(path: Path):
    verts, uvs, faces, fuv = [], [], [], []
    mtllib = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == "f":
                corners = parts[1:]
                if len(corners) != 3:
                    raise MeshError(
                        f"{path}:{lineno}: face with {len(corners)} corners; triangulate the mesh before loading"
                    )
                vi, ti = [], []
                for c in corners:
                    fields = c.split("/")
                    if len(fields) < 2 or not fields[1]:
                        raise MeshError(f"{path}:{lineno}: mesh lacks parameterization (face corner without vt index)")
                    vi.append(int(fields[0]))
                    ti.append(int(fields[1]))
                faces.append(vi)
                fuv.append(ti)
            elif tag == "mtllib" and len(parts) > 1:
                mtllib = " ".join(parts[1:])
    if not uvs:
        raise MeshError(f"{path}: mesh lacks parameterization (no vt records)")
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    t = np.array(uvs, dtype=np.float64).reshape(-1, 2)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    ft = np.array(fuv, dtype=np.int64).reshape(-1, 3)
    # OBJ indices are 1-based; negative indices count from the end
    f = np.where(f > 0, f - 1, len(v) + f)
    ft = np.where(ft > 0, ft - 1, len(t) + ft)
    if len(ft) and (ft.min() < 0 or ft.max() >= len(t)):
        raise MeshError(f"{path}: vt index out of range")
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise MeshError(f"{path}: vertex index out of range")
    return v, f, t[ft], mtllib


def _find_texture(path: Path, mtllib):
    if mtllib:
        mtl = path.parent / mtllib
        if mtl.exists():
            for line in mtl.read_text(encoding="utf-8").splitlines():
                parts = line.split()
                if parts and parts[0] == "map_Kd" and len(parts) > 1:
                    return path.parent / parts[-1]
    for ext in (".png", ".PNG"):
        cand = path.with_suffix(ext)
        if cand.exists():
            return cand
    raise MeshError(f"{path}: no texture image found (expected map_Kd in the .mtl or a sibling .png)")


def read_texture(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise MeshError(f"unreadable texture {path}: {exc}") from exc


def load_mesh(path, normalize: bool = True):
    """Load an OBJ with UVs plus its RGB texture. Returns (mesh, summary)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    v, f, uv, mtllib = _parse_obj(path)
    tex = read_texture(_find_texture(path, mtllib))
    return make_mesh(v, f, uv, tex, normalize=normalize, path=path)


def save_mesh(mesh: TriangleMesh, path, texture_name: str | None = None) -> None:
    """Write OBJ + MTL + PNG. UVs are deduplicated per corner value."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    texture_name = texture_name or path.with_suffix(".png").name
    Image.fromarray(np.asarray(mesh.texture)).save(path.parent / texture_name)
    mtl_name = path.with_suffix(".mtl").name
    (path.parent / mtl_name).write_text(f"newmtl material0\nmap_Kd {texture_name}\n", encoding="utf-8")
    uv_flat = mesh.face_uvs.reshape(-1, 2)
    uniq, inv = np.unique(uv_flat, axis=0, return_inverse=True)
    inv = inv.reshape(-1, 3) + 1
    fi = mesh.faces + 1
    lines = [f"mtllib {mtl_name}"]
    lines += [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"vt {u:.17g} {w:.17g}" for u, w in uniq]
    lines.append("usemtl material0")
    lines += [f"f {a}/{ta} {b}/{tb} {c}/{tc}" for (a, b, c), (ta, tb, tc) in zip(fi, inv)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
