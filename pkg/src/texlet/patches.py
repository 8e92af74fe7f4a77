"""Unwrapping face clusters to R x R patch images and pasting them back into the UV atlas."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage, sparse

from .mesh import TriangleMesh, face_attributes
from .partition import Cluster, PatchClustering
from .raster import bilinear_taps, dilate, rasterize, sample_bilinear, uv_to_pixel

ATLAS_DILATION = 2
_SNAP = 2.0 ** 20  # projected image coordinates snap to 1/2^20 texel
_TIE_RTOL = 1e-9


@dataclass
class TexturePatch:
    image: np.ndarray  # (R, R, 3) float in [0, 1]
    face_ids: np.ndarray  # (k,) mesh face indices, sorted
    face_map: np.ndarray  # (k, 3, 2) corner positions in patch image coordinates
    valid_mask: np.ndarray  # (R, R) bool

    @property
    def R(self) -> int:
        return self.image.shape[0]


@dataclass(frozen=True)
class PatchAnchor:
    position: np.ndarray
    normal: np.ndarray

    def as_row(self) -> np.ndarray:
        return np.concatenate([self.position, self.normal])


def patch_anchor(mesh: TriangleMesh, cluster: Cluster) -> PatchAnchor:
    return PatchAnchor(position=cluster.centroid.copy(), normal=cluster.plane_normal.copy())


def anchors_array(clustering: PatchClustering) -> np.ndarray:
    """(N, 6) anchor rows (position, normal) in cluster order."""
    return np.stack([np.concatenate([c.centroid, c.plane_normal]) for c in clustering.clusters])


def _in_plane_frame(mesh: TriangleMesh, face_ids: np.ndarray, normal: np.ndarray):
    """+x is the longest boundary edge (winding direction) projected into the plane; y = n x x."""
    faces = mesh.faces[face_ids]
    a = faces
    b = np.roll(faces, -1, axis=1)
    keys = np.sort(np.stack([a, b], axis=2), axis=2).reshape(-1, 2)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    boundary = counts[inv.reshape(-1)] == 1
    va = mesh.vertices[a.reshape(-1)]
    vb = mesh.vertices[b.reshape(-1)]
    d = vb - va
    d = d - np.outer(d @ normal, normal)
    lens = np.linalg.norm(d, axis=1)
    cand = boundary if boundary.any() else np.ones(len(lens), dtype=bool)
    cand &= lens > 0
    if not cand.any():
        cand = lens > 0
    best = lens[cand].max()
    # lowest (face, corner) among near-ties keeps the frame independent of rigid motions
    pick = np.flatnonzero(cand & (lens >= best * (1 - _TIE_RTOL)))[0]
    x = d[pick] / lens[pick]
    y = np.cross(normal, x)
    return x, y


def _project(mesh: TriangleMesh, cluster: Cluster):
    ids = cluster.face_ids
    corners = mesh.vertices[mesh.faces[ids]]  # (k, 3, 3)
    n = cluster.plane_normal
    x, y = _in_plane_frame(mesh, ids, n)
    rel = corners - cluster.centroid
    xy = np.stack([rel @ x, rel @ y], axis=-1)
    ext = np.ptp(xy.reshape(-1, 2), axis=0)
    if ext.min() <= 1e-9 * max(ext.max(), 1e-300):
        # degenerate projection: use the two largest-variance directions of the corners
        pts = corners.reshape(-1, 3)
        _, vec = np.linalg.eigh(np.cov((pts - pts.mean(axis=0)).T))
        x, y = vec[:, 2], vec[:, 1]
        xy = np.stack([rel @ x, rel @ y], axis=-1)
    return xy


def _fit_to_image(xy: np.ndarray, R: int) -> np.ndarray:
    flat = xy.reshape(-1, 2)
    lo = flat.min(axis=0)
    ext = np.ptp(flat, axis=0)
    span = max(float(ext.max()), 1e-300)
    s = (R - 2) / span
    offset = 1.0 + ((R - 2) - ext * s) / 2
    out = (xy - lo) * s + offset
    return np.round(out * _SNAP) / _SNAP


def _closest_on_triangles(points: np.ndarray, tris: np.ndarray):
    """Index of the nearest triangle and clamped barycentrics of the nearest point on it."""
    best = np.full(len(points), np.inf)
    face = np.zeros(len(points), dtype=np.int64)
    bary = np.zeros((len(points), 3))
    for f, corners in enumerate(tris):
        for i in range(3):
            a, b = corners[i], corners[(i + 1) % 3]
            ab = b - a
            t = np.clip((points - a) @ ab / max(ab @ ab, 1e-300), 0.0, 1.0)
            dist = np.sum((a + t[:, None] * ab - points) ** 2, axis=1)
            closer = dist < best
            best[closer] = dist[closer]
            face[closer] = f
            w = np.zeros((closer.sum(), 3))
            w[:, i] = 1.0 - t[closer]
            w[:, (i + 1) % 3] = t[closer]
            bary[closer] = w
    return face, bary


def _texel_uvs(face_uvs: np.ndarray, fmap: np.ndarray, R: int):
    """Source UV of every patch texel plus the mask of texels the faces cover.

    Uncovered texels copy the UV of the nearest covered texel; a cluster too thin to
    cover any texel center reads from the closest point on its triangles instead.
    """
    fid, bary = rasterize(fmap, R, R)
    mask = fid >= 0
    uv = np.zeros((R, R, 2))
    if mask.any():
        uv[mask] = np.einsum("nk,nkc->nc", bary[mask], face_uvs[fid[mask]])
        if not mask.all():
            _, (ii, jj) = ndimage.distance_transform_edt(~mask, return_indices=True)
            uv = uv[ii, jj]
    else:
        jj, ii = np.meshgrid(np.arange(R) + 0.5, np.arange(R) + 0.5)
        f, w = _closest_on_triangles(np.column_stack([jj.ravel(), ii.ravel()]), fmap)
        uv = np.einsum("nk,nkc->nc", w, face_uvs[f]).reshape(R, R, 2)
    return uv, mask


class PatchLayout:
    """Geometry of every cluster's unwrap: face maps, coverage and texel source coordinates.

    Sampling a texture through the layout is a single bilinear lookup, so clean and
    degraded textures of one mesh share the same unwrap.
    """

    def __init__(self, mesh: TriangleMesh, clustering: PatchClustering, R: int):
        if R < 8:
            raise ValueError(f"patch resolution R must be >= 8, got {R}")
        self.mesh = mesh
        self.clustering = clustering
        self.R = R
        n = len(clustering.clusters)
        self.face_maps = []
        self.valid = np.zeros((n, R, R), dtype=bool)
        src = np.zeros((n, R, R, 2))
        h, w = mesh.texture.shape[:2]
        for p, cl in enumerate(clustering.clusters):
            fmap = _fit_to_image(_project(mesh, cl), R)
            self.face_maps.append(fmap)
            uv, mask = _texel_uvs(mesh.face_uvs[cl.face_ids], fmap, R)
            src[p] = uv_to_pixel(uv, w, h)
            self.valid[p] = mask
        self.src = src
        self._paste = {}

    @property
    def n_patches(self) -> int:
        return len(self.face_maps)

    def sample(self, texture: np.ndarray) -> np.ndarray:
        """(N, R, R, 3) float patch images of an 8-bit or float texture."""
        tex = _as_float(texture)
        return sample_bilinear(tex, self.src[..., 0], self.src[..., 1])

    def patches(self, texture: np.ndarray | None = None) -> list:
        imgs = self.sample(self.mesh.texture if texture is None else texture)
        return [
            TexturePatch(imgs[p], cl.face_ids, self.face_maps[p], self.valid[p])
            for p, cl in enumerate(self.clustering.clusters)
        ]

    def paste_operator(self, height: int, width: int) -> "PasteOperator":
        key = (height, width)
        if key not in self._paste:
            self._paste[key] = PasteOperator(self.mesh, self.clustering, self.face_maps, self.R, height, width)
        return self._paste[key]


class PasteOperator:
    """Sparse linear map from stacked patch texels (N*R*R) to covered atlas texels."""

    def __init__(self, mesh, clustering, face_maps, R, height, width):
        self.shape = (height, width)
        self.R = R
        n_faces = mesh.n_faces
        owner = np.full(n_faces, -1, dtype=np.int64)
        local = np.full(n_faces, -1, dtype=np.int64)
        for p, fm in enumerate(face_maps):
            ids = clustering.clusters[p].face_ids
            if len(fm) != len(ids):
                raise ValueError(f"patch {p} face map does not match its cluster")
            owner[ids] = p
            local[ids] = np.arange(len(ids))
        missing = np.flatnonzero(owner < 0)
        if len(missing):
            raise ValueError(f"{len(missing)} mesh faces are missing from all face maps (first: {missing[0]})")
        fid, bary = rasterize(uv_to_pixel(mesh.face_uvs, width, height), width, height)
        self.covered = fid >= 0
        f = fid[self.covered]
        fm_all = np.concatenate(face_maps)
        base = np.concatenate([[0], np.cumsum([len(m) for m in face_maps])])[:-1]
        corners = fm_all[base[owner[f]] + local[f]]  # (n, 3, 2)
        pos = np.einsum("nk,nkc->nc", bary[self.covered], corners)
        idx, wts = bilinear_taps(pos[:, 0], pos[:, 1], R, R)
        idx = idx + (owner[f] * R * R)[:, None]
        rows = np.repeat(np.arange(len(f)), 4)
        self.matrix = sparse.csr_matrix(
            (wts.reshape(-1), (rows, idx.reshape(-1))), shape=(len(f), len(face_maps) * R * R)
        )

    def apply(self, patch_images: np.ndarray, dilation: int | None = ATLAS_DILATION) -> np.ndarray:
        """(N, R, R, C) patch stack -> (H, W, C) atlas; uncovered texels dilated then zero."""
        n = patch_images.shape[0]
        c = patch_images.shape[-1]
        flat = patch_images.reshape(n * self.R * self.R, c)
        out = np.zeros(self.shape + (c,))
        out[self.covered] = self.matrix @ flat
        if dilation:
            out = dilate(out, self.covered, dilation)
        return out


def _as_float(texture: np.ndarray) -> np.ndarray:
    if texture.dtype == np.uint8:
        return texture.astype(np.float64) / 255.0
    return np.asarray(texture, dtype=np.float64)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def unwrap_patch(mesh: TriangleMesh, cluster: Cluster, R: int) -> TexturePatch:
    if R < 8:
        raise ValueError(f"patch resolution R must be >= 8, got {R}")
    fmap = _fit_to_image(_project(mesh, cluster), R)
    uv, mask = _texel_uvs(mesh.face_uvs[cluster.face_ids], fmap, R)
    tex = _as_float(mesh.texture)
    px = uv_to_pixel(uv, tex.shape[1], tex.shape[0])
    img = sample_bilinear(tex, px[..., 0], px[..., 1])
    return TexturePatch(img, cluster.face_ids, fmap, mask)


def unwrap_all(mesh: TriangleMesh, clustering: PatchClustering, R: int) -> list:
    return PatchLayout(mesh, clustering, R).patches()


def paste_patches(mesh: TriangleMesh, clustering: PatchClustering, patches, atlas_size=None) -> np.ndarray:
    """Reassemble an atlas (float RGB in [0, 1]) using the mesh's own UVs."""
    if len(patches) != len(clustering.clusters):
        raise ValueError(f"expected {len(clustering.clusters)} patches, got {len(patches)}")
    if atlas_size is None:
        h, w = mesh.texture.shape[:2]
    elif isinstance(atlas_size, int):
        h = w = atlas_size
    else:
        h, w = atlas_size
    R = patches[0].image.shape[0]
    op = PasteOperator(mesh, clustering, [p.face_map for p in patches], R, h, w)
    return op.apply(np.stack([p.image for p in patches]))


def uv_coverage(mesh: TriangleMesh, height: int | None = None, width: int | None = None) -> np.ndarray:
    if height is None:
        height, width = mesh.texture.shape[:2]
    fid, _ = rasterize(uv_to_pixel(mesh.face_uvs, width, height), width, height)
    return fid >= 0


# ---------------------------------------------------------------------------
# serialization: PNG grid of tiles + JSON sidecar


def save_patches(patches, png_path, sidecar_path=None) -> None:
    png_path = Path(png_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else png_path.with_suffix(".json")
    n = len(patches)
    R = patches[0].R
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    grid = np.zeros((rows * R, cols * R, 4), dtype=np.uint8)
    for i, p in enumerate(patches):
        r, c = divmod(i, cols)
        grid[r * R : (r + 1) * R, c * R : (c + 1) * R, :3] = to_uint8(p.image)
        grid[r * R : (r + 1) * R, c * R : (c + 1) * R, 3] = np.where(p.valid_mask, 255, 128)
    Image.fromarray(grid, mode="RGBA").save(png_path)
    doc = {
        "format": "texlet.patches",
        "version": 1,
        "R": R,
        "n": n,
        "cols": cols,
        "image": png_path.name,
        "patches": [{"faces": p.face_ids.tolist(), "face_map": p.face_map.tolist()} for p in patches],
    }
    sidecar_path.write_text(json.dumps(doc), encoding="utf-8")


def load_patches(sidecar_path) -> list:
    sidecar_path = Path(sidecar_path)
    doc = json.loads(sidecar_path.read_text(encoding="utf-8"))
    if doc.get("format") != "texlet.patches":
        raise ValueError(f"{sidecar_path}: not a patch sidecar")
    R, cols = doc["R"], doc["cols"]
    with Image.open(sidecar_path.parent / doc["image"]) as im:
        grid = np.asarray(im.convert("RGBA"))
    out = []
    for i, rec in enumerate(doc["patches"]):
        r, c = divmod(i, cols)
        tile = grid[r * R : (r + 1) * R, c * R : (c + 1) * R]
        out.append(
            TexturePatch(
                image=tile[..., :3].astype(np.float64) / 255.0,
                face_ids=np.asarray(rec["faces"], dtype=np.int64),
                face_map=np.asarray(rec["face_map"], dtype=np.float64),
                valid_mask=tile[..., 3] == 255,
            )
        )
    return out


__all__ = [
    "PatchAnchor",
    "PatchLayout",
    "PasteOperator",
    "TexturePatch",
    "anchors_array",
    "face_attributes",
    "load_patches",
    "paste_patches",
    "patch_anchor",
    "save_patches",
    "to_uint8",
    "unwrap_all",
    "unwrap_patch",
    "uv_coverage",
]
