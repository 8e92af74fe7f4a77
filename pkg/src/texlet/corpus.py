"""Procedural test assets: parameterized meshes with textures baked from a 3D color field."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .mesh import TriangleMesh, make_mesh, save_mesh
from .raster import dilate, rasterize, uv_to_pixel

ASSET_DIR = Path(__file__).parent / "assets"


def _grid_faces(nu, nv, wrap_u, wrap_v):
    """Quad grid triangulation over an (nv+1) x (nu+1) lattice of UV corners.

    Returns vertex-index faces (using wrapped indices) and UV corner faces.
    """
    cu = nu if wrap_u else nu + 1
    cv = nv if wrap_v else nv + 1

    def vid(i, j):
        return (i % cv) * cu + (j % cu)

    faces, uvs = [], []
    for i in range(nv):
        for j in range(nu):
            a, b, c, d = vid(i, j), vid(i, j + 1), vid(i + 1, j + 1), vid(i + 1, j)
            ua, ub = j / nu, (j + 1) / nu
            va, vb = i / nv, (i + 1) / nv
            faces += [(a, b, c), (a, c, d)]
            uvs += [((ua, va), (ub, va), (ub, vb)), ((ua, va), (ub, vb), (ua, vb))]
    return np.array(faces), np.array(uvs, dtype=np.float64)


def uv_sphere(n_seg=32, n_ring=16, bump=0.0):
    """Lat-long sphere with shared seam vertices and pole fans; ``bump`` adds radial relief."""
    verts = [(0.0, 0.0, -1.0)]
    for i in range(1, n_ring):
        theta = math.pi * i / n_ring - math.pi / 2
        for j in range(n_seg):
            phi = 2 * math.pi * j / n_seg
            verts.append((math.cos(theta) * math.cos(phi), math.cos(theta) * math.sin(phi), math.sin(theta)))
    verts.append((0.0, 0.0, 1.0))
    v = np.array(verts)
    if bump:
        theta = np.arcsin(np.clip(v[:, 2], -1, 1))
        phi = np.arctan2(v[:, 1], v[:, 0])
        v = v * (1.0 + bump * np.sin(3 * phi) * np.cos(theta) ** 2 * np.sin(2 * theta + 0.5))[:, None]
    south, north = 0, len(v) - 1

    def rv(i, j):
        return 1 + (i - 1) * n_seg + (j % n_seg)

    faces, uvs = [], []
    for j in range(n_seg):
        u0, u1, um = j / n_seg, (j + 1) / n_seg, (j + 0.5) / n_seg
        faces.append((south, rv(1, j + 1), rv(1, j)))
        uvs.append(((um, 0.0), (u1, 1 / n_ring), (u0, 1 / n_ring)))
        faces.append((north, rv(n_ring - 1, j), rv(n_ring - 1, j + 1)))
        uvs.append(((um, 1.0), (u0, (n_ring - 1) / n_ring), (u1, (n_ring - 1) / n_ring)))
    for i in range(1, n_ring - 1):
        for j in range(n_seg):
            a, b, c, d = rv(i, j), rv(i, j + 1), rv(i + 1, j + 1), rv(i + 1, j)
            u0, u1 = j / n_seg, (j + 1) / n_seg
            v0, v1 = i / n_ring, (i + 1) / n_ring
            faces += [(a, b, c), (a, c, d)]
            uvs += [((u0, v0), (u1, v0), (u1, v1)), ((u0, v0), (u1, v1), (u0, v1))]
    return v, np.array(faces), np.array(uvs, dtype=np.float64)


def torus(nu=64, nv=32, big=1.0, small=0.4):
    faces, uvs = _grid_faces(nu, nv, True, True)
    j, i = np.meshgrid(np.arange(nu), np.arange(nv))
    a = 2 * np.pi * j.ravel() / nu
    b = 2 * np.pi * i.ravel() / nv
    v = np.stack([(big + small * np.cos(b)) * np.cos(a), (big + small * np.cos(b)) * np.sin(a), small * np.sin(b)], 1)
    return v, faces, uvs


def heightfield(n=64, amp=0.15):
    faces, uvs = _grid_faces(n, n, False, False)
    j, i = np.meshgrid(np.arange(n + 1), np.arange(n + 1))
    x = j.ravel() / n - 0.5
    y = i.ravel() / n - 0.5
    z = amp * np.sin(2 * np.pi * x * 1.5) * np.cos(2 * np.pi * y) + 0.5 * amp * np.sin(5 * x + 3 * y)
    return np.stack([x, y, z], 1), faces, uvs


def icosphere(level=3):
    """Subdivided icosahedron projected to the unit sphere, UVs from a six-chart cube map."""
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
         (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5),
         (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = list(f)
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nxt = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nxt += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        faces = nxt
    V = np.array(verts)
    F = np.array(faces)
    return V, F, cube_map_uvs(V, F)


def cube_map_uvs(V, F):
    """Gnomonic projection of each face onto the cube side its centroid points at, 3x2 charts."""
    cent = V[F].mean(axis=1)
    axis = np.argmax(np.abs(cent), axis=1)
    sign = np.sign(cent[np.arange(len(F)), axis])
    side = axis * 2 + (sign < 0)
    rows = np.arange(len(F))[:, None]
    # coarse meshes can put a corner at 90 degrees from its chart axis; clamp the projection depth
    depth = np.maximum(np.abs(V[F][rows, np.arange(3)[None, :], axis[:, None]]), 0.25)
    spill = np.abs(V[F]) / depth[..., None]
    margin = float(spill.max()) - 1 + 0.02
    uv = np.empty((len(F), 3, 2))
    for k in range(len(F)):
        ax = axis[k]
        o1, o2 = [d for d in range(3) if d != ax]
        p = V[F[k]]
        s = p[:, o1] / depth[k]
        r = p[:, o2] / depth[k]
        # charts keep a margin so corners that spill past the cube edge stay inside their cell
        lu = (s * sign[k] * (1 if ax != 1 else -1) + 1 + margin) / (2 + 2 * margin)
        lv = (r + 1 + margin) / (2 + 2 * margin)
        cell = side[k]
        uv[k, :, 0] = (cell % 3 + lu) / 3
        uv[k, :, 1] = (cell // 3 + lv) / 2
    return uv


def unit_cube():
    v = np.array([[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces, uvs = [], []
    for k, (a, b, c, d) in enumerate(quads):
        u0, u1 = k / 6, (k + 1) / 6
        faces += [(a, b, c), (a, c, d)]
        uvs += [((u0, 0), (u1, 0), (u1, 1)), ((u0, 0), (u1, 1), (u0, 1))]
    return v, np.array(faces), np.array(uvs, dtype=np.float64)


def color_field(p: np.ndarray, detail: float = 1.0) -> np.ndarray:
    """Smooth RGB field over 3D points in roughly [-0.5, 0.5]^3, values in [0.05, 0.95]."""
    dirs = np.array([[0.8, 0.5, 0.3], [-0.3, 0.9, 0.2], [0.4, -0.2, 0.9], [0.6, 0.6, -0.5]])
    freqs = np.array([5.0, 7.0, 9.0, 13.0]) * detail
    phases = np.array([[0.0, 1.0, 2.0], [0.5, 2.5, 4.0], [1.5, 0.3, 3.3], [2.2, 4.1, 0.7]])
    amps = np.array([0.22, 0.14, 0.1, 0.06])
    out = np.full(p.shape[:-1] + (3,), 0.5)
    for d, f, ph, a in zip(dirs, freqs, phases, amps):
        s = p @ (d / np.linalg.norm(d)) * f
        out += a * np.sin(s[..., None] + ph)
    return np.clip(out, 0.05, 0.95)


def bake_texture(vertices, faces, face_uvs, size, detail=1.0) -> np.ndarray:
    """Rasterize the UV layout and evaluate ``color_field`` at the surface point of every texel."""
    xy = uv_to_pixel(face_uvs, size, size)
    fid, bary = rasterize(xy, size, size)
    mask = fid >= 0
    img = np.zeros((size, size, 3))
    corners = vertices[faces[fid[mask]]]
    pts = np.einsum("nk,nkc->nc", bary[mask], corners)
    img[mask] = color_field(pts, detail)
    img = dilate(img, mask)
    return np.round(img * 255).astype(np.uint8)


def make_asset(kind: str, tex_size: int = 256, detail: float = 1.0, **kw):
    builders = {
        "sphere": uv_sphere,
        "bumpy": lambda **k: uv_sphere(bump=0.15, **k),
        "torus": torus,
        "terrain": heightfield,
        "icosphere": icosphere,
        "cube": unit_cube,
    }
    v, f, uv = builders[kind](**kw)
    mesh, _ = make_mesh(v, f, uv, np.zeros((tex_size, tex_size, 3), np.uint8), normalize=True)
    tex = bake_texture(mesh.vertices, mesh.faces, mesh.face_uvs, tex_size, detail)
    return mesh.with_texture(tex)


# name -> (kind, texture size, kwargs)
ASSETS = {
    "toy": ("icosphere", 64, dict(level=3, detail=1.5)),
    "sphere": ("sphere", 512, dict(n_seg=96, n_ring=48)),
    "bumpy": ("bumpy", 512, dict(n_seg=96, n_ring=48)),
    "torus": ("torus", 512, dict(nu=96, nv=48)),
    "terrain": ("terrain", 512, dict(n=64)),
    "icosphere": ("icosphere", 512, dict(level=5)),
}


def write_assets(out_dir=ASSET_DIR) -> None:
    out_dir = Path(out_dir)
    for name, (kind, size, kw) in ASSETS.items():
        mesh = make_asset(kind, size, **kw)
        save_mesh(mesh, out_dir / f"{name}.obj")


def asset_path(name: str) -> Path:
    return ASSET_DIR / f"{name}.obj"


if __name__ == "__main__":
    write_assets()
