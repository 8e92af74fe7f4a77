"""Small procedural meshes shared by the tests."""
import numpy as np

from texlet.corpus import icosphere, torus, unit_cube
from texlet.mesh import make_mesh


def blank_texture(size=4, value=128):
    return np.full((size, size, 3), value, dtype=np.uint8)


def quad_mesh(texture=None, normalize=False):
    v = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    f = np.array([[0, 1, 2], [0, 2, 3]])
    uv = np.array([[[0.0, 0], [1, 0], [1, 1]], [[0, 0], [1, 1], [0, 1]]])
    mesh, _ = make_mesh(v, f, uv, blank_texture() if texture is None else texture, normalize=normalize)
    return mesh


def grid_mesh(n=8, texture=None, z=None):
    """Flat n x n quad grid on [0,1]^2 with matching UVs (2 n^2 faces)."""
    j, i = np.meshgrid(np.arange(n + 1), np.arange(n + 1))
    x, y = j.ravel() / n, i.ravel() / n
    zz = np.zeros_like(x) if z is None else z(x, y)
    v = np.stack([x, y, zz], 1)
    faces, uvs = [], []
    for r in range(n):
        for c in range(n):
            a, b, cc, d = r * (n + 1) + c, r * (n + 1) + c + 1, (r + 1) * (n + 1) + c + 1, (r + 1) * (n + 1) + c
            faces += [(a, b, cc), (a, cc, d)]
    f = np.array(faces)
    uv = np.stack([x, y], 1)[f]
    mesh, _ = make_mesh(v, f, uv, blank_texture(16) if texture is None else texture, normalize=False)
    return mesh


def cube_mesh():
    v, f, uv = unit_cube()
    mesh, _ = make_mesh(v, f, uv, blank_texture(), normalize=False)
    return mesh


def ico_mesh(level=2, tex=64):
    v, f, uv = icosphere(level)
    mesh, _ = make_mesh(v, f, uv, blank_texture(tex), normalize=True)
    return mesh


def torus_mesh(nu=16, nv=8):
    v, f, uv = torus(nu, nv)
    mesh, _ = make_mesh(v, f, uv, blank_texture(), normalize=True)
    return mesh
