"""Triangle rasterization and image sampling helpers.

Image coordinates are continuous: texel (row i, col j) has its center at
(x, y) = (j + 0.5, i + 0.5). UV (u, v) maps to (u * W, (1 - v) * H), so v = 0
is the bottom row, as in OBJ.
"""
from __future__ import annotations

import numba as nb
import numpy as np
from scipy import ndimage

_INSIDE_EPS = 1e-9


def uv_to_pixel(uv: np.ndarray, width: int, height: int) -> np.ndarray:
    out = np.empty_like(uv, dtype=np.float64)
    out[..., 0] = uv[..., 0] * width
    out[..., 1] = (1.0 - uv[..., 1]) * height
    return out


@nb.njit(cache=True)
def _raster(xy, depth, width, height, use_depth):
    n = xy.shape[0]
    face_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    zbuf = np.full((height, width), np.inf)
    for f in range(n):
        x0, y0 = xy[f, 0, 0], xy[f, 0, 1]
        x1, y1 = xy[f, 1, 0], xy[f, 1, 1]
        x2, y2 = xy[f, 2, 0], xy[f, 2, 1]
        det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if det == 0.0:
            continue
        xmin = min(x0, min(x1, x2))
        xmax = max(x0, max(x1, x2))
        ymin = min(y0, min(y1, y2))
        ymax = max(y0, max(y1, y2))
        j0 = max(int(np.floor(xmin - 0.5)), 0)
        j1 = min(int(np.ceil(xmax - 0.5)), width - 1)
        i0 = max(int(np.floor(ymin - 0.5)), 0)
        i1 = min(int(np.ceil(ymax - 0.5)), height - 1)
        inv = 1.0 / det
        for i in range(i0, i1 + 1):
            py = i + 0.5
            for j in range(j0, j1 + 1):
                px = j + 0.5
                b1 = ((px - x0) * (y2 - y0) - (x2 - x0) * (py - y0)) * inv
                b2 = ((x1 - x0) * (py - y0) - (px - x0) * (y1 - y0)) * inv
                b0 = 1.0 - b1 - b2
                if b0 < -_INSIDE_EPS or b1 < -_INSIDE_EPS or b2 < -_INSIDE_EPS:
                    continue
                if use_depth:
                    z = b0 * depth[f, 0] + b1 * depth[f, 1] + b2 * depth[f, 2]
                    if z >= zbuf[i, j]:
                        continue
                    zbuf[i, j] = z
                elif face_id[i, j] >= 0:
                    continue
                face_id[i, j] = f
                bary[i, j, 0] = b0
                bary[i, j, 1] = b1
                bary[i, j, 2] = b2
    return face_id, bary


def rasterize(xy: np.ndarray, width: int, height: int):
    """Cover texel centers with 2D triangles; the first face in order wins.

    Returns (face_id (H, W) with -1 for empty, barycentric weights (H, W, 3)).
    """
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    dummy = np.zeros((len(xy), 3))
    return _raster(xy, dummy, int(width), int(height), False)


def rasterize_depth(xy: np.ndarray, depth: np.ndarray, width: int, height: int):
    """Z-buffered rasterization; smaller depth is closer."""
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    return _raster(xy, depth, int(width), int(height), True)


def bilinear_taps(x: np.ndarray, y: np.ndarray, width: int, height: int):
    """Flat indices (..., 4) and weights (..., 4) of clamped bilinear sampling at continuous coords."""
    sx = np.clip(np.asarray(x, dtype=np.float64) - 0.5, 0.0, width - 1)
    sy = np.clip(np.asarray(y, dtype=np.float64) - 0.5, 0.0, height - 1)
    jx = np.minimum(np.floor(sx).astype(np.int64), max(width - 2, 0))
    iy = np.minimum(np.floor(sy).astype(np.int64), max(height - 2, 0))
    fx = sx - jx
    fy = sy - iy
    jx1 = np.minimum(jx + 1, width - 1)
    iy1 = np.minimum(iy + 1, height - 1)
    idx = np.stack([iy * width + jx, iy * width + jx1, iy1 * width + jx, iy1 * width + jx1], axis=-1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    return idx, wts


def sample_bilinear(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an (H, W, C) float image at continuous coords."""
    h, w = image.shape[:2]
    idx, wts = bilinear_taps(x, y, w, h)
    flat = image.reshape(h * w, -1)
    return np.einsum("...k,...kc->...c", wts, flat[idx])


def dilate(image: np.ndarray, mask: np.ndarray, width: int | None = None) -> np.ndarray:
    """Fill unmasked texels from the nearest masked texel.

    ``width`` limits the fill to a ring of that many texels; ``None`` fills everything.
    """
    if mask.all() or not mask.any():
        return image.copy()
    dist, (ii, jj) = ndimage.distance_transform_edt(~mask, return_indices=True)
    out = image[ii, jj]
    if width is not None:
        keep = mask | (dist <= width)
        out = np.where(keep[..., None], out, image)
    else:
        out = out.copy()
    out[mask] = image[mask]
    return out
