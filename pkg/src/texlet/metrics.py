"""Orthographic unlit renders from quasi-uniform directions and masked PSNR / SSIM."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .mesh import TriangleMesh
from .raster import rasterize_depth, sample_bilinear, uv_to_pixel

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
LUMA = np.array([0.299, 0.587, 0.114])


class MetricError(ValueError):
    pass


def fibonacci_directions(count: int) -> np.ndarray:
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    rho = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(count)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


@dataclass(frozen=True)
class ViewSet:
    count: int = 150
    image_size: int = 256
    camera_dirs: np.ndarray = field(default=None, compare=False)

    def __post_init__(self):
        if self.count < 1 or self.image_size < 11:
            raise ValueError("need count >= 1 and image_size >= 11")
        if self.camera_dirs is None:
            object.__setattr__(self, "camera_dirs", fibonacci_directions(self.count))


def _camera_basis(direction: np.ndarray):
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    fwd = -d
    up = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.99 else np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    return d, right, np.cross(right, fwd)


@dataclass
class Fragments:
    face_id: np.ndarray  # (S, S), -1 = background
    uv: np.ndarray  # (S, S, 2)

    @property
    def mask(self) -> np.ndarray:
        return self.face_id >= 0


def rasterize_view(mesh: TriangleMesh, direction, size: int) -> Fragments:
    """Camera looks along -direction at the origin; the unit-diagonal bbox fills the frame."""
    d, right, up = _camera_basis(direction)
    corners = mesh.corners()
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]
    front = np.cross(e1, e2) @ d > 0
    keep = np.flatnonzero(front)
    c = corners[keep]
    xy = np.stack([(c @ right + 0.5) * size, (0.5 - c @ up) * size], axis=-1)
    fid, bary = rasterize_depth(xy, -(c @ d), size, size)
    hit = fid >= 0
    face = np.full(fid.shape, -1, dtype=np.int64)
    face[hit] = keep[fid[hit]]
    uv = np.zeros((size, size, 2))
    uv[hit] = np.einsum("nk,nkc->nc", bary[hit], mesh.face_uvs[face[hit]])
    return Fragments(face, uv)


def shade(frags: Fragments, texture: np.ndarray) -> np.ndarray:
    tex = texture.astype(np.float64) / 255.0 if texture.dtype == np.uint8 else np.asarray(texture, np.float64)
    h, w = tex.shape[:2]
    img = np.zeros(frags.uv.shape[:2] + (3,))
    m = frags.mask
    px = uv_to_pixel(frags.uv[m], w, h)
    img[m] = sample_bilinear(tex, px[:, 0], px[:, 1])
    return img


def render_view(mesh: TriangleMesh, texture: np.ndarray, direction, size: int):
    """-> (image (S, S, 3) float in [0, 1], coverage mask (S, S))"""
    frags = rasterize_view(mesh, direction, size)
    return shade(frags, texture), frags.mask


def _check(a, b, mask):
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    mask = np.ones(a.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MetricError("no covered pixels")
    return mask


def psnr(a: np.ndarray, b: np.ndarray, mask=None) -> float:
    """Masked PSNR with peak 1.0, capped at 99 dB."""
    mask = _check(a, b, mask)
    diff = np.asarray(a, np.float64)[mask] - np.asarray(b, np.float64)[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 20.0 * np.log10(1.0 / np.sqrt(mse))))


def luma(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, np.float64)
    return image if image.ndim == 2 else image @ LUMA


def _gauss(x):
    return ndimage.gaussian_filter(x, SSIM_SIGMA, mode="reflect", truncate=SSIM_RADIUS / SSIM_SIGMA)


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    x, y = luma(a), luma(b)
    if min(x.shape) < 2 * SSIM_RADIUS + 1:
        raise MetricError(f"images must be at least 11x11, got {x.shape}")
    mx, my = _gauss(x), _gauss(y)
    sxx = _gauss(x * x) - mx * mx
    syy = _gauss(y * y) - my * my
    sxy = _gauss(x * y) - mx * my
    num = (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, mask=None) -> float:
    mask = _check(a, b, mask)
    return float(np.mean(ssim_map(a, b)[mask]))


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    per_view: list  # (view index, psnr, ssim)
    skipped_views: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            "format = texlet.metrics",
            f"psnr_db = {self.psnr_db!r}",
            f"ssim = {self.ssim!r}",
            f"views = {len(self.per_view)}",
            f"skipped_views = {' '.join(map(str, self.skipped_views)) or '-'}",
        ]
        lines += [f"view {i} {p!r} {s!r}" for i, p, s in self.per_view]
        return "\n".join(lines) + "\n"


def evaluate(mesh: TriangleMesh, texture_a: np.ndarray, texture_b: np.ndarray, views: ViewSet, dump=None) -> MetricReport:
    """Render both textures from every view and average masked metrics over views with coverage.

    ``dump(index, image_a, image_b, mask)`` is called per view when given.
    """
    per_view, skipped = [], []
    for k, d in enumerate(views.camera_dirs):
        frags = rasterize_view(mesh, d, views.image_size)
        if not frags.mask.any():
            skipped.append(k)
            continue
        ia, ib = shade(frags, texture_a), shade(frags, texture_b)
        if dump is not None:
            dump(k, ia, ib, frags.mask)
        per_view.append((k, psnr(ia, ib, frags.mask), ssim(ia, ib, frags.mask)))
    if not per_view:
        raise MetricError("no covered pixels")
    return MetricReport(
        psnr_db=float(np.mean([p for _, p, _ in per_view])),
        ssim=float(np.mean([s for _, _, s in per_view])),
        per_view=per_view,
        skipped_views=skipped,
    )
