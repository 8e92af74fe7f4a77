"""Red-green midpoint refinement until every edge is below a length threshold."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .mesh import TriangleMesh, face_attributes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefineConfig:
    max_edge_len: float  # fraction of the bounding-box diagonal
    max_rounds: int = 16

    def __post_init__(self):
        if not (0 < self.max_edge_len <= 1):
            raise ValueError(f"max_edge_len must be in (0, 1], got {self.max_edge_len}")
        if not (1 <= self.max_rounds <= 64):
            raise ValueError(f"max_rounds must be in [1, 64], got {self.max_rounds}")


@dataclass
class RefineResult:
    mesh: TriangleMesh
    rounds: int
    splits: int
    converged: bool


def default_max_edge(mesh: TriangleMesh, n_target: int, faces_per_patch: int = 8) -> float:
    """Edge length giving roughly ``faces_per_patch * n_target`` near-equilateral faces."""
    area = float(face_attributes(mesh).area.sum())
    diag = _diagonal(mesh)
    edge = math.sqrt(area / (faces_per_patch * n_target * math.sqrt(3) / 4))
    return min(1.0, edge / diag)


def _diagonal(mesh: TriangleMesh) -> float:
    v = mesh.vertices
    return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0))) or 1.0


def _split_round(vertices, faces, uvs, thr):
    """One refinement round. Returns new arrays and the number of faces split, or None if nothing to do."""
    nf = len(faces)
    keys = np.sort(np.stack([faces, np.roll(faces, -1, axis=1)], axis=2), axis=2).reshape(-1, 2)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(nf, 3)
    lengths = np.linalg.norm(vertices[uniq[:, 0]] - vertices[uniq[:, 1]], axis=1)
    marked = lengths > thr
    if not marked.any():
        return None
    # closure: a face with two marked edges is split red, which marks its third edge
    while True:
        per_face = marked[inv].sum(axis=1)
        promote = per_face == 2
        if not promote.any():
            break
        marked[inv[promote].reshape(-1)] = True

    mid_index = np.full(len(uniq), -1, dtype=np.int64)
    sel = np.flatnonzero(marked)
    mid_index[sel] = len(vertices) + np.arange(len(sel))
    new_vertices = np.concatenate([vertices, 0.5 * (vertices[uniq[sel, 0]] + vertices[uniq[sel, 1]])])

    fm = marked[inv]
    count = fm.sum(axis=1)
    mids = mid_index[inv]  # (F, 3), edge k is corner k -> k+1
    uv_mid = 0.5 * (uvs + np.roll(uvs, -1, axis=1))  # (F, 3, 2)

    out_f, out_uv = [], []
    keep = count == 0
    out_f.append(faces[keep])
    out_uv.append(uvs[keep])

    red = count == 3
    if red.any():
        a, b, c = faces[red, 0], faces[red, 1], faces[red, 2]
        m01, m12, m20 = mids[red, 0], mids[red, 1], mids[red, 2]
        ta, tb, tc = uvs[red, 0], uvs[red, 1], uvs[red, 2]
        u01, u12, u20 = uv_mid[red, 0], uv_mid[red, 1], uv_mid[red, 2]
        out_f.append(np.stack([np.stack(t, axis=1) for t in (
            (a, m01, m20), (m01, b, m12), (m20, m12, c), (m01, m12, m20))], axis=1).reshape(-1, 3))
        out_uv.append(np.stack([np.stack(t, axis=1) for t in (
            (ta, u01, u20), (u01, tb, u12), (u20, u12, tc), (u01, u12, u20))], axis=1).reshape(-1, 3, 2))

    green = count == 1
    if green.any():
        gi = np.flatnonzero(green)
        k = np.argmax(fm[gi], axis=1)
        i, j, l = k, (k + 1) % 3, (k + 2) % 3
        ci, cj, cl = faces[gi, i], faces[gi, j], faces[gi, l]
        m = mids[gi, k]
        ti, tj, tl = uvs[gi, i], uvs[gi, j], uvs[gi, l]
        tm = uv_mid[gi, k]
        out_f.append(np.stack([np.stack((ci, m, cl), axis=1), np.stack((m, cj, cl), axis=1)], axis=1).reshape(-1, 3))
        out_uv.append(np.stack([np.stack((ti, tm, tl), axis=1), np.stack((tm, tj, tl), axis=1)], axis=1).reshape(-1, 3, 2))

    return new_vertices, np.concatenate(out_f), np.concatenate(out_uv), int((~keep).sum())


def refine_mesh(mesh: TriangleMesh, cfg: RefineConfig) -> RefineResult:
    thr = cfg.max_edge_len * _diagonal(mesh)
    v, f, uv = mesh.vertices, mesh.faces, mesh.face_uvs
    splits = 0
    rounds = 0
    converged = False
    while True:
        step = _split_round(v, f, uv, thr)
        if step is None:
            converged = True
            break
        if rounds == cfg.max_rounds:
            log.warning("refinement stopped after %d rounds with edges above %.4g", rounds, thr)
            break
        v, f, uv, n = step
        splits += n
        rounds += 1
    if splits == 0:
        return RefineResult(mesh, 0, 0, converged)
    return RefineResult(TriangleMesh(v, f, uv, mesh.texture), rounds, splits, converged)
