"""Greedy dual-graph edge contraction into flat, compact, fold-free face clusters.

Every face starts as its own cluster. The live dual edge with the smallest
merge cost

    cost = w_fit * E_fit + w_dir * E_dir + w_shape * E_shape + w_count * E_count

is contracted until ``n_target`` clusters remain or every remaining edge is
rejected by the fold-over test (infinite cost). Ties go to the smaller
(cluster, cluster) index pair, and a cluster's index is its smallest face id.
"""
from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np
from numba import types
from numba.typed import Dict, List

from .mesh import DualGraph, TriangleMesh, build_dual_graph, face_attributes

log = logging.getLogger(__name__)

INF = math.inf
_DEGENERATE_RTOL = 1e-9


@dataclass(frozen=True)
class CostWeights:
    w_fit: float = 1.0
    w_dir: float = 1.0
    w_shape: float = 0.5
    w_count: float = 0.25
    # "change": count term is E_count(a+b) - E_count(a) - E_count(b), like the fit term.
    # "union": count term is E_count(a+b) alone.
    count_mode: str = "change"

    def __post_init__(self):
        w = self.as_array()
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError(f"weights must be >= 0 with at least one > 0, got {tuple(w)}")
        if self.count_mode not in ("change", "union"):
            raise ValueError(f"count_mode must be 'change' or 'union', got {self.count_mode!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.w_fit, self.w_dir, self.w_shape, self.w_count], dtype=np.float64)


# ---------------------------------------------------------------------------
# shared numeric kernels (callable from Python and from the contraction loop)


@nb.njit(cache=True)
def _jacobi3(a, v):
    """In-place cyclic Jacobi on a symmetric 3x3 ``a``; eigenvectors accumulate into ``v`` (columns)."""
    for i in range(3):
        for j in range(3):
            v[i, j] = 1.0 if i == j else 0.0
    for _ in range(64):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        diag = a[0, 0] ** 2 + a[1, 1] ** 2 + a[2, 2] ** 2
        if off == 0.0 or off <= 1e-36 * diag:
            break
        for r in range(3):
            p = 0 if r < 2 else 1
            q = 1 if r == 0 else 2
            apq = a[p, q]
            if apq == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
            if theta < 0:
                t = -t
            c = 1.0 / math.sqrt(t * t + 1.0)
            sn = t * c
            for k in range(3):
                akp = a[k, p]
                akq = a[k, q]
                a[k, p] = c * akp - sn * akq
                a[k, q] = sn * akp + c * akq
            for k in range(3):
                apk = a[p, k]
                aqk = a[q, k]
                a[p, k] = c * apk - sn * aqk
                a[q, k] = sn * apk + c * aqk
            for k in range(3):
                vkp = v[k, p]
                vkq = v[k, q]
                v[k, p] = c * vkp - sn * vkq
                v[k, q] = sn * vkp + c * vkq


@nb.njit(cache=True)
def _order3(a):
    """Indices of the diagonal of ``a`` in ascending order."""
    i0, i1, i2 = 0, 1, 2
    if a[i1, i1] < a[i0, i0]:
        i0, i1 = i1, i0
    if a[i2, i2] < a[i1, i1]:
        i1, i2 = i2, i1
    if a[i1, i1] < a[i0, i0]:
        i0, i1 = i1, i0
    return i0, i1, i2


@nb.njit(cache=True)
def _eigh3(s):
    """Symmetric 3x3 eigen-decomposition. Returns ascending eigenvalues and column eigenvectors."""
    a = s.copy()
    v = np.empty((3, 3))
    _jacobi3(a, v)
    i0, i1, i2 = _order3(a)
    w = np.array([a[i0, i0], a[i1, i1], a[i2, i2]])
    vs = np.empty((3, 3))
    for k in range(3):
        vs[k, 0] = v[k, i0]
        vs[k, 1] = v[k, i1]
        vs[k, 2] = v[k, i2]
    return w, vs


@nb.njit(cache=True)
def _fill_scatter(s, area, x, xy, xz, yy, yz, zz, mx, my, mz):
    """Area-weighted centroid scatter from raw moments, written into ``s``."""
    s[0, 0] = xx_ = x - mx * mx / area
    s[0, 1] = s[1, 0] = xy - mx * my / area
    s[0, 2] = s[2, 0] = xz - mx * mz / area
    s[1, 1] = yy - my * my / area
    s[1, 2] = s[2, 1] = yz - my * mz / area
    s[2, 2] = zz - mz * mz / area
    return xx_


@nb.njit(cache=True)
def _scatter(area, m1, m2):
    """Area-weighted centroid scatter from raw moments (m2 packed xx, xy, xz, yy, yz, zz)."""
    s = np.empty((3, 3))
    _fill_scatter(s, area, m2[0], m2[1], m2[2], m2[3], m2[4], m2[5], m1[0], m1[1], m1[2])
    return s


@nb.njit(cache=True)
def _plane_normal_into(out, w0, w1, w2, v, i0, i1, i2, mx, my, mz):
    """Smallest-variance direction oriented along the mean normal (mx, my, mz).

    When the smallest eigenvalue is degenerate (one or two faces, collinear
    centroids) the normal is the mean normal projected into that eigenspace.
    """
    scale = max(abs(w2), 1e-300)
    tol = _DEGENERATE_RTOL * scale + 1e-30
    k = 1
    if w1 - w0 <= tol:
        k = 2
        if w2 - w0 <= tol:
            k = 3
    if k == 1:
        out[0] = v[0, i0]
        out[1] = v[1, i0]
        out[2] = v[2, i0]
    else:
        out[0] = out[1] = out[2] = 0.0
        for j in range(k):
            c = i0 if j == 0 else (i1 if j == 1 else i2)
            d = v[0, c] * mx + v[1, c] * my + v[2, c] * mz
            out[0] += d * v[0, c]
            out[1] += d * v[1, c]
            out[2] += d * v[2, c]
        nn = math.sqrt(out[0] ** 2 + out[1] ** 2 + out[2] ** 2)
        if nn < 1e-12:
            out[0] = v[0, i0]
            out[1] = v[1, i0]
            out[2] = v[2, i0]
        else:
            out[0] /= nn
            out[1] /= nn
            out[2] /= nn
    if out[0] * mx + out[1] * my + out[2] * mz < 0:
        out[0] = -out[0]
        out[1] = -out[1]
        out[2] = -out[2]


@nb.njit(cache=True)
def _plane_normal(w, v, mean_normal):
    out = np.empty(3)
    _plane_normal_into(out, w[0], w[1], w[2], v, 0, 1, 2, mean_normal[0], mean_normal[1], mean_normal[2])
    return out


# ---------------------------------------------------------------------------
# Python-level clusters (from-scratch statistics)


class PartitionContext:
    """Per-mesh face data shared by all clusters of one partition."""

    def __init__(self, mesh: TriangleMesh, graph: DualGraph | None = None):
        self.mesh = mesh
        self.graph = graph if graph is not None else build_dual_graph(mesh)
        fa = face_attributes(mesh)
        self.centroid = fa.centroid
        self.normal = fa.normal
        self.area = fa.area
        self.perimeter = self.graph.perimeter
        self.indptr, self.nbr, eid = self.graph.neighbors_csr()
        self.nbr_len = self.graph.edge_length[eid]

    def cluster(self, face_ids) -> "Cluster":
        ids = np.unique(np.asarray(list(face_ids) if isinstance(face_ids, (set, frozenset)) else face_ids, dtype=np.int64))
        if len(ids) == 0:
            raise ValueError("cluster must be non-empty")
        a = self.area[ids]
        c = self.centroid[ids]
        area = float(a.sum())
        m1 = (a[:, None] * c).sum(axis=0)
        outer = a[:, None, None] * c[:, :, None] * c[:, None, :]
        m2full = outer.sum(axis=0)
        m2 = m2full[[0, 0, 0, 1, 1, 2], [0, 1, 2, 1, 2, 2]]
        ns = (a[:, None] * self.normal[ids]).sum(axis=0)
        inside = np.zeros(len(self.area), dtype=bool)
        inside[ids] = True
        internal = 0.0
        for f in ids:
            lo, hi = self.indptr[f], self.indptr[f + 1]
            internal += self.nbr_len[lo:hi][inside[self.nbr[lo:hi]]].sum()
        # each internal edge is visited from both sides
        boundary = float(self.perimeter[ids].sum() - internal)
        return Cluster.from_stats(self, ids, area, m1, m2, ns, boundary)

    def shared_length(self, a: "Cluster", b: "Cluster") -> float:
        inside_b = np.zeros(len(self.area), dtype=bool)
        inside_b[b.face_ids] = True
        total = 0.0
        for f in a.face_ids:
            lo, hi = self.indptr[f], self.indptr[f + 1]
            total += self.nbr_len[lo:hi][inside_b[self.nbr[lo:hi]]].sum()
        return float(total)

    def adjacent(self, a: "Cluster", b: "Cluster") -> bool:
        inside_b = np.zeros(len(self.area), dtype=bool)
        inside_b[b.face_ids] = True
        return any(inside_b[self.nbr[self.indptr[f] : self.indptr[f + 1]]].any() for f in a.face_ids)


@dataclass(eq=False)
class Cluster:
    face_ids: np.ndarray
    plane_normal: np.ndarray
    plane_offset: float
    fit_error: float
    mean_normal: np.ndarray
    boundary_len: float
    area: float
    count: int
    moments: tuple = field(repr=False)  # (area, m1, m2, normal sum)
    ctx: PartitionContext = field(repr=False)

    @property
    def plane(self):
        return self.plane_normal, self.plane_offset

    @property
    def centroid(self) -> np.ndarray:
        return self.moments[1] / self.moments[0]

    @classmethod
    def from_stats(cls, ctx, ids, area, m1, m2, ns, boundary):
        w, v = _eigh3(_scatter(area, m1, m2))
        nsn = np.linalg.norm(ns)
        mean_normal = ns / nsn if nsn > 0 else np.array([0.0, 0.0, 1.0])
        pn = _plane_normal(w, v, mean_normal)
        centroid = m1 / area
        fit = float(w[0]) if len(ids) > 1 else 0.0
        return cls(
            face_ids=ids,
            plane_normal=pn,
            plane_offset=float(pn @ centroid),
            fit_error=fit,
            mean_normal=mean_normal,
            boundary_len=boundary,
            area=area,
            count=len(ids),
            moments=(area, m1, m2, ns),
            ctx=ctx,
        )

    def union(self, other: "Cluster") -> "Cluster":
        if np.intersect1d(self.face_ids, other.face_ids).size:
            raise ValueError("clusters overlap")
        a0, a1, a2, a3 = self.moments
        b0, b1, b2, b3 = other.moments
        boundary = self.boundary_len + other.boundary_len - 2.0 * self.ctx.shared_length(self, other)
        ids = np.union1d(self.face_ids, other.face_ids)
        return Cluster.from_stats(self.ctx, ids, a0 + b0, a1 + b1, a2 + b2, a3 + b3, boundary)


def fit_error(cluster: Cluster) -> float:
    return cluster.fit_error


def e_fit(a: Cluster, b: Cluster) -> float:
    """Increase in plane-fit residual caused by merging."""
    return a.union(b).fit_error - a.fit_error - b.fit_error


def e_dir(a: Cluster, b: Cluster) -> float:
    """Area-weighted mean angle (radians) between face normals and the merged mean normal."""
    u = a.union(b)
    ctx = a.ctx
    n = ctx.normal[u.face_ids]
    m = u.mean_normal
    ang = np.arctan2(np.linalg.norm(np.cross(n, m), axis=1), n @ m)
    return float((ctx.area[u.face_ids] * ang).sum() / u.area)


def e_shape(a: Cluster, b: Cluster) -> float:
    """Isoperimetric deficit L^2 / (4 pi A) - 1 of the merged cluster, clamped at 0."""
    u = a.union(b)
    return max(u.boundary_len ** 2 / (4.0 * math.pi * u.area) - 1.0, 0.0)


def e_count(a: Cluster, b: Cluster, n_cap: int) -> float:
    if n_cap < 1:
        raise ValueError("n_cap must be >= 1")
    return abs(n_cap - (a.count + b.count)) / n_cap


def e_count_change(a: Cluster, b: Cluster, n_cap: int) -> float:
    """Change of the summed per-cluster count penalty caused by merging."""
    return e_count(a, b, n_cap) - (abs(n_cap - a.count) + abs(n_cap - b.count)) / n_cap


def folds_over(cluster: Cluster) -> bool:
    n = cluster.ctx.normal[cluster.face_ids]
    return bool(np.any(n @ cluster.plane_normal <= 0.0))


def merge_cost(a: Cluster, b: Cluster, w: CostWeights, n_cap: int) -> float:
    u = a.union(b)
    if folds_over(u):
        return INF
    wa = w.as_array()
    count = e_count_change(a, b, n_cap) if w.count_mode == "change" else e_count(a, b, n_cap)
    terms = np.array([e_fit(a, b), e_dir(a, b), e_shape(a, b), count])
    return float(wa @ terms)


# ---------------------------------------------------------------------------
# contraction loop


@nb.njit(cache=True)
def _union_cost(a, b, shared, area, m1, m2, nsum, cnt, blen, fit, head, nxt,
                fdata, weights, n_cap, count_change, sbuf, vbuf, pn):
    """Merge cost of clusters a and b from their incremental statistics.

    Returns (cost, fit error of the union). ``fdata`` rows are (nx, ny, nz, area).
    """
    ua = area[a] + area[b]
    ux = nsum[a, 0] + nsum[b, 0]
    uy = nsum[a, 1] + nsum[b, 1]
    uz = nsum[a, 2] + nsum[b, 2]
    nn = math.sqrt(ux * ux + uy * uy + uz * uz)
    if nn < 1e-300:
        return math.inf, 0.0
    mx, my, mz = ux / nn, uy / nn, uz / nn
    _fill_scatter(sbuf, ua, m2[a, 0] + m2[b, 0], m2[a, 1] + m2[b, 1], m2[a, 2] + m2[b, 2],
                  m2[a, 3] + m2[b, 3], m2[a, 4] + m2[b, 4], m2[a, 5] + m2[b, 5],
                  m1[a, 0] + m1[b, 0], m1[a, 1] + m1[b, 1], m1[a, 2] + m1[b, 2])
    _jacobi3(sbuf, vbuf)
    i0, i1, i2 = _order3(sbuf)
    w0 = sbuf[i0, i0]
    _plane_normal_into(pn, w0, sbuf[i1, i1], sbuf[i2, i2], vbuf, i0, i1, i2, mx, my, mz)
    px, py, pz = pn[0], pn[1], pn[2]
    ang = 0.0
    for start in (a, b):
        f = head[start]
        while f >= 0:
            nx = fdata[f, 0]
            ny = fdata[f, 1]
            nz = fdata[f, 2]
            if nx * px + ny * py + nz * pz <= 0.0:
                return math.inf, 0.0
            cx = ny * mz - nz * my
            cy = nz * mx - nx * mz
            cz = nx * my - ny * mx
            ang += fdata[f, 3] * math.atan2(math.sqrt(cx * cx + cy * cy + cz * cz), nx * mx + ny * my + nz * mz)
            f = nxt[f]
    e_fit_ = w0 - fit[a] - fit[b]
    e_dir_ = ang / ua
    ub = blen[a] + blen[b] - 2.0 * shared
    e_shape_ = max(ub * ub / (4.0 * math.pi * ua) - 1.0, 0.0)
    e_count_ = abs(n_cap - (cnt[a] + cnt[b])) / n_cap
    if count_change:
        e_count_ -= (abs(n_cap - cnt[a]) + abs(n_cap - cnt[b])) / n_cap
    cost = weights[0] * e_fit_ + weights[1] * e_dir_ + weights[2] * e_shape_ + weights[3] * e_count_
    return cost, w0


@nb.njit(cache=True)
def _contract(f_centroid, f_normal, f_area, f_perim, edges, elen, n_target, n_cap, weights, count_change, record):
    nf = f_area.shape[0]
    area = f_area.copy()
    m1 = f_centroid * f_area[:, None]
    m2 = np.empty((nf, 6))
    for f in range(nf):
        c = f_centroid[f]
        a = f_area[f]
        m2[f, 0] = a * c[0] * c[0]
        m2[f, 1] = a * c[0] * c[1]
        m2[f, 2] = a * c[0] * c[2]
        m2[f, 3] = a * c[1] * c[1]
        m2[f, 4] = a * c[1] * c[2]
        m2[f, 5] = a * c[2] * c[2]
    nsum = f_normal * f_area[:, None]
    fdata = np.empty((nf, 4))
    fdata[:, :3] = f_normal
    fdata[:, 3] = f_area
    sbuf = np.empty((3, 3))
    vbuf = np.empty((3, 3))
    pn = np.empty(3)
    cnt = np.ones(nf, dtype=np.int64)
    blen = f_perim.copy()
    fit = np.zeros(nf)
    head = np.arange(nf)
    tail = np.arange(nf)
    nxt = np.full(nf, -1, dtype=np.int64)
    alive = np.ones(nf, dtype=np.bool_)
    version = np.zeros(nf, dtype=np.int64)

    adj = List()
    for f in range(nf):
        adj.append(Dict.empty(key_type=types.int64, value_type=types.float64))
    for e in range(edges.shape[0]):
        u = edges[e, 0]
        v = edges[e, 1]
        adj[u][v] = adj[u].get(v, 0.0) + elen[e]
        adj[v][u] = adj[v].get(u, 0.0) + elen[e]

    heap = [(0.0, np.int64(0), np.int64(0), np.int64(0), np.int64(0))]
    heap.pop()
    for e in range(edges.shape[0]):
        u = edges[e, 0]
        v = edges[e, 1]
        if u == v:
            continue
        cost, _ = _union_cost(u, v, adj[u][v], area, m1, m2, nsum, cnt, blen, fit, head, nxt,
                              fdata, weights, n_cap, count_change, sbuf, vbuf, pn)
        if cost < math.inf:
            heap.append((cost, min(u, v), max(u, v), np.int64(0), np.int64(0)))
    heapq.heapify(heap)

    merges_lo = np.empty(nf, dtype=np.int64)
    merges_hi = np.empty(nf, dtype=np.int64)
    merges_cost = np.empty(nf)
    n_merges = 0
    n_clusters = nf
    while n_clusters > n_target and len(heap) > 0:
        cost, lo, hi, vlo, vhi = heapq.heappop(heap)
        if not alive[lo] or not alive[hi] or version[lo] != vlo or version[hi] != vhi:
            continue
        shared = adj[lo][hi]
        _, new_fit = _union_cost(lo, hi, shared, area, m1, m2, nsum, cnt, blen, fit, head, nxt,
                                 fdata, weights, n_cap, count_change, sbuf, vbuf, pn)
        s = lo  # survivor keeps the smaller index
        d = hi
        area[s] += area[d]
        m1[s] += m1[d]
        m2[s] += m2[d]
        nsum[s] += nsum[d]
        cnt[s] += cnt[d]
        blen[s] = blen[s] + blen[d] - 2.0 * shared
        fit[s] = new_fit
        nxt[tail[s]] = head[d]
        tail[s] = tail[d]
        alive[d] = False
        version[s] += 1

        da = adj[d]
        sa = adj[s]
        da.pop(s)
        sa.pop(d)
        for nb_, ln in da.items():
            other = adj[nb_]
            other.pop(d)
            other[s] = other.get(s, 0.0) + ln
        if len(da) > len(sa):
            for nb_, ln in sa.items():
                da[nb_] = da.get(nb_, 0.0) + ln
            adj[s] = da
        else:
            for nb_, ln in da.items():
                sa[nb_] = sa.get(nb_, 0.0) + ln
        adj[d] = Dict.empty(key_type=types.int64, value_type=types.float64)

        if record:
            merges_lo[n_merges] = lo
            merges_hi[n_merges] = hi
            merges_cost[n_merges] = cost
        n_merges += 1
        n_clusters -= 1

        for nb_, ln in adj[s].items():
            c, _ = _union_cost(s, nb_, ln, area, m1, m2, nsum, cnt, blen, fit, head, nxt,
                               fdata, weights, n_cap, count_change, sbuf, vbuf, pn)
            if c < math.inf:
                a_ = min(s, nb_)
                b_ = max(s, nb_)
                heapq.heappush(heap, (c, a_, b_, version[a_], version[b_]))

    label = np.empty(nf, dtype=np.int64)
    for r in range(nf):
        if alive[r]:
            f = head[r]
            while f >= 0:
                label[f] = r
                f = nxt[f]
    return label, merges_lo[:n_merges], merges_hi[:n_merges], merges_cost[:n_merges], blen, fit


@dataclass(eq=False)
class PatchClustering:
    clusters: list
    face_to_cluster: np.ndarray
    n_target: int
    n_cap: int
    weights: CostWeights
    warning: str | None = None
    merges: np.ndarray | None = field(default=None, repr=False)  # (K, 3) lo, hi, cost when recorded

    def __len__(self):
        return len(self.clusters)

    def to_dict(self) -> dict:
        w = self.weights
        return {
            "format": "texlet.clustering",
            "version": 1,
            "n_target": self.n_target,
            "n_cap": self.n_cap,
            "n_faces": int(len(self.face_to_cluster)),
            "weights": {"w_fit": w.w_fit, "w_dir": w.w_dir, "w_shape": w.w_shape, "w_count": w.w_count,
                        "count_mode": w.count_mode},
            "warning": self.warning,
            "clusters": [
                {
                    "index": i,
                    "faces": c.face_ids.tolist(),
                    "plane_normal": c.plane_normal.tolist(),
                    "plane_offset": c.plane_offset,
                    "fit_error": c.fit_error,
                    "mean_normal": c.mean_normal.tolist(),
                    "boundary_len": c.boundary_len,
                    "area": c.area,
                    "count": c.count,
                }
                for i, c in enumerate(self.clusters)
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path, mesh: TriangleMesh, graph: DualGraph | None = None) -> "PatchClustering":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format") != "texlet.clustering":
            raise ValueError(f"{path}: not a clustering document")
        if doc["n_faces"] != mesh.n_faces:
            raise ValueError(f"{path}: clustering has {doc['n_faces']} faces, mesh has {mesh.n_faces}")
        labels = np.empty(mesh.n_faces, dtype=np.int64)
        for i, c in enumerate(doc["clusters"]):
            labels[np.asarray(c["faces"], dtype=np.int64)] = i
        ctx = PartitionContext(mesh, graph)
        clustering = clustering_from_labels(ctx, labels, doc["n_target"], CostWeights(**doc["weights"]))
        clustering.warning = doc.get("warning")
        return clustering


def clustering_from_labels(ctx: PartitionContext, labels, n_target: int, w: CostWeights) -> PatchClustering:
    """Build clusters (from-scratch statistics) for a face labelling; labels renumbered by smallest face id."""
    labels = np.asarray(labels, dtype=np.int64)
    nf = len(labels)
    first = np.full(labels.max() + 1, nf, dtype=np.int64)
    np.minimum.at(first, labels, np.arange(nf))
    used = np.flatnonzero(first < nf)
    used = used[np.argsort(first[used])]
    remap = np.full(labels.max() + 1, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    lab = remap[labels]
    k = len(used)

    a = ctx.area
    c = ctx.centroid
    area = np.bincount(lab, weights=a, minlength=k)
    m1 = np.stack([np.bincount(lab, weights=a * c[:, i], minlength=k) for i in range(3)], axis=1)
    pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
    m2 = np.stack([np.bincount(lab, weights=a * c[:, i] * c[:, j], minlength=k) for i, j in pairs], axis=1)
    ns = np.stack([np.bincount(lab, weights=a * ctx.normal[:, i], minlength=k) for i in range(3)], axis=1)
    e = ctx.graph.edges
    internal = lab[e[:, 0]] == lab[e[:, 1]]
    boundary = np.bincount(lab, weights=ctx.perimeter, minlength=k)
    boundary -= 2.0 * np.bincount(lab[e[internal, 0]], weights=ctx.graph.edge_length[internal], minlength=k)
    order = np.argsort(lab, kind="stable")
    splits = np.cumsum(np.bincount(lab, minlength=k))[:-1]
    members = np.split(order, splits)
    clusters = [
        Cluster.from_stats(ctx, np.sort(members[i]), float(area[i]), m1[i], m2[i], ns[i], float(boundary[i]))
        for i in range(k)
    ]
    n_cap = math.ceil(nf / n_target)
    return PatchClustering(clusters, lab, n_target, n_cap, w)


def partition_mesh(mesh: TriangleMesh, graph: DualGraph | None, n_target: int,
                   w: CostWeights | None = None, record: bool = False) -> PatchClustering:
    w = w or CostWeights()
    if not 1 <= n_target <= mesh.n_faces:
        raise ValueError(f"n_target must be in [1, {mesh.n_faces}], got {n_target}")
    ctx = PartitionContext(mesh, graph)
    n_cap = math.ceil(mesh.n_faces / n_target)
    label, lo, hi, cost, _, _ = _contract(
        np.ascontiguousarray(ctx.centroid),
        np.ascontiguousarray(ctx.normal),
        np.ascontiguousarray(ctx.area),
        np.ascontiguousarray(ctx.perimeter),
        np.ascontiguousarray(ctx.graph.edges),
        np.ascontiguousarray(ctx.graph.edge_length),
        n_target,
        n_cap,
        w.as_array(),
        w.count_mode == "change",
        record,
    )
    clustering = clustering_from_labels(ctx, label, n_target, w)
    if record:
        clustering.merges = np.stack([lo.astype(np.float64), hi.astype(np.float64), cost], axis=1)
    if len(clustering) > n_target:
        clustering.warning = (
            f"only reached {len(clustering)} clusters for n_target={n_target}: remaining merges rejected"
        )
        log.warning(clustering.warning)
    return clustering


def is_connected(ctx: PartitionContext, face_ids) -> bool:
    """Flood fill over the dual graph restricted to ``face_ids``."""
    ids = np.asarray(face_ids)
    inside = np.zeros(len(ctx.area), dtype=bool)
    inside[ids] = True
    seen = {int(ids[0])}
    stack = [int(ids[0])]
    while stack:
        f = stack.pop()
        for g in ctx.nbr[ctx.indptr[f] : ctx.indptr[f + 1]]:
            g = int(g)
            if inside[g] and g not in seen:
                seen.add(g)
                stack.append(g)
    return len(seen) == len(ids)


__all__ = [
    "CostWeights",
    "Cluster",
    "PartitionContext",
    "PatchClustering",
    "clustering_from_labels",
    "e_count",
    "e_count_change",
    "e_dir",
    "e_fit",
    "e_shape",
    "fit_error",
    "folds_over",
    "is_connected",
    "merge_cost",
    "partition_mesh",
]
