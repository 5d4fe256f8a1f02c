"""Embedded deformation graph for non-rigid map correction.

Nodes are sampled from stable surfels in initialisation-time order. Each
node carries an affine map ``(A, b)`` about its position ``g``; a point is
deformed by the weighted blend of its influence nodes,
``p' = sum_n w_n (A_n (p - g_n) + g_n + b_n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .config import LoopConfig
from .geometry import RigidTransform, polar_rotation

SINGULAR_DET = 1e-6


@dataclass(frozen=True)
class DeformationNode:
    g: np.ndarray
    A: np.ndarray
    b: np.ndarray
    timestamp: int
    neighbors: tuple


@dataclass(frozen=True)
class SurfaceConstraint:
    source: np.ndarray
    destination: np.ndarray
    timestamp: int

    def __post_init__(self):
        if not (np.all(np.isfinite(self.source)) and np.all(np.isfinite(self.destination))):
            raise ValueError("constraint coordinates must be finite")


@dataclass
class DeformationGraph:
    g: np.ndarray  # (K, 3)
    times: np.ndarray  # (K,), ascending
    neighbors: list  # list of int arrays, symmetric
    A: np.ndarray = None  # (K, 3, 3)
    b: np.ndarray = None  # (K, 3)
    config: LoopConfig = field(default_factory=LoopConfig)

    def __post_init__(self):
        if self.A is None:
            self.reset()

    def __len__(self) -> int:
        return len(self.g)

    def reset(self) -> None:
        self.A = np.tile(np.eye(3), (len(self.g), 1, 1))
        self.b = np.zeros((len(self.g), 3))

    @property
    def nodes(self) -> list:
        return [DeformationNode(self.g[i], self.A[i], self.b[i], int(self.times[i]), tuple(self.neighbors[i]))
                for i in range(len(self))]

    def edges(self) -> np.ndarray:
        """Directed edges (n, m), both directions present."""
        out = [(n, m) for n, nb in enumerate(self.neighbors) for m in nb]
        return np.array(out, dtype=np.int64).reshape(-1, 2)

    def is_identity(self) -> bool:
        return bool(np.all(self.A == np.eye(3)) and np.all(self.b == 0))


def sample_deformation_graph(m, rate: int, config: LoopConfig | None = None) -> DeformationGraph:
    """Every ``rate``-th stable surfel in ascending init_time order becomes a node."""
    cfg = config or LoopConfig()
    ids = np.flatnonzero(m.stable_mask())
    empty = DeformationGraph(np.zeros((0, 3)), np.zeros(0, np.int64), [], config=cfg)
    if len(ids) < cfg.k_conn + 1:
        return empty
    order = ids[np.argsort(m.init_times[ids], kind="stable")]
    picked = order[::rate]
    if len(picked) < 2:
        return empty
    half = max(1, cfg.k_conn // 2)
    k = len(picked)
    neighbors = [np.array([j for j in range(max(0, i - half), min(k, i + half + 1)) if j != i], dtype=np.int64)
                 for i in range(k)]
    return DeformationGraph(m.positions[picked].copy(), m.init_times[picked].copy(), neighbors, config=cfg)


@dataclass(frozen=True)
class Influence:
    nodes: np.ndarray  # (P, k) node ids, -1 padding
    weights: np.ndarray  # (P, k), rows sum to 1 over valid entries


def _weights_from_distances(dist: np.ndarray, d_max: np.ndarray) -> np.ndarray:
    w = np.clip(1.0 - dist / d_max[:, None], 0.0, None) ** 2
    total = w.sum(axis=1, keepdims=True)
    uniform = np.isfinite(dist).astype(float)
    w = np.where(total > 0, w / np.where(total > 0, total, 1.0), uniform / np.maximum(uniform.sum(1, keepdims=True), 1))
    return np.where(np.isfinite(dist), w, 0.0)


def influence_region(points: np.ndarray, times: np.ndarray, graph: DeformationGraph, k: int | None = None,
                     shortlist: int | None = None, mode: str | None = None, chunk: int = 65536) -> Influence:
    """Influence nodes and blend weights for each point.

    ``temporal-spatial``: shortlist the ``c*k`` nodes nearest in init time,
    keep the ``k`` spatially nearest; ``d_max`` is the distance to the next
    shortlisted node. ``spatial-only`` skips the time shortlist.
    """
    cfg = graph.config
    k = k or cfg.k_influence
    c = shortlist or cfg.shortlist
    mode = mode or cfg.influence
    points = np.asarray(points, float).reshape(-1, 3)
    times = np.asarray(times).reshape(-1)
    n_nodes = len(graph)
    if n_nodes == 0:
        raise ValueError("empty deformation graph")
    nodes_out = np.full((len(points), k), -1, np.int64)
    w_out = np.zeros((len(points), k))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        if mode == "spatial-only":
            q = min(n_nodes, k + 1)
            _, cand = cKDTree(graph.g).query(p, k=q)
            cand = np.asarray(cand).reshape(len(p), q)
        else:
            cand = _temporal_shortlist(times[s:s + chunk], graph.times, min(c * k, n_nodes))
        dist = np.linalg.norm(p[:, None, :] - graph.g[cand], axis=2)
        order = np.argsort(dist, axis=1, kind="stable")
        cand = np.take_along_axis(cand, order, 1)
        dist = np.take_along_axis(dist, order, 1)
        kk = min(k, cand.shape[1])
        if cand.shape[1] > kk:
            d_max = dist[:, kk]
        else:
            d_max = dist[:, kk - 1] * (1.0 + 1e-9) + 1e-12
        w = _weights_from_distances(dist[:, :kk], d_max)
        nodes_out[s:s + chunk, :kk] = cand[:, :kk]
        w_out[s:s + chunk, :kk] = w
    return Influence(nodes_out, w_out)


def _temporal_shortlist(t: np.ndarray, node_times: np.ndarray, n: int) -> np.ndarray:
    """Ids of the ``n`` nodes nearest in time for each query (ties -> lower id)."""
    k = len(node_times)
    pos = np.searchsorted(node_times, t)
    lo = np.clip(pos - n, 0, max(k - 2 * n, 0))
    window = lo[:, None] + np.arange(min(2 * n, k))[None, :]
    dt = np.abs(node_times[window] - t[:, None]).astype(float)
    order = np.argsort(dt, axis=1, kind="stable")  # window ids ascend, so ties keep the lower id
    return np.take_along_axis(window, order[:, :n], 1)


def _effective_A(graph: DeformationGraph) -> np.ndarray:
    a = graph.A.copy()
    dets = np.linalg.det(a)
    for i in np.flatnonzero(np.abs(dets) < SINGULAR_DET):
        a[i] = polar_rotation(a[i])
    return a


def deform_points(points: np.ndarray, inf: Influence, graph: DeformationGraph, A: np.ndarray | None = None) -> np.ndarray:
    return _deform_with(points, inf, graph, _effective_A(graph) if A is None else A, graph.b)


def deform_normals(normals: np.ndarray, inf: Influence, graph: DeformationGraph, A: np.ndarray | None = None) -> np.ndarray:
    A = _effective_A(graph) if A is None else A
    a_inv_t = np.transpose(np.linalg.inv(A), (0, 2, 1))
    out = np.zeros_like(normals, dtype=float)
    for j in range(inf.nodes.shape[1]):
        n = inf.nodes[:, j]
        ok = n >= 0
        nn = np.where(ok, n, 0)
        w = np.where(ok, inf.weights[:, j], 0.0)[:, None]
        out += w * np.einsum("pij,pj->pi", a_inv_t[nn], normals)
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    return np.where(norm > 0, out / np.where(norm > 0, norm, 1.0), normals)


def apply_deformation(m, graph: DeformationGraph) -> None:
    """Deform every surfel position and normal in place."""
    if len(graph) == 0 or len(m) == 0 or graph.is_identity():
        return
    A = _effective_A(graph)
    inf = influence_region(m.positions, m.init_times, graph)
    n = len(m)
    new_pos = deform_points(m.positions, inf, graph, A)
    new_nrm = deform_normals(m.normals, inf, graph, A)
    m._pos[:n] = new_pos
    m._nrm[:n] = new_nrm


def deform_pose(pose: RigidTransform, time: int, graph: DeformationGraph) -> RigidTransform:
    """Move a camera pose with its influence nodes: position blended, rotation by the blended polar factor."""
    if len(graph) == 0 or graph.is_identity():
        return pose
    A = _effective_A(graph)
    inf = influence_region(pose.translation[None], np.array([time]), graph)
    t = deform_points(pose.translation[None], inf, graph, A)[0]
    blend = np.zeros((3, 3))
    for n, w in zip(inf.nodes[0], inf.weights[0]):
        if n >= 0:
            blend += w * A[n]
    return RigidTransform(polar_rotation(blend) @ pose.rotation, t)


# ---------------------------------------------------------------------------
# Optimisation


@dataclass(frozen=True)
class OptimizationResult:
    converged: bool
    cost: float
    iterations: int
    initial_cost: float


def _unpack(x: np.ndarray, k: int):
    x = x.reshape(k, 12)
    return x[:, :9].reshape(k, 3, 3), x[:, 9:]


def _residuals(graph: DeformationGraph, A, b, edges, con_src, con_dst, con_inf, cfg, want_jac: bool):
    """Stacked weighted residual vector (and sparse Jacobian) of the three cost terms."""
    k = len(graph)
    rows, cols, vals = [], [], []
    res = []
    row0 = 0
    # rotation: A^T A - I, 9 residuals per node
    sr = np.sqrt(cfg.w_rot)
    R = np.einsum("nki,nkj->nij", A, A) - np.eye(3)
    res.append(sr * R.reshape(-1))
    if want_jac:
        for i in range(3):
            for j in range(3):
                r = row0 + np.arange(k) * 9 + i * 3 + j
                # dR_ij / dA_kl = delta_lj A_ki + delta_li A_kj
                for kk in range(3):
                    for ll in range(3):
                        v = np.zeros(k)
                        if ll == j:
                            v = v + A[:, kk, i]
                        if ll == i:
                            v = v + A[:, kk, j]
                        if np.any(v):
                            rows.append(r)
                            cols.append(np.arange(k) * 12 + kk * 3 + ll)
                            vals.append(sr * v)
    row0 += 9 * k
    # regularisation over directed edges
    if len(edges):
        sg = np.sqrt(cfg.w_reg)
        n, mm = edges[:, 0], edges[:, 1]
        d = graph.g[mm] - graph.g[n]
        r_reg = np.einsum("eij,ej->ei", A[n], d) + graph.g[n] + b[n] - graph.g[mm] - b[mm]
        res.append(sg * r_reg.reshape(-1))
        if want_jac:
            e = len(edges)
            for i in range(3):
                r = row0 + np.arange(e) * 3 + i
                for j in range(3):
                    rows.append(r)
                    cols.append(n * 12 + i * 3 + j)
                    vals.append(sg * d[:, j])
                rows.append(r)
                cols.append(n * 12 + 9 + i)
                vals.append(np.full(e, sg))
                rows.append(r)
                cols.append(mm * 12 + 9 + i)
                vals.append(np.full(e, -sg))
        row0 += 3 * len(edges)
    # constraints
    if len(con_src):
        sc = np.sqrt(cfg.w_con)
        phi = _deform_with(con_src, con_inf, graph, A, b)
        res.append(sc * (phi - con_dst).reshape(-1))
        if want_jac:
            c = len(con_src)
            for slot in range(con_inf.nodes.shape[1]):
                nn = con_inf.nodes[:, slot]
                ok = nn >= 0
                w = con_inf.weights[:, slot]
                idx = np.flatnonzero(ok & (w != 0))
                if not len(idx):
                    continue
                node = nn[idx]
                local = con_src[idx] - graph.g[node]
                for i in range(3):
                    r = row0 + idx * 3 + i
                    for j in range(3):
                        rows.append(r)
                        cols.append(node * 12 + i * 3 + j)
                        vals.append(sc * w[idx] * local[:, j])
                    rows.append(r)
                    cols.append(node * 12 + 9 + i)
                    vals.append(sc * w[idx])
        row0 += 3 * len(con_src)
    r = np.concatenate(res)
    if not want_jac:
        return r, None
    jac = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(row0, 12 * k))
    return r, jac


def _deform_with(points, inf, graph, A, b):
    # displacement form keeps identity nodes exactly neutral
    disp = np.zeros_like(points, dtype=float)
    eye = np.eye(3)
    for j in range(inf.nodes.shape[1]):
        n = inf.nodes[:, j]
        ok = n >= 0
        nn = np.where(ok, n, 0)
        w = np.where(ok, inf.weights[:, j], 0.0)[:, None]
        disp += w * (np.einsum("pij,pj->pi", A[nn] - eye, points - graph.g[nn]) + b[nn])
    return points + disp


def graph_cost(graph: DeformationGraph, constraints) -> float:
    src, dst, inf = _constraint_arrays(graph, constraints)
    r, _ = _residuals(graph, graph.A, graph.b, graph.edges(), src, dst, inf, graph.config, False)
    return float(r @ r)


def _constraint_arrays(graph, constraints):
    src = np.array([c.source for c in constraints], float).reshape(-1, 3)
    dst = np.array([c.destination for c in constraints], float).reshape(-1, 3)
    times = np.array([c.timestamp for c in constraints]).reshape(-1)
    inf = influence_region(src, times, graph) if len(src) else None
    return src, dst, inf


# below this the cost is round-off and relative change is meaningless
_COST_FLOOR = 1e-18


def optimize_graph(graph: DeformationGraph, constraints) -> OptimizationResult:
    """Gauss-Newton on the node affines; on failure the graph is reset to identity."""
    cfg = graph.config
    if len(graph) == 0:
        raise ValueError("empty deformation graph")
    if not constraints:
        raise ValueError("at least one constraint is required")
    src, dst, inf = _constraint_arrays(graph, constraints)
    edges = graph.edges()
    k = len(graph)
    x = np.concatenate([graph.A.reshape(k, 9), graph.b], axis=1).reshape(-1)
    A, b = _unpack(x, k)
    r, jac = _residuals(graph, A, b, edges, src, dst, inf, cfg, True)
    cost = float(r @ r)
    initial = cost
    increases = 0
    it = 0
    converged = cost <= _COST_FLOOR
    while not converged and it < cfg.max_iterations:
        it += 1
        jtj = (jac.T @ jac).tocsc()
        damp = 1e-9 * max(jtj.diagonal().max(), 1e-12)
        step = spsolve(jtj + damp * sparse.identity(12 * k, format="csc"), -(jac.T @ r))
        x_new = x + step
        A_new, b_new = _unpack(x_new, k)
        r_new, jac_new = _residuals(graph, A_new, b_new, edges, src, dst, inf, cfg, True)
        new_cost = float(r_new @ r_new)
        if new_cost > cost:
            increases += 1
            if increases >= 3:
                graph.reset()
                return OptimizationResult(False, new_cost, it, initial)
        else:
            increases = 0
        rel = abs(cost - new_cost) / max(cost, 1e-300)
        x, r, jac, cost = x_new, r_new, jac_new, new_cost
        if rel < cfg.rel_tol or cost <= _COST_FLOOR:
            converged = True
    A, b = _unpack(x, k)
    if not np.all(np.isfinite(x)):
        graph.reset()
        return OptimizationResult(False, float("inf"), it, initial)
    graph.A = A.copy()
    graph.b = b.copy()
    return OptimizationResult(True, cost, it, initial)
