"""Distance graph -> Gaussian-kernel adjacency -> normalized Laplacian -> eigenmaps."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.1


def default_sigma(distances: np.ndarray) -> float:
    """Standard deviation of all finite, strictly positive distance entries.

    When every such distance is equal the deviation is zero and their common
    value is used instead.
    """
    d = np.asarray(distances, dtype=np.float64)
    vals = d[np.isfinite(d) & (d > 0)]
    if vals.size == 0:
        raise DataError("graph has no finite positive distances to derive sigma from")
    std = float(vals.std())
    if std > 0:
        return std
    log.warning("all distances are equal; using sigma = %g", vals[0])
    return float(vals[0])


@dataclass(frozen=True)
class SensorGraph:
    node_ids: tuple[str, ...]
    distances: np.ndarray = field(repr=False)  # N x N, np.inf where no edge
    sigma: float | None = None
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        ids = tuple(str(i) for i in self.node_ids)
        d = np.array(self.distances, dtype=np.float64)
        n = len(ids)
        if n < 2:
            raise DataError(f"a sensor graph needs at least 2 nodes, got {n}")
        if len(set(ids)) != n:
            raise DataError("duplicate node ids in sensor graph")
        if d.shape != (n, n):
            raise DataError(f"distance matrix shape {d.shape} does not match {n} nodes")
        if np.isnan(d).any():
            raise DataError("distance matrix contains NaN; use inf for absent edges")
        if (d < 0).any():
            raise DataError("distances must be non-negative")
        np.fill_diagonal(d, 0.0)
        d.setflags(write=False)
        object.__setattr__(self, "node_ids", ids)
        object.__setattr__(self, "distances", d)
        if self.sigma is None:
            object.__setattr__(self, "sigma", default_sigma(d))

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.node_ids).encode())
        h.update(np.ascontiguousarray(self.distances, dtype="<f8").tobytes())
        return h.hexdigest()

    def permuted(self, perm) -> SensorGraph:
        """Graph whose node ``i`` is this graph's node ``perm[i]``."""
        perm = np.asarray(perm)
        return SensorGraph(tuple(self.node_ids[p] for p in perm),
                           self.distances[np.ix_(perm, perm)], self.sigma, self.epsilon)


@dataclass(frozen=True)
class SpectralData:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns aligned with eigenvalues
    sign_fixed: bool = True


def build_adjacency(graph: SensorGraph, literal: bool = False) -> np.ndarray:
    """Thresholded Gaussian kernel weights ``exp(-d^2 / sigma^2)``.

    By default a pair is kept when its weight is at least ``epsilon``. With
    ``literal=True`` it is kept when ``d^2 / sigma^2 > epsilon`` instead.
    """
    sigma, eps = graph.sigma, graph.epsilon
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if not 0 <= eps < 1:
        raise ParameterError(f"epsilon must lie in [0, 1), got {eps}")
    d = graph.distances
    finite = np.isfinite(d)
    scaled = np.where(finite, d, 0.0) ** 2 / sigma**2
    w = np.exp(-scaled)
    keep = finite & ~np.eye(graph.n_nodes, dtype=bool)
    keep &= (scaled > eps) if literal else (w >= eps)
    return np.where(keep, w, 0.0)


def symmetrize(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ParameterError(f"adjacency must be square, got {a.shape}")
    return np.maximum(a, a.T)


def connected_components(a: np.ndarray) -> list[list[int]]:
    """Components of the undirected graph with an edge wherever ``a`` is nonzero."""
    n = a.shape[0]
    nz = (np.asarray(a) != 0) | (np.asarray(a).T != 0)
    seen = np.zeros(n, dtype=bool)
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        seen[s] = True
        comp, stack = [], [s]
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in np.flatnonzero(nz[u] & ~seen):
                seen[v] = True
                stack.append(int(v))
        comps.append(sorted(comp))
    return comps


def normalized_laplacian(a_s: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2``; zero-degree nodes get a zero scaling entry."""
    a_s = np.asarray(a_s, dtype=np.float64)
    deg = a_s.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    pos = deg > 0
    inv_sqrt[pos] = 1.0 / np.sqrt(deg[pos])
    lap = np.eye(a_s.shape[0]) - inv_sqrt[:, None] * a_s * inv_sqrt[None, :]
    return 0.5 * (lap + lap.T)


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def jacobi_eigh(m: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi rotations for a symmetric matrix. Returns (values, vectors) unsorted."""
    a = np.array(m, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        if _off_norm(a) < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                h = a[q, q] - a[p, p]
                if abs(h) + 100.0 * abs(apq) == abs(h):
                    t = apq / h  # theta would overflow; t ~ 1 / (2 theta)
                else:
                    theta = h / (2.0 * apq)
                    t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        if _off_norm(a) >= tol:
            log.warning("Jacobi iteration stopped after %d sweeps (off-diagonal norm %.3g)",
                        max_sweeps, _off_norm(a))
    return np.diag(a).copy(), v


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so each one's largest-magnitude entry (lowest index on ties) is >= 0."""
    v = np.array(vectors, dtype=np.float64)
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[idx, np.arange(v.shape[1])] < 0, -1.0, 1.0)
    return v * signs


def eigendecompose(lap: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> SpectralData:
    lap = np.asarray(lap, dtype=np.float64)
    if lap.ndim != 2 or lap.shape[0] != lap.shape[1]:
        raise DataError(f"expected a square matrix, got {lap.shape}")
    if np.max(np.abs(lap - lap.T), initial=0.0) > 1e-10:
        raise DataError("matrix is not symmetric (tolerance 1e-10)")
    values, vectors = jacobi_eigh(lap, tol=tol, max_sweeps=max_sweeps)
    order = np.argsort(values, kind="stable")
    return SpectralData(values[order], fix_signs(vectors[:, order]))


def spatial_eigenmap(spectral: SpectralData, k: int) -> np.ndarray:
    """Rows are nodes; columns are eigenvectors 1..k (the trivial v0 is skipped)."""
    n = spectral.eigenvectors.shape[0]
    if not 1 <= k < n:
        raise ParameterError(f"eigenmap width k must satisfy 1 <= k < N={n}, got {k}")
    return spectral.eigenvectors[:, 1:k + 1].copy()


def default_k(n_nodes: int) -> int:
    return min(16, n_nodes - 1)


def graph_features(graph: SensorGraph, k: int | None = None, literal_threshold: bool = False):
    """Symmetrized adjacency and the raw eigenmap matrix for ``graph``."""
    a_s = symmetrize(build_adjacency(graph, literal=literal_threshold))
    comps = connected_components(a_s)
    if len(comps) > 1:
        log.warning("symmetrized graph has %d connected components; eigenmaps are "
                    "only defined up to rotation within the null space", len(comps))
    spectral = eigendecompose(normalized_laplacian(a_s))
    return a_s, spatial_eigenmap(spectral, default_k(graph.n_nodes) if k is None else k)
