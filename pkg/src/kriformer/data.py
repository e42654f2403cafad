"""Speeds/distances CSV I/O, the synthetic road-network generator, dataset bundles."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import shortest_path

from .errors import DataError, ParameterError
from .graph import DEFAULT_EPSILON, SensorGraph, connected_components

log = logging.getLogger(__name__)


@dataclass
class DatasetBundle:
    speeds: np.ndarray  # [T_total, N, 1]
    missing: np.ndarray  # bool, same shape
    graph: SensorGraph
    timestamps: list[str]
    source: dict = field(default_factory=dict)
    positions: np.ndarray | None = None  # synthetic only
    links: np.ndarray | None = None  # synthetic only: simulation adjacency

    @property
    def node_ids(self) -> tuple[str, ...]:
        return self.graph.node_ids

    @property
    def n_steps(self) -> int:
        return self.speeds.shape[0]

    def column(self, node_id: str) -> int:
        try:
            return self.graph.node_ids.index(node_id)
        except ValueError:
            raise DataError(f"unknown node id {node_id!r}") from None

    def split(self, train_fraction: float = 0.7) -> int:
        """Index of the first held-out time step."""
        if not 0 < train_fraction < 1:
            raise ParameterError("train fraction must lie in (0, 1)")
        return int(round(self.n_steps * train_fraction))


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_rows(path) -> list[list[str]]:
    try:
        with open(path, newline="") as fh:
            return list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def load_speeds_csv(path, missing_sentinel: float | None = None):
    """Return ``(node_ids, timestamps, speeds[T, N, 1], missing[T, N, 1])``."""
    rows = [r for r in _read_rows(path) if r]
    if not rows:
        raise DataError(f"{path}: empty speeds file")
    ids = [c.strip() for c in rows[0][1:]]
    if not ids:
        raise DataError(f"{path}:1: header lists no node ids")
    seen = set()
    for i in ids:
        if i in seen:
            raise DataError(f"{path}:1: duplicate node id {i!r}")
        seen.add(i)
    n = len(ids)
    values = np.zeros((len(rows) - 1, n))
    missing = np.zeros((len(rows) - 1, n), dtype=bool)
    stamps = []
    for t, row in enumerate(rows[1:]):
        line = t + 2
        if len(row) != n + 1:
            raise DataError(f"{path}:{line}: expected {n + 1} cells, found {len(row)}")
        stamps.append(row[0].strip())
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell == "":
                missing[t, j] = True
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}:{line}: non-numeric cell {cell!r} for node {ids[j]!r}") from None
            if not math.isfinite(v) or (missing_sentinel is not None and v == missing_sentinel):
                missing[t, j] = True
            else:
                values[t, j] = v
    if not stamps:
        raise DataError(f"{path}: no data rows")
    return ids, stamps, values[..., None], missing[..., None]


def save_speeds_csv(path, node_ids, timestamps, speeds, missing=None) -> None:
    speeds = np.asarray(speeds, dtype=np.float64).reshape(len(timestamps), len(node_ids))
    missing = (np.zeros(speeds.shape, dtype=bool) if missing is None
               else np.asarray(missing, dtype=bool).reshape(speeds.shape))
    rows = ([ts] + ["" if m else repr(float(v)) for v, m in zip(vals, miss)]
            for ts, vals, miss in zip(timestamps, speeds, missing))
    write_text_atomic(path, rows_to_csv(["timestamp", *node_ids], rows))


def load_distances_csv(path, node_ids=None) -> tuple[list[str], np.ndarray]:
    """Directed road distances; absent pairs are ``inf``.

    Without ``node_ids`` the node order is the order of first appearance.
    """
    rows = [r for r in _read_rows(path) if r]
    if not rows or [c.strip().lower() for c in rows[0]] != ["from", "to", "distance"]:
        raise DataError(f"{path}:1: header must be from,to,distance")
    entries = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise DataError(f"{path}:{line}: expected 3 cells, found {len(row)}")
        a, b, cell = (c.strip() for c in row)
        try:
            d = float(cell)
        except ValueError:
            raise DataError(f"{path}:{line}: non-numeric distance {cell!r}") from None
        if not d >= 0:
            raise DataError(f"{path}:{line}: distance must be non-negative, got {cell}")
        entries.append((line, a, b, d))
    if node_ids is None:
        node_ids = list(dict.fromkeys(x for _, a, b, _ in entries for x in (a, b)))
    ids = [str(i) for i in node_ids]
    if len(ids) < 2:
        raise DataError(f"{path}: a sensor graph needs at least 2 nodes")
    index = {nid: i for i, nid in enumerate(ids)}
    dist = np.full((len(ids), len(ids)), np.inf)
    np.fill_diagonal(dist, 0.0)
    for line, a, b, d in entries:
        if a not in index or b not in index:
            bad = a if a not in index else b
            raise DataError(f"{path}:{line}: node id {bad!r} does not appear in the speeds header")
        if a == b:
            if d != 0:
                log.warning("%s:%d: self-distance for %s overridden to 0", path, line, a)
            continue
        dist[index[a], index[b]] = d
    return ids, dist


def save_distances_csv(path, node_ids, distances) -> None:
    d = np.asarray(distances)
    rows = [(node_ids[i], node_ids[j], repr(float(d[i, j])))
            for i in range(len(node_ids)) for j in range(len(node_ids))
            if i != j and np.isfinite(d[i, j])]
    write_text_atomic(path, rows_to_csv(["from", "to", "distance"], rows))


def load_bundle(speeds_path, distances_path, missing_sentinel: float | None = None,
                sigma: float | None = None, epsilon: float = DEFAULT_EPSILON) -> DatasetBundle:
    ids, stamps, speeds, missing = load_speeds_csv(speeds_path, missing_sentinel)
    _, dist = load_distances_csv(distances_path, ids)
    graph = SensorGraph(tuple(ids), dist, sigma, epsilon)
    return DatasetBundle(speeds, missing, graph, stamps,
                         {"kind": "csv", "speeds": str(speeds_path), "distances": str(distances_path),
                          "missing_sentinel": missing_sentinel})


@dataclass(frozen=True)
class SyntheticParams:
    radius: float = 0.35
    alpha: float = 0.3  # diffusion toward the neighbour mean
    amplitude: float = 5.0
    period: float = 288.0
    noise: float = 1.0
    base_speed: float = 60.0
    reversion: float = 0.2  # pull toward the node's own periodic level
    constant_init: bool = True


def generate_synthetic(n_nodes: int = 20, n_steps: int = 2000, seed: int = 42,
                       params: SyntheticParams | None = None, sigma: float | None = None,
                       epsilon: float = DEFAULT_EPSILON) -> DatasetBundle:
    """Random geometric road graph with diffusing, phase-shifted periodic speeds.

    Each step ``x_i <- x_i + alpha (mean of neighbours - x_i)
    + reversion (base + A sin(2 pi t / P + phi_i) - x_i) + noise * N(0, 1)``,
    clipped to [0, 100]. Distances between all node pairs are shortest-path
    lengths along the graph's Euclidean edges.
    """
    p = params or SyntheticParams()
    if n_nodes < 4:
        raise ParameterError("synthetic graphs need at least 4 nodes")
    if n_steps < 1:
        raise ParameterError("n_steps must be >= 1")
    rng = np.random.default_rng(seed)
    radius = p.radius
    for _ in range(10):
        pos = rng.random((n_nodes, 2))
        euclid = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
        adj = (euclid <= radius) & ~np.eye(n_nodes, dtype=bool)
        if len(connected_components(adj)) == 1:
            break
        radius *= 1.15
    else:
        raise DataError(f"could not generate a connected graph with {n_nodes} nodes in 10 attempts")

    road = shortest_path(np.where(adj, euclid, 0.0), directed=False)
    phase = rng.uniform(0.0, 2.0 * np.pi, n_nodes)
    degree = adj.sum(axis=1)
    x = np.full(n_nodes, p.base_speed) if p.constant_init else p.base_speed + rng.standard_normal(n_nodes)
    out = np.empty((n_steps, n_nodes))
    for t in range(n_steps):
        out[t] = x
        neighbour_mean = (adj @ x) / degree
        level = p.base_speed + p.amplitude * np.sin(2.0 * np.pi * t / p.period + phase)
        x = (x + p.alpha * (neighbour_mean - x) + p.reversion * (level - x)
             + p.noise * rng.standard_normal(n_nodes))
        x = np.clip(x, 0.0, 100.0)

    ids = tuple(f"s{i:03d}" for i in range(n_nodes))
    graph = SensorGraph(ids, road, sigma, epsilon)
    source = {"kind": "synthetic", "n_nodes": n_nodes, "n_steps": n_steps, "seed": seed,
              "params": {k: getattr(p, k) for k in p.__dataclass_fields__}}
    return DatasetBundle(out[..., None], np.zeros((n_steps, n_nodes, 1), dtype=bool),
                         graph, [str(t) for t in range(n_steps)], source, positions=pos, links=adj)
