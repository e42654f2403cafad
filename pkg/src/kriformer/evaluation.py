"""Error metrics, baselines, the SM3/SM5/SM7 protocol, mask-ratio sweeps and ablations."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.sparse.csgraph import shortest_path

from .data import DatasetBundle, rows_to_csv, write_text_atomic
from .errors import DataError, ParameterError
from .graph import SensorGraph
from .model import KriformerModel
from .training import krige

log = logging.getLogger(__name__)

SCENARIOS = {"sm3": 0.3, "sm5": 0.5, "sm7": 0.7}
MAPE_FLOOR = 1e-6


# -------------------------------------------------------------------- metrics

def _selected(truth, pred, include):
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ParameterError(f"truth {truth.shape} and prediction {pred.shape} differ in shape")
    include = np.ones(truth.shape, dtype=bool) if include is None else np.broadcast_to(include, truth.shape)
    if not include.any():
        raise ParameterError("no entries selected for evaluation")
    return truth[include], pred[include]


def mae(truth, pred, include=None) -> float:
    t, p = _selected(truth, pred, include)
    return float(np.mean(np.abs(t - p)))


def rmse(truth, pred, include=None) -> float:
    t, p = _selected(truth, pred, include)
    return float(np.sqrt(np.mean((t - p) ** 2)))


def mape(truth, pred, include=None) -> float:
    """Mean absolute percentage error (in %); entries with |truth| < 1e-6 are skipped."""
    truth = np.asarray(truth, dtype=np.float64)
    include = np.ones(truth.shape, dtype=bool) if include is None else np.broadcast_to(include, truth.shape)
    t, p = _selected(truth, pred, include & (np.abs(truth) >= MAPE_FLOOR))
    return float(np.mean(np.abs((t - p) / t)) * 100.0)


@dataclass
class EvalReport:
    scenario: str
    method: str
    scenario_ratio: float
    seed: int
    mae: float
    rmse: float
    mape: float
    n_nodes: int
    n_entries: int
    seconds: float = 0.0
    train_mask_ratio: float | None = None
    variant: str = "none"

    def as_dict(self, timing: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not timing:
            d.pop("seconds")
        return d


REPORT_COLUMNS = ["scenario", "method", "variant", "scenario_ratio", "train_mask_ratio", "seed",
                  "mae", "rmse", "mape", "n_nodes", "n_entries", "seconds"]


def reports_csv(reports: Sequence[EvalReport], timing: bool = True) -> str:
    cols = [c for c in REPORT_COLUMNS if timing or c != "seconds"]
    rows = [[_fmt(getattr(r, c)) for c in cols] for r in reports]
    return rows_to_csv(cols, rows)


def reports_json(reports: Sequence[EvalReport], timing: bool = True) -> str:
    return json.dumps([r.as_dict(timing) for r in reports], indent=2, sort_keys=True) + "\n"


def write_reports(reports: Sequence[EvalReport], csv_path=None, json_path=None, timing: bool = False) -> None:
    if csv_path:
        write_text_atomic(csv_path, reports_csv(reports, timing))
    if json_path:
        write_text_atomic(json_path, reports_json(reports, timing))


def seed_means(reports: Sequence[EvalReport]) -> list[dict]:
    """Mean MAE/RMSE/MAPE per (scenario, method) across the seeds present in ``reports``."""
    groups: dict[tuple[str, str], list[EvalReport]] = {}
    for r in reports:
        groups.setdefault((r.scenario, r.method), []).append(r)
    return [{"scenario": sc, "method": m, "seeds": [r.seed for r in rs],
             "mae": float(np.mean([r.mae for r in rs])), "rmse": float(np.mean([r.rmse for r in rs])),
             "mape": float(np.mean([r.mape for r in rs]))}
            for (sc, m), rs in groups.items()]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ------------------------------------------------------------------ baselines

def road_distances(graph: SensorGraph) -> np.ndarray:
    """All-pairs shortest road distance over the symmetrized distance graph."""
    d = np.minimum(graph.distances, graph.distances.T)
    weights = np.where(np.isfinite(d), d, 0.0)
    # zero-length edges would vanish from the sparse representation
    weights = np.where(np.isfinite(d) & (d == 0) & ~np.eye(len(d), dtype=bool), 1e-12, weights)
    return shortest_path(weights, directed=False)


def knn_baseline(x_obs: np.ndarray, graph: SensorGraph, unobserved, k: int = 3,
                 missing: np.ndarray | None = None) -> np.ndarray:
    """Average of the ``k`` nearest observed nodes with a value at each time step.

    Nearness is shortest road distance (ties broken by node index). With fewer
    than ``k`` usable neighbours all of them are averaged; unreachable nodes are
    used last.
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    x = np.asarray(x_obs, dtype=np.float64)
    n = graph.n_nodes
    unobserved = sorted(int(u) for u in unobserved)
    observed = np.array([i for i in range(n) if i not in set(unobserved)], dtype=int)
    if observed.size == 0:
        raise DataError("KNN needs at least one observed node")
    miss = np.zeros(x.shape, dtype=bool) if missing is None else np.asarray(missing, dtype=bool)
    dist = road_distances(graph)
    out = x.copy()
    for u in unobserved:
        order = observed[np.lexsort((observed, dist[u, observed]))]
        valid = ~miss[:, order]  # [T, n_obs, C]
        rank = np.cumsum(valid, axis=1)
        use = valid & (rank <= k)
        count = use.sum(axis=1)
        total = np.where(use, x[:, order], 0.0).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[:, u] = np.where(count > 0, total / np.maximum(count, 1), np.nan)
        if np.isnan(out[:, u]).any():
            raise DataError(f"no observed value available for node {graph.node_ids[u]} at some time step")
    return out


def mean_baseline(x_obs: np.ndarray, unobserved, missing: np.ndarray | None = None) -> np.ndarray:
    """Cross-sectional mean of observed nodes; an empty step repeats the previous mean."""
    x = np.asarray(x_obs, dtype=np.float64)
    n = x.shape[1]
    unobserved = sorted(int(u) for u in unobserved)
    observed = [i for i in range(n) if i not in set(unobserved)]
    miss = np.zeros(x.shape, dtype=bool) if missing is None else np.asarray(missing, dtype=bool)
    valid = ~miss[:, observed]
    count = valid.sum(axis=1)
    total = np.where(valid, x[:, observed], 0.0).sum(axis=1)
    means = np.empty(count.shape)
    for t in range(len(x)):
        if (count[t] > 0).all():
            means[t] = total[t] / count[t]
        elif t == 0:
            raise DataError("mean baseline: no observed value at the first time step")
        else:
            means[t] = np.where(count[t] > 0, total[t] / np.maximum(count[t], 1), means[t - 1])
    out = x.copy()
    out[:, unobserved] = means[:, None, :]
    return out


# ---------------------------------------------------------------- predictors

Predictor = Callable[[np.ndarray, np.ndarray, Sequence[int]], np.ndarray]


def model_predictor(model: KriformerModel) -> Predictor:
    def predict(x_obs, missing, unobserved):
        return krige(model, x_obs, unobserved, missing)
    predict.method = "kriformer"
    return predict


def knn_predictor(graph: SensorGraph, k: int = 3) -> Predictor:
    def predict(x_obs, missing, unobserved):
        return knn_baseline(x_obs, graph, unobserved, k, missing)
    predict.method = f"knn{k}"
    return predict


def mean_predictor() -> Predictor:
    def predict(x_obs, missing, unobserved):
        return mean_baseline(x_obs, unobserved, missing)
    predict.method = "mean"
    return predict


# ------------------------------------------------------------------ protocol

def pseudo_unobserved(n_nodes: int, ratio: float, seed: int) -> list[int]:
    if not 0 < ratio < 1:
        raise ParameterError(f"scenario ratio must lie in (0, 1), got {ratio}")
    count = int(math.floor(ratio * n_nodes + 1e-9))
    if count == 0:
        raise ParameterError(f"ratio {ratio} leaves no pseudo-unobserved node among {n_nodes}")
    if count >= n_nodes:
        raise ParameterError(f"ratio {ratio} leaves no observed node among {n_nodes}")
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n_nodes, size=count, replace=False))


def scenario_ratio(scenario: str | float) -> tuple[str, float]:
    if isinstance(scenario, str):
        key = scenario.lower()
        if key not in SCENARIOS:
            raise ParameterError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
        return key, SCENARIOS[key]
    return "custom", float(scenario)


def evaluate_sm(predictor: Predictor | KriformerModel, bundle: DatasetBundle, scenario="sm3",
                seed: int = 42, train_fraction: float = 0.7) -> EvalReport:
    """Hide a seed-fixed node subset over the held-out tail of the timeline and score it."""
    if isinstance(predictor, KriformerModel):
        predictor = model_predictor(predictor)
    name, ratio = scenario_ratio(scenario)
    start = bundle.split(train_fraction)
    truth = bundle.speeds[start:]
    missing = bundle.missing[start:]
    hidden = pseudo_unobserved(bundle.graph.n_nodes, ratio, seed)

    x_obs = truth.copy()
    x_obs[:, hidden] = 0.0
    x_obs[missing] = 0.0
    assert not x_obs[:, hidden].any(), "pseudo-unobserved inputs must be zero"

    t0 = time.perf_counter()
    pred = predictor(x_obs, missing, hidden)
    seconds = time.perf_counter() - t0

    include = np.zeros(truth.shape, dtype=bool)
    include[:, hidden] = True
    include &= ~missing
    return EvalReport(scenario=name, method=getattr(predictor, "method", "custom"),
                      scenario_ratio=ratio, seed=seed,
                      mae=mae(truth, pred, include), rmse=rmse(truth, pred, include),
                      mape=mape(truth, pred, include), n_nodes=len(hidden),
                      n_entries=int(include.sum()), seconds=seconds)


def mask_ratio_sweep(model_factory: Callable[[float], KriformerModel], bundle: DatasetBundle,
                     ratios: Sequence[float], seed: int = 42, scenario="sm3",
                     train_fraction: float = 0.7) -> list[EvalReport]:
    """Train one model per training mask ratio via ``model_factory`` and score each."""
    reports = []
    for r in ratios:
        if not 0 < r < 1:
            raise ParameterError(f"mask ratios must lie in (0, 1), got {r}")
        t0 = time.perf_counter()
        model = model_factory(r)
        rep = evaluate_sm(model, bundle, scenario, seed, train_fraction)
        rep.train_mask_ratio = r
        rep.seconds = time.perf_counter() - t0
        reports.append(rep)
    return reports


def sweep_csv(reports: Sequence[EvalReport]) -> str:
    return rows_to_csv(["ratio", "mae", "rmse", "mape"],
                       [[repr(r.train_mask_ratio), repr(r.mae), repr(r.rmse), repr(r.mape)] for r in reports])


def ablation_suite(model_factory: Callable[[str], KriformerModel], bundle: DatasetBundle,
                   variants: Sequence[str], seed: int = 42, scenario="sm3",
                   train_fraction: float = 0.7) -> list[EvalReport]:
    """Train every variant identically via ``model_factory`` and score it."""
    reports = []
    for v in variants:
        t0 = time.perf_counter()
        model = model_factory(v)
        rep = evaluate_sm(model, bundle, scenario, seed, train_fraction)
        rep.variant = v
        rep.train_mask_ratio = model.meta.get("mask_ratio")
        rep.seconds = time.perf_counter() - t0
        reports.append(rep)
    return reports


def ablation_csv(reports: Sequence[EvalReport]) -> str:
    return rows_to_csv(["variant", "mae", "rmse", "mape"],
                       [[r.variant, repr(r.mae), repr(r.rmse), repr(r.mape)] for r in reports])
