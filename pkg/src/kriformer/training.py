"""Random-masking supervision, standardization, Adam and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ParameterError, ShapeError, TrainingError
from .model import KriformerModel
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskSpec:
    v_umo: tuple[int, ...]
    v_mo: tuple[int, ...]
    v_u: tuple[int, ...]

    def __post_init__(self):
        sets = [set(self.v_umo), set(self.v_mo), set(self.v_u)]
        if sum(map(len, sets)) != len(set().union(*sets)):
            raise ParameterError("masked, unmasked and unobserved node sets must be disjoint")

    @property
    def observed(self) -> tuple[int, ...]:
        return tuple(sorted(self.v_umo + self.v_mo))

    def node_mask(self, n_nodes: int) -> np.ndarray:
        """1.0 for unmasked observed nodes, 0.0 for masked and unobserved ones."""
        keep = np.zeros(n_nodes)
        keep[list(self.v_umo)] = 1.0
        return keep


def masked_count(n_observed: int, ratio: float) -> int:
    n = int(math.floor(ratio * n_observed + 1e-9))
    return max(n, 1) if ratio > 0 and n_observed > 0 else n


def sample_mask(observed, unobserved, ratio: float, rng: np.random.Generator) -> MaskSpec:
    if not 0.0 <= ratio < 1.0:
        raise ParameterError(f"mask ratio must lie in [0, 1), got {ratio}")
    observed = np.array(sorted(observed), dtype=int)
    n_mo = masked_count(len(observed), ratio)
    picked = rng.choice(len(observed), size=n_mo, replace=False) if n_mo else np.array([], dtype=int)
    v_mo = tuple(sorted(int(i) for i in observed[picked]))
    v_umo = tuple(int(i) for i in observed if int(i) not in set(v_mo))
    return MaskSpec(v_umo, v_mo, tuple(sorted(int(i) for i in unobserved)))


def apply_mask(x: np.ndarray, spec: MaskSpec) -> np.ndarray:
    """Zero the full series of masked and unobserved nodes (node axis is -2)."""
    x = np.asarray(x, dtype=np.float64)
    keep = spec.node_mask(x.shape[-2])
    return x * keep[:, None]


def reconstruction_loss(pred: Tensor, truth: np.ndarray, spec: MaskSpec,
                        missing: np.ndarray | None = None, reduction: str = "mean") -> Tensor:
    """Squared error over observed nodes (masked and unmasked), skipping missing entries."""
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    counted = np.zeros(truth.shape[-2])
    counted[list(spec.observed)] = 1.0
    weight = np.broadcast_to(counted[:, None], truth.shape).copy()
    if missing is not None:
        weight[np.asarray(missing, dtype=bool)] = 0.0
    n = weight.sum()
    if n == 0:
        raise ParameterError("reconstruction loss has no entries to count")
    diff = pred - Tensor(np.where(weight > 0, truth, 0.0))
    total = tn.tsum(diff * diff * Tensor(weight))
    if reduction == "sum":
        return total
    if reduction != "mean":
        raise ParameterError(f"unknown reduction {reduction!r}")
    return total * (1.0 / n)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.std)) or self.std <= 0:
            raise ParameterError(f"normalization needs a finite positive std, got {self.std}")

    @classmethod
    def fit(cls, x: np.ndarray, missing: np.ndarray | None = None) -> NormStats:
        x = np.asarray(x, dtype=np.float64)
        vals = x if missing is None else x[~np.asarray(missing, dtype=bool)]
        if vals.size == 0:
            raise ParameterError("no observed entries to compute normalization statistics")
        return cls(float(vals.mean()), float(vals.std()))


def standardize(x: np.ndarray, stats: NormStats, missing: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = (x - stats.mean) / stats.std
    return out if missing is None else np.where(missing, x, out)


def destandardize(x: np.ndarray, stats: NormStats, missing: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = x * stats.std + stats.mean
    return out if missing is None else np.where(missing, x, out)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState) -> OptimizerState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if state.lr <= 0:
        raise ParameterError("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise TrainingError(f"non-finite gradient for {name} at step {state.step + 1} "
                                f"({bad} of {g.size} entries)")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


@dataclass
class TrainConfig:
    window: int = 24
    stride: int | None = None  # None -> window
    batch_size: int = 8
    epochs: int = 100
    lr: float = 1e-3
    mask_ratio: float = 0.3
    literal_sum_loss: bool = False
    max_iterations: int | None = None

    def validate(self) -> None:
        if self.window < 1:
            raise ParameterError("window length must be >= 1")
        if self.stride is not None and self.stride < 1:
            raise ParameterError("stride must be >= 1")
        if self.batch_size < 1:
            raise ParameterError("batch size must be >= 1")
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.lr <= 0:
            raise ParameterError("learning rate must be positive")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ParameterError("mask ratio must lie in [0, 1)")


def window_starts(n_steps: int, window: int, stride: int) -> np.ndarray:
    if n_steps < window:
        raise ParameterError(f"series of {n_steps} steps is shorter than the window {window}")
    return np.arange(0, n_steps - window + 1, stride)


def fit(model: KriformerModel, speeds: np.ndarray, missing: np.ndarray | None, config: TrainConfig,
        seed: int = 42, unobserved=(), callback=None) -> list[float]:
    """Train ``model`` in place on raw ``speeds`` [T_total, N, C]; returns the loss history.

    Normalization statistics are computed from ``speeds`` and stored on the model.
    Nodes in ``unobserved`` never contribute input or loss. ``callback(epoch, history)``
    runs after every epoch.
    """
    config.validate()
    speeds = np.asarray(speeds, dtype=np.float64)
    if speeds.ndim != 3 or speeds.shape[1] != model.n_nodes:
        raise ShapeError(f"training data must be [T, {model.n_nodes}, C], got {speeds.shape}")
    missing = np.zeros(speeds.shape, dtype=bool) if missing is None else np.asarray(missing, dtype=bool)
    unobserved = sorted(int(u) for u in unobserved)
    observed = [i for i in range(model.n_nodes) if i not in set(unobserved)]
    obs_missing = missing.copy()
    obs_missing[:, unobserved] = True
    stats = NormStats.fit(speeds, obs_missing)
    model.norm = stats
    model.meta = {**model.meta, "window": config.window, "mask_ratio": config.mask_ratio}
    z = np.where(missing, 0.0, standardize(speeds, stats))

    rng = np.random.default_rng(seed)
    starts = window_starts(len(z), config.window, config.stride or config.window)
    params = model.parameters()
    state = OptimizerState(lr=config.lr)
    history: list[float] = []
    reduction = "sum" if config.literal_sum_loss else "mean"
    for epoch in range(config.epochs):
        order = rng.permutation(starts)
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size, None] + np.arange(config.window)
            truth, miss = z[idx], missing[idx]
            spec = sample_mask(observed, unobserved, config.mask_ratio, rng)
            x = apply_mask(truth, spec)
            model.zero_grad()
            pred = model(x, training=True, rng=rng)
            loss = reconstruction_loss(pred, truth, spec, miss, reduction)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"loss diverged at iteration {len(history) + 1}", history)
            history.append(value)
            tn.backward(loss)
            adam_step({k: p.data for k, p in params.items()},
                      {k: p.grad for k, p in params.items() if p.grad is not None}, state)
            if config.max_iterations and len(history) >= config.max_iterations:
                return history
        log.debug("epoch %d: last loss %.5f", epoch + 1, history[-1])
        if callback is not None:
            callback(epoch + 1, history)
    return history


def _forward_windows(model: KriformerModel, z: np.ndarray, window: int) -> np.ndarray:
    """Run the model over consecutive windows covering ``z`` [T, N, C]."""
    T = len(z)
    if T <= window:
        starts = [0]
    else:
        starts = list(range(0, T - window + 1, window))
        if starts[-1] + window < T:
            starts.append(T - window)
    out = np.empty_like(z)
    filled = 0
    chunk = 32
    with tn.no_grad():
        parts = []
        for c in range(0, len(starts), chunk):
            batch = np.stack([z[s:s + min(window, T)] for s in starts[c:c + chunk]])
            parts.append(model(batch, training=False).data)
        preds = np.concatenate(parts)
    for s, p in zip(starts, preds):
        out[filled:s + len(p)] = p[filled - s:]
        filled = s + len(p)
    return out


def krige(model: KriformerModel, x_obs: np.ndarray, unobserved, missing: np.ndarray | None = None,
          window: int | None = None) -> np.ndarray:
    """Raw-scale predictions for every node; series longer than the window are tiled."""
    if model.norm is None:
        raise ParameterError("model has no normalization statistics; train it first")
    x_obs = np.asarray(x_obs, dtype=np.float64)
    if x_obs.ndim != 3 or x_obs.shape[1] != model.n_nodes or x_obs.shape[2] != model.hyper.C:
        raise ShapeError(f"expected [T, {model.n_nodes}, {model.hyper.C}], got {x_obs.shape}")
    miss = np.zeros(x_obs.shape, dtype=bool) if missing is None else np.asarray(missing, dtype=bool)
    z = np.where(miss, 0.0, standardize(x_obs, model.norm))
    z[:, sorted(int(u) for u in unobserved)] = 0.0
    window = window or int(model.meta.get("window", len(z)))
    return destandardize(_forward_windows(model, z, window), model.norm)
