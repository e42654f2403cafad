"""Glue between a RunConfig and the library: load data, train, rebuild bundles from checkpoints."""
from __future__ import annotations

import logging

from .config import RunConfig
from .data import DatasetBundle, generate_synthetic, load_bundle
from .errors import DataError
from .model import KriformerModel, apply_ablation, init_model
from .training import fit

log = logging.getLogger(__name__)


def load_data(cfg: RunConfig) -> DatasetBundle:
    d = cfg.data
    if d.speeds is not None:
        return load_bundle(d.speeds, d.distances, d.missing_sentinel, d.sigma, d.epsilon)
    syn = d.synthetic
    if syn is None:
        raise DataError("configuration names no data: set data.synthetic or data.speeds/data.distances")
    return generate_synthetic(syn.n_nodes, syn.n_steps, syn.seed, sigma=d.sigma, epsilon=d.epsilon)


def bundle_from_source(source: dict) -> DatasetBundle:
    """Rebuild the dataset a checkpoint was trained on from its recorded source."""
    kind = source.get("kind")
    if kind == "synthetic":
        return generate_synthetic(source["n_nodes"], source["n_steps"], source["seed"],
                                  sigma=source.get("sigma"), epsilon=source.get("epsilon", 0.1))
    if kind == "csv":
        return load_bundle(source["speeds"], source["distances"], source.get("missing_sentinel"),
                           source.get("sigma"), source.get("epsilon", 0.1))
    raise DataError("checkpoint does not record its training data; pass --speeds and --distances")


def train_model(cfg: RunConfig, bundle: DatasetBundle, mask_ratio: float | None = None,
                variant: str | None = None, callback=None) -> tuple[KriformerModel, list[float]]:
    """Initialise, ablate and fit a model on the leading ``train_fraction`` of the timeline."""
    cfg.model.hyper().validate(bundle.graph.n_nodes)
    model = init_model(cfg.model.hyper(), bundle.graph, cfg.seed)
    model = apply_ablation(model, cfg.model.ablation if variant is None else variant)
    end = bundle.split(cfg.data.train_fraction)
    tcfg = cfg.training.train_config(mask_ratio)
    history = fit(model, bundle.speeds[:end], bundle.missing[:end], tcfg, seed=cfg.seed, callback=callback)
    source = dict(bundle.source)
    source.update(sigma=cfg.data.sigma, epsilon=cfg.data.epsilon)
    model.meta = {**model.meta, "seed": cfg.seed, "train_fraction": cfg.data.train_fraction,
                  "epochs": tcfg.epochs, "source": source}
    return model, history
