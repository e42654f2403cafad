"""Encoder-decoder assembly, ablation variants and checkpoint I/O."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as tn
from .attention import AttentionBlockParams, FFNParams, ffn, msa, msia, mta, spatial_mask
from .embedding import MERGE_MODES, STEConfig, glorot, merge_ste, project_spatial, temporal_embedding, zeros
from .errors import CheckpointError, ParameterError, ShapeError
from .graph import SensorGraph, default_k, graph_features
from .tensor import Tensor

ABLATIONS = ("no_TE", "no_SE", "no_STE", "no_MTA", "no_MSA", "no_MSIA")

CHECKPOINT_MAGIC = b"KRIFCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Hyper:
    C: int = 1
    D: int = 64
    n_heads: int = 4
    n_enc: int = 2
    n_dec: int = 2
    dropout: float = 0.2
    k: int | None = None  # None -> min(16, N - 1)
    merge_mode: str = "add"
    msia_mask: bool = False
    literal_threshold: bool = False

    def validate(self, n_nodes: int | None = None) -> None:
        if self.C < 1:
            raise ParameterError("channel count C must be >= 1")
        if self.D < 2 or self.D % 2:
            raise ParameterError(f"model width D must be even and >= 2, got {self.D}")
        if self.n_heads < 1 or self.D % self.n_heads:
            raise ParameterError(f"D={self.D} is not divisible by n_heads={self.n_heads}")
        if self.n_enc < 1 or self.n_dec < 1:
            raise ParameterError("need at least one encoder and one decoder layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.merge_mode not in MERGE_MODES:
            raise ParameterError(f"merge_mode must be one of {MERGE_MODES}")
        if self.k is not None:
            if self.k < 1:
                raise ParameterError("eigenmap width k must be >= 1")
            if n_nodes is not None and self.k >= n_nodes:
                raise ParameterError(f"eigenmap width k={self.k} must be < N={n_nodes}")


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng) -> Linear:
        return cls(glorot(rng, (fan_in, fan_out), fan_in, fan_out), zeros(fan_out))

    def __call__(self, x) -> Tensor:
        return tn.as_tensor(x) @ self.weight + self.bias

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class EncoderLayer:
    mta: AttentionBlockParams
    msa: AttentionBlockParams
    ffn: FFNParams


@dataclass
class DecoderLayer:
    mta: AttentionBlockParams
    msa: AttentionBlockParams
    msia: AttentionBlockParams
    ffn: FFNParams


@dataclass
class KriformerModel:
    hyper: Hyper
    node_ids: tuple[str, ...]
    se_raw: np.ndarray
    mask: np.ndarray
    input_projection: Linear
    output_embedding: Linear
    ste: STEConfig
    encoder: list[EncoderLayer]
    decoder: list[DecoderLayer]
    head: Linear
    ablations: frozenset = frozenset()
    norm: object = None  # training.NormStats once fitted
    graph_fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from (("input_projection." + k, v) for k, v in self.input_projection.parameters().items())
        yield from (("output_embedding." + k, v) for k, v in self.output_embedding.parameters().items())
        yield from (("ste." + k, v) for k, v in self.ste.parameters().items())
        for i, layer in enumerate(self.encoder):
            for block in ("mta", "msa", "ffn"):
                for k, v in getattr(layer, block).parameters().items():
                    yield f"encoder.{i}.{block}.{k}", v
        for i, layer in enumerate(self.decoder):
            for block in ("mta", "msa", "msia", "ffn"):
                for k, v in getattr(layer, block).parameters().items():
                    yield f"decoder.{i}.{block}.{k}", v
        yield from (("head." + k, v) for k, v in self.head.parameters().items())

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def spatiotemporal_embedding(self, T: int) -> Tensor | None:
        flags = self.ablations
        if "no_STE" in flags or {"no_TE", "no_SE"} <= flags:
            return None
        te = temporal_embedding(T, self.hyper.D)
        se = project_spatial(self.se_raw, self.ste)
        return merge_ste(te, se, self.ste, use_te="no_TE" not in flags, use_se="no_SE" not in flags)

    def __call__(self, x, training: bool = False, rng=None) -> Tensor:
        return forward(self, x, training=training, rng=rng)


def parameter_count(C: int, D: int, n_heads: int, n_enc: int, n_dec: int, k: int,
                    merge_mode: str = "add") -> int:
    """Closed-form number of scalar parameters (independent of ``n_heads``)."""
    attention = 4 * D * D + 2 * D
    ffn_block = 2 * D * D + 4 * D
    ste_in = 2 * D if merge_mode == "concat" else D
    embed = 2 * (C * D + D) + (k * D + D) + (ste_in * D + D)
    return (embed + n_enc * (2 * attention + ffn_block)
            + n_dec * (3 * attention + ffn_block) + D * C + C)


def init_model(hyper: Hyper, graph: SensorGraph, seed: int = 42) -> KriformerModel:
    hyper.validate(graph.n_nodes)
    k = default_k(graph.n_nodes) if hyper.k is None else hyper.k
    hyper = dataclasses.replace(hyper, k=k)
    a_s, se_raw = graph_features(graph, k=k, literal_threshold=hyper.literal_threshold)
    model = _build(hyper, graph.node_ids, se_raw, spatial_mask(a_s), np.random.default_rng(seed))
    model.graph_fingerprint = graph.fingerprint()
    return model


def forward(model: KriformerModel, x, training: bool = False, rng=None) -> Tensor:
    """Predictions ``[B?, T, N, C]`` for every node, given masked observations."""
    x = tn.as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = tn.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[2] != model.n_nodes or x.shape[3] != model.hyper.C:
        raise ShapeError(f"expected input [T, {model.n_nodes}, {model.hyper.C}] "
                         f"(optionally batched), got {x.shape}")
    p = model.hyper.dropout if training else 0.0
    if training and p > 0 and rng is None:
        raise ParameterError("training-mode forward with dropout needs an rng")
    rng = rng if training else None
    flags = model.ablations
    spatial = model.mask
    inter = model.mask if model.hyper.msia_mask else None

    ste = model.spatiotemporal_embedding(x.shape[1])
    h = model.input_projection(x)
    if ste is not None:
        h = h + ste
    for layer in model.encoder:
        if "no_MTA" not in flags:
            h = mta(h, layer.mta, p, rng)
        if "no_MSA" not in flags:
            h = msa(h, spatial, layer.msa, p, rng)
        h = ffn(h, layer.ffn, p, rng)
    enc_out = h

    g = model.output_embedding(x)
    if ste is not None:
        g = g + ste
    for layer in model.decoder:
        if "no_MTA" not in flags:
            g = mta(g, layer.mta, p, rng)
        if "no_MSA" not in flags:
            g = msa(g, spatial, layer.msa, p, rng)
        if "no_MSIA" not in flags:
            g = msia(g, enc_out, layer.msia, inter, p, rng)
        g = ffn(g, layer.ffn, p, rng)
    out = model.head(g)
    if squeeze:
        out = tn.reshape(out, out.shape[1:])
    return out


def gradcheck_tiny(seed: int = 0, h: float = 1e-6) -> tuple[float, int]:
    """Gradient check of every parameter of a tiny deterministic model.

    N=6, T=8, D=8, two heads, one encoder and one decoder layer, no dropout; the loss
    is the masked reconstruction loss used in training, with node 5 held out. Returns ``(max relative error, number of scalars checked)``.
    """
    from .training import apply_mask, reconstruction_loss, sample_mask

    rng = np.random.default_rng(seed)
    pos = rng.random((6, 2))
    dist = np.sqrt(((pos[:, None] - pos[None]) ** 2).sum(-1))
    graph = SensorGraph(tuple(f"n{i}" for i in range(6)), dist)
    model = init_model(Hyper(D=8, n_heads=2, n_enc=1, n_dec=1, dropout=0.0), graph, seed)
    truth = rng.standard_normal((8, 6, 1))
    spec = sample_mask(range(5), [5], 0.3, rng)
    x = apply_mask(truth, spec)
    params = [p for _, p in model.named_parameters()]

    def loss(*_):
        return reconstruction_loss(forward(model, x), truth, spec)

    return tn.grad_check(loss, params, h), sum(p.size for p in params)


def apply_ablation(model: KriformerModel, variant: str) -> KriformerModel:
    """Copy of ``model`` with one more block removed; ``"none"`` returns an unchanged copy."""
    if variant != "none" and variant not in ABLATIONS:
        raise ParameterError(f"unknown ablation variant {variant!r}; choose from none, {', '.join(ABLATIONS)}")
    out = copy.deepcopy(model)
    if variant != "none":
        out.ablations = frozenset(model.ablations | {variant})
    return out


# ---------------------------------------------------------------- checkpoints

def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: KriformerModel, path) -> None:
    arrays = [(name, p.data) for name, p in model.named_parameters()]
    arrays += [("_se_raw", model.se_raw), ("_mask", model.mask)]
    table, chunks, offset = [], [], 0
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    norm = model.norm
    header = {
        "hyper": dataclasses.asdict(model.hyper),
        "ablations": sorted(model.ablations),
        "node_ids": list(model.node_ids),
        "norm": None if norm is None else {"mean": norm.mean, "std": norm.std},
        "graph_fingerprint": model.graph_fingerprint,
        "meta": model.meta,
        "tensors": table,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(head)) + head + payload
    _atomic_write_bytes(path, blob)


def load_checkpoint(path) -> KriformerModel:
    from .training import NormStats

    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    prefix = len(CHECKPOINT_MAGIC) + 12
    if len(blob) < prefix or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic or truncated)")
    version, head_len = struct.unpack("<IQ", blob[len(CHECKPOINT_MAGIC):prefix])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    try:
        header = json.loads(blob[prefix:prefix + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    payload = blob[prefix + head_len:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"checkpoint {path} is truncated: payload has {len(payload)} of "
                              f"{header['payload_bytes']} bytes")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"checkpoint {path} failed its checksum")

    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])

    hyper = Hyper(**header["hyper"])
    ids = tuple(header["node_ids"])
    model = _build(hyper, ids, arrays["_se_raw"], arrays["_mask"], np.random.default_rng(0))
    params = model.parameters()
    if set(params) != {k for k in arrays if not k.startswith("_")}:
        raise CheckpointError("checkpoint parameter set does not match its hyperparameters")
    for name, p in params.items():
        if p.shape != arrays[name].shape:
            raise CheckpointError(f"parameter {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.data = arrays[name]
    model.ablations = frozenset(header["ablations"])
    if header["norm"] is not None:
        model.norm = NormStats(**header["norm"])
    model.graph_fingerprint = header["graph_fingerprint"]
    model.meta = header["meta"]
    return model


def _build(hyper: Hyper, node_ids, se_raw, mask, rng) -> KriformerModel:
    D, H = hyper.D, hyper.n_heads
    return KriformerModel(
        hyper=hyper, node_ids=node_ids, se_raw=se_raw, mask=mask,
        input_projection=Linear.init(hyper.C, D, rng),
        output_embedding=Linear.init(hyper.C, D, rng),
        ste=STEConfig.init(D, hyper.k, hyper.merge_mode, rng),
        encoder=[EncoderLayer(AttentionBlockParams.init(D, H, rng), AttentionBlockParams.init(D, H, rng),
                              FFNParams.init(D, rng)) for _ in range(hyper.n_enc)],
        decoder=[DecoderLayer(AttentionBlockParams.init(D, H, rng), AttentionBlockParams.init(D, H, rng),
                              AttentionBlockParams.init(D, H, rng), FFNParams.init(D, rng))
                 for _ in range(hyper.n_dec)],
        head=Linear.init(D, hyper.C, rng),
    )
