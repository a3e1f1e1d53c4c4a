"""GNN and MLP state estimators, input/output normalisation, and the model file format."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import GraphOperator
from .layers import Dense, GatLayer, GcnLayer, LinearHead, as_graph

MAGIC = b"GNNSEMD1"
STD_FLOOR = 1e-6


@dataclass
class Normalizer:
    """Per-node, per-channel z-scoring; arrays have shape (n, 2)."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray) -> "Normalizer":
        return cls(data.mean(axis=0), np.maximum(data.std(axis=0), STD_FLOOR))

    def apply(self, data: np.ndarray) -> np.ndarray:
        return (data - self.mean) / self.std

    def invert(self, data: np.ndarray) -> np.ndarray:
        return data * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Normalizer":
        return cls(np.array(doc["mean"], dtype=float), np.array(doc["std"], dtype=float))


class Model:
    """Shared plumbing: ordered layers, parameter access, normalisation."""

    arch = ""

    def __init__(self, layers, in_norm: Optional[Normalizer] = None, out_norm: Optional[Normalizer] = None):
        self.layers = list(layers)
        self.in_norm = in_norm
        self.out_norm = out_norm
        self.meta: dict = {}

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                out[f"{i}.{layer.kind}.{name}"] = arr
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.named_params().values())

    def _grads_dict(self, layer_grads) -> dict[str, np.ndarray]:
        out = {}
        for i, (layer, grads) in enumerate(zip(self.layers, layer_grads)):
            for name in layer.params:
                out[f"{i}.{layer.kind}.{name}"] = grads[name]
        return out

    def backward(self, dout, caches) -> dict[str, np.ndarray]:
        layer_grads = [None] * len(self.layers)
        for i in reversed(range(len(self.layers))):
            dout, layer_grads[i] = self.layers[i].backward(dout, caches[i])
        return self._grads_dict(layer_grads)

    def config(self) -> dict:
        raise NotImplementedError


class GnnModel(Model):
    """Stacked GCN layers, one GAT layer and a per-node linear head.

    ``forward`` works on normalised node-major tensors (n, batch, 2).
    """

    arch = "gnn"

    def __init__(self, layers, in_norm=None, out_norm=None, self_inclusive: bool = True):
        super().__init__(layers, in_norm, out_norm)
        self.self_inclusive = self_inclusive

    @classmethod
    def init(cls, rng: np.random.Generator, n_gcn: int = 5, n_gat: int = 1, hidden: int = 64,
             d_in: int = 2, d_out: int = 2, leaky_slope: float = 0.2, self_inclusive: bool = True):
        layers = []
        d = d_in
        for _ in range(n_gcn):
            layers.append(GcnLayer.init(d, hidden, rng))
            d = hidden
        for _ in range(n_gat):
            layers.append(GatLayer.init(d, hidden, rng, leaky_slope))
            d = hidden
        layers.append(LinearHead.init(d, d_out, rng))
        return cls(layers, self_inclusive=self_inclusive)

    def graph(self, adj) -> GraphOperator:
        return as_graph(adj, self.self_inclusive)

    def forward(self, x: np.ndarray, graph: GraphOperator):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, graph)
            caches.append(cache)
        return x, caches

    def config(self) -> dict:
        kinds = [layer.kind for layer in self.layers]
        gat = next((layer for layer in self.layers if isinstance(layer, GatLayer)), None)
        return {
            "arch": self.arch,
            "layers": kinds,
            "dims": [int(self.layers[0].params["W"].shape[0])]
                    + [int(layer.params["W"].shape[1]) for layer in self.layers],
            "leaky_slope": gat.leaky_slope if gat else None,
            "self_inclusive": self.self_inclusive,
        }


class MlpModel(Model):
    """Fully connected baseline on the flattened (magnitude, angle) vector."""

    arch = "mlp"

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, hidden: int = 200, depth: int = 6):
        layers = []
        d = n_in
        for _ in range(depth):
            layers.append(Dense.init(d, hidden, rng, relu=True))
            d = hidden
        layers.append(Dense.init(d, n_out, rng, relu=False))
        return cls(layers)

    def forward(self, x: np.ndarray, graph=None):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def config(self) -> dict:
        return {
            "arch": self.arch,
            "layers": [layer.kind for layer in self.layers],
            "dims": [int(self.layers[0].params["W"].shape[0])]
                    + [int(layer.params["W"].shape[1]) for layer in self.layers],
            "relu": [layer.relu for layer in self.layers],
        }


def mlp_forward(x: np.ndarray, model: MlpModel) -> np.ndarray:
    return model.forward(np.asarray(x, dtype=float))[0]


# ------------------------------------------------------------------ model file

def save_model(model: Model, path) -> None:
    """JSON header followed by little-endian float64 parameter blocks in layer order.

    Layout: 8-byte magic, uint64 header length, UTF-8 JSON header, blocks.
    """
    params = model.named_params()
    header = {
        "config": model.config(),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "in_norm": model.in_norm.to_dict() if model.in_norm else None,
        "out_norm": model.out_norm.to_dict() if model.out_norm else None,
        "meta": model.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a model file")
        (size,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(size))


def load_model(path) -> Model:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a model file")
    (size,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + size])
    offset = 16 + size
    arrays = {}
    for spec in header["params"]:
        count = int(np.prod(spec["shape"]))
        arrays[spec["name"]] = np.frombuffer(data, "<f8", count, offset).reshape(spec["shape"]).astype(float)
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter blocks")
    cfg = header["config"]
    layers = []
    for i, kind in enumerate(cfg["layers"]):
        p = {k.split(".")[-1]: v for k, v in arrays.items() if k.startswith(f"{i}.")}
        if kind == "gcn":
            layers.append(GcnLayer(p["W"]))
        elif kind == "gat":
            layers.append(GatLayer(p["W"], p["a"], cfg["leaky_slope"]))
        elif kind == "head":
            layers.append(LinearHead(p["W"], p["b"]))
        elif kind == "dense":
            layers.append(Dense(p["W"], p["b"], relu=cfg["relu"][i]))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    norms = [Normalizer.from_dict(header[k]) if header[k] else None for k in ("in_norm", "out_norm")]
    if cfg["arch"] == "gnn":
        model: Model = GnnModel(layers, *norms, self_inclusive=cfg["self_inclusive"])
    else:
        model = MlpModel(layers, *norms)
    model.meta = header["meta"]
    return model
