"""Per-modality segment encoders, segment pooling and model checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .adcore import Graph, Var

CHECKPOINT_FORMAT = "fairwell-checkpoint/1"


@dataclass
class EmbeddingSet:
    subject_id: str
    modality_name: str
    segments: np.ndarray  # (N_m, d)
    pooled: np.ndarray | None = None

    def __post_init__(self):
        self.segments = np.atleast_2d(np.asarray(self.segments, dtype=np.float64))
        if self.segments.shape[0] == 0:
            raise ValueError(f"subject {self.subject_id!r}: empty segment set for {self.modality_name!r}")
        if self.pooled is not None:
            self.pooled = np.asarray(self.pooled, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.segments.shape[1]


@dataclass
class SegmentEncoder:
    """MLP f(x) = W_L(... relu(W_1 x + b_1) ...) + b_L applied to each segment.

    ``weights[i]`` has shape (fan_in, fan_out) so a batch of segments stacked as
    rows is encoded with one matmul per layer. ``projection`` is an optional
    extra linear map used only inside the self-supervised loss.
    """

    modality_name: str
    input_dim: int
    hidden_dims: list[int]
    output_dim: int
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)
    projection: np.ndarray | None = None

    @classmethod
    def init(
        cls,
        modality_name: str,
        input_dim: int,
        hidden_dims: Sequence[int],
        output_dim: int,
        rng: np.random.Generator,
        projection_dim: int | None = None,
    ) -> "SegmentEncoder":
        dims = [input_dim, *hidden_dims, output_dim]
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"{modality_name}: layer sizes must be positive, got {dims}")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(_glorot(rng, fan_in, fan_out))
            biases.append(np.zeros(fan_out))
        proj = _glorot(rng, output_dim, projection_dim) if projection_dim else None
        return cls(modality_name, int(input_dim), [int(h) for h in hidden_dims], int(output_dim),
                   weights, biases, proj)

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names += [f"{self.modality_name}.W{i}", f"{self.modality_name}.b{i}"]
        if self.projection is not None:
            names.append(f"{self.modality_name}.P")
        return names

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.modality_name}.W{i}"] = w
            out[f"{self.modality_name}.b{i}"] = b
        if self.projection is not None:
            out[f"{self.modality_name}.P"] = self.projection
        return out

    def set_params(self, params: Mapping[str, np.ndarray]):
        for i in range(len(self.weights)):
            self.weights[i] = np.array(params[f"{self.modality_name}.W{i}"], dtype=np.float64)
            self.biases[i] = np.array(params[f"{self.modality_name}.b{i}"], dtype=np.float64)
        if self.projection is not None:
            self.projection = np.array(params[f"{self.modality_name}.P"], dtype=np.float64)

    def check_segments(self, segments) -> np.ndarray:
        x = np.asarray(segments, dtype=np.float64)
        if x.size == 0:
            raise ValueError(f"modality {self.modality_name!r}: at least one segment is required")
        x = np.atleast_2d(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(
                f"modality {self.modality_name!r}: segments must have length {self.input_dim}, "
                f"got shape {x.shape}"
            )
        return x

    # -- graph construction ---------------------------------------------------

    def declare(self, graph: Graph, trainable: bool = True) -> dict[str, Var]:
        """Add this encoder's parameters to ``graph`` as named inputs."""
        make = graph.param if trainable else (lambda n, s: graph.input(n, s))
        nodes = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            nodes[f"W{i}"] = make(f"{self.modality_name}.W{i}", w.shape)
            nodes[f"b{i}"] = make(f"{self.modality_name}.b{i}", (1, b.shape[0]))
        if self.projection is not None:
            nodes["P"] = make(f"{self.modality_name}.P", self.projection.shape)
        return nodes

    def bind(self) -> dict[str, np.ndarray]:
        """Input values matching :meth:`declare`."""
        vals = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            vals[f"{self.modality_name}.W{i}"] = w
            vals[f"{self.modality_name}.b{i}"] = b.reshape(1, -1)
        if self.projection is not None:
            vals[f"{self.modality_name}.P"] = self.projection
        return vals

    def apply(self, graph: Graph, nodes: Mapping[str, Var], x: Var) -> Var:
        h = x
        last = len(self.weights) - 1
        for i in range(len(self.weights)):
            h = h @ nodes[f"W{i}"] + nodes[f"b{i}"].broadcast_to((h.shape[0], self.weights[i].shape[1]))
            if i < last:
                h = h.relu()
        return h

    def project(self, nodes: Mapping[str, Var], z: Var) -> Var:
        return z @ nodes["P"] if "P" in nodes else z

    # -- numeric path ----------------------------------------------------------

    def __call__(self, segments) -> np.ndarray:
        h = self.check_segments(segments)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def encode_segments(encoder: SegmentEncoder, segments, subject_id: str = "") -> EmbeddingSet:
    """Encode every segment independently; order is preserved."""
    return EmbeddingSet(subject_id, encoder.modality_name, encoder(segments))


def mean_exact(rows: np.ndarray) -> np.ndarray:
    """Column means with correctly rounded sums, hence independent of row order."""
    rows = np.atleast_2d(rows)
    n = rows.shape[0]
    return np.array([math.fsum(col) / n for col in rows.T])


def pool(emb: EmbeddingSet) -> EmbeddingSet:
    return EmbeddingSet(emb.subject_id, emb.modality_name, emb.segments, mean_exact(emb.segments))


# ----------------------------------------------------------------------------
# model = one encoder per modality


@dataclass
class Model:
    encoders: dict[str, SegmentEncoder]

    def __post_init__(self):
        dims = {e.output_dim for e in self.encoders.values()}
        if len(dims) > 1:
            raise ValueError(f"all modalities must share one output_dim, got {sorted(dims)}")

    @property
    def output_dim(self) -> int:
        return next(iter(self.encoders.values())).output_dim

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for enc in self.encoders.values():
            out.update(enc.params())
        return out

    def set_params(self, params: Mapping[str, np.ndarray]):
        for enc in self.encoders.values():
            enc.set_params(params)

    def embed(self, subject) -> dict[str, EmbeddingSet]:
        """Pooled embedding sets for every modality of one SubjectRecord."""
        return self.embed_modalities(subject, list(self.encoders))

    def embed_modalities(self, subject, names: Sequence[str]) -> dict[str, EmbeddingSet]:
        out = {}
        for name in names:
            if name not in self.encoders:
                raise ValueError(f"model has no encoder for modality {name!r}")
            if name not in subject.modalities:
                raise ValueError(f"subject {subject.subject_id!r} is missing modality {name!r}")
            enc = self.encoders[name]
            out[name] = pool(encode_segments(enc, subject.modalities[name], subject.subject_id))
        return out


def model_from_config(input_dims: Mapping[str, int], hidden_dims, output_dim, seed: int,
                      projection_dim: int | None = None) -> Model:
    rng = np.random.default_rng(seed)
    return Model({
        name: SegmentEncoder.init(name, dim, hidden_dims, output_dim, rng, projection_dim)
        for name, dim in sorted(input_dims.items())
    })


def _encode_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": [float(v) for v in a.ravel()]}


def _decode_array(d: dict) -> np.ndarray:
    return np.array(d["values"], dtype=np.float64).reshape(d["shape"])


def save_checkpoint(model: Model, path: str | Path, config_hash: str = "") -> None:
    # float repr is shortest-round-trip, so JSON is bit-exact on values
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash,
        "encoders": {
            name: {
                "input_dim": enc.input_dim,
                "hidden_dims": enc.hidden_dims,
                "output_dim": enc.output_dim,
                "params": {k: _encode_array(v) for k, v in enc.params().items()},
            }
            for name, enc in model.encoders.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[Model, str]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    encoders = {}
    for name, spec in doc["encoders"].items():
        params = {k: _decode_array(v) for k, v in spec["params"].items()}
        n_layers = len(spec["hidden_dims"]) + 1
        enc = SegmentEncoder(
            name, spec["input_dim"], list(spec["hidden_dims"]), spec["output_dim"],
            [params[f"{name}.W{i}"] for i in range(n_layers)],
            [params[f"{name}.b{i}"] for i in range(n_layers)],
            params.get(f"{name}.P"),
        )
        encoders[name] = enc
    return Model(encoders), doc.get("config_hash", "")


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
