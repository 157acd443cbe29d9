"""Self-supervised pretraining of the segment encoders and the downstream probe."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from .adcore import Graph, NumericInstabilityError
from .data import SubjectRecord, require_modalities, sample_batches
from .encoders import Model, model_from_config
from .fairness import Prediction, PredictionSet
from .losses import METHODS, POOLING, VC_SCOPES, BatchItem, LossBreakdown, LossWeights, build_batch_loss, resolve_method

log = logging.getLogger(__name__)

OPTIMIZERS = ("adaptive_moments", "sgd_momentum")
HEADS = ("probe", "finetune")


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """Numeric blow-up during pretraining; carries the last finite parameters."""

    def __init__(self, message: str, model: Model, log: list[LossBreakdown]):
        super().__init__(message)
        self.model = model
        self.log = log


@dataclass
class TrainConfig:
    method: str = "m2"
    pooling: str = "single"
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adaptive_moments"
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    modalities: list[str] | None = None
    pooled_modality: str | None = None
    hidden_dims: list[int] = field(default_factory=lambda: [32])
    output_dim: int = 8
    projection_dim: int | None = None
    vc_scope: str = "subject"
    exclude_diagonal: bool = False
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    head: str = "probe"
    probe_l2: float = 1e-2
    finetune_epochs: int = 10
    finetune_lr: float = 1e-3
    numerator_group: str | None = None

    def __post_init__(self):
        if isinstance(self.weights, Mapping):
            self.weights = LossWeights.from_dict(self.weights)
        self.betas = tuple(float(b) for b in self.betas)
        self.split = tuple(float(f) for f in self.split)
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.pooling not in POOLING:
            raise ConfigError(f"pooling must be one of {POOLING}, got {self.pooling!r}")
        if self.pooling == "none" and self.method != "vicreg":
            raise ConfigError("pooling='none' is only valid for the vicreg baseline")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.vc_scope not in VC_SCOPES:
            raise ConfigError(f"vc_scope must be one of {VC_SCOPES}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}")
        if self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("layer sizes must be positive")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ConfigError("split must be three non-negative fractions summing to 1")
        if self.modalities is not None and len(self.modalities) != 2:
            raise ConfigError("exactly two modalities are required")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, LossWeights):
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def resolve(self, records: Sequence[SubjectRecord]) -> "TrainConfig":
        """Fill data-dependent defaults (modality pair, pooled side)."""
        names = self.modalities
        if names is None:
            available = sorted(set.intersection(*(set(r.modalities) for r in records)))
            if len(available) != 2:
                raise ConfigError(f"data has modalities {available}; set 'modalities' to choose two")
            names = available
        require_modalities(records, names)
        pooled = self.pooled_modality
        if pooled is None:
            avg = {m: np.mean([r.modalities[m].shape[0] for r in records]) for m in names}
            pooled = max(names, key=lambda m: (avg[m], m == names[0]))
        if pooled not in names:
            raise ConfigError(f"pooled_modality {pooled!r} is not one of {names}")
        d = self.to_dict()
        d.update(modalities=list(names), pooled_modality=pooled)
        return TrainConfig.from_dict(d)

    @property
    def modality_order(self) -> tuple[str, str]:
        """(pooled m1, segment m2)."""
        if self.modalities is None or self.pooled_modality is None:
            raise ConfigError("config is not resolved against data")
        other = [m for m in self.modalities if m != self.pooled_modality][0]
        return self.pooled_modality, other


# ----------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]):
        self.t += 1
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            params[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGDMomentum:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.buf: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        for k, g in grads.items():
            b = self.buf.get(k, 0.0) * self.momentum + g
            self.buf[k] = b
            params[k] = params[k] - self.lr * b


def make_optimizer(config: TrainConfig, lr: float | None = None):
    lr = config.learning_rate if lr is None else lr
    if config.optimizer == "adaptive_moments":
        return Adam(lr, config.betas)
    return SGDMomentum(lr, config.momentum)


# ----------------------------------------------------------------------------
# pretraining


def init_model(records: Sequence[SubjectRecord], config: TrainConfig) -> Model:
    dims = {m: records[0].modalities[m].shape[1] for m in config.modalities}
    return model_from_config(dims, config.hidden_dims, config.output_dim, config.seed, config.projection_dim)


def build_step_graph(model: Model, batch: Sequence[SubjectRecord], config: TrainConfig, epoch: int):
    """Graph from encoder parameters to the batch loss; returns (graph, loss terms)."""
    m1, m2 = config.modality_order
    g = Graph()
    zs = {}
    for name in (m1, m2):
        enc = model.encoders[name]
        nodes = enc.declare(g)
        x = g.constant(np.concatenate([r.modalities[name] for r in batch], axis=0))
        zs[name] = enc.project(nodes, enc.apply(g, nodes, x))
    items = []
    off = {m1: 0, m2: 0}
    for r in batch:
        parts = []
        for name in (m1, m2):
            n = r.modalities[name].shape[0]
            z = zs[name]
            parts.append(z if len(batch) == 1 else z.rows(off[name], off[name] + n))
            off[name] += n
        items.append(BatchItem(r.subject_id, parts[0], parts[1], r.label))
    terms = build_batch_loss(items, config.weights, config.method, epoch, config.pooling,
                             config.vc_scope, config.exclude_diagonal)
    g.set_output(terms.total)
    return g, terms


def bind_params(model: Model) -> dict[str, np.ndarray]:
    vals = {}
    for enc in model.encoders.values():
        vals.update(enc.bind())
    return vals


def _unbind(name: str, value: np.ndarray, model: Model) -> np.ndarray:
    # biases are declared as (1, d) rows
    return value.reshape(-1) if ".b" in name else value


@dataclass
class PretrainResult:
    model: Model
    log: list[LossBreakdown]
    config: TrainConfig


def pretrain(
    records: Sequence[SubjectRecord],
    config: TrainConfig,
    on_epoch_end: Callable[[int, Model], None] | None = None,
) -> PretrainResult:
    """Train both encoders under ``config.method``; deterministic for a given seed."""
    if config.modalities is None or config.pooled_modality is None:
        config = config.resolve(records)
    require_modalities(records, config.modalities)
    model = init_model(records, config)
    opt = make_optimizer(config)
    params = bind_params(model)
    history: list[LossBreakdown] = []
    last_good = {k: v.copy() for k, v in params.items()}
    step = 0
    for epoch in range(1, config.epochs + 1):
        method = resolve_method(config.method, epoch)
        mode = "same_label" if method == "m3" else "unconstrained"
        for batch in sample_batches(records, config.batch_size, mode, config.seed, epoch):
            step += 1
            try:
                g, terms = build_step_graph(model, batch, config, epoch)
                g.forward(params)
                grads = {k: t.values for k, t in g.backward().items()}
                row = terms.breakdown(epoch=epoch, step=step)
                opt.step(params, grads)
                if not all(np.all(np.isfinite(v)) for v in params.values()):
                    raise NumericInstabilityError("parameter update produced non-finite values")
            except NumericInstabilityError as exc:
                model.set_params({k: _unbind(k, v, model) for k, v in last_good.items()})
                raise TrainingAborted(f"epoch {epoch} step {step}: {exc}", model, history) from exc
            history.append(row)
        last_good = {k: v.copy() for k, v in params.items()}
        model.set_params({k: _unbind(k, v, model) for k, v in params.items()})
        log.debug("epoch %d: mean total %.6g", epoch,
                  np.mean([r.total for r in history if r.epoch == epoch]))
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    return PretrainResult(model, history, config)


def embedding_std(model: Model, records: Sequence[SubjectRecord], modality: str) -> float:
    """Mean over dimensions of the per-dimension std of all segment embeddings."""
    enc = model.encoders[modality]
    z = np.concatenate([enc(r.modalities[modality]) for r in records], axis=0)
    return float(np.mean(np.std(z, axis=0, ddof=1)))


# ----------------------------------------------------------------------------
# probe


@dataclass
class Probe:
    weights: np.ndarray  # over [pooled m1 | pooled m2]
    bias: float
    threshold: float
    modalities: tuple[str, str]

    def scores(self, features: np.ndarray) -> np.ndarray:
        return _sigmoid(features @ self.weights + self.bias)

    def to_json(self) -> dict:
        return {"weights": [float(w) for w in self.weights], "bias": float(self.bias),
                "threshold": float(self.threshold), "modalities": list(self.modalities)}

    @classmethod
    def from_json(cls, d: Mapping) -> "Probe":
        return cls(np.array(d["weights"], dtype=np.float64), float(d["bias"]),
                   float(d["threshold"]), tuple(d["modalities"]))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def pooled_features(model: Model, records: Sequence[SubjectRecord], modalities: Sequence[str]) -> np.ndarray:
    require_modalities(records, modalities)
    rows = []
    for r in records:
        emb = model.embed_modalities(r, modalities)
        rows.append(np.concatenate([emb[m].pooled for m in modalities]))
    return np.array(rows).reshape(len(records), -1)


def fit_logistic(x: np.ndarray, y: np.ndarray, l2: float) -> tuple[np.ndarray, float]:
    """L2-regularised logistic regression by L-BFGS on standardised features."""
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    xs = (x - mu) / sd
    n, d = xs.shape

    def loss(theta):
        w, b = theta[:d], theta[d]
        s = xs @ w + b
        val = np.mean(np.logaddexp(0.0, s) - y * s) + 0.5 * l2 * w @ w
        r = (_sigmoid(s) - y) / n
        return val, np.concatenate([xs.T @ r + l2 * w, [r.sum()]])

    res = minimize(loss, np.zeros(d + 1), jac=True, method="L-BFGS-B",
                   options={"maxiter": 2000, "gtol": 1e-10, "ftol": 1e-14})
    w, b = res.x[:d], res.x[d]
    return w / sd, float(b - (w / sd) @ mu)


def best_f1_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Threshold on ``score >= t`` maximising validation F1.

    F1 is constant while t moves between adjacent distinct scores, so each such
    interval is one candidate; within it we take the point nearest 0.5. Ties
    between intervals also go to the one nearest 0.5.
    """
    u = np.unique(scores)
    lows = np.concatenate([[-np.inf], u[:-1]])
    best, best_t = -1.0, 0.5
    for lo, hi in zip(lows, u):
        t = float(np.clip(0.5, np.nextafter(lo, np.inf), hi))
        pred = scores >= hi
        tp = np.sum(pred & (labels == 1))
        fp = np.sum(pred & (labels == 0))
        fn = np.sum(~pred & (labels == 1))
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        if f1 > best + 1e-12 or (abs(f1 - best) <= 1e-12 and abs(t - 0.5) < abs(best_t - 0.5)):
            best, best_t = f1, t
    return float(np.clip(best_t, 1e-12, 1.0 - 1e-12))


def fit_probe(
    model: Model,
    train: Sequence[SubjectRecord],
    val: Sequence[SubjectRecord] | None = None,
    modalities: Sequence[str] | None = None,
    l2: float = 1e-2,
) -> Probe:
    """Logistic probe on frozen pooled embeddings; threshold maximises validation F1.

    Without a validation split the threshold stays at 0.5.
    """
    modalities = tuple(modalities or sorted(model.encoders))
    y = np.array([r.label for r in train], dtype=np.float64)
    if len(set(y)) < 2:
        raise ValueError("probe training labels contain a single class")
    w, b = fit_logistic(pooled_features(model, train, modalities), y, l2)
    probe = Probe(w, b, 0.5, modalities)
    if val:
        vy = np.array([r.label for r in val])
        probe.threshold = best_f1_threshold(probe.scores(pooled_features(model, val, modalities)), vy)
    return probe


def finetune(
    model: Model,
    train: Sequence[SubjectRecord],
    val: Sequence[SubjectRecord] | None,
    config: TrainConfig,
) -> tuple[Model, Probe]:
    """Unfreeze the encoders and train them with a linear head under cross-entropy."""
    m1, m2 = config.modality_order
    y_all = np.array([r.label for r in train], dtype=np.float64)
    if len(set(y_all)) < 2:
        raise ValueError("fine-tuning labels contain a single class")
    probe = fit_probe(model, train, None, (m1, m2), config.probe_l2)
    d = model.output_dim
    params = bind_params(model)
    params["head.w1"] = probe.weights[:d].reshape(d, 1)
    params["head.w2"] = probe.weights[d:].reshape(d, 1)
    params["head.b"] = np.array([[probe.bias]])
    opt = make_optimizer(config, config.finetune_lr)
    for epoch in range(1, config.finetune_epochs + 1):
        for batch in sample_batches(train, config.batch_size, "unconstrained", config.seed + 1, epoch):
            g = Graph()
            pooled = {}
            for name in (m1, m2):
                enc = model.encoders[name]
                nodes = enc.declare(g)
                rows = []
                for r in batch:
                    z = enc.apply(g, nodes, g.constant(r.modalities[name]))
                    rows.append(z.mean(0))
                pooled[name] = g.concat_rows(rows) if len(rows) > 1 else rows[0]
            w1, w2, b = g.param("head.w1", (d, 1)), g.param("head.w2", (d, 1)), g.param("head.b", (1, 1))
            n = len(batch)
            logits = pooled[m1] @ w1 + pooled[m2] @ w2 + b.broadcast_to((n, 1))
            y = np.array([[r.label] for r in batch], dtype=np.float64)
            loss = (logits.softplus() - logits * y).mean()
            g.set_output(loss)
            g.forward(params)
            grads = {k: t.values for k, t in g.backward().items()}
            opt.step(params, grads)
    model.set_params({k: _unbind(k, v, model) for k, v in params.items() if not k.startswith("head.")})
    weights = np.concatenate([params["head.w1"].ravel(), params["head.w2"].ravel()])
    probe = Probe(weights, float(params["head.b"][0, 0]), 0.5, (m1, m2))
    if val:
        vy = np.array([r.label for r in val])
        probe.threshold = best_f1_threshold(probe.scores(pooled_features(model, val, (m1, m2))), vy)
    return model, probe


def predict(model: Model, probe: Probe, records: Sequence[SubjectRecord],
            threshold: float | None = None) -> PredictionSet:
    """One row per input record, in input order; pred = [score >= threshold]."""
    t = probe.threshold if threshold is None else threshold
    scores = probe.scores(pooled_features(model, records, probe.modalities)) if records else []
    return PredictionSet([
        Prediction(r.subject_id, r.group, r.label, int(s >= t), float(s))
        for r, s in zip(records, scores)
    ])
