"""Toy multimodal model: per-modality encoder and connector around a shared backbone.

Parameter names carry their component as a prefix::

    encoder.<modality>.{w1,b1,w2,b2}    modality-specific, frozen after creation
    connector.<modality>.{w,b}          modality-specific, feat_dim -> embed_dim
    backbone.{ln.g,ln.b,w1,b1,w2,b2}    modality-agnostic
    head.<task>.{w,b}                   modality-agnostic, shared across modalities
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from mera.errors import DimensionError, RegistrationError, RoutingError
from mera.nnkernel import DTYPE, Graph, Node, ParameterSet, glorot_uniform
from mera.seeding import rng_for

ENCODER, CONNECTOR, BACKBONE, HEAD = "encoder", "connector", "backbone", "head"
_KINDS = (ENCODER, CONNECTOR, BACKBONE, HEAD)


@dataclass(frozen=True, order=True)
class ComponentTag:
    """Which component a parameter belongs to.

    ``key`` is the modality id for encoders/connectors and the task id for
    heads; ``None`` on a connector/encoder/head tag acts as a wildcard in a
    freeze mask.
    """

    kind: str
    key: str | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown component kind {self.kind!r}")

    @property
    def modality_agnostic(self) -> bool:
        return self.kind in (BACKBONE, HEAD)

    def matches(self, other: "ComponentTag") -> bool:
        return self.kind == other.kind and (self.key is None or self.key == other.key)

    def __str__(self):
        return self.kind if self.key is None else f"{self.kind}({self.key})"


def Encoder(m=None):
    return ComponentTag(ENCODER, m)


def Connector(m=None):
    return ComponentTag(CONNECTOR, m)


def Backbone():
    return ComponentTag(BACKBONE)


def Head(task=None):
    return ComponentTag(HEAD, task)


def tag_of(name: str) -> ComponentTag:
    kind, _, rest = name.partition(".")
    if kind == BACKBONE:
        return ComponentTag(BACKBONE)
    if kind in (ENCODER, CONNECTOR, HEAD):
        key, _, leaf = rest.rpartition(".")
        if not key or not leaf:
            raise ValueError(f"malformed parameter name {name!r}")
        return ComponentTag(kind, key)
    raise ValueError(f"parameter {name!r} has no component prefix")


@dataclass(frozen=True)
class ModelDims:
    feat_dim: int = 32
    embed_dim: int = 32
    encoder_hidden: int = 128
    classes: tuple[tuple[str, int], ...] = (("capA", 8), ("qaA", 8))

    def __post_init__(self):
        for name in ("feat_dim", "embed_dim", "encoder_hidden"):
            if getattr(self, name) <= 0:
                raise DimensionError(f"{name} must be positive")

    @property
    def tasks(self) -> list[str]:
        return [t for t, _ in self.classes]


@dataclass
class MultimodalModel:
    dims: ModelDims
    params: ParameterSet
    modalities: dict[str, int] = field(default_factory=dict)  # id -> input_dim, in registration order

    # -- construction ---------------------------------------------------------

    @classmethod
    def fresh(cls, dims: ModelDims, seed: int) -> "MultimodalModel":
        """Backbone and heads only; modalities are added with :meth:`register_modality`."""
        rng = rng_for(seed, "backbone")
        e = dims.embed_dim
        p = ParameterSet()
        p.add("backbone.ln.g", np.ones(e, DTYPE))
        p.add("backbone.ln.b", np.zeros(e, DTYPE))
        p.add("backbone.w1", glorot_uniform(rng, e, e))
        p.add("backbone.b1", np.zeros(e, DTYPE))
        p.add("backbone.w2", glorot_uniform(rng, e, e))
        p.add("backbone.b2", np.zeros(e, DTYPE))
        for task, c in dims.classes:
            hrng = rng_for(seed, "head", task)
            p.add(f"head.{task}.w", glorot_uniform(hrng, e, c))
            p.add(f"head.{task}.b", np.zeros(c, DTYPE))
        return cls(dims, p, {})

    def copy(self) -> "MultimodalModel":
        return MultimodalModel(self.dims, self.params.copy(), dict(self.modalities))

    def register_modality(self, modality_id: str, input_dim: int, encoder_seed: int,
                          connector_seed: int) -> "MultimodalModel":
        """Return a copy with a fresh encoder and connector for ``modality_id``.

        The encoder depends only on ``(encoder_seed, modality_id)`` so that every
        model that sees a modality sees the same frozen feature extractor.
        """
        if modality_id in self.modalities:
            raise RegistrationError(f"modality {modality_id!r} already registered")
        if "." in modality_id or not modality_id:
            raise RegistrationError(f"invalid modality id {modality_id!r}")
        if input_dim <= 0:
            raise DimensionError("input_dim must be positive")
        d = self.dims
        out = self.copy()
        erng = rng_for(encoder_seed, "encoder", modality_id)
        pre = f"encoder.{modality_id}"
        out.params.add(f"{pre}.w1", glorot_uniform(erng, input_dim, d.encoder_hidden))
        out.params.add(f"{pre}.b1", erng.uniform(-0.1, 0.1, d.encoder_hidden).astype(DTYPE))
        out.params.add(f"{pre}.w2", glorot_uniform(erng, d.encoder_hidden, d.feat_dim))
        out.params.add(f"{pre}.b2", np.zeros(d.feat_dim, DTYPE))
        crng = rng_for(connector_seed, "connector", modality_id)
        out.params.add(f"connector.{modality_id}.w", glorot_uniform(crng, d.feat_dim, d.embed_dim))
        out.params.add(f"connector.{modality_id}.b", np.zeros(d.embed_dim, DTYPE))
        out.modalities[modality_id] = input_dim
        return out

    def fit_encoder(self, modality_id: str, x, target, ridge: float = 1e-4) -> "MultimodalModel":
        """Return a copy whose encoder readout (``w2``, ``b2``) is the ridge fit of ``target``.

        The hidden layer keeps its random weights; the readout is solved in
        closed form in float64, which makes the encoder a deterministic
        function of its seed and the corpus.
        """
        self._check_route(modality_id, x)
        pre = f"encoder.{modality_id}"
        x = np.asarray(x, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        if target.shape != (len(x), self.dims.feat_dim):
            raise DimensionError(f"target must be [{len(x)}, {self.dims.feat_dim}], got {target.shape}")
        h = np.maximum(x @ self.params[f"{pre}.w1"].astype(np.float64) + self.params[f"{pre}.b1"], 0.0)
        h = np.hstack([h, np.ones((len(h), 1))])
        gram = h.T @ h
        gram[np.diag_indices_from(gram)] += ridge * len(h)
        sol = np.linalg.solve(gram, h.T @ target)
        out = self.copy()
        out.params[f"{pre}.w2"] = sol[:-1].astype(out.params.dtype)
        out.params[f"{pre}.b2"] = sol[-1].astype(out.params.dtype)
        return out

    @classmethod
    def from_params(cls, dims: ModelDims, params: ParameterSet,
                    modalities: dict[str, int]) -> "MultimodalModel":
        model = cls(dims, params, dict(modalities))
        expected = set(model.fresh(dims, 0).params.names())
        for m in modalities:
            expected |= {f"encoder.{m}.{k}" for k in ("w1", "b1", "w2", "b2")}
            expected |= {f"connector.{m}.{k}" for k in ("w", "b")}
        if expected != set(params.names()):
            diff = sorted(expected ^ set(params.names()))
            raise RegistrationError(f"parameter names do not match the declared layout: {diff[:4]}")
        return model

    # -- namespaces -----------------------------------------------------------

    def names_for(self, tags: Iterable[ComponentTag]) -> list[str]:
        tags = list(tags)
        return [n for n in self.params.names() if any(t.matches(tag_of(n)) for t in tags)]

    def agnostic_names(self) -> list[str]:
        return self.names_for([Backbone(), Head()])

    def specific_names(self) -> list[str]:
        return self.names_for([Encoder(), Connector()])

    # -- forward --------------------------------------------------------------

    def _check_route(self, modality_id: str, x) -> None:
        if modality_id not in self.modalities:
            raise RoutingError(f"modality {modality_id!r} is not registered")
        if np.ndim(x) != 2 or np.shape(x)[1] != self.modalities[modality_id]:
            raise DimensionError(
                f"{modality_id}: expected [batch, {self.modalities[modality_id]}], got {np.shape(x)}")

    def encode(self, g: Graph, modality_id: str, x: Node) -> Node:
        pre = f"encoder.{modality_id}"
        h = g.relu(g.linear(x, g.param(f"{pre}.w1"), g.param(f"{pre}.b1")))
        return g.linear(h, g.param(f"{pre}.w2"), g.param(f"{pre}.b2"))

    def connect(self, g: Graph, modality_id: str, f: Node) -> Node:
        pre = f"connector.{modality_id}"
        return g.linear(f, g.param(f"{pre}.w"), g.param(f"{pre}.b"))

    def backbone_hidden(self, g: Graph, e: Node) -> Node:
        h = g.layer_norm(e, g.param("backbone.ln.g"), g.param("backbone.ln.b"))
        return g.tanh(g.linear(h, g.param("backbone.w1"), g.param("backbone.b1")))

    def backbone(self, g: Graph, e: Node) -> Node:
        h = self.backbone_hidden(g, e)
        return g.tanh(g.linear(h, g.param("backbone.w2"), g.param("backbone.b2")))

    def head(self, g: Graph, task_id: str, z: Node) -> Node:
        if f"head.{task_id}.w" not in self.params:
            raise RoutingError(f"unknown task {task_id!r}")
        return g.linear(z, g.param(f"head.{task_id}.w"), g.param(f"head.{task_id}.b"))

    def forward(self, g: Graph, modality_id: str, x, task_id: str) -> Node:
        self._check_route(modality_id, x)
        f = self.encode(g, modality_id, g.const(np.asarray(x, dtype=self.params.dtype)))
        return self.head(g, task_id, self.backbone(g, self.connect(g, modality_id, f)))

    def logits(self, modality_id: str, x, task_id: str) -> np.ndarray:
        """Inference-only forward; no parameter receives a gradient."""
        return self.forward(Graph(self.params), modality_id, x, task_id).value

    def features(self, modality_id: str, x, tap: str = "connector") -> np.ndarray:
        self._check_route(modality_id, x)
        g = Graph(self.params)
        e = self.connect(g, modality_id,
                         self.encode(g, modality_id, g.const(np.asarray(x, dtype=self.params.dtype))))
        if tap == "connector":
            return e.value
        if tap == "backbone":
            return self.backbone(g, e).value
        raise ValueError(f"unknown probe tap {tap!r}")


@dataclass(frozen=True)
class FeatureProbe:
    modality_id: str
    mean: np.ndarray
    var: np.ndarray
    count: int
    tap: str = "connector"

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("probe sample count must be positive")


def snapshot_probe(model: MultimodalModel, modality_id: str, probe_x,
                   tap: str = "connector") -> FeatureProbe:
    """Per-dimension mean and population variance of features over ``probe_x``."""
    if len(probe_x) == 0:
        raise ValueError("empty probe set")
    feats = model.features(modality_id, probe_x, tap=tap).astype(np.float64)
    mu = feats.mean(axis=0)
    var = ((feats - mu) ** 2).mean(axis=0)
    return FeatureProbe(modality_id, mu, var, len(feats), tap)


def probe_drift(a: FeatureProbe, b: FeatureProbe, eps: float = 1e-6) -> float:
    """Mean over dimensions of (mu_a - mu_b)^2 / (var_a + var_b + eps); symmetric, zero on identity."""
    if a.modality_id != b.modality_id:
        raise ValueError(f"probes of different modalities: {a.modality_id} vs {b.modality_id}")
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"probe dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    d = a.mean - b.mean
    return float(np.mean(d * d / (a.var + b.var + eps)))
