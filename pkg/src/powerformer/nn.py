"""Powerformer Q-network, its ablations, and the Concat / soft-attention baselines.

Layout conventions (node-major, batch first):

* node features ``H``: ``(B, n, 4)`` with columns (P, Q, Vm, Va)
* factor streams: ``(k, B, n, d)``; per-factor weights are stacked along a
  leading ``k`` axis, so factor ``t`` owns slice ``[t]`` of each parameter
* section encoding ``z``: ``(B, zdim)``
* query: ``(B, d)``; attention scores ``(k, B, n, 1)``, softmax over ``k``
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .errors import ShapeMismatch

KINDS = ("powerformer", "concat", "soft_attention", "powerformer_E", "powerformer_S", "powerformer_M")


@dataclass
class PowerformerConfig:
    n_actions: int
    zdim: int
    n_nodes: int = 0  # only the concat baseline depends on it
    kind: str = "powerformer"
    layers: int = 2
    d: int = 64
    k: int = 4
    query_hidden: tuple | None = None  # default (128, d)
    gin_eps: float = 0.0
    value_hidden: tuple = (128, 128)
    adv_hidden: int = 128
    concat_hidden: tuple = (128, 64)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}; choose from {KINDS}")
        if self.d <= 0 or self.layers < 1 or self.k < 1:
            raise ValueError("need d > 0, layers >= 1, k >= 1")
        if self.query_hidden is None:
            self.query_hidden = (128, self.d)
        self.query_hidden = tuple(self.query_hidden)
        self.value_hidden = tuple(self.value_hidden)
        self.concat_hidden = tuple(self.concat_hidden)
        if self.query_hidden[-1] != self.d:
            raise ValueError("the query encoder must end at width d")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- building blocks ------------------------------------------------------------------


def gin_operator(graph, eps=0.0):
    """Sparse ``A + (1 + eps) I`` used by the GIN sum aggregation."""
    return ad.SparseOperator(graph.adjacency + (1.0 + eps) * sp.identity(graph.n, format="csr"))


def affine(x, w, b):
    return ad.matmul(x, w) + b


def mlp(x, layers):
    """``layers`` is a list of ``(w, b)``; ReLU between consecutive affines."""
    for i, (w, b) in enumerate(layers):
        x = affine(x, w, b)
        if i < len(layers) - 1:
            x = ad.relu(x)
    return x


def grouped_affine(x, w, b):
    return ad.grouped_matmul(x, w) + b


def factorize_and_embed(H, w, b):
    """Lift each feature column into its own ``d``-wide stream.

    ``H (B, n, 4)``; ``w (4, 1, d)``, ``b (4, 1, 1, d)``. Returns
    ``(4, B, n, d)`` where stream ``t`` is ``H[..., t] * w[t] + b[t]``.
    """
    H = ad.as_tensor(H)
    if H.ndim != 3 or H.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"factorize_and_embed: H {H.shape} needs (B, n, {w.shape[0]})")
    cols = ad.reshape(ad.moveaxis(H, -1, 0), (H.shape[2], H.shape[0], H.shape[1], 1))
    return grouped_affine(cols, w, b)


def coupled_embed(H, w, b):
    """Embed the raw 4-wide node features into ``k`` streams (no factorization).

    ``w (4, k * d)``, ``b (k, 1, 1, d)``: every stream sees every feature column.
    """
    H = ad.as_tensor(H)
    k, d = b.shape[0], b.shape[-1]
    if H.ndim != 3 or H.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"coupled_embed: H {H.shape} vs weights {w.shape}")
    x = ad.reshape(ad.matmul(H, w), H.shape[:2] + (k, d))
    return ad.moveaxis(x, 2, 0) + b


def gin_layer(X, S, w1, b1, w2, b2):
    """GIN update per node: ``MLP((1+eps) h_v + sum_{u in N(v)} h_u)``.

    ``S`` is :func:`gin_operator`; ``X (k, ..., n, d)`` with per-stream MLP
    weights ``w (k, d, d)``, ``b (k, 1, 1, d)``.
    """
    X = ad.as_tensor(X)
    if X.shape[-2] != S.shape[0]:
        raise ShapeMismatch(f"gin_layer: features {X.shape} vs graph with {S.shape[0]} nodes")
    return gin_mlp(ad.spmm(S, X), w1, b1, w2, b2)


def gin_mlp(agg, w1, b1, w2, b2):
    """The GIN MLP half, for callers that share one aggregation between roles."""
    return grouped_affine(ad.relu(grouped_affine(agg, w1, b1)), w2, b2)


def section_scores(K, Q):
    """Unnormalized section-adaptive scores ``K_t . Q / sqrt(d)``: ``(k, B, n, 1)``."""
    d = K.shape[-1]
    if Q.ndim != 2 or Q.shape[-1] != d or Q.shape[0] != K.shape[1]:
        raise ShapeMismatch(f"section_scores: keys {K.shape} vs query {Q.shape}")
    q = ad.reshape(Q, (1, Q.shape[0], 1, d))
    return ad.scale(ad.sum(ad.mul(K, q), axis=-1, keepdims=True), 1.0 / math.sqrt(d))


def mfsa_combine(K, V, Q):
    """Factor-softmax attention and fusion.

    Returns ``(fused (B, n, d), next_streams (k, B, n, d), weights (k, B, n, 1))``.
    """
    if K.shape != V.shape:
        raise ShapeMismatch(f"mfsa: keys {K.shape} vs values {V.shape}")
    weights = ad.softmax(section_scores(K, Q), axis=0)
    streams = ad.mul(V, weights)
    return ad.sum(streams, axis=0), streams, weights


def readout(fused):
    return ad.mean_pool(fused)


def dueling_combine(value, adv):
    """``Q = V + A - mean(A)``; ``value (B, 1)``, ``adv (B, A)``."""
    return value + adv - ad.mean(adv, axis=-1, keepdims=True)


# -- the network ---------------------------------------------------------------


class QNetwork:
    """Embedding network (one of :data:`KINDS`) followed by a dueling Q head."""

    def __init__(self, config):
        self.config = config
        self.store = ParameterStore()
        self._ops = {}
        rng = np.random.default_rng(config.seed)
        self._build(rng)

    # parameters ------------------------------------------------------------

    def _stacked_affine(self, rng, name, k, fan_in, fan_out):
        w = np.stack([ad.glorot(rng, fan_in, fan_out) for _ in range(k)])
        return self.store.add(f"{name}.w", w), self.store.add(f"{name}.b", np.zeros((k, 1, 1, fan_out)))

    def _coupled(self, rng, name, k, d):
        w = np.concatenate([ad.glorot(rng, 4, d) for _ in range(k)], axis=1)
        return self.store.add(f"{name}.w", w), self.store.add(f"{name}.b", np.zeros((k, 1, 1, d)))

    def _gin(self, rng, name, k, d):
        return self._stacked_affine(rng, f"{name}.mlp0", k, d, d) + self._stacked_affine(rng, f"{name}.mlp1", k, d, d)

    def _chain(self, rng, name, widths):
        return [self.store.affine(rng, f"{name}.{i}", a, b) for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]

    def _build(self, rng):
        c = self.config
        kind = c.kind
        self.p = {}
        if kind == "concat":
            self.p["concat"] = self._chain(rng, "concat", (c.n_nodes * 4 + c.zdim,) + c.concat_hidden)
            emb = c.concat_hidden[-1]
        else:
            emb = c.d
            if kind in ("powerformer", "powerformer_S", "soft_attention"):
                self.p["embed"] = self._stacked_affine(rng, "embed", c.k, 1, c.d)
            elif kind == "powerformer_M":
                self.p["embed"] = self._coupled(rng, "embed", c.k, c.d)
            else:  # powerformer_E
                self.p["embed"] = self._coupled(rng, "embed", 1, c.d)
            streams = 1 if kind == "powerformer_E" else c.k
            for layer in range(c.layers):
                if kind in ("powerformer", "powerformer_M"):
                    self.p[f"key{layer}"] = self._gin(rng, f"layer{layer}.key", streams, c.d)
                self.p[f"value{layer}"] = self._gin(rng, f"layer{layer}.value", streams, c.d)
            if kind in ("powerformer", "powerformer_M"):
                self.p["query0"] = self._chain(rng, "query0", (c.zdim,) + c.query_hidden)
                for layer in range(1, c.layers):
                    self.p[f"query{layer}"] = self._chain(rng, f"query{layer}", (c.d, c.d, c.d))
            if kind == "soft_attention":
                self.p["mix"] = [self.store.affine(rng, "mix", c.zdim, c.k)]
        self.p["value_head"] = self._chain(rng, "head.value", (emb,) + c.value_hidden + (1,))
        self.p["adv_head"] = self._chain(rng, "head.adv", (emb, c.adv_hidden, c.n_actions))
        self.embedding_dim = emb

    # forward -----------------------------------------------------------------

    def operator(self, graph):
        key = id(graph)
        hit = self._ops.get(key)
        if hit is None or hit[0] is not graph:
            if len(self._ops) > 8:
                self._ops.clear()
            hit = self._ops[key] = (graph, gin_operator(graph, self.config.gin_eps))
        return hit[1]

    def query(self, z):
        """Per-layer section queries ``[(B, d), ...]``."""
        c = self.config
        q = mlp(z, self.p["query0"])
        out = [q]
        for layer in range(1, c.layers):
            q = mlp(q, self.p[f"query{layer}"])
            out.append(q)
        return out

    def embed(self, H, z, graph, trace=None):
        """Graph-level embedding ``(B, emb)``.

        ``trace``, when a dict, receives the per-layer factor attention
        weights as ``(B, n, k)`` arrays under ``"attention"``.
        """
        c = self.config
        H = ad.as_tensor(H)
        z = ad.as_tensor(z)
        if H.ndim != 3 or H.shape[-1] != 4:
            raise ShapeMismatch(f"node features must be (B, n, 4), got {H.shape}")
        if z.shape != (H.shape[0], c.zdim):
            raise ShapeMismatch(f"section encoding must be (B, {c.zdim}), got {z.shape}")
        kind = c.kind
        if kind == "concat":
            flat = ad.reshape(H, (H.shape[0], H.shape[1] * 4))
            if flat.shape[1] != c.n_nodes * 4:
                raise ShapeMismatch(f"concat baseline built for {c.n_nodes} nodes, got {H.shape[1]}")
            return mlp(ad.concat([flat, z], axis=-1), self.p["concat"])

        S = self.operator(graph)
        if kind in ("powerformer", "powerformer_S", "soft_attention"):
            X = factorize_and_embed(H, *self.p["embed"])
        else:
            X = coupled_embed(H, *self.p["embed"])

        if kind in ("powerformer", "powerformer_M"):
            queries = self.query(z)
            fused = None
            for layer in range(c.layers):
                agg = ad.spmm(S, X)
                K = gin_mlp(agg, *self.p[f"key{layer}"])
                V = gin_mlp(agg, *self.p[f"value{layer}"])
                fused, X, w = mfsa_combine(K, V, queries[layer])
                if trace is not None:
                    trace.setdefault("attention", []).append(np.moveaxis(w.data[..., 0], 0, -1))
            return readout(fused)

        for layer in range(c.layers):
            X = gin_layer(X, S, *self.p[f"value{layer}"])
        if kind == "soft_attention":
            pooled = ad.mean_pool(X)  # (k, B, d)
            mix = ad.softmax(mlp(z, self.p["mix"]), axis=-1)  # (B, k)
            if trace is not None:
                trace["mix"] = mix.data
            w = ad.reshape(ad.transpose(mix), (c.k, mix.shape[0], 1))
            return ad.sum(ad.mul(pooled, w), axis=0)
        # powerformer_E has a single stream; powerformer_S averages the value streams
        return readout(ad.mean(X, axis=0))

    def head(self, emb):
        value = mlp(emb, self.p["value_head"])
        adv = mlp(emb, self.p["adv_head"])
        return dueling_combine(value, adv)

    def forward(self, H, z, graph):
        """Q-values ``(B, n_actions)``."""
        return self.head(self.embed(H, z, graph))

    __call__ = forward

    def q_values(self, H, z, graph):
        """Numpy Q-values for a batch, no gradient bookkeeping kept."""
        return self.forward(np.asarray(H), np.asarray(z), graph).data

    def copy(self):
        other = QNetwork(self.config)
        other.store.copy_from(self.store)
        return other


def dueling_q(emb, value_layers, adv_layers):
    """Stand-alone dueling head over an embedding ``(B, d)``."""
    return dueling_combine(mlp(emb, value_layers), mlp(emb, adv_layers))
