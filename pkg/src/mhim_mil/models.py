"""Attention MIL aggregators: gated attention (AB-MIL style) and a small exact MSA.

Both models share the same three stages::

    X (N x D_in) --proj+ReLU--> Z (N x D) --aggregate--> F (1 x D) --cls--> logit

and expose the per-instance attention used by the masking strategies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import EmptyBag, IncompatibleCheckpoint, LayerOutOfRange, LengthMismatch, ShapeMismatch
from .tensor import ParameterSet, Tensor

PROJ_PREFIX = "proj_"


@dataclass
class AttentionScores:
    """``values`` is H_eff x N; each row is a distribution over instances."""

    values: np.ndarray
    layer_tag: str = "gated"

    @property
    def n_heads(self) -> int:
        return self.values.shape[0]

    @property
    def n_instances(self) -> int:
        return self.values.shape[1]

    def head_mean(self) -> np.ndarray:
        return self.values.mean(axis=0)


@dataclass
class ModelOutput:
    logit: Tensor
    probability: Tensor
    embedding: Tensor
    attention: AttentionScores
    layer_attention: list = field(default_factory=list)


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _as_features(x) -> Tensor:
    x = T.as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise EmptyBag(f"bag must be a non-empty N x D matrix, got shape {x.shape}")
    return x


def project(x, params: ParameterSet) -> Tensor:
    """Projection head: ``relu(x @ proj_W + proj_b)``."""
    x = _as_features(x)
    return T.relu(T.add_row(T.matmul(x, params["proj_W"]), params["proj_b"]))


def classify(embedding: Tensor, model) -> tuple[Tensor, Tensor]:
    p = model.params
    logit = T.add(T.matmul(embedding, p["cls_W"]), p["cls_b"])
    return logit, T.sigmoid(logit)


def attention_pool(z: Tensor, attention) -> Tensor:
    """Bag embedding ``sum_i a_i z_i`` for a 1 x N attention row."""
    a = attention.values if isinstance(attention, AttentionScores) else attention
    a = T.as_tensor(a)
    z = T.as_tensor(z)
    if a.data.ndim == 1:
        a = Tensor(a.data[None, :])
    if a.shape != (1, z.shape[0]):
        raise LengthMismatch(f"attention shape {a.shape} does not match {z.shape[0]} instances")
    return T.matmul(a, z)


# ---------------------------------------------------------------- gated attention

class GatedAttentionModel:
    """Gated attention MIL: ``a = softmax_i(w^T (tanh(V z_i) * sigmoid(U z_i)))``."""

    kind = "gated"

    def __init__(self, d_in: int = 64, dim: int = 32, attn_dim: int = 32, seed=0, params=None):
        self.d_in, self.dim, self.attn_dim = d_in, dim, attn_dim
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed) -> ParameterSet:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        d_in, d, dh = self.d_in, self.dim, self.attn_dim
        return ParameterSet({
            "proj_W": _uniform(rng, d_in, (d_in, d)),
            "proj_b": _uniform(rng, d_in, (1, d)),
            "attn_V": _uniform(rng, d, (d, dh)),
            "attn_U": _uniform(rng, d, (d, dh)),
            "attn_w": _uniform(rng, dh, (dh, 1)),
            "cls_W": _uniform(rng, d, (d, 1)),
            "cls_b": _uniform(rng, d, (1, 1)),
        })

    def with_params(self, params: ParameterSet) -> "GatedAttentionModel":
        return GatedAttentionModel(self.d_in, self.dim, self.attn_dim, params=params)

    def attention_logits(self, z: Tensor) -> Tensor:
        p = self.params
        gate = T.mul(T.tanh(T.matmul(z, p["attn_V"])), T.sigmoid(T.matmul(z, p["attn_U"])))
        return T.transpose(T.matmul(gate, p["attn_w"]))

    def forward(self, x) -> ModelOutput:
        z = project(x, self.params)
        a = T.row_softmax(self.attention_logits(z))
        emb = T.matmul(a, z)
        logit, prob = classify(emb, self)
        return ModelOutput(logit, prob, emb, AttentionScores(a.data, "gated"))


def gated_attention_scores(z, model: GatedAttentionModel) -> AttentionScores:
    z = _as_features(z)
    a = T.row_softmax(model.attention_logits(z))
    return AttentionScores(a.data, "gated")


# ---------------------------------------------------------------- multi-head self-attention

def _msa_name(layer: int, head: int | None, what: str) -> str:
    if head is None:
        return f"msa.l{layer}.{what}"
    return f"msa.l{layer}.h{head}.{what}"


class MsaModel:
    """Class-token transformer aggregator with exact softmax attention.

    Each layer is ``X + concat_h(softmax(Q_h K_h^T / sqrt(D/H)) V_h) W_O``;
    no feed-forward sublayer, no normalisation, no positional encoding.
    """

    kind = "msa"

    def __init__(self, d_in: int = 64, dim: int = 32, n_heads: int = 2, n_layers: int = 2,
                 seed=0, params=None):
        if dim % n_heads:
            raise ShapeMismatch(f"dim {dim} not divisible by n_heads {n_heads}")
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        self.d_in, self.dim, self.n_heads, self.n_layers = d_in, dim, n_heads, n_layers
        self.params = params if params is not None else self._init_params(seed)

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    def _init_params(self, seed) -> ParameterSet:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        d, dh = self.dim, self.head_dim
        ps = ParameterSet()
        ps.add("proj_W", _uniform(rng, self.d_in, (self.d_in, d)))
        ps.add("proj_b", _uniform(rng, self.d_in, (1, d)))
        ps.add("class_token", np.zeros((1, d)))
        for layer in range(self.n_layers):
            for head in range(self.n_heads):
                for w in ("W_Q", "W_K", "W_V"):
                    ps.add(_msa_name(layer, head, w), _uniform(rng, d, (d, dh)))
            ps.add(_msa_name(layer, None, "W_O"), _uniform(rng, d, (d, d)))
        ps.add("cls_W", _uniform(rng, d, (d, 1)))
        ps.add("cls_b", _uniform(rng, d, (1, 1)))
        return ps

    def with_params(self, params: ParameterSet) -> "MsaModel":
        return MsaModel(self.d_in, self.dim, self.n_heads, self.n_layers, params=params)

    def forward(self, x) -> ModelOutput:
        z = project(x, self.params)
        emb, layer_attn = msa_forward(z, self)
        logit, prob = classify(emb, self)
        att = extract_teacher_attention(layer_attn, "msa", 0)
        return ModelOutput(logit, prob, emb, att, layer_attn)


def msa_forward(z, model: MsaModel) -> tuple[Tensor, list]:
    """Returns the class-token embedding and, per layer, an H x (N+1) x (N+1) array."""
    z = _as_features(z)
    p = model.params
    scale = 1.0 / math.sqrt(model.head_dim)
    h = T.concat_rows([p["class_token"], z])
    per_layer = []
    for layer in range(model.n_layers):
        heads, maps = [], []
        for head in range(model.n_heads):
            q = T.matmul(h, p[_msa_name(layer, head, "W_Q")])
            k = T.matmul(h, p[_msa_name(layer, head, "W_K")])
            v = T.matmul(h, p[_msa_name(layer, head, "W_V")])
            a = T.row_softmax(T.scale(T.matmul(q, T.transpose(k)), scale))
            maps.append(a.data)
            heads.append(T.matmul(a, v))
        mixed = T.matmul(T.concat_cols(heads), p[_msa_name(layer, None, "W_O")])
        h = T.add(h, mixed)
        per_layer.append(np.stack(maps))
    return T.rows(h, 0, 1), per_layer


def extract_teacher_attention(source, model_kind: str, layer_choice=0) -> AttentionScores:
    """Per-instance attention for mining.

    ``source`` is a :class:`ModelOutput` or, for MSA, the per-layer attention
    list.  For MSA the class-token query row of ``layer_choice`` (an index,
    or ``"first"``/``"last"``) is taken per head, the class-token column is
    dropped and each row renormalised.
    """
    if model_kind == "gated":
        att = source.attention if isinstance(source, ModelOutput) else source
        return AttentionScores(np.array(att.values, dtype=np.float64), "gated")
    layers = source.layer_attention if isinstance(source, ModelOutput) else source
    if layer_choice == "first":
        layer_choice = 0
    elif layer_choice == "last":
        layer_choice = len(layers) - 1
    if not 0 <= layer_choice < len(layers):
        raise LayerOutOfRange(f"layer {layer_choice} not in [0, {len(layers)})")
    row = np.asarray(layers[layer_choice])[:, 0, 1:]
    return AttentionScores(row / row.sum(axis=1, keepdims=True), f"layer{layer_choice}")


# ---------------------------------------------------------------- construction & checkpoints

def build_model(kind: str, d_in: int, dim: int = 32, attn_dim: int = 32, n_heads: int = 2,
                n_layers: int = 2, seed=0):
    if kind == "gated":
        return GatedAttentionModel(d_in, dim, attn_dim, seed=seed)
    if kind == "msa":
        return MsaModel(d_in, dim, n_heads, n_layers, seed=seed)
    raise ValueError(f"unknown model kind {kind!r}")


def save_checkpoint(params: ParameterSet, path) -> None:
    """One line per parameter: ``name rows x cols v1 v2 ...`` (repr floats)."""
    lines = []
    for name in params:
        data = params[name].data
        shape = "x".join(str(s) for s in data.shape) or "scalar"
        values = " ".join(repr(float(v)) for v in data.ravel())
        lines.append(f"{name} {shape} {values}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> ParameterSet:
    ps = ParameterSet()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) < 2:
            raise IncompatibleCheckpoint(f"{path}:{lineno}: truncated line")
        name, shape_s = fields[0], fields[1]
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
        try:
            values = np.array([float(v) for v in fields[2:]])
        except ValueError as exc:
            raise IncompatibleCheckpoint(f"{path}:{lineno}: {exc}") from None
        if values.size != int(np.prod(shape)):
            raise IncompatibleCheckpoint(f"{path}:{lineno}: {values.size} values for shape {shape}")
        ps.add(name, values.reshape(shape))
    return ps


def model_from_checkpoint(template, path):
    """Wrap checkpointed parameters in a model shaped like ``template``."""
    params = load_checkpoint(path)
    if not template.params.compatible(params):
        raise IncompatibleCheckpoint(f"{path} does not match a {template.kind} model of this size")
    return template.with_params(params)
