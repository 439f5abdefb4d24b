"""Miniature hybrid (conv + attention) and ViT classifiers.

A model is a :class:`ModuleGraph`: a flat list of :class:`LayerNode` objects
run in order.  Residual branches are delimited by ``residual_begin`` /
``residual_end`` nodes, which push and pop the running activation.

The hybrid layout follows the EfficientFormer split: a strided conv stem,
up to three stages of Meta4D blocks on N x C x H x W feature maps, a flatten
to an (H*W) x C token sequence, Meta3D transformer blocks, then mean pooling
and a linear head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LAYER_KINDS = (
    "conv",
    "linear",
    "attention",
    "layer_norm",
    "batch_norm_frozen",
    "pool",
    "activation",
    "flatten_spatial",
    "pos_embed",
    "dropout",
    "residual_begin",
    "residual_end",
    "classifier_head",
)

ATTENTION_MATRICES = ("q", "k", "v", "proj")


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 32
    widths: tuple[int, int, int, int] = (16, 32, 64, 96)
    blocks: tuple[int, int, int, int] = (1, 1, 1, 2)
    heads: int = 4
    d_k: int = 24
    d_v: int = 24
    mlp_ratio: int = 2
    num_classes: int = 10
    in_channels: int = 3
    patch_size: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if len(self.widths) != 4 or len(self.blocks) != 4:
            raise ValueError("widths and blocks need one entry per stage (4)")
        if min(self.widths) < 1 or min(self.blocks) < 0:
            raise ValueError("widths must be positive and block counts non-negative")
        if min(self.heads, self.d_k, self.d_v, self.mlp_ratio, self.num_classes, self.resolution) < 1:
            raise ValueError("heads, head dims, mlp ratio, classes and resolution must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        for k in ("widths", "blocks"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)


@dataclass
class LayerNode:
    kind: str
    name: str
    params: dict[str, Tensor] = field(default_factory=dict)
    hyper: dict[str, Any] = field(default_factory=dict)
    stage: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def param_name(self, local: str) -> str:
        return f"{self.name}.{local}"


@dataclass
class ModuleGraph:
    nodes: list[LayerNode]
    config: ModelConfig
    arch: str = "hybrid"
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for name in self._iter_param_names():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
        flattens = sum(n.kind == "flatten_spatial" for n in self.nodes)
        if flattens != 1:
            raise ValueError(f"graph needs exactly one flatten_spatial node, found {flattens}")

    def _iter_param_names(self):
        for node in self.nodes:
            for local in node.params:
                yield node.param_name(local)

    def parameters(self) -> dict[str, Tensor]:
        return {node.param_name(k): t for node in self.nodes for k, t in node.params.items()}

    def locate(self, name: str) -> tuple[LayerNode, str]:
        node_name, _, local = name.rpartition(".")
        for node in self.nodes:
            if node.name == node_name and local in node.params:
                return node, local
        raise KeyError(name)

    def set_parameter(self, name: str, value: Tensor) -> None:
        node, local = self.locate(name)
        if value.shape != node.params[local].shape:
            raise ShapeError(f"{name}: expected shape {node.params[local].shape}, got {value.shape}")
        node.params[local] = value

    def find(self, kind: str) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind == kind]

    @property
    def head(self) -> LayerNode:
        return self.find("classifier_head")[0]

    def clone(self) -> "ModuleGraph":
        """Copy the node structure; tensors are shared since they are immutable."""
        nodes = [replace(n, params=dict(n.params), hyper=dict(n.hyper)) for n in self.nodes]
        return ModuleGraph(nodes, self.config, self.arch, dict(self.masks))

    def astype(self, dtype) -> "ModuleGraph":
        g = self.clone()
        for n in g.nodes:
            n.params = {k: t.astype(dtype) for k, t in n.params.items()}
        return g

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def input_shape(self, batch: int = 1) -> tuple[int, int, int, int]:
        c = self.config
        return (batch, c.in_channels, c.resolution, c.resolution)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


class _Init:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def conv(self, p: int, q: int, k: int) -> Tensor:
        std = math.sqrt(2.0 / (q * k * k))
        return Tensor(self.rng.normal(0.0, std, (p, q, k, k)).astype(np.float32))

    def linear(self, p: int, q: int) -> Tensor:
        bound = math.sqrt(6.0 / (p + q))
        return Tensor(self.rng.uniform(-bound, bound, (p, q)).astype(np.float32))

    def normal(self, shape, std: float) -> Tensor:
        return Tensor(self.rng.normal(0.0, std, shape).astype(np.float32))

    @staticmethod
    def zeros(*shape) -> Tensor:
        return Tensor(np.zeros(shape, dtype=np.float32))

    @staticmethod
    def ones(*shape) -> Tensor:
        return Tensor(np.ones(shape, dtype=np.float32))


def _conv(init, name, q, p, k, stride, padding, stage) -> LayerNode:
    return LayerNode(
        "conv",
        name,
        {"weight": init.conv(p, q, k), "bias": init.zeros(p)},
        {"stride": stride, "padding": padding, "groups": 1, "k": k, "in": q, "out": p},
        stage,
    )


def _affine(init, name, c, stage) -> LayerNode:
    return LayerNode("batch_norm_frozen", name, {"scale": init.ones(c), "shift": init.zeros(c)}, {}, stage)


def _meta4d(init, prefix, width, ratio, stage) -> list[LayerNode]:
    hidden = width * ratio
    return [
        LayerNode("residual_begin", f"{prefix}.res0", stage=stage),
        _affine(init, f"{prefix}.norm1", width, stage),
        LayerNode("pool", f"{prefix}.mixer", hyper={"mode": "avg2d", "k": 3, "stride": 1, "padding": 1}, stage=stage),
        LayerNode("residual_end", f"{prefix}.res0_end", stage=stage),
        LayerNode("residual_begin", f"{prefix}.res1", stage=stage),
        _affine(init, f"{prefix}.norm2", width, stage),
        _conv(init, f"{prefix}.mlp.fc1", width, hidden, 1, 1, 0, stage),
        LayerNode("activation", f"{prefix}.mlp.act", hyper={"fn": "gelu"}, stage=stage),
        _conv(init, f"{prefix}.mlp.fc2", hidden, width, 1, 1, 0, stage),
        LayerNode("residual_end", f"{prefix}.res1_end", stage=stage),
    ]


def attention_node(name: str, d: int, heads: int, d_k: int, d_v: int, init: _Init | None = None, stage: str = "") -> LayerNode:
    init = init or _Init(0)
    params = {
        "q_weight": init.linear(heads * d_k, d),
        "q_bias": init.zeros(heads * d_k),
        "k_weight": init.linear(heads * d_k, d),
        "k_bias": init.zeros(heads * d_k),
        "v_weight": init.linear(heads * d_v, d),
        "v_bias": init.zeros(heads * d_v),
        "proj_weight": init.linear(d, heads * d_v),
        "proj_bias": init.zeros(d),
    }
    return LayerNode("attention", name, params, {"heads": heads, "d_k": d_k, "d_v": d_v, "d": d}, stage)


def _linear(init, name, q, p, stage) -> LayerNode:
    return LayerNode("linear", name, {"weight": init.linear(p, q), "bias": init.zeros(p)}, {"in": q, "out": p}, stage)


def _layer_norm(init, name, d, stage) -> LayerNode:
    return LayerNode("layer_norm", name, {"weight": init.ones(d), "bias": init.zeros(d)}, {"eps": 1e-5}, stage)


def _meta3d(init, prefix, cfg: ModelConfig, d: int, stage: str) -> list[LayerNode]:
    hidden = d * cfg.mlp_ratio
    return [
        LayerNode("residual_begin", f"{prefix}.res0", stage=stage),
        _layer_norm(init, f"{prefix}.norm1", d, stage),
        attention_node(f"{prefix}.attn", d, cfg.heads, cfg.d_k, cfg.d_v, init, stage),
        LayerNode("residual_end", f"{prefix}.res0_end", stage=stage),
        LayerNode("residual_begin", f"{prefix}.res1", stage=stage),
        _layer_norm(init, f"{prefix}.norm2", d, stage),
        _linear(init, f"{prefix}.mlp.fc1", d, hidden, stage),
        LayerNode("activation", f"{prefix}.mlp.act", hyper={"fn": "gelu"}, stage=stage),
        _linear(init, f"{prefix}.mlp.fc2", hidden, d, stage),
        LayerNode("residual_end", f"{prefix}.res1_end", stage=stage),
    ]


def _transformer_tail(init, cfg: ModelConfig, d: int, tokens: int, depth: int, stage: str) -> list[LayerNode]:
    nodes = [LayerNode("flatten_spatial", "flatten", stage=stage)]
    if depth > 0:
        nodes.append(LayerNode("pos_embed", "pos_embed", {"weight": init.normal((tokens, d), 0.02)}, stage=stage))
        for b in range(depth):
            nodes += _meta3d(init, f"{stage}.{b}", cfg, d, stage)
        nodes.append(_layer_norm(init, "norm", d, stage))
    nodes.append(LayerNode("pool", "token_pool", hyper={"mode": "token_mean"}, stage="head"))
    if cfg.dropout > 0:
        nodes.append(LayerNode("dropout", "head_drop", hyper={"rate": cfg.dropout}, stage="head"))
    nodes.append(
        LayerNode(
            "classifier_head",
            "head",
            {"weight": init.normal((cfg.num_classes, d), 0.02), "bias": init.zeros(cfg.num_classes)},
            {"in": d, "out": cfg.num_classes},
            "head",
        )
    )
    return nodes


def hybrid_stride(cfg: ModelConfig) -> int:
    conv_stages = [s for s in range(3) if cfg.blocks[s] > 0]
    return 4 * 2 ** max(len(conv_stages) - 1, 0)


def build_mini_hybrid(config: ModelConfig | None = None, seed: int = 0) -> ModuleGraph:
    """Conv stem -> Meta4D stages -> flatten -> Meta3D blocks -> mean pool -> head.

    Stages with zero blocks are skipped along with their transition conv.
    Consecutive Meta4D stages are joined by a stride-2 3x3 conv; the move
    into the Meta3D stage uses a stride-1 3x3 conv that only changes width.
    """
    cfg = config or ModelConfig()
    stride = hybrid_stride(cfg)
    if cfg.resolution % stride:
        raise ShapeError(f"resolution {cfg.resolution} is not divisible by cumulative stride {stride}")
    init = _Init(seed)
    present = [s for s in range(4) if cfg.blocks[s] > 0]
    first_width = cfg.widths[present[0]] if present else cfg.widths[0]
    stem_mid = max(cfg.widths[0] // 2, 1)
    nodes = [
        _conv(init, "stem.conv1", cfg.in_channels, stem_mid, 3, 2, 1, "stem"),
        _affine(init, "stem.norm1", stem_mid, "stem"),
        LayerNode("activation", "stem.act1", hyper={"fn": "relu"}, stage="stem"),
        _conv(init, "stem.conv2", stem_mid, first_width, 3, 2, 1, "stem"),
        _affine(init, "stem.norm2", first_width, "stem"),
        LayerNode("activation", "stem.act2", hyper={"fn": "relu"}, stage="stem"),
    ]
    width = first_width
    side = cfg.resolution // 4
    for s in range(3):
        if cfg.blocks[s] == 0:
            continue
        stage = f"stage{s + 1}"
        if s != present[0]:
            nodes.append(_conv(init, f"{stage}.downsample", width, cfg.widths[s], 3, 2, 1, stage))
            side //= 2
        width = cfg.widths[s]
        for b in range(cfg.blocks[s]):
            nodes += _meta4d(init, f"{stage}.{b}", width, cfg.mlp_ratio, stage)
    if cfg.blocks[3] > 0 and width != cfg.widths[3]:
        nodes.append(_conv(init, "stage4.embed", width, cfg.widths[3], 3, 1, 1, "stage4"))
        width = cfg.widths[3]
    nodes += _transformer_tail(init, cfg, width, side * side, cfg.blocks[3], "stage4")
    return ModuleGraph(nodes, cfg, "hybrid")


def build_mini_vit(config: ModelConfig | None = None, seed: int = 0) -> ModuleGraph:
    """Patchify conv followed by ``blocks[3]`` transformer blocks of width ``widths[3]``."""
    cfg = config or ModelConfig()
    ps = cfg.patch_size
    if cfg.resolution % ps:
        raise ShapeError(f"resolution {cfg.resolution} is not divisible by patch size {ps}")
    init = _Init(seed)
    d = cfg.widths[3]
    nodes = [_conv(init, "patchify", cfg.in_channels, d, ps, ps, 0, "stem")]
    side = cfg.resolution // ps
    nodes += _transformer_tail(init, cfg, d, side * side, cfg.blocks[3], "blocks")
    return ModuleGraph(nodes, cfg, "vit")


def with_new_head(graph: ModuleGraph, num_classes: int) -> ModuleGraph:
    """Clone ``graph`` with a zero-initialized head of ``num_classes`` outputs."""
    g = graph.clone()
    head = g.head
    d = head.hyper["in"]
    head.params = {
        "weight": Tensor(np.zeros((num_classes, d), dtype=np.float32)),
        "bias": Tensor(np.zeros(num_classes, dtype=np.float32)),
    }
    head.hyper["out"] = num_classes
    g.config = replace(g.config, num_classes=num_classes)
    return g


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """x @ W^T + b for W stored as out x in."""
    y = T.matmul(x, T.transpose(weight, (1, 0)))
    return T.add(y, bias) if bias is not None else y


def _apply_linear(x, node: LayerNode, prefix: str, adapters) -> Tensor:
    wname = f"{prefix}weight" if prefix == "" else f"{prefix}_weight"
    bname = f"{prefix}bias" if prefix == "" else f"{prefix}_bias"
    w, b = node.params[wname], node.params[bname]
    factors = adapters.get(node.param_name(wname)) if adapters else None
    if factors is not None:
        return factors.linear_forward(x, w, b)
    return linear(x, w, b)


def mhsa_forward(x: Tensor, node: LayerNode, adapters=None) -> Tensor:
    """Multi-head self-attention with output projection on L x d or N x L x d input."""
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    n, length, d = x.shape
    hp = node.hyper
    h, dk, dv = hp["heads"], hp["d_k"], hp["d_v"]
    if d != hp["d"]:
        raise ShapeError(f"attention width {hp['d']} does not match input width {d}")

    def heads(t, dh):
        return T.transpose(T.reshape(t, (n, length, h, dh)), (0, 2, 1, 3))

    q = heads(_apply_linear(x, node, "q", adapters), dk)
    k = heads(_apply_linear(x, node, "k", adapters), dk)
    v = heads(_apply_linear(x, node, "v", adapters), dv)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, length, h * dv))
    out = _apply_linear(ctx, node, "proj", adapters)
    return T.reshape(out, (length, d)) if squeeze else out


def _conv_node(x, node: LayerNode, adapters) -> Tensor:
    hp = node.hyper
    w, b = node.params["weight"], node.params["bias"]
    factors = adapters.get(node.param_name("weight")) if adapters else None
    if factors is not None:
        return factors.conv_forward(x, w, b, hp["stride"], hp["padding"])
    return T.conv2d(x, w, b, hp["stride"], hp["padding"], hp.get("groups", 1))


def _channel_affine(x: Tensor, node: LayerNode) -> Tensor:
    c = x.shape[1]
    s = T.reshape(node.params["scale"], (1, c, 1, 1))
    t = T.reshape(node.params["shift"], (1, c, 1, 1))
    return T.add(T.mul(x, s), t)


def _flatten_spatial(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return T.transpose(T.reshape(x, (n, c, h * w)), (0, 2, 1))


def forward(
    graph: ModuleGraph,
    batch,
    mode: str = "eval",
    adapters: dict | None = None,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> Tensor:
    """Run ``graph`` on an N x C x H x W batch and return N x K logits.

    ``adapters`` maps weight names to factor objects exposing
    ``linear_forward`` / ``conv_forward``; those layers use the factored path.
    Dropout is active only in ``train`` mode and draws from ``rng``.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = T.as_tensor(batch)
    expected = graph.input_shape(x.shape[0]) if x.ndim == 4 else None
    if expected is None or x.shape != expected:
        raise ShapeError(f"input shape {x.shape} does not match graph signature {graph.input_shape()}")
    stack = []
    for node in graph.nodes:
        kind = node.kind
        if kind == "conv":
            x = _conv_node(x, node, adapters)
        elif kind == "batch_norm_frozen":
            x = _channel_affine(x, node)
        elif kind == "activation":
            x = T.relu(x) if node.hyper["fn"] == "relu" else T.gelu(x)
        elif kind == "pool":
            if node.hyper["mode"] == "avg2d":
                x = T.avg_pool2d(x, node.hyper["k"], node.hyper["stride"], node.hyper["padding"])
            else:
                x = T.mean(x, axis=1)
        elif kind == "residual_begin":
            stack.append(x)
        elif kind == "residual_end":
            x = T.add(stack.pop(), x)
        elif kind == "flatten_spatial":
            x = _flatten_spatial(x)
        elif kind == "pos_embed":
            x = T.add(x, node.params["weight"])
        elif kind == "layer_norm":
            x = T.layer_norm(x, node.params["weight"], node.params["bias"], node.hyper["eps"])
        elif kind == "attention":
            x = mhsa_forward(x, node, adapters)
        elif kind in ("linear", "classifier_head"):
            x = _apply_linear(x, node, "", adapters)
        elif kind == "dropout":
            if mode == "train":
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng")
                keep = 1.0 - node.hyper["rate"]
                m = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
                x = T.mul(x, Tensor(m))
        if trace is not None:
            trace.append((node.name, x.shape))
    return x


def infer_shapes(graph: ModuleGraph, input_shape) -> list[tuple[str, tuple]]:
    """Symbolic shape propagation; mirrors :func:`forward` without touching data."""
    shape = tuple(input_shape)
    if shape[1:] != graph.input_shape()[1:]:
        raise ShapeError(f"input shape {shape} does not match graph signature {graph.input_shape()}")
    out = []
    for node in graph.nodes:
        kind, hp = node.kind, node.hyper
        if kind == "conv":
            n, c, h, w = shape
            p, _, k, _ = node.params["weight"].shape
            shape = (
                n,
                p,
                T.conv_output_size(h, k, hp["stride"], hp["padding"]),
                T.conv_output_size(w, k, hp["stride"], hp["padding"]),
            )
        elif kind == "pool":
            if hp["mode"] == "avg2d":
                n, c, h, w = shape
                shape = (
                    n,
                    c,
                    T.conv_output_size(h, hp["k"], hp["stride"], hp["padding"]),
                    T.conv_output_size(w, hp["k"], hp["stride"], hp["padding"]),
                )
            else:
                shape = (shape[0], shape[2])
        elif kind == "flatten_spatial":
            n, c, h, w = shape
            shape = (n, h * w, c)
        elif kind in ("linear", "classifier_head"):
            shape = shape[:-1] + (node.params["weight"].shape[0],)
        if min(shape) < 1:
            raise ShapeError(f"{node.name}: non-positive extent {shape}")
        out.append((node.name, shape))
    return out


def attention_param_count(node: LayerNode) -> int:
    return sum(t.size for k, t in node.params.items() if k.endswith("_weight"))

