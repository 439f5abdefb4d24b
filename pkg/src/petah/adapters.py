"""Low-rank adapters for linear and convolutional layers.

A linear weight W (p x q) gets the update scale * B @ A with A: r x q and
B: p x r.  A conv kernel (p x q x k x k) is treated as its p x (q*k*k)
matrix; A is kept as an r x q x k x k kernel that inherits the base stride
and padding, and B as a p x r x 1 x 1 kernel, so the factored path is two
convolutions and the merged update reshapes back to the kernel shape.

Factors may be split into ``groups`` blocks along the output rows.  Attention
Q/K/V matrices use one block per head (each head has its own A: r x d and
B: d_k x r); grouped convolutions use one block per conv group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T
from .models import ModuleGraph, forward, linear, with_new_head
from .tensor import ShapeError, Tensor

STRATEGIES = ("linear_probe", "full_ft", "attn_ft", "lora_attn", "lora_attn_mlp", "petah")
LORA_STRATEGIES = ("lora_attn", "lora_attn_mlp", "petah")


@dataclass
class LoraFactors:
    target: str
    A: Tensor
    B: Tensor
    rank: int
    scale: float = 1.0
    groups: int = 1
    kind: str = "linear"

    def __post_init__(self):
        g, r = self.groups, self.rank
        if r < 1 or g < 1:
            raise ValueError("rank and groups must be positive")
        if self.A.shape[0] != g * r:
            raise ShapeError(f"{self.target}: A has {self.A.shape[0]} rows, expected groups*rank = {g * r}")
        if self.B.shape[0] % g or self.B.shape[1] != r:
            raise ShapeError(f"{self.target}: B shape {self.B.shape} does not match rank {r} / groups {g}")
        if self.kind == "conv" and self.B.shape[2:] != (1, 1):
            raise ShapeError("conv B factor must be a 1x1 kernel")

    @property
    def out_features(self) -> int:
        return self.B.shape[0]

    def num_params(self) -> int:
        return self.A.size + self.B.size

    def delta(self) -> Tensor:
        """Materialize scale * B @ A in the shape of the target parameter."""
        g, r = self.groups, self.rank
        a2 = T.reshape(self.A, (g, r, -1))
        b2 = T.reshape(self.B, (g, self.out_features // g, r))
        d = T.matmul(b2, a2)
        if self.kind == "conv":
            d = T.reshape(d, (self.out_features,) + self.A.shape[1:])
        else:
            d = T.reshape(d, (self.out_features, self.A.shape[1]))
        return T.scale(d, self.scale) if self.scale != 1.0 else d

    def delta_blocks(self) -> list[np.ndarray]:
        """Per-group 2-D update matrices; each has rank <= ``rank``."""
        d = self.delta().data.reshape(self.groups, self.out_features // self.groups, -1)
        return list(d)

    def check_binds(self, base: Tensor) -> None:
        if self.kind == "conv":
            p, qg, k, _ = base.shape
            want_a = (self.groups * self.rank, qg, k, k)
            want_b = (p, self.rank, 1, 1)
        else:
            p, q = base.shape
            want_a = (self.groups * self.rank, q)
            want_b = (p, self.rank)
        if self.A.shape != want_a or self.B.shape != want_b:
            raise ShapeError(f"{self.target}: factors {self.A.shape}/{self.B.shape} do not bind to {base.shape}")

    def linear_forward(self, x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
        return lora_linear_forward(x, weight, bias, self)

    def conv_forward(self, x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, padding: int) -> Tensor:
        return conv_lora_forward(x, weight, bias, self, stride, padding)


def init_factors(
    target: str,
    base: Tensor,
    rank: int,
    rng: np.random.Generator,
    scale: float = 1.0,
    groups: int = 1,
    kind: str | None = None,
) -> LoraFactors:
    """A ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), B = 0, so the update starts at exactly zero."""
    kind = kind or ("conv" if base.ndim == 4 else "linear")
    p = base.shape[0]
    if p % groups:
        raise ShapeError(f"{target}: {p} rows not divisible into {groups} groups")
    in_shape = base.shape[1:]
    fan_in = int(np.prod(in_shape))
    if rank > min(p // groups, fan_in):
        raise ValueError(f"{target}: rank {rank} exceeds min({p // groups}, {fan_in})")
    bound = 1.0 / math.sqrt(fan_in)
    a = rng.uniform(-bound, bound, (groups * rank,) + in_shape).astype(base.dtype)
    b_shape = (p, rank, 1, 1) if kind == "conv" else (p, rank)
    b = np.zeros(b_shape, dtype=base.dtype)
    return LoraFactors(target, Tensor(a), Tensor(b), rank, scale, groups, kind)


def _grouped_right(z: Tensor, f: LoraFactors) -> Tensor:
    """Apply B block-diagonally to z (..., groups*rank) -> (..., p)."""
    g, r, p = f.groups, f.rank, f.out_features
    if g == 1:
        return T.matmul(z, T.transpose(f.B, (1, 0)))
    lead = z.shape[:-1]
    m = int(np.prod(lead))
    zg = T.transpose(T.reshape(z, (m, g, r)), (1, 0, 2))
    bg = T.transpose(T.reshape(f.B, (g, p // g, r)), (0, 2, 1))
    y = T.matmul(zg, bg)
    return T.reshape(T.transpose(y, (1, 0, 2)), lead + (p,))


def lora_linear_forward(x: Tensor, weight: Tensor, bias: Tensor | None, f: LoraFactors) -> Tensor:
    """W x + b + scale * B (A x), without materializing B A."""
    f.check_binds(weight)
    base = linear(x, weight, bias)
    z = T.matmul(x, T.transpose(f.A, (1, 0)))
    y = _grouped_right(z, f)
    if f.scale != 1.0:
        y = T.scale(y, f.scale)
    return T.add(base, y)


def conv_lora_forward(
    x: Tensor, weight: Tensor, bias: Tensor | None, f: LoraFactors, stride: int = 1, padding: int = 0
) -> Tensor:
    """conv(x, W) + b + scale * conv(conv(x, A), B); A shares the base stride/padding."""
    f.check_binds(weight)
    base = T.conv2d(x, weight, bias, stride, padding, f.groups)
    z = T.conv2d(x, f.A, None, stride, padding, f.groups)
    y = T.conv2d(z, f.B, None, 1, 0, f.groups)
    if f.scale != 1.0:
        y = T.scale(y, f.scale)
    return T.add(base, y)


def merge(f: LoraFactors, base: Tensor) -> Tensor:
    """base + scale * B A, same shape as base."""
    f.check_binds(base)
    return Tensor._wrap(base.data + f.delta().data, "merge")


def unmerge(f: LoraFactors, merged: Tensor) -> Tensor:
    f.check_binds(merged)
    return Tensor._wrap(merged.data - f.delta().data, "unmerge")


def numerical_rank(m: np.ndarray, rel_tol: float = 1e-6) -> int:
    s = np.linalg.svd(np.asarray(m, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int((s > rel_tol * s[0]).sum())


# ---------------------------------------------------------------------------
# policies and injection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdaptationPolicy:
    strategy: str
    rank: int = 8
    conv_rank: int = 1
    scale: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.rank < 1 or self.conv_rank < 1 or self.scale <= 0:
            raise ValueError("ranks must be positive and scale > 0")

    @property
    def head_trainable(self) -> bool:
        return True

    @classmethod
    def petah(cls, conv_rank: int, rank: int = 8, scale: float = 1.0) -> "AdaptationPolicy":
        return cls("petah", rank, conv_rank, scale)

    def label(self) -> str:
        if self.strategy == "petah":
            return f"petah({self.rank},{self.conv_rank})"
        if self.strategy in LORA_STRATEGIES:
            return f"{self.strategy}({self.rank})"
        return self.strategy

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "rank": self.rank, "conv_rank": self.conv_rank, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationPolicy":
        return cls(d["strategy"], int(d.get("rank", 8)), int(d.get("conv_rank", 1)), float(d.get("scale", 1.0)))


@dataclass
class AdapterSlot:
    """Where a factor pair goes and how it is shaped."""

    target: str
    rank: int
    groups: int
    kind: str
    component: str  # "qkv", "proj", "mlp" or "conv"
    layer: str


def eligible_slots(graph: ModuleGraph, policy: AdaptationPolicy) -> list[AdapterSlot]:
    s = policy.strategy
    if s not in LORA_STRATEGIES:
        return []
    slots = []
    for node in graph.nodes:
        if node.kind == "attention":
            h = node.hyper["heads"]
            for m in ("q", "k", "v"):
                slots.append(AdapterSlot(node.param_name(f"{m}_weight"), policy.rank, h, "linear", "qkv", node.name))
            slots.append(AdapterSlot(node.param_name("proj_weight"), policy.rank, 1, "linear", "proj", node.name))
        elif node.kind == "linear" and s == "lora_attn_mlp":
            slots.append(AdapterSlot(node.param_name("weight"), policy.rank, 1, "linear", "mlp", node.name))
        elif node.kind == "conv" and s == "petah":
            g = node.hyper.get("groups", 1)
            slots.append(AdapterSlot(node.param_name("weight"), policy.conv_rank, g, "conv", "conv", node.name))
    return slots


def _attention_param_names(graph: ModuleGraph) -> list[str]:
    return [n.param_name(k) for n in graph.find("attention") for k in n.params]


def _head_names(graph: ModuleGraph) -> list[str]:
    return [graph.head.param_name(k) for k in graph.head.params]


@dataclass
class AdaptedModel:
    graph: ModuleGraph
    policy: AdaptationPolicy
    adapters: dict[str, LoraFactors] = field(default_factory=dict)
    trainable: list[str] = field(default_factory=list)
    merged: bool = False
    dense_override: bool = False

    def forward(self, batch, mode: str = "eval", rng=None, trace=None) -> Tensor:
        adapters = None if self.merged else self.adapters
        return forward(self.graph, batch, mode, adapters=adapters, rng=rng, trace=trace)

    __call__ = forward

    def adapter_parameters(self) -> dict[str, Tensor]:
        out = {}
        for target, f in self.adapters.items():
            out[f"{target}.lora_A"] = f.A
            out[f"{target}.lora_B"] = f.B
        return out

    def parameters(self) -> dict[str, Tensor]:
        """Every tensor the model reads: backbone, head and adapter factors."""
        return {**self.graph.parameters(), **self.adapter_parameters()}

    def trainable_parameters(self) -> dict[str, Tensor]:
        params = self.parameters()
        return {n: params[n] for n in self.trainable}

    def frozen_parameters(self) -> dict[str, Tensor]:
        trainable = set(self.trainable)
        return {n: t for n, t in self.graph.parameters().items() if n not in trainable}

    def is_adapter_param(self, name: str) -> bool:
        return name.endswith(".lora_A") or name.endswith(".lora_B")

    def set_parameter(self, name: str, value: Tensor) -> None:
        if self.is_adapter_param(name):
            target, _, which = name.rpartition(".")
            f = self.adapters[target]
            old = f.A if which == "lora_A" else f.B
            if old.shape != value.shape:
                raise ShapeError(f"{name}: expected {old.shape}, got {value.shape}")
            if which == "lora_A":
                f.A = value
            else:
                f.B = value
        else:
            self.graph.set_parameter(name, value)

    def merge_all(self) -> None:
        """Fold every adapter into its base weight; forward then runs the plain graph."""
        if self.merged:
            return
        params = self.graph.parameters()
        for target, f in self.adapters.items():
            self.graph.set_parameter(target, merge(f, params[target]))
        self.merged = True

    def unmerge_all(self) -> None:
        if not self.merged:
            return
        params = self.graph.parameters()
        for target, f in self.adapters.items():
            self.graph.set_parameter(target, unmerge(f, params[target]))
        self.merged = False

    def num_adapter_params(self) -> int:
        return sum(f.num_params() for f in self.adapters.values())


def inject(
    graph: ModuleGraph,
    policy: AdaptationPolicy,
    num_classes: int | None = None,
    seed: int = 0,
) -> AdaptedModel:
    """Attach adapters per ``policy`` to a copy of ``graph`` and pick the trainable set.

    With ``num_classes`` the head is replaced by a fresh zero-initialized one.
    The input graph is never modified; frozen tensors are shared with it.
    """
    g = with_new_head(graph, num_classes) if num_classes is not None else graph.clone()
    rng = np.random.default_rng(seed)
    params = g.parameters()
    adapters = {}
    for slot in eligible_slots(g, policy):
        adapters[slot.target] = init_factors(
            slot.target, params[slot.target], slot.rank, rng, policy.scale, slot.groups, slot.kind
        )
    s = policy.strategy
    if s in LORA_STRATEGIES and not adapters:
        raise ValueError(f"strategy {s} found no eligible layers in this graph")
    head = _head_names(g)
    if s == "linear_probe":
        trainable = head
    elif s == "full_ft":
        trainable = list(params)
    elif s == "attn_ft":
        trainable = _attention_param_names(g) + head
        if len(trainable) == len(head):
            raise ValueError("attn_ft found no attention layers in this graph")
    else:
        trainable = []
        for target in adapters:
            trainable += [f"{target}.lora_A", f"{target}.lora_B"]
        trainable += head
    return AdaptedModel(g, policy, adapters, trainable)


# ---------------------------------------------------------------------------
# closed-form parameter accounting
# ---------------------------------------------------------------------------


def attention_lora_params(h: int, r: int, d: int, d_k: int, d_v: int) -> tuple[int, int]:
    """(Q/K/V term, projection term) = (h r (2 d_k + d_v + 3 d), r (d + h d_v))."""
    return h * r * (2 * d_k + d_v + 3 * d), r * (d + h * d_v)


def conv_lora_params(p: int, q: int, k: int, r_c: int) -> int:
    """r_c q k^2 + r_c p for a p-output, q-input, k x k conv."""
    return r_c * q * k * k + r_c * p


def count_adapter_params(policy: AdaptationPolicy, graph: ModuleGraph) -> dict:
    """Per-layer adapter parameter counts from the closed-form formulas; excludes the head."""
    per_layer: dict[str, int] = {}
    s = policy.strategy
    if s in LORA_STRATEGIES:
        r = policy.rank
        for node in graph.nodes:
            hp = node.hyper
            if node.kind == "attention":
                qkv, proj = attention_lora_params(hp["heads"], r, hp["d"], hp["d_k"], hp["d_v"])
                per_layer[f"{node.name}.qkv"] = qkv
                per_layer[f"{node.name}.proj"] = proj
            elif node.kind == "linear" and s == "lora_attn_mlp":
                per_layer[node.name] = r * (hp["in"] + hp["out"])
            elif node.kind == "conv" and s == "petah":
                p, qg, k, _ = node.params["weight"].shape
                per_layer[node.name] = conv_lora_params(p, qg * hp.get("groups", 1), k, policy.conv_rank)
    return {"per_layer": per_layer, "total": sum(per_layer.values())}


def allocated_param_breakdown(model: AdaptedModel) -> dict[str, int]:
    """Element counts of the factors actually allocated, keyed like :func:`count_adapter_params`."""
    slots = {s.target: s for s in eligible_slots(model.graph, model.policy)}
    out: dict[str, int] = {}
    for target, f in model.adapters.items():
        slot = slots[target]
        key = f"{slot.layer}.{slot.component}" if slot.component in ("qkv", "proj") else slot.layer
        out[key] = out.get(key, 0) + f.num_params()
    return out


def trainable_backbone_names(model: AdaptedModel) -> Iterable[str]:
    return [n for n in model.trainable if not model.is_adapter_param(n)]
