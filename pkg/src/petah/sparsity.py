"""Magnitude pruning masks and how they interact with adapter merging."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .adapters import AdaptedModel, merge
from .models import ModuleGraph
from .tensor import ShapeError, Tensor


class SparseMergeError(RuntimeError):
    """Merging a dense low-rank update into a sparse backbone was not explicitly allowed."""


@dataclass(frozen=True)
class SparsityMask:
    masks: dict[str, np.ndarray]
    sparsity: float
    granularity: str = "per-layer"

    def zero_fraction(self) -> float:
        total = sum(m.size for m in self.masks.values())
        zeros = sum(int((~m).sum()) for m in self.masks.values())
        return zeros / total if total else 0.0

    def num_elements(self) -> int:
        return sum(m.size for m in self.masks.values())


def maskable_parameters(graph: ModuleGraph) -> dict[str, Tensor]:
    """Conv, linear and attention weight matrices; never biases, norms, embeddings or the head."""
    out = {}
    for node in graph.nodes:
        if node.kind in ("conv", "linear"):
            out[node.param_name("weight")] = node.params["weight"]
        elif node.kind == "attention":
            for k, t in node.params.items():
                if k.endswith("_weight"):
                    out[node.param_name(k)] = t
    return out


def prune_count(n: int, s: float) -> int:
    # entries whose sorted position (1-based) over n stays below s
    return max(math.ceil(s * n) - 1, 0)


def _keep_mask(values: np.ndarray, s: float) -> np.ndarray:
    flat = np.abs(values.reshape(-1))
    k = prune_count(flat.size, s)
    keep = np.ones(flat.size, dtype=bool)
    if k:
        # ascending |w|; among ties the later row-major entry goes first
        order = np.lexsort((-np.arange(flat.size), flat))
        keep[order[:k]] = False
    return keep.reshape(values.shape)


def magnitude_prune(graph: ModuleGraph, s: float, granularity: str = "per-layer") -> SparsityMask:
    """Mask out the smallest-magnitude fraction ``s`` of prunable weights."""
    if not 0.0 <= s < 1.0:
        raise ValueError("sparsity must be in [0, 1)")
    params = maskable_parameters(graph)
    if granularity == "per-layer":
        masks = {n: _keep_mask(t.data, s) for n, t in params.items()}
    elif granularity == "global":
        pooled = np.concatenate([t.data.reshape(-1) for t in params.values()])
        keep = _keep_mask(pooled, s)
        masks, offset = {}, 0
        for n, t in params.items():
            masks[n] = keep[offset : offset + t.size].reshape(t.shape)
            offset += t.size
    else:
        raise ValueError("granularity must be 'per-layer' or 'global'")
    for m in masks.values():
        m.flags.writeable = False
    return SparsityMask(masks, s, granularity)


def apply_mask(graph: ModuleGraph, mask: SparsityMask | dict) -> ModuleGraph:
    """Return a copy of ``graph`` with masked weights zeroed and the mask recorded for enforcement."""
    masks = mask.masks if isinstance(mask, SparsityMask) else mask
    g = graph.clone()
    params = g.parameters()
    for name, m in masks.items():
        if name not in params:
            raise KeyError(f"mask entry {name} has no parameter in the graph")
        if m.shape != params[name].shape:
            raise ShapeError(f"mask for {name} has shape {m.shape}, parameter has {params[name].shape}")
        w = params[name]
        g.set_parameter(name, Tensor._wrap(w.data * m.astype(w.dtype), "apply_mask"))
    g.masks = {**g.masks, **masks}
    return g


def enforce_masks(graph: ModuleGraph, name: str, value: Tensor) -> Tensor:
    m = graph.masks.get(name)
    if m is None:
        return value
    return Tensor._wrap(value.data * m.astype(value.dtype), "enforce_mask")


def measured_sparsity(graph: ModuleGraph) -> float:
    """Zero fraction recounted from the masked weights themselves."""
    params = graph.parameters()
    names = list(graph.masks)
    total = sum(params[n].size for n in names)
    zeros = sum(int((params[n].data == 0).sum()) for n in names)
    return zeros / total if total else 0.0


def is_sparse(graph: ModuleGraph) -> bool:
    return any(not m.all() for m in graph.masks.values())


def compose_with_adapters(model: AdaptedModel, force_dense: bool = False) -> AdaptedModel:
    """Merge adapters into the backbone, unless that would densify a pruned weight.

    On a sparse backbone the merge is refused and the adapters stay factored;
    ``force_dense`` merges anyway, drops the affected masks and marks the
    model as densified.
    """
    if model.merged:
        raise ValueError("model is already merged")
    g = model.graph
    touched = [t for t in model.adapters if t in g.masks and not g.masks[t].all()]
    if touched and not force_dense:
        raise SparseMergeError(
            f"refusing to merge {len(touched)} adapters into sparse weights (e.g. {touched[0]}): "
            "B @ A is dense and would destroy the sparsity pattern; keep the adapters factored "
            "or pass force_dense=True"
        )
    adapters = {t: replace(f) for t, f in model.adapters.items()}
    out = AdaptedModel(g.clone(), model.policy, adapters, list(model.trainable))
    params = out.graph.parameters()
    for target, f in model.adapters.items():
        out.graph.set_parameter(target, merge(f, params[target]))
    for t in touched:
        del out.graph.masks[t]
    out.merged = True
    out.dense_override = bool(touched)
    return out
