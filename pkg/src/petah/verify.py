"""Randomized property suites: merge equivalence, rank bound, gradients, serialization.

Each suite returns a :class:`SuiteReport`; the ``verify`` CLI command and the
test suite both run them.
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapters import LoraFactors, conv_lora_forward, lora_linear_forward, merge, numerical_rank
from .gradcheck import gradcheck
from .tensor import Tensor

REL_FLOOR = 1e-8


@dataclass
class SuiteReport:
    name: str
    cases: int
    passed: bool
    worst: float = 0.0
    detail: str = ""
    failures: list[dict] = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.cases} cases, worst={self.worst:.3e} {self.detail}".rstrip()


# ---------------------------------------------------------------------------
# random adapter instances
# ---------------------------------------------------------------------------


@dataclass
class AdapterCase:
    kind: str
    x: Tensor
    weight: Tensor
    bias: Tensor
    factors: LoraFactors
    stride: int = 1
    padding: int = 0

    def factored(self) -> Tensor:
        if self.kind == "conv":
            return conv_lora_forward(self.x, self.weight, self.bias, self.factors, self.stride, self.padding)
        return lora_linear_forward(self.x, self.weight, self.bias, self.factors)

    def merged(self) -> Tensor:
        w = merge(self.factors, self.weight)
        if self.kind == "conv":
            return T.conv2d(self.x, w, self.bias, self.stride, self.padding)
        return T.add(T.matmul(self.x, T.transpose(w, (1, 0))), self.bias)

    def delta_2d(self) -> np.ndarray:
        return self.factors.delta().data.reshape(self.weight.shape[0], -1)

    def describe(self) -> dict:
        d = {"kind": self.kind, "weight": self.weight.shape, "rank": self.factors.rank}
        if self.kind == "conv":
            d.update(stride=self.stride, padding=self.padding, x=self.x.shape)
        return d


def _normal(rng, shape, dtype, std=1.0):
    return Tensor(rng.normal(0.0, std, shape).astype(dtype))


def random_linear_case(rng: np.random.Generator, dtype=np.float32, batch: int = 4) -> AdapterCase:
    p, q = int(rng.integers(1, 65)), int(rng.integers(1, 65))
    r = int(rng.integers(1, min(16, p, q) + 1))
    w = _normal(rng, (p, q), dtype, 1 / math.sqrt(q))
    a = _normal(rng, (r, q), dtype, 1 / math.sqrt(q))
    b = _normal(rng, (p, r), dtype, 1 / math.sqrt(r))
    f = LoraFactors("case.weight", a, b, r, float(rng.choice([0.5, 1.0, 2.0])))
    return AdapterCase("linear", _normal(rng, (batch, q), dtype), w, _normal(rng, (p,), dtype, 0.1), f)


def random_conv_case(rng: np.random.Generator, dtype=np.float32, batch: int = 2) -> AdapterCase:
    p, q = int(rng.integers(1, 33)), int(rng.integers(1, 33))
    k = int(rng.choice([1, 3, 5]))
    rc = int(rng.choice([1, 2, 4]))
    rc = min(rc, p, q * k * k)
    stride, padding = int(rng.choice([1, 2])), int(rng.choice([0, 1, 2]))
    size = int(rng.integers(max(k - 2 * padding, 1), k + 7))
    fan = q * k * k
    w = _normal(rng, (p, q, k, k), dtype, 1 / math.sqrt(fan))
    a = _normal(rng, (rc, q, k, k), dtype, 1 / math.sqrt(fan))
    b = _normal(rng, (p, rc, 1, 1), dtype, 1 / math.sqrt(rc))
    f = LoraFactors("case.weight", a, b, rc, float(rng.choice([0.5, 1.0, 2.0])), kind="conv")
    x = _normal(rng, (batch, q, size, size), dtype)
    return AdapterCase("conv", x, w, _normal(rng, (p,), dtype, 0.1), f, stride, padding)


def random_cases(n: int, seed: int = 0, dtype=np.float32) -> list[AdapterCase]:
    """``n`` instances, alternating linear and conv."""
    rng = np.random.default_rng(seed)
    return [random_linear_case(rng, dtype) if i % 2 == 0 else random_conv_case(rng, dtype) for i in range(n)]


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def elementwise_relative_error(factored: np.ndarray, merged: np.ndarray) -> np.ndarray:
    """|factored - merged| / (|merged| + 1e-8)."""
    f = np.asarray(factored, dtype=np.float64)
    m = np.asarray(merged, dtype=np.float64)
    return np.abs(f - m) / (np.abs(m) + REL_FLOOR)


def scale_relative_error(factored: np.ndarray, merged: np.ndarray) -> float:
    """max |factored - merged| / (max |merged| + 1e-8): error relative to the output's magnitude."""
    f = np.asarray(factored, dtype=np.float64)
    m = np.asarray(merged, dtype=np.float64)
    return float(np.abs(f - m).max() / (np.abs(m).max() + REL_FLOOR)) if m.size else 0.0


def merge_equivalence(n: int = 1000, seed: int = 0, tol: float = 1e-5, cases=None) -> SuiteReport:
    """Factored vs merged forward, elementwise relative error in single precision."""
    cases = cases if cases is not None else random_cases(n, seed)
    worst, failures = 0.0, []
    for i, c in enumerate(cases):
        err = elementwise_relative_error(c.factored().data, c.merged().data)
        e = float(err.max()) if err.size else 0.0
        worst = max(worst, e)
        if e > tol:
            failures.append({"case": i, "error": e, **c.describe()})
    frac = f"{len(failures)} above {tol:g}"
    return SuiteReport("merge-equivalence", len(cases), not failures, worst, frac, failures)


def merge_equivalence_scaled(n: int = 1000, seed: int = 0, tol: float = 1e-5, cases=None) -> SuiteReport:
    cases = cases if cases is not None else random_cases(n, seed)
    errs = [scale_relative_error(c.factored().data, c.merged().data) for c in cases]
    bad = [{"case": i, "error": e} for i, e in enumerate(errs) if e > tol]
    return SuiteReport("merge-equivalence-scaled", len(cases), not bad, max(errs, default=0.0), "", bad)


def rank_bound(n: int = 1000, seed: int = 0, cases=None) -> SuiteReport:
    """Numerical rank of every materialized 2-D update is at most the configured rank."""
    cases = cases if cases is not None else random_cases(n, seed)
    bad, worst = [], 0.0
    for i, c in enumerate(cases):
        rank = numerical_rank(c.delta_2d())
        worst = max(worst, rank - c.factors.rank)
        if rank > c.factors.rank:
            bad.append({"case": i, "rank": rank, **c.describe()})
    return SuiteReport("rank-bound", len(cases), not bad, float(worst), "(worst = measured - configured)", bad)


def _weighted_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum_(T.mul(out, Tensor(weights)))


def adapter_gradcheck(n: int = 50, seed: int = 0, tol: float = 1e-4) -> SuiteReport:
    """Gradients through A and B (base frozen) for both factored paths, double precision."""
    rng = np.random.default_rng(seed)
    worst, bad = 0.0, []
    for i in range(n):
        for kind in ("linear", "conv"):
            c = _small_case(rng, kind)
            probe = rng.normal(size=c.factored().shape)

            def fn(p, c=c, probe=probe):
                f = LoraFactors("g", p["A"], p["B"], c.factors.rank, c.factors.scale, kind=c.kind)
                if c.kind == "conv":
                    out = conv_lora_forward(c.x, c.weight, c.bias, f, c.stride, c.padding)
                else:
                    out = lora_linear_forward(c.x, c.weight, c.bias, f)
                return _weighted_loss(out, probe)

            rep = gradcheck(fn, {"A": c.factors.A, "B": c.factors.B}, tolerance=tol)
            worst = max(worst, rep.max_rel_error)
            if not rep.passed:
                bad.append({"case": i, "kind": kind, "error": rep.max_rel_error})
    return SuiteReport("adapter-gradcheck", 2 * n, not bad, worst, "", bad)


def _small_case(rng, kind) -> AdapterCase:
    """Double-precision instances kept small so finite differences stay cheap."""
    dt = np.float64
    if kind == "linear":
        p, q = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        r = int(rng.integers(1, min(p, q) + 1))
        f = LoraFactors("g", _normal(rng, (r, q), dt), _normal(rng, (p, r), dt), r, 1.0)
        return AdapterCase("linear", _normal(rng, (3, q), dt), _normal(rng, (p, q), dt), _normal(rng, (p,), dt), f)
    p, q, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([1, 3]))
    r = int(rng.integers(1, min(p, q * k * k, 2) + 1))
    stride, padding = int(rng.choice([1, 2])), int(rng.choice([0, 1]))
    f = LoraFactors("g", _normal(rng, (r, q, k, k), dt), _normal(rng, (p, r, 1, 1), dt), r, 1.0, kind="conv")
    x = _normal(rng, (2, q, k + 2, k + 2), dt)
    return AdapterCase("conv", x, _normal(rng, (p, q, k, k), dt), _normal(rng, (p,), dt), f, stride, padding)


def _op_instances(rng):
    """(name, fn(params) -> scalar, params) for every differentiable tensor op."""
    dt = np.float64

    def t(*shape):
        return _normal(rng, shape, dt)

    def weighted(out_fn, shape):
        w = rng.normal(size=shape)
        return lambda p: _weighted_loss(out_fn(p), w)

    n, d = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    labels = rng.integers(0, d, n)
    c, k = int(rng.integers(1, 3)), int(rng.choice([1, 3]))
    stride, pad = int(rng.choice([1, 2])), int(rng.choice([0, 1]))
    ho = T.conv_output_size(5, k, stride, pad)
    po = T.conv_output_size(5, 3, stride, 1)
    # keep relu/gelu inputs away from the relu kink
    away = rng.uniform(0.1, 1.0, (n, d)) * rng.choice([-1.0, 1.0], (n, d))
    return [
        ("add", weighted(lambda p: T.add(p["a"], p["b"]), (n, d)), {"a": t(n, d), "b": t(n, d)}),
        ("sub", weighted(lambda p: T.sub(p["a"], p["b"]), (n, d)), {"a": t(n, d), "b": t(n, d)}),
        ("mul", weighted(lambda p: T.mul(p["a"], p["b"]), (n, d)), {"a": t(n, d), "b": t(n, d)}),
        ("scale", weighted(lambda p: T.scale(p["a"], 1.7), (n, d)), {"a": t(n, d)}),
        ("relu", weighted(lambda p: T.relu(p["a"]), (n, d)), {"a": Tensor(away)}),
        ("gelu", weighted(lambda p: T.gelu(p["a"]), (n, d)), {"a": t(n, d)}),
        ("softmax", weighted(lambda p: T.softmax(p["a"]), (n, d)), {"a": t(n, d)}),
        ("log_softmax", weighted(lambda p: T.log_softmax(p["a"]), (n, d)), {"a": t(n, d)}),
        (
            "layer_norm",
            weighted(lambda p: T.layer_norm(p["x"], p["w"], p["b"]), (n, d)),
            {"x": t(n, d), "w": t(d), "b": t(d)},
        ),
        ("reshape", weighted(lambda p: T.reshape(p["a"], (d, n)), (d, n)), {"a": t(n, d)}),
        ("transpose", weighted(lambda p: T.transpose(p["a"], (1, 0)), (d, n)), {"a": t(n, d)}),
        ("sum", weighted(lambda p: T.sum_(p["a"], axis=1), (n,)), {"a": t(n, d)}),
        ("mean", weighted(lambda p: T.mean(p["a"], axis=0), (d,)), {"a": t(n, d)}),
        ("matmul", weighted(lambda p: T.matmul(p["a"], p["b"]), (n, n)), {"a": t(n, d), "b": t(d, n)}),
        (
            "matmul-chain-3",
            weighted(lambda p: T.matmul(T.matmul(p["a"], p["b"]), p["c"]), (n, d)),
            {"a": t(n, d), "b": t(d, d), "c": t(d, d)},
        ),
        ("cross_entropy", lambda p: T.cross_entropy(p["a"], labels), {"a": t(n, d)}),
        (
            "conv2d",
            weighted(lambda p: T.conv2d(p["x"], p["k"], p["b"], stride, pad), (2, 2, ho, ho)),
            {"x": t(2, c, 5, 5), "k": t(2, c, k, k), "b": t(2)},
        ),
        (
            "conv2d-grouped",
            weighted(lambda p: T.conv2d(p["x"], p["k"], None, stride, pad, groups=2), (1, 4, ho, ho)),
            {"x": t(1, 4, 5, 5), "k": t(4, 2, k, k)},
        ),
        ("avg_pool2d", weighted(lambda p: T.avg_pool2d(p["x"], 3, stride, 1), (1, c, po, po)), {"x": t(1, c, 5, 5)}),
    ]


OP_NAMES = tuple(name for name, _, _ in _op_instances(np.random.default_rng(0)))


def op_gradcheck(n: int = 50, seed: int = 0, tol: float = 1e-4, ops: tuple[str, ...] | None = None) -> SuiteReport:
    """Every differentiable op, ``n`` random instances each, in double precision."""
    rng = np.random.default_rng(seed)
    worst, bad, count = 0.0, [], 0
    per_op: dict[str, float] = {}
    for i in range(n):
        for name, fn, params in _op_instances(rng):
            if ops is not None and name not in ops:
                continue
            rep = gradcheck(fn, params, tolerance=tol)
            count += 1
            per_op[name] = max(per_op.get(name, 0.0), rep.max_rel_error)
            worst = max(worst, rep.max_rel_error)
            if not rep.passed:
                bad.append({"op": name, "case": i, "error": rep.max_rel_error})
    rep = SuiteReport("op-gradcheck", count, not bad, worst, "", bad)
    rep.per_op = per_op  # type: ignore[attr-defined]
    return rep


def serialization_roundtrip(n: int = 100, seed: int = 0, directory=None) -> SuiteReport:
    """Checkpoint save/load over random small models; every tensor and mask must come back bit-identical."""
    from .io import load_checkpoint, save_checkpoint
    from .models import build_mini_hybrid, build_mini_vit
    from .sparsity import apply_mask, magnitude_prune

    rng = np.random.default_rng(seed)
    bad = []
    with tempfile.TemporaryDirectory(dir=directory) as tmp:
        for i in range(n):
            cfg = random_model_config(rng)
            build = build_mini_vit if rng.random() < 0.3 else build_mini_hybrid
            g = build(cfg, seed=int(rng.integers(1 << 31)))
            if rng.random() < 0.5:
                g = apply_mask(g, magnitude_prune(g, float(rng.uniform(0, 0.95))))
            path = Path(tmp) / f"m{i}.ptah"
            save_checkpoint(path, g)
            back = load_checkpoint(path, cfg)
            if not graphs_bitwise_equal(g, back):
                bad.append({"case": i})
    return SuiteReport("checkpoint-roundtrip", n, not bad, float(len(bad)), "(worst = mismatching models)", bad)


def graphs_bitwise_equal(a, b) -> bool:
    pa, pb = a.parameters(), b.parameters()
    if pa.keys() != pb.keys():
        return False
    for k in pa:
        if pa[k].shape != pb[k].shape or pa[k].data.tobytes() != pb[k].data.tobytes():
            return False
    if a.masks.keys() != b.masks.keys():
        return False
    return all(np.array_equal(a.masks[k], b.masks[k]) for k in a.masks)


def random_model_config(rng: np.random.Generator):
    from .models import ModelConfig

    heads = int(rng.integers(1, 4))
    d_k = int(rng.choice([4, 8]))
    w = tuple(int(rng.choice([8, 12, 16])) * m for m in (1, 1, 2, 2))
    blocks = (int(rng.integers(0, 2)), int(rng.integers(0, 2)), int(rng.integers(1, 2)), int(rng.integers(1, 3)))
    return ModelConfig(
        resolution=16,
        widths=w,
        blocks=blocks,
        heads=heads,
        d_k=d_k,
        d_v=int(rng.choice([4, 8])),
        mlp_ratio=2,
        num_classes=int(rng.integers(2, 8)),
        patch_size=4,
    )


def run_all(quick: bool = False, seed: int = 0) -> list[SuiteReport]:
    """The suites behind the ``verify`` command; ``quick`` shrinks every case count."""
    n_merge, n_grad, n_rt = (100, 5, 10) if quick else (1000, 50, 100)
    cases = random_cases(n_merge, seed)
    return [
        merge_equivalence(cases=cases),
        merge_equivalence_scaled(cases=cases),
        rank_bound(cases=cases),
        op_gradcheck(n_grad, seed),
        adapter_gradcheck(n_grad, seed),
        serialization_roundtrip(n_rt, seed),
    ]
