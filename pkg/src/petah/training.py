"""Optimization, evaluation and grid search over adaptation strategies."""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .adapters import AdaptedModel, AdaptationPolicy, count_adapter_params, inject
from .data import Split, SyntheticTaskSpec
from .models import ModuleGraph
from .sparsity import enforce_masks
from .tensor import NonFiniteError, Tape, Tensor, backward, cross_entropy

log = logging.getLogger(__name__)

CSV_COLUMNS = ("strategy", "r", "r_c", "head_lr", "adapter_lr", "wd", "seed", "split", "accuracy", "adapter_params")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    head_lr: float = 1e-2
    adapter_lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    random_crop: bool = True
    hflip: bool = True
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    debug_frozen_check: bool = False
    max_steps: int | None = None

    def __post_init__(self):
        if self.head_lr < 0 or self.adapter_lr < 0 or self.weight_decay < 0:
            raise ValueError("learning rates and weight decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class AdamW:
    """Adam with decoupled weight decay over a name -> Tensor mapping."""

    def __init__(self, lrs: dict[str, float], weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lrs = lrs
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, Tensor]) -> dict[str, np.ndarray]:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        updated = {}
        for name, p in params.items():
            lr = self.lrs[name]
            if lr == 0:
                continue
            g = grads[name].data
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            w = p.data * (1 - lr * self.wd)
            updated[name] = w - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return updated


def augment(images: np.ndarray, rng: np.random.Generator, crop: bool, flip: bool, pad: int = 4) -> np.ndarray:
    """Random crop from a zero-padded image plus random horizontal flip."""
    n, c, h, w = images.shape
    out = images
    if crop:
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        oy = rng.integers(0, 2 * pad + 1, n)
        ox = rng.integers(0, 2 * pad + 1, n)
        out = np.empty_like(images)
        for i in range(n):
            out[i] = padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
    if flip:
        mask = rng.random(n) < 0.5
        if mask.any():
            out = out.copy() if out is images else out
            out[mask] = out[mask, :, :, ::-1]
    return out


@dataclass
class TrainResult:
    model: AdaptedModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = 0.0
    steps: int = 0


def _learning_rates(model: AdaptedModel, cfg: TrainConfig) -> dict[str, float]:
    head = set(model.graph.head.param_name(k) for k in model.graph.head.params)
    return {n: cfg.head_lr if n in head else cfg.adapter_lr for n in model.trainable}


def train(model: AdaptedModel, data: dict[str, Split], cfg: TrainConfig) -> TrainResult:
    """Minimize cross-entropy over the model's trainable set; keep the best-val epoch.

    Only tensors in ``model.trainable`` are ever replaced.  Masked weights are
    re-masked after every update.
    """
    if not model.trainable:
        raise ValueError("nothing to train: trainable set is empty")
    if model.merged:
        raise ValueError("cannot train a merged model")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(_learning_rates(model, cfg), cfg.weight_decay, cfg.betas, cfg.eps)
    train_split = data["train"]
    val_split = data.get("val")
    frozen_before = model.frozen_parameters() if cfg.debug_frozen_check else None

    best = dict(model.trainable_parameters())
    best_val, best_epoch = -1.0, 0
    history = []
    steps = 0
    n = len(train_split)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            idx = order[start : start + cfg.batch_size]
            xb = augment(train_split.images[idx], rng, cfg.random_crop, cfg.hflip)
            yb = train_split.labels[idx]
            params = model.trainable_parameters()
            try:
                with Tape() as tape:
                    tape.watch(params)
                    loss = cross_entropy(model.forward(xb, "train", rng=rng), yb)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, step {steps}: {exc}") from exc
            grads = backward(tape, loss)
            for name, arr in opt.step(params, grads).items():
                try:
                    value = Tensor._wrap(arr.astype(params[name].dtype), "adamw")
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"parameter {name} diverged at epoch {epoch}, step {steps}") from exc
                model.set_parameter(name, enforce_masks(model.graph, name, value))
            if frozen_before is not None:
                _assert_frozen(model, frozen_before)
            losses.append(loss.item())
            steps += 1
        val_acc = evaluate(model, val_split)["top1"] if val_split is not None and len(val_split) else float("nan")
        history.append({"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"), "val_acc": val_acc})
        log.debug("epoch %d loss %.4f val %.4f", epoch, history[-1]["loss"], val_acc)
        if val_acc > best_val:
            best_val, best_epoch = val_acc, epoch
            best = dict(model.trainable_parameters())
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    for name, t in best.items():
        model.set_parameter(name, t)
    return TrainResult(model, history, best_epoch, best_val, steps)


def _assert_frozen(model: AdaptedModel, before: dict[str, Tensor]) -> None:
    now = model.graph.parameters()
    for name, t in before.items():
        if now[name] is not t and now[name].data.tobytes() != t.data.tobytes():
            raise AssertionError(f"frozen parameter {name} changed during training")


def predict(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    fwd = model.forward if hasattr(model, "forward") else model
    preds = []
    for start in range(0, len(images), batch_size):
        logits = fwd(images[start : start + batch_size])
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy_metrics(preds: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate on an empty split")
    top1 = float((preds == labels).mean())
    per_class = [float((preds[labels == c] == c).mean()) for c in np.unique(labels)]
    return {"top1": top1, "mean_per_class": float(np.mean(per_class))}


def evaluate(model, split: Split) -> dict[str, float]:
    """Top-1 (argmax, first index wins ties) and mean per-class accuracy."""
    if split is None or len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return accuracy_metrics(predict(model, split.images), split.labels)


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------


def make_grid(head_lrs: Iterable[float], adapter_lrs: Iterable[float], weight_decays: Iterable[float], base: TrainConfig) -> list[TrainConfig]:
    return [
        replace(base, head_lr=h, adapter_lr=a, weight_decay=w)
        for h, a, w in itertools.product(head_lrs, adapter_lrs, weight_decays)
    ]


@dataclass
class GridResult:
    best_config: TrainConfig
    rows: list[dict]
    test_rows: list[dict]
    test_mean: float
    models: list[AdaptedModel]

    @property
    def all_rows(self) -> list[dict]:
        return self.rows + self.test_rows


def _row(policy: AdaptationPolicy, cfg: TrainConfig, seed: int, split: str, acc: float, nparams: int) -> dict:
    return {
        "strategy": policy.strategy,
        "r": policy.rank,
        "r_c": policy.conv_rank,
        "head_lr": cfg.head_lr,
        "adapter_lr": cfg.adapter_lr,
        "wd": cfg.weight_decay,
        "seed": seed,
        "split": split,
        "accuracy": acc,
        "adapter_params": nparams,
    }


def grid_search(
    build: Callable[[int], AdaptedModel],
    data: dict[str, Split],
    grid: Sequence[TrainConfig],
    seeds: Sequence[int] = (0,),
    final_seeds: Sequence[int] = (0, 1, 2),
) -> GridResult:
    """Pick the config with the best mean val accuracy, then report its test accuracy over ``final_seeds``.

    ``build(seed)`` must return a freshly injected model.  Runs that share a
    (config, seed) pair between the search and the final evaluation are
    reused, which is exact because training is deterministic.
    """
    if not grid:
        raise ValueError("empty grid")
    if not seeds or not final_seeds:
        raise ValueError("need at least one search seed and one final seed")
    rows = []
    best_cfg, best_score, best_models = None, -np.inf, {}
    policy = None
    for cfg in grid:
        models = {}
        scores = []
        for seed in seeds:
            model = build(seed)
            policy = model.policy
            try:
                res = train(model, data, replace(cfg, seed=seed))
            except TrainingDiverged as exc:
                # a diverged cell scores below every finite one
                log.info("grid cell %s seed %d diverged: %s", cfg, seed, exc)
                rows.append(_row(policy, cfg, seed, "val", float("nan"), count_adapter_params(policy, model.graph)["total"]))
                scores.append(-np.inf)
                continue
            acc = evaluate(res.model, data["val"])["top1"]
            rows.append(_row(policy, cfg, seed, "val", acc, count_adapter_params(policy, model.graph)["total"]))
            scores.append(acc)
            models[seed] = res.model
        score = float(np.mean(scores))
        if best_cfg is None or score > best_score:
            best_cfg, best_score, best_models = cfg, score, models
    test_rows, accs, final_models = [], [], []
    for seed in final_seeds:
        model = best_models.get(seed)
        if model is None:
            model = train(build(seed), data, replace(best_cfg, seed=seed)).model
        acc = evaluate(model, data["test"])["top1"]
        accs.append(acc)
        final_models.append(model)
        test_rows.append(_row(policy, best_cfg, seed, "test", acc, count_adapter_params(policy, model.graph)["total"]))
    return GridResult(best_cfg, rows, test_rows, float(np.mean(accs)), final_models)


def write_results_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CSV_COLUMNS})


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# pretraining and the strategy benchmark
# ---------------------------------------------------------------------------


def pretrain(graph: ModuleGraph, data: dict[str, Split], cfg: TrainConfig) -> tuple[ModuleGraph, TrainResult]:
    """Train every parameter of ``graph`` on a base task; returns the trained graph."""
    model = inject(graph, AdaptationPolicy("full_ft"))
    res = train(model, data, cfg)
    return res.model.graph, res


def pretrain_backbone(
    arch: str = "hybrid",
    epochs: int = 30,
    n_train: int = 4000,
    resolution: int = 32,
    lr: float = 2e-3,
    weight_decay: float = 0.05,
    seed: int = 7,
) -> tuple[ModuleGraph, TrainResult, SyntheticTaskSpec]:
    """Build and pretrain a backbone on the base task; deterministic in ``seed``."""
    from .data import generate_dataset, pretraining_task
    from .models import ModelConfig, build_mini_hybrid, build_mini_vit

    if arch not in ("hybrid", "vit"):
        raise ValueError(f"unknown arch {arch!r}")
    spec = pretraining_task(seed=seed, n_train=n_train, resolution=resolution)
    config = ModelConfig(resolution=resolution, num_classes=spec.num_classes)
    graph = (build_mini_vit if arch == "vit" else build_mini_hybrid)(config, seed=seed)
    cfg = TrainConfig(head_lr=lr, adapter_lr=lr, weight_decay=weight_decay, epochs=epochs, seed=seed)
    trained, res = pretrain(graph, generate_dataset(spec), cfg)
    return trained, res, spec


def adapt_task(
    backbone: ModuleGraph,
    policy: AdaptationPolicy,
    data: dict[str, Split],
    num_classes: int,
    grid: Sequence[TrainConfig],
    seeds: Sequence[int] = (0,),
    final_seeds: Sequence[int] = (0, 1, 2),
) -> GridResult:
    def build(seed: int) -> AdaptedModel:
        return inject(backbone, policy, num_classes=num_classes, seed=seed)

    return grid_search(build, data, grid, seeds, final_seeds)


def default_grid(policy: AdaptationPolicy, epochs: int = 20, base: TrainConfig | None = None) -> list[TrainConfig]:
    """Head lr x backbone-side lr x weight decay, with the backbone-side range set per strategy.

    Low-rank factors start at zero and tolerate larger steps than pretrained
    weights, so their lr range sits an order of magnitude higher.
    """
    base = replace(base or TrainConfig(), epochs=epochs)
    if policy.strategy == "linear_probe":
        side = [0.0]
    elif policy.strategy in ("full_ft", "attn_ft"):
        side = [1e-3, 3e-3]
    else:
        side = [1e-2, 3e-2]
    return make_grid([1e-2, 3e-3], side, [1e-4], base)


@dataclass
class BenchmarkResult:
    accuracy: dict[str, dict[str, float]]  # policy label -> task -> test mean
    rows: list[dict]

    def mean(self, label: str) -> float:
        return float(np.mean(list(self.accuracy[label].values())))

    def gap_closed(self, label: str, low: str = "linear_probe", high: str = "full_ft") -> float:
        lo, hi = self.mean(low), self.mean(high)
        return (self.mean(label) - lo) / (hi - lo) if hi != lo else float("nan")


def run_benchmark(
    backbone: ModuleGraph,
    tasks: Sequence,
    policies: Sequence[AdaptationPolicy],
    epochs: int = 20,
    seeds: Sequence[int] = (0,),
    final_seeds: Sequence[int] = (0, 1, 2),
    progress: Callable[[str], None] | None = None,
) -> BenchmarkResult:
    """Grid-search every policy on every task and collect test means."""
    from .data import generate_dataset

    accuracy: dict[str, dict[str, float]] = {p.label(): {} for p in policies}
    rows = []
    for spec in tasks:
        data = generate_dataset(spec)
        for policy in policies:
            res = adapt_task(backbone, policy, data, spec.num_classes, default_grid(policy, epochs), seeds, final_seeds)
            accuracy[policy.label()][spec.label] = res.test_mean
            rows += res.all_rows
            if progress:
                progress(f"{spec.label} {policy.label()} test={res.test_mean:.4f} cfg=({res.best_config.head_lr}, {res.best_config.adapter_lr})")
    return BenchmarkResult(accuracy, rows)
