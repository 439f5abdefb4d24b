"""Procedural image-classification tasks.

Each task draws per-class prototypes from its own seed, then renders noisy
samples around them.  Train, val and test splits use independent child seeds
of the task seed, so regenerating a task is bit-for-bit reproducible.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

GENERATORS = ("textured-shapes", "frequency-patterns", "color-statistics")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "textured-shapes"
    num_classes: int = 10
    n_train: int = 600
    n_val: int = 200
    n_test: int = 600
    resolution: int = 32
    noise: float = 0.1
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in GENERATORS:
            raise ValueError(f"unknown generator {self.kind!r}; choose from {GENERATORS}")
        if self.num_classes < 2:
            raise ValueError("a task needs at least 2 classes")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one sample")

    @property
    def label(self) -> str:
        return self.name or f"{self.kind}-{self.seed}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class Split:
    images: np.ndarray  # N x 3 x H x W float32
    labels: np.ndarray  # N int64

    def __len__(self) -> int:
        return len(self.labels)


def _grid(res: int):
    c = (np.arange(res, dtype=np.float64) + 0.5) / res * 2 - 1
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return yy, xx


def _smooth_noise(rng, n: int, res: int, cells: int) -> np.ndarray:
    """Bilinearly upsampled coarse noise, N x res x res, roughly unit variance."""
    coarse = rng.normal(size=(n, cells + 1, cells + 1))
    t = np.linspace(0, cells, res)
    i0 = np.minimum(t.astype(int), cells - 1)
    f = t - i0
    rows = coarse[:, i0] * (1 - f)[None, :, None] + coarse[:, i0 + 1] * f[None, :, None]
    return rows[:, :, i0] * (1 - f) + rows[:, :, i0 + 1] * f


# --- textured shapes --------------------------------------------------------

_SHAPES = ("disk", "square", "triangle", "ring", "cross", "diamond")


def _shape_mask(kind: str, yy, xx, cy, cx, size):
    dy, dx = (yy - cy[:, None, None]) / size[:, None, None], (xx - cx[:, None, None]) / size[:, None, None]
    if kind == "disk":
        return dy**2 + dx**2 < 1
    if kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) < 0.85
    if kind == "triangle":
        return (dy < 0.8) & (dy > 2 * np.abs(dx) - 1)
    if kind == "ring":
        r2 = dy**2 + dx**2
        return (r2 < 1) & (r2 > 0.35)
    if kind == "cross":
        return ((np.abs(dy) < 0.3) & (np.abs(dx) < 1)) | ((np.abs(dx) < 0.3) & (np.abs(dy) < 1))
    return np.abs(dy) + np.abs(dx) < 1.1


def _textured_shapes(rng, proto_rng, spec, labels):
    n, res, k = len(labels), spec.resolution, spec.num_classes
    shapes = proto_rng.permutation(np.resize(np.arange(len(_SHAPES)), k))
    angles = proto_rng.uniform(0, np.pi, k)
    freqs = proto_rng.uniform(2.0, 5.0, k)
    yy, xx = _grid(res)
    cy, cx = rng.uniform(-0.3, 0.3, n), rng.uniform(-0.3, 0.3, n)
    size = rng.uniform(0.45, 0.7, n)
    theta = angles[labels] + rng.normal(0, 0.15, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    u = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    texture = np.sin(np.pi * freqs[labels][:, None, None] * u + phase[:, None, None])
    mask = np.zeros((n, res, res), dtype=bool)
    for s in range(len(_SHAPES)):
        idx = shapes[labels] == s
        if idx.any():
            mask[idx] = _shape_mask(_SHAPES[s], yy, xx, cy[idx], cx[idx], size[idx])
    fg = rng.uniform(0.3, 1.0, (n, 3))
    bg = rng.uniform(-0.3, 0.3, (n, 3))
    img = np.where(mask[:, None], fg[:, :, None, None] * (0.6 + 0.4 * texture[:, None]), bg[:, :, None, None])
    return img


# --- frequency patterns -----------------------------------------------------


def _frequency_patterns(rng, proto_rng, spec, labels):
    n, res, k = len(labels), spec.resolution, spec.num_classes
    freqs = proto_rng.uniform(1.0, 7.0, k)
    angles = proto_rng.uniform(0, np.pi, k)
    yy, xx = _grid(res)
    f = freqs[labels] * np.exp(rng.normal(0, 0.06, n))
    theta = angles[labels] + rng.normal(0, 0.12, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    u = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    wave = np.sin(np.pi * f[:, None, None] * u + phase[:, None, None])
    tint = rng.uniform(0.4, 1.0, (n, 3))
    return wave[:, None] * tint[:, :, None, None]


# --- color statistics -------------------------------------------------------


def _color_statistics(rng, proto_rng, spec, labels):
    n, res, k = len(labels), spec.resolution, spec.num_classes
    means = proto_rng.uniform(-0.6, 0.6, (k, 3))
    spreads = proto_rng.uniform(0.1, 0.5, (k, 3))
    field = np.stack([_smooth_noise(rng, n, res, 4) for _ in range(3)], axis=1)
    mu = means[labels] + rng.normal(0, 0.08, (n, 3))
    sd = spreads[labels]
    return mu[:, :, None, None] + sd[:, :, None, None] * field


_RENDER = {
    "textured-shapes": _textured_shapes,
    "frequency-patterns": _frequency_patterns,
    "color-statistics": _color_statistics,
}


def _balanced_labels(rng, n: int, k: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % k).astype(np.int64)


def generate_dataset(spec: SyntheticTaskSpec) -> dict[str, Split]:
    """Render the train/val/test splits of ``spec``."""
    root = np.random.SeedSequence(spec.seed)
    proto_seq, *split_seqs = root.spawn(4)
    render = _RENDER[spec.kind]
    out = {}
    for split, n, seq in zip(("train", "val", "test"), (spec.n_train, spec.n_val, spec.n_test), split_seqs):
        rng = np.random.default_rng(seq)
        proto_rng = np.random.default_rng(proto_seq)
        labels = _balanced_labels(rng, n, spec.num_classes)
        img = render(rng, proto_rng, spec, labels)
        img = img + spec.noise * rng.normal(size=img.shape)
        out[split] = Split(img.astype(np.float32), labels)
    return out


def standard_tasks(seed: int = 100, **overrides) -> list[SyntheticTaskSpec]:
    """The three downstream tasks of the desk benchmark, one per generator."""
    return [
        SyntheticTaskSpec(kind=k, seed=seed + i, name=f"{k}", **overrides)
        for i, k in enumerate(GENERATORS)
    ]


def pretraining_task(seed: int = 7, **overrides) -> SyntheticTaskSpec:
    defaults = dict(kind="textured-shapes", num_classes=24, n_train=4000, n_val=400, n_test=400, name="base")
    defaults.update(overrides)
    return SyntheticTaskSpec(seed=seed, **defaults)
