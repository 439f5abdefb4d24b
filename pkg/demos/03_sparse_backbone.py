# # Adapters on a magnitude-pruned backbone
#
# Prune 90% of every weight tensor, train adapters next to the sparse weights,
# and see why merging is refused by default.

# +
import numpy as np

from petah.adapters import AdaptationPolicy, inject
from petah.data import SyntheticTaskSpec, generate_dataset
from petah.models import ModelConfig, build_mini_hybrid
from petah.sparsity import SparseMergeError, apply_mask, compose_with_adapters, magnitude_prune, measured_sparsity
from petah.training import TrainConfig, evaluate, train

backbone = build_mini_hybrid(ModelConfig(), seed=0)
# -

# Per-layer pruning removes the same fraction from each tensor. Ties keep the
# earlier entry.

# +
mask = magnitude_prune(backbone, 0.9, "per-layer")
sparse = apply_mask(backbone, mask)
print(f"masked tensors: {len(mask.masks)}, measured sparsity {measured_sparsity(sparse):.4f}")
# -

# Train PETAH(8,1). Masks are reapplied after each update, so pruned entries
# stay zero.

# +
spec = SyntheticTaskSpec(kind="frequency-patterns", num_classes=4, n_train=200, n_val=80, n_test=80, seed=3)
data = generate_dataset(spec)
model = inject(sparse, AdaptationPolicy.petah(1), num_classes=4)
train(model, data, TrainConfig(epochs=5, head_lr=1e-2, adapter_lr=1e-2))
params = model.graph.parameters()
leaks = sum(int(params[n].data[~m].any()) for n, m in sparse.masks.items())
print("tensors with nonzero pruned entries:", leaks)
print("test:", evaluate(model, data["test"]))
# -

# B @ A is dense, so merging would erase the sparsity. This needs an explicit
# override.

# +
try:
    compose_with_adapters(model)
except SparseMergeError as exc:
    print("refused:", exc)
dense = compose_with_adapters(model, force_dense=True)
x = data["test"].images[:8]
gap = np.abs(dense.forward(x).data - model.forward(x).data).max()
merged = dense.graph.parameters()
zeros = np.mean(np.concatenate([merged[t].data.ravel() == 0 for t in model.adapters]))
print(f"dense override: zero fraction in adapted weights {zeros:.4f}, max logit gap {gap:.2e}")
