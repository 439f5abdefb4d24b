# # Adapting a pretrained backbone to several tasks
#
# One frozen backbone, one small bundle per task. Bundles are checked against
# the backbone fingerprint and swapped in without touching the shared weights.

# +
import tempfile
from pathlib import Path

import numpy as np

from petah.adapters import AdaptationPolicy
from petah.data import generate_dataset, standard_tasks
from petah.io import attach, bundle_from_model, load_adapter_bundle, save_adapter_bundle, save_checkpoint
from petah.training import TrainConfig, adapt_task, evaluate, make_grid, pretrain_backbone

out = Path(tempfile.mkdtemp(prefix="petah-demo-"))
# -

# A shorter pretraining run keeps the demo under a minute. The benchmark uses 30 epochs on
# 4000 images.

# +
backbone, res, base_task = pretrain_backbone(epochs=15, n_train=2000)
print(f"base task val accuracy after {len(res.history)} epochs: {res.best_val:.3f}")
print("checkpoint bytes:", save_checkpoint(out / "backbone.ptah", backbone))
# -

# Adapt PETAH(8,2) to two downstream tasks with a tiny grid.

# +
tasks = {spec.label: spec for spec in standard_tasks(n_train=300)}
policy = AdaptationPolicy.petah(2)
grid = make_grid([1e-2], [1e-2], [1e-4], TrainConfig(epochs=10))
bundles = {}
for label in ("frequency-patterns", "color-statistics"):
    spec = tasks[label]
    result = adapt_task(backbone, policy, generate_dataset(spec), spec.num_classes, grid, final_seeds=(0,))
    bundle = bundle_from_model(result.models[0], backbone, label)
    stats = save_adapter_bundle(out / f"{label}.bundle", bundle)
    bundles[label] = out / f"{label}.bundle"
    print(f"{label:20s} test={result.test_mean:.3f} bundle={stats['bytes']} bytes, adapters={stats['adapter_params']} params")
# -

# Hot-swap: attach A, then B, then A again. The logits for A repeat bit for bit.

# +
probe = generate_dataset(tasks["frequency-patterns"])["test"]
logits = []
for label in ("frequency-patterns", "color-statistics", "frequency-patterns"):
    model = attach(backbone, load_adapter_bundle(bundles[label]))
    logits.append(model.forward(probe.images[:16]).data)
print("A -> B -> A bitwise:", logits[0].tobytes() == logits[2].tobytes())
print("A vs B differ:", not np.array_equal(logits[0], logits[1]))
model = attach(backbone, load_adapter_bundle(bundles["frequency-patterns"]))
print("reattached A on its test split:", evaluate(model, probe))
