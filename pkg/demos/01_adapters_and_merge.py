# # Low-rank adapters on linear and conv layers
#
# A factored adapter adds B @ A next to a frozen weight. Merging folds the
# product into the weight so inference runs the plain layer again.

# +
import numpy as np

from petah.adapters import AdaptationPolicy, count_adapter_params, inject
from petah.models import ModelConfig, build_mini_hybrid, forward
from petah.tensor import Tensor
from petah.verify import merge_equivalence_scaled, random_cases, rank_bound

rng = np.random.default_rng(0)
# -

# Inject PETAH with conv rank 2 into the default mini-hybrid. B starts at zero,
# so the adapted model is bitwise identical to the backbone.

# +
backbone = build_mini_hybrid(ModelConfig(), seed=0)
model = inject(backbone, AdaptationPolicy.petah(2))
x = rng.normal(size=backbone.input_shape(4)).astype(np.float32)
print("transparent at init:", model.forward(x).data.tobytes() == forward(backbone, x).data.tobytes())
print("adapted tensors:", len(model.adapters))
# -

# Per-layer adapter counts come from closed-form formulas.

# +
counts = count_adapter_params(AdaptationPolicy.petah(2), backbone)
for name, n in list(counts["per_layer"].items())[:6]:
    print(f"{name:28s} {n:6d}")
print("total", counts["total"])
# -

# Give B some values, then compare factored and merged forwards.

# +
for f in model.adapters.values():
    f.B = Tensor(rng.normal(0, 0.05, f.B.shape).astype(np.float32))
factored = model.forward(x).data
model.merge_all()
merged = model.forward(x).data
print("max |factored - merged| / max |merged|:", float(np.abs(factored - merged).max() / np.abs(merged).max()))
# -

# The same check over random layer configurations, plus the rank bound on
# every materialized update.

# +
cases = random_cases(200, seed=1)
print(merge_equivalence_scaled(cases=cases).line())
print(rank_bound(cases=cases).line())
# -

# Unmerging subtracts the same product and restores the backbone weights up
# to float32 rounding.

# +
model.unmerge_all()
restored = model.graph.parameters()
drift = max(float(np.abs(restored[t].data - backbone.parameters()[t].data).max()) for t in model.adapters)
print("largest weight drift after merge + unmerge:", drift)
