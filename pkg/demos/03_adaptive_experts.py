"""Growing and pruning the expert set from routing records.

During a recording window the layer counts per-expert activations (r_e) and
sums the embeddings of tokens that activated nothing (r_s). Closing the
window removes experts nobody used and, if unserved tokens exist, appends
one expert whose representation column is r_s normalized, with a zero
threshold: the construction guarantees the very tokens that went unserved
activate the newcomer.
"""

import numpy as np

from dynmoe import AdaptConfig, MoeLayer, adapt, moe_forward, record, route_top_any

rng = np.random.default_rng(2)

D, H = 10, 8
layer = MoeLayer.random(D, H, n_experts=3, rng=rng)
layer.router.g.value[:] = 4.0  # strict thresholds: most tokens go unserved
print(f"layer starts with {layer.n_experts} experts, thresholds at 4.0")

# A tight cluster of tokens the current experts will not serve.
center = rng.standard_normal(D)
center /= np.linalg.norm(center)
cluster = center[None, :] + 0.05 * rng.standard_normal((30, D))

decision = route_top_any(cluster, layer.router)
print(f"cluster of 30 tokens: activation counts per expert = "
      f"{decision.mask.sum(axis=0).astype(int).tolist()}, unserved = "
      f"{int((decision.k == 0).sum())}")

layer.record.start()
record(layer.record, decision, cluster)
print(f"routing record: r_e={layer.record.r_e.tolist()}  "
      f"|r_s|={np.linalg.norm(layer.record.r_s):.2f}")

report = adapt(layer, layer.record, AdaptConfig(max_experts=8, min_experts=1), rng)
print(f"\nadapt: removed {report.removed_experts} (never activated, clamped to "
      f"keep at least 1), added one expert -> {report.new_k_total} experts")

after = route_top_any(cluster, layer.router)
print(f"the new expert now catches the whole cluster: "
      f"{int(after.mask[:, -1].sum())}/30 tokens, its threshold = "
      f"{layer.router.g.value[-1]:.1f}")

# --- pruning leaves the function intact -----------------------------------------
# Removing an expert no token used cannot change any output: check on a
# probe batch around the new expert's cluster.
probe = center[None, :] + 0.05 * rng.standard_normal((20, D))
before_out, probe_dec = moe_forward(layer, probe)
layer.record.start()
record(layer.record, probe_dec, probe)
report = adapt(layer, layer.record, AdaptConfig(max_experts=8, min_experts=1), rng)
after_out, _ = moe_forward(layer, probe)
print(f"\npruning pass removed {report.removed_experts}; probe outputs moved by "
      f"{np.max(np.abs(after_out - before_out)):.1e} (exactly zero expected)")
