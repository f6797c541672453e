# %% [markdown]
# # Sparse attention from nearest-neighbour search
#
# Most queries put almost all of their weight on a few keys. If an index can
# find those keys cheaply, the query can skip the rest. Two training-free
# indexes are compared here: random-projection LSH and low-bit scalar
# quantisation.

# %%
import numpy as np

from streamattn import (
    AnnConfig,
    build_quant,
    dense_attention,
    execute_sparse,
    plan_self_attention,
    prune_prompt,
    quant_topk,
    recall_density_curve,
)

rng = np.random.default_rng(0)

# %% [markdown]
# ## How concentrated is attention?
#
# Keep the top fraction of weights per query and measure the mass retained.

# %%
keys = rng.standard_normal((256, 32))
keys /= np.linalg.norm(keys, axis=1, keepdims=True)
queries = 6 * np.sqrt(32) * (keys[rng.integers(256, size=32)] + 0.3 * rng.standard_normal((32, 32)) / np.sqrt(32))
w = dense_attention(queries, keys, np.zeros((256, 1)), want_weights=True).weights
for dens, rec in recall_density_curve(w, [0.05, 0.1, 0.3, 0.5, 1.0]):
    print(f"density {dens:.2f} -> recall {rec:.3f}")

# %% [markdown]
# ## Quantised top-k: bits vs recall
#
# Searching with 2-bit codes is cheap but misranks keys. 8 bits is close to
# exact search.

# %%
k = rng.standard_normal((1000, 32)).astype(np.float32)
q = rng.standard_normal((100, 32)).astype(np.float32)
exact = quant_topk(build_quant(k, 32), q, 10)
for bits in (2, 4, 8, 16, 32):
    got = quant_topk(build_quant(k, bits), q, 10)
    rec = np.mean([np.intersect1d(a, b).size / 10 for a, b in zip(got, exact)])
    print(f"{bits:>2} bits: recall@10 = {rec:.3f}")

# %% [markdown]
# ## Executing a sparse plan
#
# With 10 bits per table, LSH buckets on these unclustered keys are tiny, so
# density and recall are both low. Fewer bits per table widen the buckets.

# %%
values = rng.standard_normal((256, 8))
ref = dense_attention(queries, keys, values, want_weights=True)
for backend in (AnnConfig("lsh"), AnnConfig("lsh", hash_bits=4), AnnConfig("quant")):
    plan = plan_self_attention(queries, keys, backend, target_density=0.1)
    _, stats = execute_sparse(queries, keys, values, plan, reference=ref)
    print(f"{backend.kind:>5}/{backend.hash_bits if backend.kind == 'lsh' else backend.bits:>2}: density={stats.density:.3f} recall={stats.recall:.3f} "
          f"max_abs_err={stats.max_abs_err:.4f} fallbacks={plan.fallback_count}")

# %% [markdown]
# ## Pruning the prompt for cross-attention
#
# Prompt tokens that share no LSH bucket with any query of the current frame
# are dropped. Below, three prompt tokens match the queries and the other 61
# are orthogonal to them.

# %%
basis = np.linalg.qr(rng.standard_normal((32, 32)))[0]
frame_q = 30 * np.sqrt(32) * basis[np.arange(8) % 3]
irrelevant = rng.standard_normal((61, 29)) @ basis[3:]
prompt = np.concatenate([basis[:3], irrelevant / np.linalg.norm(irrelevant, axis=1, keepdims=True)])
mask = prune_prompt(prompt, frame_q, AnnConfig("lsh"), min_keep=3)
print("kept:", np.flatnonzero(mask.kept), f"density={mask.density:.3f}")
