# %% [markdown]
# # Attention over a deduplicated cache
#
# If a key appears m times in the cache, softmax attention gives it m times
# the weight of a single copy. So we can store the key once, store the mean of
# its values, and add ln(m) to its logit. This notebook checks that the
# shortcut is exact, and shows what goes wrong without the ln(m) term.

# %%
import numpy as np

from streamattn import dense_attention, group_duplicates, grouped_attention

rng = np.random.default_rng(0)

# 12 distinct keys, repeated to fill a 200-row cache
unique = rng.standard_normal((12, 16)).astype(np.float32)
keys = unique[rng.integers(12, size=200)]
values = rng.standard_normal((200, 8)).astype(np.float32)
queries = rng.standard_normal((5, 16)).astype(np.float32)

# %%
g = group_duplicates(keys, values, tol=1.0)
print("groups:", g.groups)
print("multiplicities:", g.multiplicities)

# %% [markdown]
# Grouped attention over 12 rows vs dense attention over all 200:

# %%
dense = dense_attention(queries, keys, values).output
grouped = grouped_attention(queries, g).output
print("max |grouped - dense| =", np.abs(grouped - dense).max())

# %% [markdown]
# Dropping the bias treats every group as a single token, so rare keys get
# too much weight:

# %%
unbiased = grouped_attention(queries, g, log_bias=False).output
print("without ln(m):", np.abs(unbiased - dense).max())

# %% [markdown]
# ## Approximate grouping
#
# Real caches rarely repeat keys exactly. With a cosine threshold below 1,
# near-duplicates merge too. The error grows as the threshold drops.

# %%
noisy = unique[rng.integers(12, size=200)] + 0.05 * rng.standard_normal((200, 16)).astype(np.float32)
ref = dense_attention(queries, noisy, values).output
for tol in (1.0, 0.99, 0.95, 0.9, 0.5):
    gg = group_duplicates(noisy, values, tol)
    err = np.abs(grouped_attention(queries, gg).output - ref).max()
    print(f"tol={tol:<5} groups={gg.groups:<4} max_abs_err={err:.4f}")
