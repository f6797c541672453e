# %% [markdown]
# # A cache that stops growing
#
# An autoregressive rollout appends every frame's keys and values to the
# context, so dense attention gets slower every frame. In the synthetic stream
# used here, 64 persistent tracks re-emit slightly perturbed keys every frame.
# TempCache folds each new token into its matching entry, so the cache
# stays at 64 entries.

# %%
import numpy as np

from streamattn import RolloutConfig, run_rollout

cfg = RolloutConfig(frames=300)
report = run_rollout(cfg, methods=("tempcache",))

# %%
frames = report.column("dense", "frame")
for f in (0, 10, 100, 299):
    print(f"frame {f:>3}: dense context={report.column('dense', 'cache_entries')[f]:>6} tokens, "
          f"tempcache={report.column('tempcache', 'cache_entries')[f]} entries")

# %% [markdown]
# Per-frame attention time. Dense attention grows linearly with the context,
# while the compressed cache stays flat. Only the slopes are meaningful here;
# absolute microseconds depend on the machine.

# %%
for m in ("dense", "tempcache"):
    t = report.column(m, "attn_micros")
    slope = np.polyfit(frames, t, 1)[0]
    print(f"{m:>9}: first 10 frames {t[:10].mean():7.1f}us  last 10 {t[-10:].mean():7.1f}us  "
          f"slope {slope:.3f}us/frame")

# %% [markdown]
# Fidelity: recall counts how much of the dense attention mass the
# compressed cache reproduces, token by token.

# %%
print("mean recall:", report.column("tempcache", "recall").mean())
print("memory ratio at the end:",
      report.column("dense", "cache_bytes")[-1] / report.column("tempcache", "cache_bytes")[-1])

# %% [markdown]
# ## Exact repetition
#
# When tracks never drift and merge_tol is 1, merging is lossless and the
# output matches dense attention to float precision.

# %%
from streamattn.rollout import duplicate_config

rep = run_rollout(duplicate_config(), methods=("tempcache",))
print("max error over all frames:", rep.column("tempcache", "max_abs_err").max())
