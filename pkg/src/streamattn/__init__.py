"""Streaming attention with temporal KV-cache compression and ANN sparsity."""
from .ann import (
    AnnConfig,
    LshIndex,
    QuantIndex,
    build_lsh,
    build_quant,
    lsh_candidates,
    quant_topk,
    top1_neighbor,
)
from .attention import (
    AttentionOutput,
    GroupedKV,
    dense_attention,
    group_duplicates,
    grouped_attention,
)
from .exceptions import (
    ConfigError,
    EmptyContextError,
    FormatError,
    InvariantError,
    NonFiniteError,
    ShapeError,
)
from .metrics import (
    AttentionStats,
    attention_recall,
    cache_footprint,
    overlap_recall,
    recall_density_curve,
)
from .rollout import RolloutConfig, RolloutReport, generate_stream, run_ablation, run_rollout
from .sparse import (
    PromptMask,
    SparsePlan,
    cross_attention_pruned,
    execute_sparse,
    plan_self_attention,
    prune_prompt,
)
from .tempcache import TempCache
from .tensor import matmul_transposed, read_qkv, stable_softmax_row, write_qkv

__version__ = "0.1.0"
