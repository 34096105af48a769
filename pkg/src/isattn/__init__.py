"""In-context sparse attention on CPU.

A numerically verifiable implementation of context pre-selection,
sharpness-based query routing, and block-wise 0th-order Taylor sparse
attention, with exact-attention oracles, gradient support, error/bound
analysis, multiply-add accounting, and a benchmark CLI (`isa-bench`).
"""

from .analysis import (
    BoundConstants,
    CorrelationReport,
    ErrorReport,
    QuadrantStats,
    block_diameters,
    estimate_lipschitz,
    quadrant_stats,
    report_to_csv,
    row_sharpness,
    sharpness_error_correlation,
    taylor_error,
    theorem1_bound,
    theorem_bound,
)
from .coarse import (
    BlockMask,
    CoarseSet,
    SelectionIndex,
    SharpnessSplit,
    build_block_mask,
    build_coarse,
    rank_context,
    sharpness_split,
)
from .errors import (
    BlockIndexError,
    ConfigError,
    ContractError,
    DegenerateRowError,
    FormatError,
    InputError,
    IsaError,
    LayoutError,
    NumericError,
)
from .pipeline import (
    IsaConfig,
    IsaRouting,
    IsaTrace,
    apply_decoupled_rope,
    isa_backward,
    isa_forward,
    isa_forward_with_routing,
    isa_routing,
)
from .reference import (
    GradBundle,
    OnlineState,
    full_attention,
    full_attention_backward,
    online_softmax_attention,
)
from .taylor import (
    FlopCount,
    TaylorKernelInput,
    flop_count,
    taylor_sparse_backward,
    taylor_sparse_forward,
)
from .tensor import (
    DTYPES,
    BlockLayout,
    IclLayout,
    Tensor4,
    block_mean,
    concat_seq,
    ensure_tensor4,
    gather_blocks,
    load_tensor4,
    pad_to_blocks,
    save_tensor4,
    scatter_blocks,
)
from .util import elementwise_relative_error, max_relative_error, mean_relative_error
from .workload import WorkloadSpec, dump, generate, load

__version__ = "0.1.0"
