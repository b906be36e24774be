"""Desk-scale planner and simulator for prefix-shared batched LLM inference."""

from .errors import (
    CapacityError,
    ParseError,
    PrefixBatchError,
    UnschedulableRequestError,
    ValidationError,
)
from .workload import (
    Request,
    SyntheticSpec,
    Workload,
    generate_microbenchmark,
    read_workload,
    shuffle_workload,
    write_workload,
)
from .prefix_tree import (
    GroupMember,
    PrefixSharingGroup,
    PrefixTree,
    TreeNode,
    build_tree,
    extract_groups,
    first_level_saved_tokens,
    maximize_reuse,
    multi_level_saved_tokens,
    optimal_partition_oracle,
    read_groups,
    saved_tokens,
    saving_ratio_static,
    write_groups,
)
from .scheduler import (
    KVAllocator,
    LRUPrefixCache,
    Phase,
    SchedulerConfig,
    SchedulerState,
    SimulationTrace,
    TokenBatch,
    form_token_batch,
    order_groups,
    simulate,
    step,
)
from .metrics import (
    Report,
    ValleyConfig,
    build_report,
    mean_tokens_per_iteration,
    saving_ratio,
    trace_summary,
    valley_fraction,
)

__version__ = "0.1.0"
