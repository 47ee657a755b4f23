"""opflow: operation-graph workflow synthesis with a differential KV cache.

The pipeline in one breath: workflow documents are merged into a shared
operation graph (:mod:`opflow.graph`); a small graph-convolution edge scorer
is trained to synthesize task-specific workflows from that graph
(:mod:`opflow.construct`, :mod:`opflow.nn`, :mod:`opflow.features`); serving
those workflows reuses transformer KV segments through a differential cache
store validated against a deterministic toy transformer
(:mod:`opflow.kvstore`, :mod:`opflow.oracle`), with topology-aware residual
pruning (:mod:`opflow.pruning`); and :mod:`opflow.harness` simulates the
whole serving loop for cost/memory benchmarks.  ``opflow.cli`` exposes the
pipeline as the ``opflow`` command.
"""

from .construct import (
    DecodeConfig,
    PlantedCorpus,
    TrainConfig,
    TrainResult,
    TrainSample,
    build_labels,
    edge_f1,
    evaluate_loss,
    generate,
    generate_synthetic_corpus,
    generated_workflow_id,
    instantiate_workflow,
    load_samples,
    mean_edge_f1,
    save_samples,
    score_candidate_edges,
    train,
)
from .errors import (
    CycleError,
    DataError,
    DocumentError,
    MergeError,
    NumericError,
    OpflowError,
)
from .features import (
    Embedder,
    HashingEmbedder,
    TableEmbedder,
    assemble_features,
    compose_operation_text,
    load_vector_table,
    save_vector_table,
)
from .graph import (
    TASK_NODE_ID,
    Operation,
    OperationGraph,
    TaskGraph,
    Workflow,
    condition_on_task,
    graph_to_document,
    merge_workflows,
    normalize_instruction,
    parse_graph,
    parse_workflow,
    serialize_graph,
    serialize_workflow,
    topological_order,
    validate_dag,
    workflow_to_document,
)
from .harness import (
    CostModel,
    RunReport,
    SweepResult,
    Workload,
    ablate_pruning,
    execution_chains,
    make_workload,
    maximal_traces,
    percentile_nearest_rank,
    run_serving_sim,
    sparsity_report,
    sweep_batch_sizes,
)
from .kvstore import (
    BYTES_PER_DELTA_ENTRY,
    MODES,
    CacheStore,
    FetchResult,
    MemoryReport,
    SparseDelta,
    load_store,
    read_delta,
    read_kv,
    reconstruct,
    save_store,
    sparsify,
    write_delta,
    write_kv,
)
from .nn import (
    ModelParams,
    adamw_init,
    adamw_step,
    backward,
    bce_loss,
    finite_difference_grads,
    forward_loss,
    gcn_forward,
    gumbel_sigmoid,
    init_params,
    load_checkpoint,
    normalized_adjacency,
    save_checkpoint,
    score_edges,
)
from .oracle import KVOracle, KVTensor, OracleConfig, tokenize
from .pruning import (
    MaterializationPlan,
    PlanPolicy,
    PlanReport,
    TransitionStats,
    apply_plan,
    plan_materialization,
    read_trace_log,
    write_trace_log,
)

__version__ = "0.1.0"

__all__ = [
    "BYTES_PER_DELTA_ENTRY",
    "CacheStore",
    "CostModel",
    "CycleError",
    "DataError",
    "DecodeConfig",
    "DocumentError",
    "Embedder",
    "FetchResult",
    "HashingEmbedder",
    "KVOracle",
    "KVTensor",
    "MODES",
    "MaterializationPlan",
    "MemoryReport",
    "MergeError",
    "ModelParams",
    "NumericError",
    "OpflowError",
    "Operation",
    "OperationGraph",
    "OracleConfig",
    "PlanPolicy",
    "PlanReport",
    "PlantedCorpus",
    "RunReport",
    "SparseDelta",
    "SweepResult",
    "TASK_NODE_ID",
    "TableEmbedder",
    "TaskGraph",
    "TrainConfig",
    "TrainResult",
    "TrainSample",
    "TransitionStats",
    "Workflow",
    "Workload",
    "ablate_pruning",
    "adamw_init",
    "adamw_step",
    "apply_plan",
    "assemble_features",
    "backward",
    "bce_loss",
    "build_labels",
    "compose_operation_text",
    "condition_on_task",
    "edge_f1",
    "evaluate_loss",
    "execution_chains",
    "finite_difference_grads",
    "forward_loss",
    "gcn_forward",
    "generate",
    "generate_synthetic_corpus",
    "generated_workflow_id",
    "graph_to_document",
    "gumbel_sigmoid",
    "init_params",
    "instantiate_workflow",
    "load_checkpoint",
    "load_samples",
    "load_store",
    "load_vector_table",
    "make_workload",
    "maximal_traces",
    "mean_edge_f1",
    "merge_workflows",
    "normalize_instruction",
    "normalized_adjacency",
    "parse_graph",
    "parse_workflow",
    "percentile_nearest_rank",
    "plan_materialization",
    "read_delta",
    "read_kv",
    "read_trace_log",
    "reconstruct",
    "run_serving_sim",
    "save_checkpoint",
    "save_samples",
    "save_store",
    "save_vector_table",
    "score_candidate_edges",
    "score_edges",
    "serialize_graph",
    "serialize_workflow",
    "sparsify",
    "sparsity_report",
    "sweep_batch_sizes",
    "tokenize",
    "topological_order",
    "train",
    "validate_dag",
    "workflow_to_document",
    "write_delta",
    "write_kv",
    "write_trace_log",
]
