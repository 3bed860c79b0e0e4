"""Closed-loop optimizer for the textual configuration of LLM multi-agent systems.

The pipeline: parse prompts into an editable typed graph, run tasks, reflect
on trajectories, cluster recurring failures, propose targeted graph edits
guided by past optimization experience, validate on the failing subset, and
accept or roll back.
"""

from .clustering import (
    ClusteringParams,
    EmbeddedGradient,
    ErrorCluster,
    dbscan,
    dedupe,
    random_clusters,
    representative,
)
from .errors import TpgoError
from .gateway import (
    ChatExchange,
    EmbeddingVector,
    HashEmbeddingProvider,
    ModelConfig,
    UsageCounters,
    UsageLedger,
    chat,
    cosine_similarity,
    embed,
)
from .gradients import TextualGradient, Trajectory, parse_reflection, reflect
from .graph import (
    Edge,
    GraphEdit,
    Modification,
    NodeSpec,
    OptimizationProposal,
    PromptNode,
    TextualParameterGraph,
    apply_edits,
    apply_proposal,
    deserialize,
    diff,
    graph_hash,
    materialize,
    serialize,
    validate_graph,
)
from .memory import (
    ExemplarBlock,
    ExperienceEntry,
    ExperienceMemory,
    GraoParams,
    rank_group,
    select_exemplars,
)
from .orchestrator import (
    AblationFlags,
    IterationReport,
    OptimizationLoop,
    RunArchive,
    RunParams,
    RunState,
    Task,
    ValidationReport,
    cost_report,
    optimize,
    run_batch,
)
from .prompt_parser import ParseOutcome, parse_prompt, parse_prompts
from .proposals import ProposalRequest, lower, propose

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "ChatExchange",
    "ClusteringParams",
    "EmbeddedGradient",
    "EmbeddingVector",
    "ErrorCluster",
    "ExemplarBlock",
    "ExperienceEntry",
    "ExperienceMemory",
    "GraoParams",
    "GraphEdit",
    "HashEmbeddingProvider",
    "IterationReport",
    "Modification",
    "ModelConfig",
    "NodeSpec",
    "OptimizationLoop",
    "OptimizationProposal",
    "ParseOutcome",
    "PromptNode",
    "ProposalRequest",
    "RunArchive",
    "RunParams",
    "RunState",
    "Task",
    "TextualGradient",
    "TextualParameterGraph",
    "TpgoError",
    "Trajectory",
    "UsageCounters",
    "UsageLedger",
    "ValidationReport",
    "apply_edits",
    "apply_proposal",
    "chat",
    "cosine_similarity",
    "cost_report",
    "dbscan",
    "dedupe",
    "deserialize",
    "diff",
    "embed",
    "graph_hash",
    "lower",
    "materialize",
    "optimize",
    "parse_prompt",
    "parse_prompts",
    "parse_reflection",
    "propose",
    "random_clusters",
    "rank_group",
    "reflect",
    "representative",
    "run_batch",
    "select_exemplars",
    "serialize",
    "validate_graph",
    "Edge",
    "Task",
]
