"""interweave: turn tagged model responses into interleaved image-text documents."""
from .orchestrator import (
    ExecutionPlan,
    FailedImageBlock,
    ImageBlock,
    InterleavedDocument,
    TextBlock,
    assemble,
    execute,
    plan,
    render,
    summarize_document,
    tool_acc,
)
from .rewards import (
    ImageCountConstraint,
    ImageScores,
    LlmScores,
    RewardBreakdown,
    RewardWeights,
    aggregate_llm,
    aggregate_mllm,
    build_breakdown,
    composite_reward,
    normalize_judge_score,
    rule_reward,
    tool_f1,
)
from .tags import (
    CodeParams,
    DiffusionParams,
    DirectiveSegment,
    EditParams,
    ImageDirective,
    ParsedResponse,
    SearchParams,
    SourceKind,
    TextSegment,
    count_directives,
    parse_response,
    serialize_directive,
)
from .tools import (
    ExecLimits,
    ImageAsset,
    ToolError,
    ToolFailure,
    ToolOutcome,
    ToolProvenance,
    ToolSet,
    mock_toolset,
)
from .tts import Candidate, TtsConfig, run_tts

__version__ = "0.1.0"

__all__ = [
    "Candidate",
    "CodeParams",
    "DiffusionParams",
    "DirectiveSegment",
    "EditParams",
    "ExecLimits",
    "ExecutionPlan",
    "FailedImageBlock",
    "ImageAsset",
    "ImageBlock",
    "ImageCountConstraint",
    "ImageDirective",
    "ImageScores",
    "InterleavedDocument",
    "LlmScores",
    "ParsedResponse",
    "RewardBreakdown",
    "RewardWeights",
    "SearchParams",
    "SourceKind",
    "TextBlock",
    "TextSegment",
    "ToolError",
    "ToolFailure",
    "ToolOutcome",
    "ToolProvenance",
    "ToolSet",
    "TtsConfig",
    "aggregate_llm",
    "aggregate_mllm",
    "assemble",
    "build_breakdown",
    "composite_reward",
    "count_directives",
    "execute",
    "mock_toolset",
    "normalize_judge_score",
    "parse_response",
    "plan",
    "render",
    "rule_reward",
    "run_tts",
    "serialize_directive",
    "summarize_document",
    "tool_acc",
    "tool_f1",
]
