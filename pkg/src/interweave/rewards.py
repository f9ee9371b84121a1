"""Hybrid reward: deterministic rule score, judge aggregation, gated composite.

The rule score enforces the task's image-count constraint:

    disallowed      -> 1 if no images were generated, else 0
    at least one    -> 1 if any image was generated, else 0
    unconstrained   -> always 1
    exactly n       -> n_gen / n           while n_gen <= n
                       max(0, 1 - alpha * (n_gen - n))   beyond n

Judge scores (raw 1..5) normalize linearly to [0, 1]. The composite is

    rule_w * r_rule + llm_w * r_llm + mllm_w * r_mllm * r_rule

where the rule score multiplicatively gates the image-judge term: visual
quality only counts once the count constraint is satisfied.
"""
from __future__ import annotations

from collections.abc import Iterable, Sequence, Set
from dataclasses import dataclass
from enum import Enum
from statistics import fmean

from .tags import SourceKind

DEFAULT_ALPHA = 0.3


class ConstraintKind(Enum):
    DISALLOWED = "disallowed"
    UNCONSTRAINED = "unconstrained"
    EXACTLY = "exactly"
    AT_LEAST_ONE = "at_least_one"


@dataclass(frozen=True)
class ImageCountConstraint:
    """Per-task image requirement: one of {-1, 0, n, inf} in file form."""

    kind: ConstraintKind
    n: int | None = None

    def __post_init__(self) -> None:
        if self.kind is ConstraintKind.EXACTLY:
            if not isinstance(self.n, int) or isinstance(self.n, bool) or self.n < 1:
                raise ValueError("an exact constraint requires an integer n >= 1")
        elif self.n is not None:
            raise ValueError(f"{self.kind.value} constraint carries no n")

    @classmethod
    def disallowed(cls) -> "ImageCountConstraint":
        return cls(ConstraintKind.DISALLOWED)

    @classmethod
    def unconstrained(cls) -> "ImageCountConstraint":
        return cls(ConstraintKind.UNCONSTRAINED)

    @classmethod
    def exactly(cls, n: int) -> "ImageCountConstraint":
        return cls(ConstraintKind.EXACTLY, n)

    @classmethod
    def at_least_one(cls) -> "ImageCountConstraint":
        return cls(ConstraintKind.AT_LEAST_ONE)

    @classmethod
    def from_raw(cls, value: object) -> "ImageCountConstraint":
        """Map the task-file encoding (-1 | 0 | n | "inf") to a constraint."""
        if isinstance(value, str):
            if value.strip().lower() == "inf":
                return cls.at_least_one()
            try:
                value = int(value)
            except ValueError:
                raise ValueError(f"unrecognized image count constraint: {value!r}") from None
        if isinstance(value, float):
            if value == float("inf"):
                return cls.at_least_one()
            if not value.is_integer():
                raise ValueError(f"unrecognized image count constraint: {value!r}")
            value = int(value)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"unrecognized image count constraint: {value!r}")
        if value == -1:
            return cls.disallowed()
        if value == 0:
            return cls.unconstrained()
        if value > 0:
            return cls.exactly(value)
        raise ValueError(f"unrecognized image count constraint: {value!r}")

    def to_raw(self) -> int | str:
        if self.kind is ConstraintKind.DISALLOWED:
            return -1
        if self.kind is ConstraintKind.UNCONSTRAINED:
            return 0
        if self.kind is ConstraintKind.AT_LEAST_ONE:
            return "inf"
        assert self.n is not None
        return self.n


def rule_reward(constraint: ImageCountConstraint, n_gen: int, alpha: float = DEFAULT_ALPHA) -> float:
    """Deterministic compliance score in [0, 1] for a generated image count.

    ``n_gen`` counts syntactically valid directives in the response; tool
    execution failures are penalized elsewhere, not here.
    """
    if n_gen < 0:
        raise ValueError("n_gen must be >= 0")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if constraint.kind is ConstraintKind.DISALLOWED:
        return 1.0 if n_gen == 0 else 0.0
    if constraint.kind is ConstraintKind.AT_LEAST_ONE:
        return 1.0 if n_gen >= 1 else 0.0
    if constraint.kind is ConstraintKind.UNCONSTRAINED:
        return 1.0
    required = constraint.n
    assert required is not None
    if n_gen <= required:
        return n_gen / required
    return max(0.0, 1.0 - alpha * (n_gen - required))


def normalize_judge_score(raw: int) -> float:
    """Map a raw 1..5 judge score linearly onto [0, 1]."""
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise ValueError("judge scores must be integers")
    if not 1 <= raw <= 5:
        raise ValueError(f"judge score out of range [1, 5]: {raw}")
    return (raw - 1) / 4


def _validated_score(value: int, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not 1 <= value <= 5:
        raise ValueError(f"{name} must be an integer in [1, 5], got {value!r}")
    return value


@dataclass(frozen=True)
class LlmScores:
    """Text-judge criteria: narrative quality and tag quality, raw 1..5."""

    text_quality: int
    tag_quality: int

    def __post_init__(self) -> None:
        _validated_score(self.text_quality, "text_quality")
        _validated_score(self.tag_quality, "tag_quality")


@dataclass(frozen=True)
class ImageScores:
    """Image-judge criteria for one image, raw 1..5."""

    image_quality: int
    image_text_alignment: int
    task_relevance: int

    def __post_init__(self) -> None:
        _validated_score(self.image_quality, "image_quality")
        _validated_score(self.image_text_alignment, "image_text_alignment")
        _validated_score(self.task_relevance, "task_relevance")


FLOOR_LLM_SCORES = LlmScores(1, 1)
FLOOR_IMAGE_SCORES = ImageScores(1, 1, 1)


def aggregate_llm(scores: LlmScores) -> float:
    """Mean of the normalized text-judge criteria."""
    return fmean(
        (normalize_judge_score(scores.text_quality), normalize_judge_score(scores.tag_quality))
    )


def aggregate_mllm(per_image: Sequence[ImageScores | None]) -> float:
    """Average criteria within each image, then across images.

    ``None`` marks an image whose tool execution failed; it contributes the
    floor (raw 1, normalized 0) on all three criteria. A document with no
    images scores 0 by convention; the composite gate already zeroes this
    term whenever images were required but absent.
    """
    if not per_image:
        return 0.0
    means = []
    for scores in per_image:
        scores = scores or FLOOR_IMAGE_SCORES
        means.append(
            fmean(
                (
                    normalize_judge_score(scores.image_quality),
                    normalize_judge_score(scores.image_text_alignment),
                    normalize_judge_score(scores.task_relevance),
                )
            )
        )
    return fmean(means)


@dataclass(frozen=True)
class RewardWeights:
    rule: float = 0.2
    llm: float = 0.5
    mllm: float = 0.3
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self) -> None:
        for name in ("rule", "llm", "mllm", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"weight {name} must be >= 0")


DEFAULT_WEIGHTS = RewardWeights()


def composite_reward(
    r_rule: float, r_llm: float, r_mllm: float, weights: RewardWeights = DEFAULT_WEIGHTS
) -> float:
    """Weighted sum with the rule score gating the image-judge term."""
    for name, value in (("r_rule", r_rule), ("r_llm", r_llm), ("r_mllm", r_mllm)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return weights.rule * r_rule + weights.llm * r_llm + weights.mllm * r_mllm * r_rule


@dataclass(frozen=True)
class RewardBreakdown:
    r_rule: float
    r_llm: float
    r_mllm: float
    composite: float

    def as_dict(self) -> dict[str, float]:
        return {
            "r_rule": self.r_rule,
            "r_llm": self.r_llm,
            "r_mllm": self.r_mllm,
            "composite": self.composite,
        }


def build_breakdown(
    constraint: ImageCountConstraint,
    n_gen: int,
    llm_scores: LlmScores,
    image_scores: Sequence[ImageScores | None],
    weights: RewardWeights = DEFAULT_WEIGHTS,
) -> RewardBreakdown:
    r_rule = rule_reward(constraint, n_gen, weights.alpha)
    r_llm = aggregate_llm(llm_scores)
    r_mllm = aggregate_mllm(image_scores)
    return RewardBreakdown(r_rule, r_llm, r_mllm, composite_reward(r_rule, r_llm, r_mllm, weights))


@dataclass(frozen=True)
class ToolF1:
    precision: float
    recall: float
    f1: float


def tool_f1(cases: Iterable[tuple[Set[SourceKind], Set[SourceKind]]]) -> ToolF1:
    """Set-overlap precision/recall/F1 per task, macro-averaged.

    Each case pairs the tools a response actually used with the task's target
    tool set. Targets must be non-empty; an empty prediction scores precision
    0 against a non-empty target.
    """
    precisions: list[float] = []
    recalls: list[float] = []
    f1s: list[float] = []
    for predicted, target in cases:
        if not target:
            raise ValueError("every task must declare a non-empty target tool set")
        hits = len(set(predicted) & set(target))
        precision = hits / len(predicted) if predicted else 0.0
        recall = hits / len(target)
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
    if not f1s:
        raise ValueError("tool F1 requires at least one task")
    return ToolF1(fmean(precisions), fmean(recalls), fmean(f1s))
