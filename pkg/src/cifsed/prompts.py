"""Cloze prompts and the three-stage curriculum schedule.

Prompts are appended to support instances only. Prompt positions are
labelled O and carry a content/prompt boundary so downstream code can keep
them out of prototype means, losses, and span scoring.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .corpus import Instance, O_LABEL

MASK = "[mask]"
MASK_STAR = "[mask*]"
SEP = "[SEP]"

MASK_STAR_NOW = "now"
MASK_STAR_RECENTLY = "recently"
MASK_STAR_BEFORE = "before"


@dataclass(frozen=True)
class PromptTemplate:
    stage: int
    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        stars = self.tokens.count(MASK_STAR)
        if self.stage == 1 and stars != 0:
            raise ValueError("stage-1 template must not contain [mask*]")
        if self.stage in (2, 3) and stars != 1:
            raise ValueError(f"stage-{self.stage} template needs exactly one [mask*]")
        if self.tokens.count(MASK) != 2:
            raise ValueError("template needs exactly two [mask] slots")


@dataclass(frozen=True)
class PromptTemplateSet:
    """Versioned prompt wording, stored as a JSON resource so experiments can
    swap templates without code changes."""

    version: int
    templates: tuple[PromptTemplate, PromptTemplate, PromptTemplate]
    candidates: dict[int, tuple[str, ...]]

    @classmethod
    def load(cls, path: str | Path | None = None) -> "PromptTemplateSet":
        if path is None:
            text = resources.files("cifsed").joinpath("templates.json").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        data = json.loads(text)
        templates = tuple(
            PromptTemplate(stage=s, tokens=tuple(data["stages"][str(s)]))
            for s in (1, 2, 3)
        )
        candidates = {
            int(s): tuple(words) for s, words in data["mask_star_candidates"].items()
        }
        if candidates.get(2) != (MASK_STAR_BEFORE, MASK_STAR_NOW):
            raise ValueError("stage-2 [mask*] candidates must be (before, now)")
        if candidates.get(3) != (MASK_STAR_BEFORE, MASK_STAR_RECENTLY, MASK_STAR_NOW):
            raise ValueError("stage-3 [mask*] candidates must be (before, recently, now)")
        return cls(version=int(data["version"]), templates=templates, candidates=candidates)

    def template(self, stage: int) -> PromptTemplate:
        if stage not in (1, 2, 3):
            raise ValueError(f"unknown curriculum stage {stage}")
        return self.templates[stage - 1]


def stage_of_session(m: int, num_sessions: int) -> int:
    """Curriculum stage of session ``m`` out of ``num_sessions``: stage 1
    through ceil(M/3), stage 2 through ceil(2M/3), stage 3 afterwards."""
    if num_sessions < 1:
        raise ValueError("num_sessions must be >= 1")
    if not 1 <= m <= num_sessions:
        raise ValueError(f"session {m} outside 1..{num_sessions}")
    if m <= math.ceil(num_sessions / 3):
        return 1
    if m <= math.ceil(2 * num_sessions / 3):
        return 2
    return 3


def mask_star_value(
    learned_session: int, current_session: int, stage: int, recent_window: int = 2
) -> str:
    """Verbalize how recently a class was learned, per the stage's candidate set."""
    if stage < 2:
        raise ValueError("[mask*] exists only in stages 2 and 3")
    if learned_session == current_session:
        return MASK_STAR_NOW
    if stage == 2:
        return MASK_STAR_BEFORE
    if 1 <= current_session - learned_session <= recent_window:
        return MASK_STAR_RECENTLY
    return MASK_STAR_BEFORE


@dataclass(frozen=True)
class PromptedInstance:
    """An instance with a prompt appended; prompt positions are labelled O."""

    tokens: tuple[str, ...]
    labels: tuple[str, ...]
    content_len: int
    prompt_len: int
    source: Instance

    def strip(self) -> Instance:
        return self.source


def assemble_prompt(
    instance: Instance,
    stage: int,
    *,
    template_set: PromptTemplateSet,
    class_name: str | None = None,
    trigger_tokens: tuple[str, ...] | None = None,
    mask_star: str | None = None,
    max_len: int = 128,
) -> PromptedInstance:
    """Append a cloze prompt to ``instance``.

    During training ``class_name`` and ``trigger_tokens`` fill the two [mask]
    slots; at inference pass None so the slots stay reserved mask tokens.
    ``mask_star`` is always filled for stages 2-3 (it encodes session
    recency, not gold labels).
    """
    template = template_set.template(stage)
    if stage >= 2 and mask_star is None:
        raise ValueError("stages 2-3 require a [mask*] fill")
    if mask_star is not None and stage >= 2:
        allowed = template_set.candidates[stage]
        if mask_star not in allowed:
            raise ValueError(f"[mask*] fill {mask_star!r} not in {allowed}")

    first_fill = tuple(class_name.split()) if class_name else None
    mask_seen = 0
    prompt_tokens: list[str] = []
    for tok in template.tokens:
        if tok == MASK_STAR:
            prompt_tokens.append(mask_star if mask_star is not None else MASK_STAR)
        elif tok == MASK:
            mask_seen += 1
            fill = first_fill if mask_seen == 1 else trigger_tokens
            if fill:
                prompt_tokens.extend(fill)
            else:
                prompt_tokens.append(MASK)
        else:
            prompt_tokens.append(tok)

    tokens = instance.tokens + tuple(prompt_tokens)
    if len(tokens) > max_len:
        raise ValueError(
            f"prompted sequence has {len(tokens)} tokens, exceeds max length {max_len}"
        )
    labels = instance.labels + tuple(O_LABEL for _ in prompt_tokens)
    return PromptedInstance(
        tokens=tokens,
        labels=labels,
        content_len=len(instance.tokens),
        prompt_len=len(prompt_tokens),
        source=instance,
    )
