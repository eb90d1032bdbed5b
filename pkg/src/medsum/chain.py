"""Staged summarization pipeline and the single-prompt baseline.

The staged run extracts entities from the opening patient message, then from
each doctor/patient turn window, collates everything into a deduplicated
ledger, optionally re-examines unknown-status entities against the whole
conversation, and finally summarizes conditioned on the ledger. The baseline
issues one summarization call with no entity grounding.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from .backend import (
    CompletionClient,
    CompletionRequest,
    EmbeddingGateway,
    cache_key,
    default_params,
)
from .model import (
    Encounter,
    EntityLedger,
    EntityStatus,
    ExampleKind,
    MedicalEntity,
    Method,
    PromptKind,
    RunRecord,
    Speaker,
    StructuredSummary,
    TraceEntry,
    Turn,
)
from .promptkit import (
    PromptTemplate,
    TokenBudget,
    parse_entity_list,
    parse_summary,
    render,
    serialize_entity_list,
    serialize_ledger,
)
from .selection import (
    ExamplePool,
    SelectionQuery,
    select_random,
    select_semantic,
)

logger = logging.getLogger(__name__)

__all__ = [
    "SelectionMode",
    "ChainConfig",
    "ChainDeps",
    "ChainError",
    "RunLog",
    "encounter_seed",
    "encounter_text",
    "window_text",
    "pair_turns",
    "extract_rfe_entities",
    "extract_turn_entities",
    "collate",
    "resolve_unknowns",
    "summarize",
    "run_medsum_ent",
    "run_naive_baseline",
    "RunOutcome",
    "run_many",
]

_EXTRACTION_K_CHOICES = (1, 3, 5)
_SEED_MASK = 0xFFFFFFFFFFFFFFFF


class SelectionMode(str, Enum):
    RANDOM = "random"
    SEMANTIC = "semantic"


class ChainError(RuntimeError):
    """A pipeline stage failed for one encounter; other encounters are unaffected."""

    def __init__(self, encounter_id: str, stage: str, cause: Exception):
        self.encounter_id = encounter_id
        self.stage = stage
        super().__init__(f"encounter {encounter_id}: {stage} failed: {cause}")


@dataclass(frozen=True)
class ChainConfig:
    """Run configuration snapshot.

    extraction_k is 1, 3, or 5 (extraction prompts always carry at least one
    example to anchor the output grammar); summarization cannot go beyond
    1-shot. The per-encounter selection seed is a stable hash of the
    encounter id XORed with run_seed, so selections differ across encounters
    but reproduce across runs.
    """

    extraction_k: int = 1
    summarization_k: int = 0
    selection_mode: SelectionMode = SelectionMode.RANDOM
    resolver_enabled: bool = True
    resolver_fail_closed: bool = False
    run_seed: int = 0
    budget: TokenBudget = field(default_factory=TokenBudget)

    def __post_init__(self) -> None:
        object.__setattr__(self, "selection_mode", SelectionMode(self.selection_mode))
        if self.extraction_k not in _EXTRACTION_K_CHOICES:
            raise ValueError(
                f"extraction_k must be one of {_EXTRACTION_K_CHOICES}, got {self.extraction_k}"
            )
        if self.summarization_k not in (0, 1):
            raise ValueError(
                f"summarization_k must be 0 or 1, got {self.summarization_k}"
            )

    def snapshot(self) -> dict[str, Any]:
        return {
            "extraction_k": self.extraction_k,
            "summarization_k": self.summarization_k,
            "selection_mode": self.selection_mode.value,
            "resolver_enabled": self.resolver_enabled,
            "resolver_fail_closed": self.resolver_fail_closed,
            "run_seed": self.run_seed,
            "max_context_tokens": self.budget.max_context_tokens,
            "inflation_factor": self.budget.inflation_factor,
        }


@dataclass
class ChainDeps:
    """Everything a run needs: the completion client, templates, example
    pools, and (for semantic selection) an embedding gateway."""

    client: CompletionClient
    templates: Mapping[str, PromptTemplate]
    pools: Mapping[ExampleKind, ExamplePool] = field(default_factory=dict)
    embedder: EmbeddingGateway | None = None


@dataclass
class RunLog:
    """Per-run sinks for the call trace and non-fatal warnings."""

    trace: list[TraceEntry] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def encounter_seed(encounter_id: str, run_seed: int) -> int:
    """Stable 64-bit per-encounter selection seed."""
    digest = hashlib.sha256(encounter_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") ^ (run_seed & _SEED_MASK)


def encounter_text(enc: Encounter) -> str:
    """The whole conversation as plain text, opening message first."""
    lines = [f"Reason for encounter: {enc.rfe}"]
    lines.extend(f"{t.speaker.value.capitalize()}: {t.text}" for t in enc.turns)
    return "\n".join(lines)


def window_text(window: Sequence[Turn]) -> str:
    return "\n".join(f"{t.speaker.value.capitalize()}: {t.text}" for t in window)


def pair_turns(turns: Sequence[Turn]) -> list[tuple[Turn, ...]]:
    """Group turns into consecutive doctor-then-patient windows.

    A turn that does not complete a doctor/patient pair (doubled speaker,
    interleaved or trailing turn) becomes a singleton window, so every turn
    lands in exactly one window.
    """
    windows: list[tuple[Turn, ...]] = []
    i = 0
    while i < len(turns):
        if (
            i + 1 < len(turns)
            and turns[i].speaker is Speaker.DOCTOR
            and turns[i + 1].speaker is Speaker.PATIENT
        ):
            windows.append((turns[i], turns[i + 1]))
            i += 2
        else:
            windows.append((turns[i],))
            i += 1
    return windows


def _select_examples(
    kind: ExampleKind,
    k: int,
    query_text: str,
    enc: Encounter,
    cfg: ChainConfig,
    deps: ChainDeps,
):
    if k == 0:
        return []
    pool = deps.pools.get(kind)
    if pool is None:
        raise ValueError(f"no example pool configured for kind {kind.value!r}")
    if cfg.selection_mode is SelectionMode.RANDOM:
        return select_random(pool, k, encounter_seed(enc.id, cfg.run_seed))
    if deps.embedder is None:
        raise ValueError("semantic selection needs an embedding gateway")
    query = SelectionQuery(age=enc.age, sex=enc.sex, text=query_text)
    return select_semantic(pool, query, k, deps.embedder)


def _call(kind: PromptKind, prompt: str, deps: ChainDeps, log: RunLog) -> str:
    params = default_params(kind)
    req = CompletionRequest(prompt=prompt, params=params, prompt_kind=kind)
    text = deps.client.complete(req)
    log.trace.append(
        TraceEntry(prompt_kind=kind, prompt_hash=cache_key(req), params=params.as_dict())
    )
    return text


def extract_rfe_entities(
    enc: Encounter, cfg: ChainConfig, deps: ChainDeps, log: RunLog
) -> list[MedicalEntity]:
    """One extraction call on the patient's opening message; provenance "rfe"."""
    examples = _select_examples(
        ExampleKind.RFE_EXTRACTION, cfg.extraction_k, enc.rfe, enc, cfg, deps
    )
    prompt = render(
        deps.templates["rfe_extraction"],
        input_text=enc.rfe,
        age=enc.age,
        sex=enc.sex,
        examples=examples,
        budget=cfg.budget,
    )
    completion = _call(PromptKind.RFE_EXTRACTION, prompt, deps, log)
    entities, warnings = parse_entity_list(completion)
    log.warnings.extend(f"rfe: {w}" for w in warnings)
    if not completion.strip():
        log.warnings.append("rfe: extraction completion was empty")
    return [replace(e, provenance=("rfe",)) for e in entities]


def extract_turn_entities(
    window: Sequence[Turn],
    window_index: int,
    enc: Encounter,
    cfg: ChainConfig,
    deps: ChainDeps,
    log: RunLog,
) -> list[MedicalEntity]:
    """One extraction call on a single turn window; provenance "turn-pair <i>"."""
    examples = _select_examples(
        ExampleKind.DIALOGUE_EXTRACTION,
        cfg.extraction_k,
        window_text(window),
        enc,
        cfg,
        deps,
    )
    prompt = render(
        deps.templates["dialogue_extraction"],
        input_text=window_text(window),
        age=enc.age,
        sex=enc.sex,
        examples=examples,
        budget=cfg.budget,
    )
    completion = _call(PromptKind.DIALOGUE_EXTRACTION, prompt, deps, log)
    entities, warnings = parse_entity_list(completion)
    tag = f"turn-pair {window_index}"
    log.warnings.extend(f"{tag}: {w}" for w in warnings)
    if not completion.strip():
        log.warnings.append(f"{tag}: extraction completion was empty")
    return [replace(e, provenance=(tag,)) for e in entities]


def collate(entity_lists: Iterable[Sequence[MedicalEntity]]) -> EntityLedger:
    """Merge extraction results (RFE first, then windows in order) into a ledger.

    Dedup is by normalized name; on a status conflict the latest mention
    wins, except that a later "unknown" never overwrites an earlier definite
    status. Provenance is the union, and the result keeps first-mention
    order. Merging a list with itself is a no-op.
    """
    merged: dict[str, MedicalEntity] = {}
    order: list[str] = []
    for entities in entity_lists:
        for entity in entities:
            current = merged.get(entity.name)
            if current is None:
                merged[entity.name] = entity
                order.append(entity.name)
                continue
            provenance = current.provenance + tuple(
                tag for tag in entity.provenance if tag not in current.provenance
            )
            status = (
                current.status
                if entity.status is EntityStatus.UNKNOWN
                else entity.status
            )
            merged[entity.name] = MedicalEntity(
                name=entity.name, status=status, provenance=provenance
            )
    return EntityLedger(tuple(merged[name] for name in order))


def resolve_unknowns(
    ledger: EntityLedger, enc: Encounter, cfg: ChainConfig, deps: ChainDeps, log: RunLog
) -> EntityLedger:
    """Re-examine unknown-status entities against the whole conversation.

    At most one completion call, and none at all when the resolver is
    disabled or the ledger has no unknowns. Parsed statuses overwrite only
    entities that were unknown; definite entries come through untouched,
    field for field. A malformed completion leaves the ledger unchanged
    with a warning (fail-open) unless the config says fail-closed.
    """
    if not cfg.resolver_enabled:
        return ledger
    unknowns = ledger.unknowns()
    if not unknowns:
        return ledger

    input_text = (
        "Unresolved entities:\n"
        + serialize_entity_list(unknowns)
        + "\n\nConversation:\n"
        + encounter_text(enc)
    )
    prompt = render(
        deps.templates["unknown_resolver"],
        input_text=input_text,
        age=enc.age,
        sex=enc.sex,
        budget=cfg.budget,
    )
    completion = _call(PromptKind.UNKNOWN_RESOLVER, prompt, deps, log)
    try:
        parsed, warnings = parse_entity_list(completion)
    except Exception as exc:
        if cfg.resolver_fail_closed:
            raise
        log.warnings.append(f"resolver: completion unparseable, ledger unchanged ({exc})")
        return ledger
    log.warnings.extend(f"resolver: {w}" for w in warnings)

    unknown_names = {e.name for e in unknowns}
    verdicts: dict[str, EntityStatus] = {}
    for entity in parsed:
        if entity.name not in unknown_names:
            log.warnings.append(
                f"resolver: ignored entity outside the unknown list: {entity.name!r}"
            )
            continue
        verdicts[entity.name] = entity.status

    resolved = []
    for entity in ledger:
        verdict = verdicts.get(entity.name)
        if (
            entity.status is EntityStatus.UNKNOWN
            and verdict is not None
            and verdict is not entity.status
        ):
            resolved.append(
                MedicalEntity(
                    name=entity.name,
                    status=verdict,
                    provenance=entity.provenance + ("resolver",),
                )
            )
        else:
            resolved.append(entity)
    return EntityLedger(tuple(resolved))


def summarize(
    enc: Encounter, ledger: EntityLedger, cfg: ChainConfig, deps: ChainDeps, log: RunLog
) -> StructuredSummary:
    """One summarization call conditioned on the dialogue and the serialized ledger."""
    examples = _select_examples(
        ExampleKind.SUMMARIZATION,
        cfg.summarization_k,
        encounter_text(enc),
        enc,
        cfg,
        deps,
    )
    input_text = (
        "Conversation:\n"
        + encounter_text(enc)
        + "\n\nExtracted medical entities:\n"
        + serialize_ledger(ledger)
    )
    prompt = render(
        deps.templates["summarization"],
        input_text=input_text,
        age=enc.age,
        sex=enc.sex,
        examples=examples,
        budget=cfg.budget,
    )
    completion = _call(PromptKind.SUMMARIZATION, prompt, deps, log)
    summary, warnings = parse_summary(completion)
    log.warnings.extend(f"summary: {w}" for w in warnings)
    return summary


def run_medsum_ent(enc: Encounter, cfg: ChainConfig, deps: ChainDeps) -> RunRecord:
    """Full staged run for one encounter.

    Call count is always 1 (RFE) + one per turn window + 1 if the resolver
    fired + 1 (summarization); the record's trace carries exactly those
    entries in order.
    """
    log = RunLog()
    stage = "rfe extraction"
    try:
        entity_lists: list[list[MedicalEntity]] = [
            extract_rfe_entities(enc, cfg, deps, log)
        ]
        stage = "turn extraction"
        for i, window in enumerate(pair_turns(enc.turns)):
            entity_lists.append(extract_turn_entities(window, i, enc, cfg, deps, log))
        stage = "collation"
        ledger = collate(entity_lists)
        stage = "unknown resolution"
        ledger = resolve_unknowns(ledger, enc, cfg, deps, log)
        stage = "summarization"
        summary = summarize(enc, ledger, cfg, deps, log)
    except ChainError:
        raise
    except Exception as exc:
        raise ChainError(enc.id, stage, exc) from exc
    return RunRecord(
        encounter_id=enc.id,
        method=Method.MEDSUM_ENT,
        config=cfg.snapshot(),
        ledger=ledger,
        summary=summary,
        llm_call_trace=tuple(log.trace),
        warnings=tuple(log.warnings),
    )


def run_naive_baseline(enc: Encounter, cfg: ChainConfig, deps: ChainDeps) -> RunRecord:
    """Single-prompt baseline: one summarization call, empty ledger."""
    log = RunLog()
    stage = "example selection"
    try:
        examples = _select_examples(
            ExampleKind.SUMMARIZATION,
            cfg.summarization_k,
            encounter_text(enc),
            enc,
            cfg,
            deps,
        )
        stage = "summarization"
        prompt = render(
            deps.templates["baseline_summarization"],
            input_text=encounter_text(enc),
            age=enc.age,
            sex=enc.sex,
            examples=examples,
            budget=cfg.budget,
        )
        completion = _call(PromptKind.SUMMARIZATION, prompt, deps, log)
        summary, warnings = parse_summary(completion)
        log.warnings.extend(f"summary: {w}" for w in warnings)
    except ChainError:
        raise
    except Exception as exc:
        raise ChainError(enc.id, stage, exc) from exc
    return RunRecord(
        encounter_id=enc.id,
        method=Method.NAIVE_BASELINE,
        config=cfg.snapshot(),
        ledger=EntityLedger(),
        summary=summary,
        llm_call_trace=tuple(log.trace),
        warnings=tuple(log.warnings),
    )


@dataclass
class RunOutcome:
    encounter_id: str
    record: RunRecord | None = None
    error: Exception | None = None


def run_many(
    encounters: Sequence[Encounter],
    cfg: ChainConfig,
    deps: ChainDeps,
    method: Method,
    workers: int = 1,
) -> list[RunOutcome]:
    """Run a corpus through one method, capturing per-encounter failures.

    Results come back in input order regardless of worker completion order,
    so downstream output files are deterministic.
    """
    runner = run_medsum_ent if method is Method.MEDSUM_ENT else run_naive_baseline

    def one(enc: Encounter) -> RunOutcome:
        try:
            return RunOutcome(enc.id, record=runner(enc, cfg, deps))
        except Exception as exc:
            logger.warning("encounter %s failed: %s", enc.id, exc)
            return RunOutcome(enc.id, error=exc)

    if workers <= 1:
        return [one(enc) for enc in encounters]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, encounters))
