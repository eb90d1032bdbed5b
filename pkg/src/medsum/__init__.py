"""Entity-grounded, prompt-chained medical dialogue summarization.

A staged pipeline extracts medical entities (with present/absent/unknown
affirmation status) from each part of a doctor-patient conversation,
collates them into a ledger, optionally re-resolves the unknowns against the
whole dialogue, and summarizes conditioned on the ledger. A concept-level
metric suite scores generated summaries against references. All completion
traffic flows through a cache/retry/replay gateway, so runs are
reproducible offline.
"""

from .backend import (
    CompletionClient,
    CompletionParams,
    CompletionRequest,
    HashEmbedder,
    HTTPTransport,
    RecordingTransport,
    ReplayStore,
    ReplayTransport,
    RetryPolicy,
    ScriptedTransport,
    cache_key,
    default_params,
    record_replay_store,
)
from .chain import (
    ChainConfig,
    ChainDeps,
    SelectionMode,
    collate,
    pair_turns,
    resolve_unknowns,
    run_medsum_ent,
    run_naive_baseline,
    summarize,
)
from .metrics import (
    SectionScore,
    aggregate,
    evaluate_encounter,
    exact_match_verifier,
    score_section,
)
from .model import (
    SCORED_SECTIONS,
    SECTION_KEYS,
    Encounter,
    EntityLedger,
    EntityStatus,
    ExampleKind,
    LabeledExample,
    MedicalEntity,
    Method,
    PromptKind,
    RunRecord,
    Speaker,
    StructuredSummary,
    Turn,
    normalize_entity_name,
    validate_encounter,
)
from .promptkit import (
    PromptTemplate,
    TokenBudget,
    estimate_tokens,
    load_templates,
    parse_entity_list,
    parse_summary,
    render,
    serialize_ledger,
    serialize_summary,
)
from .selection import (
    ExamplePool,
    SelectionQuery,
    build_index,
    select_random,
    select_semantic,
)

__version__ = "0.1.0"
