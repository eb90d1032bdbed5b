import json

import pytest

from medsum.backend import (
    CompletionClient,
    RecordingTransport,
    ReplayStore,
    ScriptedTransport,
)
from medsum.chain import ChainConfig, ChainDeps, run_medsum_ent, run_naive_baseline
from medsum.model import (
    Encounter,
    ExampleKind,
    LabeledExample,
    PromptKind,
    Speaker,
    StructuredSummary,
    Turn,
)
from medsum.promptkit import load_templates
from medsum.selection import ExamplePool, load_example_pools


SIX_SECTION_SUMMARY = """\
Demographics and Social Determinants of Health:
A 46 year old female.

Medical Intent:
Patient came for urinary symptoms.

Pertinent Positives:
Pain when urinating; low back pain.

Pertinent Negatives:
No fever.

Pertinent Unknowns:
Unsure about abdominal pain.

Medical History:
Prior urinary infection treated with antibiotics.
"""


def scripted_pipeline_responder(req):
    """Deterministic stand-in for the completion endpoint.

    Dialogue windows mentioning "belly" extract as an unknown so the
    resolver has work to do; everything else extracts as a definite entity.
    """
    kind = req.prompt_kind
    if kind is PromptKind.RFE_EXTRACTION:
        return "- urinary tract infection (present)"
    if kind is PromptKind.DIALOGUE_EXTRACTION:
        if "belly" in req.prompt:
            return "- abdominal pain (unknown)"
        if "fever" in req.prompt:
            return "- fever (absent)"
        return "- cough (present)"
    if kind is PromptKind.UNKNOWN_RESOLVER:
        return "- abdominal pain (present)"
    if kind is PromptKind.SUMMARIZATION:
        return SIX_SECTION_SUMMARY
    raise AssertionError(f"unexpected prompt kind {kind}")


def make_client(responder, **kwargs):
    transport = ScriptedTransport(responder)
    client = CompletionClient(transport, sleeper=lambda _: None, **kwargs)
    return client, transport


def alternating_turns(n, with_belly=False):
    turns = []
    for i in range(n // 2):
        doctor_text = f"Do you have symptom {i}?"
        if with_belly and i == 1:
            doctor_text = "Does your belly hurt?"
        turns.append(Turn(Speaker.DOCTOR, doctor_text))
        turns.append(Turn(Speaker.PATIENT, "present" if i % 2 == 0 else "absent"))
    if n % 2:
        turns.append(Turn(Speaker.DOCTOR, "Anything else?"))
    return tuple(turns)


def make_encounter(enc_id="enc-001", n_turns=8, with_belly=False, reference=None, rfe="UTI"):
    return Encounter(
        id=enc_id,
        rfe=rfe,
        age=46,
        sex="female",
        turns=alternating_turns(n_turns, with_belly=with_belly),
        reference_summary=reference,
    )


def make_pool(kind, size=5):
    kind = ExampleKind(kind)
    if kind is ExampleKind.SUMMARIZATION:
        label = SIX_SECTION_SUMMARY
    else:
        label = "- headache (present)"
    examples = tuple(
        LabeledExample(
            kind=kind,
            input_text=f"example input {i} for {kind.value}",
            age=20 + i,
            sex="female" if i % 2 == 0 else "male",
            label=label,
        )
        for i in range(size)
    )
    return ExamplePool(kind=kind, examples=examples)


def encounter_record(enc_id="enc-001", n_turns=8, reference=None, with_belly=False):
    """A dataset-file record (decoded form) for a synthetic encounter."""
    enc = make_encounter(enc_id=enc_id, n_turns=n_turns, with_belly=with_belly)
    record = {
        "id": enc.id,
        "rfe": enc.rfe,
        "age": enc.age,
        "sex": enc.sex,
        "turns": [{"speaker": t.speaker.value, "text": t.text} for t in enc.turns],
    }
    if reference is not None:
        record["reference_summary"] = reference
    return record


def write_dataset(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")


def write_pools(path):
    records = []
    for kind in ("rfe_extraction", "dialogue_extraction"):
        for i in range(5):
            records.append(
                {
                    "kind": kind,
                    "input_text": f"{kind} example {i}",
                    "age": 30 + i,
                    "sex": "female",
                    "label": "- headache (present)",
                }
            )
    for i in range(3):
        records.append(
            {
                "kind": "summarization",
                "input_text": f"summarization example {i}",
                "age": 40 + i,
                "sex": "male",
                "label": SIX_SECTION_SUMMARY,
            }
        )
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")


def prerecord(store_path, dataset_path, pools_path, configs=(ChainConfig(),)):
    """Drive both methods once per config through a recording transport so a
    replay store holds every response later CLI runs will need."""
    from medsum.cli import load_dataset

    recorder = RecordingTransport(
        ScriptedTransport(scripted_pipeline_responder),
        ReplayStore(store_path, create=True),
    )
    client = CompletionClient(recorder, sleeper=lambda _: None)
    pools = load_example_pools(pools_path)
    deps = ChainDeps(client=client, templates=load_templates(), pools=pools)
    for cfg in configs:
        for enc in load_dataset(dataset_path):
            run_medsum_ent(enc, cfg, deps)
            run_naive_baseline(enc, cfg, deps)


@pytest.fixture(scope="session")
def templates():
    return load_templates()


@pytest.fixture
def pools():
    return {kind: make_pool(kind) for kind in ExampleKind}


@pytest.fixture
def scripted_deps(templates, pools):
    client, transport = make_client(scripted_pipeline_responder)
    deps = ChainDeps(client=client, templates=templates, pools=pools)
    return deps, transport


@pytest.fixture
def reference_summary():
    return StructuredSummary(
        demographics_sdoh="A 46 year old female.",
        medical_intent="Patient came for urinary symptoms.",
        pertinent_positives="Pain when urinating; low back pain.",
        pertinent_negatives="No fever.",
        pertinent_unknowns="Unsure about abdominal pain.",
        medical_history="Prior urinary infection treated with antibiotics.",
    )
