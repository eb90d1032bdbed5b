"""In-context example selection over labeled pools.

Two strategies: seeded uniform draws without replacement, and exact
nearest-neighbor retrieval by cosine similarity over embedded queries.
Pools are small, so retrieval is a full linear scan; an example's id is its
position in the pool. Random selection uses numpy's PCG64 generator so a
seed reproduces the same draw on every platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backend import EmbeddingGateway
from .model import ExampleKind, LabeledExample

__all__ = [
    "SelectionError",
    "SelectionQuery",
    "ExamplePool",
    "load_example_pools",
    "build_index",
    "select_random",
    "select_semantic",
]


class SelectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SelectionQuery:
    """What gets embedded: the patient's age, sex, and the live input text."""

    age: int
    sex: str
    text: str

    def render(self) -> str:
        return f"age: {self.age}; sex: {self.sex}; {self.text}"


@dataclass
class ExamplePool:
    """Labeled examples for one prompt family, optionally with an embedding index.

    The index holds one row per example, aligned by position; treat pools as
    immutable once built.
    """

    kind: ExampleKind
    examples: tuple[LabeledExample, ...]
    index: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.kind = ExampleKind(self.kind)
        self.examples = tuple(self.examples)
        for example in self.examples:
            if example.kind is not self.kind:
                raise SelectionError(
                    f"example of kind {example.kind.value} in {self.kind.value} pool"
                )
        if self.index is not None and len(self.index) != len(self.examples):
            raise SelectionError("index size does not match pool size")

    def __len__(self) -> int:
        return len(self.examples)


def load_example_pools(path: str | Path) -> dict[ExampleKind, ExamplePool]:
    """Load pools from a line-delimited JSON file, grouping records by kind.

    Each line is {kind, input_text, age, sex, label}; parse problems report
    the offending line number.
    """
    grouped: dict[ExampleKind, list[LabeledExample]] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                example = LabeledExample(
                    kind=ExampleKind(record["kind"]),
                    input_text=record["input_text"],
                    age=record["age"],
                    sex=record["sex"],
                    label=record["label"],
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise SelectionError(f"{path}: bad example at line {lineno}: {exc}") from exc
            grouped.setdefault(example.kind, []).append(example)
    return {
        kind: ExamplePool(kind=kind, examples=tuple(examples))
        for kind, examples in grouped.items()
    }


def build_index(pool: ExamplePool, embedder: EmbeddingGateway) -> ExamplePool:
    """Embed every example's own query rendering and attach the index."""
    if not pool.examples:
        raise SelectionError("cannot index an empty pool")
    rows = []
    for i, example in enumerate(pool.examples):
        query = SelectionQuery(age=example.age, sex=example.sex, text=example.input_text)
        try:
            rows.append(np.asarray(embedder.embed(query.render()), dtype=float))
        except Exception as exc:
            raise SelectionError(f"embedding failed for example {i}: {exc}") from exc
    return ExamplePool(kind=pool.kind, examples=pool.examples, index=np.vstack(rows))


def select_random(pool: ExamplePool, k: int, seed: int) -> list[LabeledExample]:
    """k distinct examples, uniform without replacement, in draw order.

    Fully determined by the seed (PCG64).
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if k > len(pool):
        raise ValueError(f"k={k} exceeds pool size {len(pool)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(pool))
    return [pool.examples[i] for i in order[:k]]


def select_semantic(
    pool: ExamplePool,
    query: SelectionQuery,
    k: int,
    embedder: EmbeddingGateway,
) -> list[LabeledExample]:
    """The k pool examples most cosine-similar to the embedded query.

    Descending similarity; exact ties break toward the lower example id.
    """
    if pool.index is None:
        raise SelectionError("pool has no index; call build_index first")
    if k < 0:
        raise ValueError("k must be non-negative")
    if k > len(pool):
        raise ValueError(f"k={k} exceeds pool size {len(pool)}")
    query_vector = np.asarray(embedder.embed(query.render()), dtype=float)
    similarities = _cosine_scores(pool.index, query_vector)
    ranked = sorted(range(len(pool)), key=lambda i: (-similarities[i], i))
    return [pool.examples[i] for i in ranked[:k]]


def _cosine_scores(index: np.ndarray, query_vector: np.ndarray) -> np.ndarray:
    # Elementwise multiply + per-row sum rather than a BLAS matvec: BLAS may
    # accumulate different rows in different orders, so bit-identical rows
    # could score apart by one ulp and defeat the deterministic tie rule.
    dots = (index * query_vector).sum(axis=1)
    row_norms = np.sqrt((index * index).sum(axis=1))
    query_norm = np.sqrt(float(query_vector @ query_vector))
    denom = row_norms * query_norm
    scores = np.zeros(len(index))
    nonzero = denom > 0
    scores[nonzero] = dots[nonzero] / denom[nonzero]
    return scores
