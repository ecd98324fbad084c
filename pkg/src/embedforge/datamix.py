"""Pair ingestion, mixture sampling, batch assembly, hard-negative mining.

Pair files are flat UTF-8 JSONL: one object per line with required
query/positive strings and optional negatives/lang/source. Mixture sources
declare either an absolute quota or a sampling rate; sampling is without
replacement and reproducible from the mixture seed alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import embedder, vecmath
from .errors import (
    EmptyCorpus,
    InvalidPair,
    MalformedJson,
    MissingField,
    QuotaExceedsPool,
)

DEFAULT_MINE_K = 7
DEFAULT_MINE_WINDOW = (2, 100)


@dataclass(frozen=True)
class TextPair:
    """One (query, positive) example with optional mined negatives.

    instruction, when nonempty, conditions the query at encoding time
    (instruction-tuned training); documents never carry instructions.
    """

    query: str
    positive: str
    negatives: tuple[str, ...] = ()
    source: str = ""
    lang: str = ""
    instruction: str = ""

    def __post_init__(self):
        if not self.query:
            raise InvalidPair("query must be nonempty")
        if not self.positive:
            raise InvalidPair("positive must be nonempty")
        object.__setattr__(self, "negatives", tuple(self.negatives))
        if self.positive in self.negatives:
            raise InvalidPair("negatives must not contain the positive")


@dataclass(frozen=True)
class SourceSpec:
    """A named pair file with either an absolute quota or a sampling rate."""

    name: str
    uri: str
    quota: int | None = None
    rate: float | None = None

    def __post_init__(self):
        if (self.quota is None) == (self.rate is None):
            raise ValueError(f"source {self.name!r}: exactly one of quota/rate must be set")
        if self.quota is not None and self.quota < 0:
            raise ValueError(f"source {self.name!r}: quota must be >= 0")
        if self.rate is not None and not (0.0 < self.rate <= 1.0):
            raise ValueError(f"source {self.name!r}: rate must be in (0, 1]")


@dataclass(frozen=True)
class MixtureSpec:
    """Ordered sources plus the seed that fixes all sampling decisions."""

    sources: tuple[SourceSpec, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        names = [s.name for s in self.sources]
        if len(set(names)) != len(names):
            raise ValueError(f"source names must be unique: {names}")


@dataclass
class MixturePlan:
    """Deterministic sampling outcome: indices per source and a global order."""

    counts: dict[str, int]
    indices: dict[str, list[int]]
    order: list[tuple[str, int]]

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@dataclass(frozen=True)
class PairBatch:
    """Pairs for one step; hard-negative lists are padded to a common length.

    Padding repeats a pair's last negative. A batch mixing zero-negative
    pairs with mined ones cannot be padded and is rejected.
    """

    pairs: tuple[TextPair, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        positives = [p.positive for p in self.pairs]
        if len(set(positives)) != len(positives):
            raise InvalidPair("batch contains duplicate positive strings")
        depth = self.negative_depth
        if depth > 0:
            padded = []
            for p in self.pairs:
                if not p.negatives:
                    raise InvalidPair(
                        "cannot pad a pair with zero negatives into a hard-negative batch"
                    )
                negs = p.negatives + (p.negatives[-1],) * (depth - len(p.negatives))
                padded.append(
                    TextPair(p.query, p.positive, negs, p.source, p.lang, p.instruction)
                    if negs != p.negatives
                    else p
                )
            object.__setattr__(self, "pairs", tuple(padded))

    @property
    def negative_depth(self) -> int:
        return max((len(p.negatives) for p in self.pairs), default=0)

    def __len__(self) -> int:
        return len(self.pairs)


def load_pairs(source: SourceSpec | str | Path) -> Iterator[TextPair]:
    """Stream pairs from a JSONL file in file order.

    Raises MalformedJson/MissingField/InvalidPair tagged with the 1-based
    line number; blank lines are skipped.
    """
    path = Path(source.uri if isinstance(source, SourceSpec) else source)
    name = source.name if isinstance(source, SourceSpec) else ""
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedJson(line_no, str(exc)) from exc
            if not isinstance(obj, dict):
                raise MalformedJson(line_no, "expected a JSON object")
            for fld in ("query", "positive"):
                if fld not in obj:
                    raise MissingField(line_no, fld)
            try:
                yield TextPair(
                    query=obj["query"],
                    positive=obj["positive"],
                    negatives=tuple(obj.get("negatives", ())),
                    source=obj.get("source", name),
                    lang=obj.get("lang", ""),
                    instruction=obj.get("instruction", ""),
                )
            except InvalidPair as exc:
                raise InvalidPair(f"line {line_no}: {exc}") from exc


def write_pairs(pairs: Sequence[TextPair], path: str | Path) -> None:
    """Write pairs as JSONL, the inverse of load_pairs."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            obj: dict = {"query": p.query, "positive": p.positive}
            if p.negatives:
                obj["negatives"] = list(p.negatives)
            if p.lang:
                obj["lang"] = p.lang
            if p.source:
                obj["source"] = p.source
            if p.instruction:
                obj["instruction"] = p.instruction
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def convert_tsv(tsv_path: str | Path, jsonl_path: str | Path) -> int:
    """Convert a two-column query<TAB>positive file to pair JSONL."""
    count = 0
    with open(tsv_path, encoding="utf-8") as src, open(jsonl_path, "w", encoding="utf-8") as dst:
        for line_no, line in enumerate(src, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise MalformedJson(line_no, f"expected 2 tab-separated columns, got {len(cols)}")
            dst.write(json.dumps({"query": cols[0], "positive": cols[1]}, ensure_ascii=False) + "\n")
            count += 1
    return count


def _child_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def sample_mixture(mix: MixtureSpec, pools: Mapping[str, int]) -> MixturePlan:
    """Pick pair indices per source and a shuffled interleaving order.

    Quota sources take exactly quota pairs (QuotaExceedsPool otherwise);
    rate sources take floor(rate * pool). Sampling is without replacement
    and depends only on the mixture seed and source order.
    """
    counts: dict[str, int] = {}
    indices: dict[str, list[int]] = {}
    for stream, spec in enumerate(mix.sources):
        if spec.name not in pools:
            raise KeyError(f"no pool size given for source {spec.name!r}")
        pool = int(pools[spec.name])
        if spec.quota is not None:
            if spec.quota > pool:
                raise QuotaExceedsPool(spec.name, spec.quota, pool)
            take = spec.quota
        else:
            take = int(np.floor(spec.rate * pool))
        rng = _child_rng(mix.seed, stream)
        picked = rng.permutation(pool)[:take]
        counts[spec.name] = take
        indices[spec.name] = [int(i) for i in picked]
    union = [(spec.name, idx) for spec in mix.sources for idx in indices[spec.name]]
    order_rng = _child_rng(mix.seed, len(mix.sources))
    order = [union[int(i)] for i in order_rng.permutation(len(union))]
    return MixturePlan(counts, indices, order)


def materialize_mixture(mix: MixtureSpec) -> list[TextPair]:
    """Load every source, sample per the plan, and return interleaved pairs."""
    loaded = {spec.name: list(load_pairs(spec)) for spec in mix.sources}
    plan = sample_mixture(mix, {name: len(pairs) for name, pairs in loaded.items()})
    return [loaded[name][idx] for name, idx in plan.order]


def build_batches(pairs: Sequence[TextPair], batch_size: int, seed: int) -> list[PairBatch]:
    """Shuffle, then greedily fill batches without repeating a positive.

    A pair whose positive already sits in the open batch is deferred to a
    later one. The trailing batch is dropped when it holds fewer than two
    pairs (it cannot support in-batch contrast).
    """
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    rng = np.random.default_rng(seed)
    remaining = [pairs[int(i)] for i in rng.permutation(len(pairs))]
    batches: list[PairBatch] = []
    while remaining:
        taken: list[TextPair] = []
        seen: set[str] = set()
        deferred: list[TextPair] = []
        for p in remaining:
            if len(taken) < batch_size and p.positive not in seen:
                taken.append(p)
                seen.add(p.positive)
            else:
                deferred.append(p)
        batches.append(PairBatch(tuple(taken)))
        remaining = deferred
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def mine_hard_negatives(
    model: embedder.EmbeddingModel,
    queries: Mapping[str, str],
    corpus: Mapping[str, str],
    qrels: Mapping[str, Mapping[str, int]],
    k: int = DEFAULT_MINE_K,
    window: tuple[int, int] = DEFAULT_MINE_WINDOW,
    workers: int = 1,
) -> dict[str, list[str]]:
    """Rank the corpus per query and keep non-relevant docs in a rank window.

    Returns up to k corpus doc ids per query whose 1-based rank falls in
    [window[0], window[1]] and which qrels does not mark relevant (rel >= 1).
    Ranking ties break by corpus insertion order, so output is deterministic.
    """
    if not corpus:
        raise EmptyCorpus("cannot mine negatives from an empty corpus")
    lo, hi = window
    if lo < 1 or hi < lo:
        raise ValueError(f"window must satisfy 1 <= lo <= hi, got {window}")
    doc_ids = list(corpus.keys())
    doc_embs = embedder.encode_batch(model, embedder.PASSAGE, [corpus[d] for d in doc_ids], workers)
    out: dict[str, list[str]] = {}
    for qid, text in queries.items():
        if k == 0:
            out[qid] = []
            continue
        q = embedder.encode(model, embedder.QUERY, text)
        ranked = vecmath.top_k(doc_embs @ q, min(hi, len(doc_ids)))
        relevant = {d for d, rel in qrels.get(qid, {}).items() if rel >= 1}
        negs: list[str] = []
        for rank, (idx, _score) in enumerate(ranked, start=1):
            if rank < lo:
                continue
            doc = doc_ids[idx]
            if doc in relevant:
                continue
            negs.append(doc)
            if len(negs) == k:
                break
        out[qid] = negs
    return out
