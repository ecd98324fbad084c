"""Retrieval, bitext, and STS evaluation plus report aggregation.

Retrieval uses exact brute-force ranking with graded-gain nDCG
(gain 2^rel - 1) and binary recall. Queries that have no relevant
documents are skipped, not scored zero, and surface in report metadata.
Language/dataset averages are unweighted means; every reduction walks a
fixed order so reported floats are bit-stable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import embedder, vecmath
from .errors import (
    CountMismatch,
    DegenerateInput,
    EmptySection,
    GoldNotBijective,
    UnknownDocId,
)

Qrels = dict[str, dict[str, int]]
RetrievalRun = dict[str, list[tuple[str, float]]]


def load_qrels(path: str | Path) -> Qrels:
    """Parse whitespace-separated 'qid 0 docid rel' relevance judgments."""
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{line_no}: expected 4 fields, got {len(parts)}")
            qid, _ignored, docid, rel = parts
            qrels.setdefault(qid, {})[docid] = int(rel)
    return qrels


def write_trec_run(run: RetrievalRun, path: str | Path, tag: str = "embedforge") -> None:
    """Write a run as 'qid Q0 docid rank score tag' lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid in run:
            for rank, (docid, score) in enumerate(run[qid], start=1):
                fh.write(f"{qid} Q0 {docid} {rank} {score:.6f} {tag}\n")


def _dcg(gains: Sequence[float]) -> float:
    return sum(g / math.log2(i + 1) for i, g in enumerate(gains, start=1))


def ndcg_at_k(ranked_ids: Sequence[str], qrels_row: Mapping[str, int], k: int) -> float:
    """Normalized discounted cumulative gain with gain 2^rel - 1."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    gains = [float(2 ** qrels_row.get(doc, 0) - 1) for doc in ranked_ids[:k]]
    ideal = sorted((float(2**rel - 1) for rel in qrels_row.values()), reverse=True)[:k]
    ideal_dcg = _dcg(ideal)
    if ideal_dcg == 0.0:
        raise ValueError("query has no relevant documents; skip it upstream")
    return _dcg(gains) / ideal_dcg


def recall_at_k(ranked_ids: Sequence[str], qrels_row: Mapping[str, int], k: int) -> float:
    """Fraction of relevant (rel >= 1) documents found in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    relevant = {doc for doc, rel in qrels_row.items() if rel >= 1}
    if not relevant:
        raise ValueError("query has no relevant documents; skip it upstream")
    return len(relevant.intersection(ranked_ids[:k])) / len(relevant)


@dataclass
class EvalReport:
    """Grouped metric values with their unweighted means.

    values maps section -> member -> value, e.g. "ndcg@10" -> "fr" -> 0.53.
    section_means and grand_mean are recomputed arithmetic means; rounded()
    provides the one-decimal presentation used in printed tables.
    """

    task: str
    values: dict[str, dict[str, float]]
    metadata: dict = field(default_factory=dict)
    section_means: dict[str, float] = field(init=False)
    grand_mean: float = field(init=False)

    def __post_init__(self):
        for name, members in self.values.items():
            if not members:
                raise EmptySection(f"section {name!r} has no values")
        self.section_means = {
            name: float(np.mean([members[k] for k in sorted(members)]))
            for name, members in self.values.items()
        }
        pooled = [
            self.values[name][k] for name in sorted(self.values) for k in sorted(self.values[name])
        ]
        self.grand_mean = float(np.mean(pooled))

    def rounded(self) -> dict[str, float]:
        return {name: round(mean, 1) for name, mean in self.section_means.items()}

    def check_consistency(self, tol: float = 1e-9) -> bool:
        """Means must recompute from stored members within tol."""
        for name, members in self.values.items():
            recomputed = float(np.mean([members[k] for k in sorted(members)]))
            if abs(recomputed - self.section_means[name]) > tol:
                return False
        return True

    def to_json_dict(self) -> dict:
        return {
            "task": self.task,
            "values": self.values,
            "section_means": self.section_means,
            "section_means_rounded": self.rounded(),
            "grand_mean": self.grand_mean,
            "grand_mean_rounded": round(self.grand_mean, 1),
            "metadata": self.metadata,
        }

    def to_tsv(self) -> str:
        sections = sorted(self.values)
        members = sorted({m for s in sections for m in self.values[s]})
        lines = ["member\t" + "\t".join(sections)]
        for m in members:
            cells = [f"{self.values[s][m]:.6f}" if m in self.values[s] else "" for s in sections]
            lines.append(m + "\t" + "\t".join(cells))
        lines.append("MEAN\t" + "\t".join(f"{self.section_means[s]:.6f}" for s in sections))
        return "\n".join(lines) + "\n"


def aggregate_report(sections: Mapping[str, Sequence[float]], task: str = "report") -> EvalReport:
    """Per-section means plus a grand mean pooled over every value."""
    values: dict[str, dict[str, float]] = {}
    for name, vals in sections.items():
        vals = list(vals)
        if not vals:
            raise EmptySection(f"section {name!r} is empty")
        values[name] = {f"{i:04d}": float(v) for i, v in enumerate(vals)}
    return EvalReport(task=task, values=values)


def rank_corpus(
    model: embedder.EmbeddingModel,
    queries: Mapping[str, str],
    corpus: Mapping[str, str],
    depth: int = 100,
    workers: int = 1,
    instruction: str | None = None,
) -> RetrievalRun:
    """Exact brute-force ranking of the corpus for each query."""
    doc_ids = list(corpus.keys())
    doc_embs = embedder.encode_batch(
        model, embedder.PASSAGE, [corpus[d] for d in doc_ids], workers
    )
    role = embedder.InputRole(embedder.ROLE_QUERY, instruction)
    qids = list(queries.keys())
    q_embs = embedder.encode_batch(model, role, [queries[q] for q in qids], workers)
    run: RetrievalRun = {}
    for i, qid in enumerate(qids):
        ranked = vecmath.top_k(doc_embs @ q_embs[i], min(depth, len(doc_ids)))
        run[qid] = [(doc_ids[j], score) for j, score in ranked]
    return run


def evaluate_run(
    run: RetrievalRun,
    qrels: Qrels,
    cutoffs: Sequence[int] = (10, 100),
    langs: Mapping[str, str] | None = None,
) -> EvalReport:
    """Score a run: per-query metrics, per-language means, cross-language means."""
    doc_universe = {d for ranked in run.values() for d, _ in ranked}
    per_query: dict[str, dict[str, float]] = {f"ndcg@{k}": {} for k in cutoffs}
    per_query.update({f"recall@{k}": {} for k in cutoffs})
    skipped = []
    for qid, ranked in run.items():
        row = qrels.get(qid, {})
        if not any(rel >= 1 for rel in row.values()):
            skipped.append(qid)
            continue
        ranked_ids = [d for d, _ in ranked]
        for k in cutoffs:
            per_query[f"ndcg@{k}"][qid] = ndcg_at_k(ranked_ids, row, k)
            per_query[f"recall@{k}"][qid] = recall_at_k(ranked_ids, row, k)
    langs = langs or {}
    values: dict[str, dict[str, float]] = {}
    for metric, rows in per_query.items():
        by_lang: dict[str, list[float]] = {}
        for qid in sorted(rows):
            by_lang.setdefault(langs.get(qid, "all"), []).append(rows[qid])
        if not by_lang:
            raise ValueError("no scorable queries: every query lacked relevant documents")
        values[metric] = {lang: float(np.mean(vals)) for lang, vals in sorted(by_lang.items())}
    report = EvalReport(
        task="retrieval",
        values=values,
        metadata={
            "cutoffs": list(cutoffs),
            "queries": len(run),
            "documents": len(doc_universe),
            "skipped_no_relevant": sorted(skipped),
        },
    )
    report.metadata["per_query"] = {m: dict(sorted(rows.items())) for m, rows in per_query.items()}
    return report


def retrieval_eval(
    model: embedder.EmbeddingModel,
    queries: Mapping[str, str],
    corpus: Mapping[str, str],
    qrels: Qrels,
    cutoffs: Sequence[int] = (10, 100),
    langs: Mapping[str, str] | None = None,
    workers: int = 1,
    instruction: str | None = None,
) -> EvalReport:
    """Encode, rank, and score a retrieval task end to end."""
    for qid, row in qrels.items():
        for docid in row:
            if docid not in corpus:
                raise UnknownDocId(f"qrels for {qid!r} reference unknown doc {docid!r}")
    run = rank_corpus(model, queries, corpus, max(cutoffs), workers, instruction)
    return evaluate_run(run, qrels, cutoffs, langs)


def _mean_knn_sim(sims: np.ndarray, k: int) -> np.ndarray:
    """Row-wise mean cosine of the k most similar columns."""
    k = min(k, sims.shape[1])
    part = np.partition(sims, sims.shape[1] - k, axis=1)[:, sims.shape[1] - k :]
    return part.mean(axis=1)


def bitext_accuracy(
    src_embs,
    tgt_embs,
    gold: Sequence[int],
    mode: str = "cosine",
    margin_k: int = 4,
) -> float:
    """Fraction of source rows whose best-scoring target matches gold.

    cosine mode scores raw cosines; margin mode divides each cosine by the
    average of the two sides' mean k-nearest-neighbor cosines, which
    suppresses hub targets. Direction is source -> target only.
    """
    src = np.asarray(src_embs, dtype=np.float64)
    tgt = np.asarray(tgt_embs, dtype=np.float64)
    if src.ndim != 2 or tgt.ndim != 2 or src.shape != tgt.shape:
        raise CountMismatch(f"embedding sets must match in shape: {src.shape} vs {tgt.shape}")
    n = src.shape[0]
    gold = list(gold)
    if len(gold) != n or sorted(gold) != list(range(n)):
        raise GoldNotBijective(f"gold must be a permutation of 0..{n - 1}")
    src = src / np.linalg.norm(src, axis=1, keepdims=True)
    tgt = tgt / np.linalg.norm(tgt, axis=1, keepdims=True)
    sims = src @ tgt.T
    if mode == "margin":
        src_nn = _mean_knn_sim(sims, margin_k)
        tgt_nn = _mean_knn_sim(sims.T, margin_k)
        sims = sims / ((src_nn[:, None] + tgt_nn[None, :]) / 2.0)
    elif mode != "cosine":
        raise ValueError(f"mode must be 'cosine' or 'margin', got {mode!r}")
    hits = 0
    for i in range(n):
        best = vecmath.top_k(sims[i], 1)[0][0]
        hits += best == gold[i]
    return hits / n


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.size != y.size:
        raise CountMismatch(f"sequences must share one length: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise DegenerateInput("need at least 2 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateInput("correlation undefined for a constant sequence")
    return float(stats.spearmanr(x, y).statistic)


def report_to_json(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def report_to_tsv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_tsv())
