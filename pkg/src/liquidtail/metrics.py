"""Degeneration and dynamics instruments.

distinct-n / rep-n and trigram-loop detection quantify repetition in
committed token streams; entropy trajectories follow a single position
through its maturation steps; the diversity sweep measures how tail length
trades determinism against variety; drift reports compare an embedding
table before and after fine-tuning.
"""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from .backbone import Backbone
from .embeddings import EmbeddingTable, commit, implicit_entropy
from .maturation import MaturationConfig, generate, new_session

__all__ = [
    "distinct_n",
    "rep_n",
    "has_trigram_loop",
    "RepetitionReport",
    "repetition_report",
    "EntropyTrajectory",
    "entropy_trajectory",
    "diversity_sweep",
    "sweep_csv",
    "DriftReport",
    "embedding_drift",
]


def distinct_n(tokens: list[int], n: int) -> float:
    """Unique n-grams over total n-grams; sequences shorter than n count as 1.0."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    total = len(tokens) - n + 1
    if total < 1:
        return 1.0
    grams = {tuple(tokens[i : i + n]) for i in range(total)}
    return len(grams) / total


def rep_n(tokens: list[int], n: int) -> float:
    """Fraction of repeated n-grams: exactly 1 - distinct_n."""
    return 1.0 - distinct_n(tokens, n)


def has_trigram_loop(tokens: list[int]) -> bool:
    """True iff any trigram occurs at least 3 times."""
    if len(tokens) < 3:
        return False
    counts = Counter(tuple(tokens[i : i + 3]) for i in range(len(tokens) - 2))
    return max(counts.values()) >= 3


@dataclass
class RepetitionReport:
    """Per-generation repetition metrics plus their means."""

    per_generation: list[dict]
    means: dict[str, float]

    def to_json(self) -> str:
        return json.dumps(
            {"generations": self.per_generation, "means": self.means}, indent=2
        )

    def to_text(self) -> str:
        cols = ["distinct_1", "distinct_2", "distinct_3", "rep_2", "rep_3", "trigram_loop_pct"]
        header = f"{'metric':<18}" + "".join(f"{c:>18}" for c in cols)
        values = f"{'mean':<18}" + "".join(f"{self.means[c]:>18.4f}" for c in cols)
        return header + "\n" + values


def repetition_report(generations: list[list[int]]) -> RepetitionReport:
    """Metrics per generation, averaged across generations."""
    per = []
    for tokens in generations:
        row = {"length": len(tokens)}
        for n in (1, 2, 3):
            row[f"distinct_{n}"] = distinct_n(tokens, n)
            row[f"rep_{n}"] = rep_n(tokens, n)
        row["trigram_loop"] = has_trigram_loop(tokens)
        per.append(row)
    means: dict[str, float] = {}
    if per:
        for n in (1, 2, 3):
            means[f"distinct_{n}"] = float(np.mean([r[f"distinct_{n}"] for r in per]))
            means[f"rep_{n}"] = float(np.mean([r[f"rep_{n}"] for r in per]))
        means["trigram_loop_pct"] = 100.0 * float(np.mean([r["trigram_loop"] for r in per]))
    return RepetitionReport(per_generation=per, means=means)


@dataclass
class EntropyTrajectory:
    """One tail position's entropy and leading candidate after each update."""

    position: int
    entropies: list[float]
    top_ids: list[int]


def entropy_trajectory(
    history: list[dict], position: int, table: EmbeddingTable
) -> EntropyTrajectory:
    """Follow an absolute token position through its recorded maturation steps.

    `history` is a session trace (see GenerationSession.enable_trace): one
    record per step with the post-update tail. A fully traversed position
    yields exactly K entries, the last of which ranks the committed token
    first.
    """
    entropies: list[float] = []
    top_ids: list[int] = []
    for rec in history:
        slot = position - rec["committed_before"]
        if 0 <= slot < rec["tail_vectors"].shape[0]:
            v = rec["tail_vectors"][slot]
            entropies.append(implicit_entropy(v, table))
            top_ids.append(commit(v, table))
    if not entropies:
        raise ValueError(f"no recorded snapshots cover position {position}")
    return EntropyTrajectory(position=position, entropies=entropies, top_ids=top_ids)


def diversity_sweep(
    prompt_ids: list[int],
    seeds: int,
    k_values: list[int],
    model: Backbone,
    table: EmbeddingTable,
    base: MaturationConfig,
    max_tokens: int | None = None,
) -> list[dict]:
    """Generate per seed for each tail length; summarize output variety."""
    rows = []
    for k in k_values:
        cfg = replace(base, tail_len=k)
        seqs = []
        for seed in range(seeds):
            session = new_session(prompt_ids, table, cfg, seed)
            seqs.append(tuple(generate(session, model, table, max_tokens)))
        firsts = {s[0] for s in seqs if s}
        rows.append(
            {
                "k": k,
                "seeds": seeds,
                "unique_sequences": len(set(seqs)),
                "unique_first_tokens": len(firsts),
                "mean_distinct_2": float(np.mean([distinct_n(list(s), 2) for s in seqs])),
            }
        )
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf, fieldnames=["k", "seeds", "unique_sequences", "unique_first_tokens", "mean_distinct_2"]
    )
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


@dataclass
class DriftReport:
    """How far each embedding moved, and the neighborhoods of the movers."""

    drifts: np.ndarray  # [V] Euclidean distances
    top: list[dict]  # top-k drifted: id, drift, 5-NN before and after

    def to_json(self) -> str:
        return json.dumps(
            {
                "mean_drift": float(self.drifts.mean()),
                "max_drift": float(self.drifts.max()),
                "drifts": [float(d) for d in self.drifts],
                "top": self.top,
            },
            indent=2,
        )


def _nearest(table: np.ndarray, idx: int, count: int) -> list[int]:
    """`count` nearest rows to row idx by cosine, self excluded."""
    v = table[idx]
    sims = table @ v / (np.linalg.norm(table, axis=1) * np.linalg.norm(v))
    sims[idx] = -np.inf
    order = np.argsort(-sims, kind="stable")
    return [int(i) for i in order[:count]]


def embedding_drift(
    initial: EmbeddingTable, learned: EmbeddingTable, top_k: int = 10
) -> DriftReport:
    """Per-token L2 drift between two tables plus neighbor lists of the top movers."""
    if initial.vectors.shape != learned.vectors.shape:
        raise ValueError(
            f"table shapes differ: {initial.vectors.shape} vs {learned.vectors.shape}"
        )
    a = initial.as_float64()
    b = learned.as_float64()
    drifts = np.linalg.norm(b - a, axis=1)
    top_k = min(top_k, drifts.shape[0])
    order = np.argsort(-drifts, kind="stable")[:top_k]
    neighbors = min(5, drifts.shape[0] - 1)
    top = [
        {
            "token_id": int(i),
            "drift": float(drifts[i]),
            "neighbors_before": _nearest(a, int(i), neighbors),
            "neighbors_after": _nearest(b, int(i), neighbors),
        }
        for i in order
    ]
    return DriftReport(drifts=drifts, top=top)
