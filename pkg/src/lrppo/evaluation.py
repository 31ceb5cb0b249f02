"""NDCG@k, reward pair accuracy and metric rows."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError

DEFAULT_KS = (1, 3, 5, 10, 20)
CSV_HEADER = ["split", "seed", "iteration", "ndcg1", "ndcg3", "ndcg5", "ndcg10", "ndcg20", "reward_acc"]


def rank_by_score(scores):
    """Indices by descending score; equal scores keep ascending index order."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def dcg_at_k(grades, k):
    """Sum of ``(2**rel - 1) / log2(i + 1)`` over the first ``k`` positions."""
    if k < 1:
        raise ValueError("k must be >= 1")
    g = np.asarray(grades, dtype=np.float64)[:k]
    if g.size == 0:
        return 0.0
    discounts = np.log2(np.arange(2, g.size + 2))
    return float(np.sum((np.exp2(g) - 1.0) / discounts))


def ndcg_at_k(grades_in_ranked_order, k):
    """DCG@k over the ideal DCG@k; 1.0 when every grade is zero."""
    ideal = dcg_at_k(sorted(grades_in_ranked_order, reverse=True), k)
    if ideal == 0.0:
        return 1.0
    return dcg_at_k(grades_in_ranked_order, k) / ideal


def ndcg_for_scores(scores, grades, ks=DEFAULT_KS):
    order = rank_by_score(scores)
    ranked = [grades[i] for i in order]
    return {k: ndcg_at_k(ranked, k) for k in ks}


def mean(values):
    """Order-independent mean (exactly rounded sum)."""
    values = list(values)
    return math.fsum(values) / len(values) if values else float("nan")


@dataclass
class MetricsRow:
    split: str
    ndcg: dict
    reward_acc: Optional[float] = None
    iteration: int = 0
    seed: int = 0

    def as_record(self):
        rec = {"split": self.split, "seed": self.seed, "iteration": self.iteration}
        for k in DEFAULT_KS:
            rec[f"ndcg{k}"] = self.ndcg.get(k)
        rec["reward_acc"] = self.reward_acc
        return rec

    @classmethod
    def from_record(cls, rec):
        ndcg = {k: rec[f"ndcg{k}"] for k in DEFAULT_KS if rec.get(f"ndcg{k}") is not None}
        return cls(rec["split"], ndcg, rec.get("reward_acc"), rec.get("iteration", 0), rec.get("seed", 0))


def evaluate_scores(score_fn, instances, ks=DEFAULT_KS, split="test", iteration=0, seed=0):
    """Average NDCG@k over instances using ``score_fn(features) -> scores``."""
    per_k = {k: [] for k in ks}
    for inst in instances:
        if not inst.graded:
            raise DataError(f"instance {inst.instance_id} has ungraded items")
        values = ndcg_for_scores(score_fn(inst.features), inst.grades, ks)
        for k in ks:
            per_k[k].append(values[k])
    return MetricsRow(split, {k: mean(v) for k, v in per_k.items()}, iteration=iteration, seed=seed)


def evaluate_model(actor, instances, ks=DEFAULT_KS, split="test", iteration=0, seed=0):
    """Rank each instance's items by actor score and average NDCG@k."""
    return evaluate_scores(actor.score_items, instances, ks, split, iteration, seed)


def reward_accuracy(reward_model, pairs, lookup):
    """Fraction of pairs where the true order out-scores the flipped one.

    ``lookup`` maps instance id to instance.  Ties count as wrong.
    """
    if not pairs:
        raise DataError("reward_accuracy needs at least one pair")
    r_correct, r_flipped = reward_model.score_pairs(pairs, lookup)
    return float(np.mean(r_correct > r_flipped))


def write_metrics_jsonl(path, rows, mode="w"):
    with open(path, mode, encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.as_record(), sort_keys=True) + "\n")


def _csv_cell(value):
    if value is None:
        return ""
    # repr keeps every digit, so CSV and JSONL agree bitwise
    return repr(value) if isinstance(value, float) else value


def write_metrics_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            rec = row.as_record()
            writer.writerow({k: _csv_cell(rec[k]) for k in CSV_HEADER})
