"""Ranking instances: LETOR I/O, synthetic transfer data, pair sampling, splits."""

from __future__ import annotations

import io
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from .errors import DataError, LetorParseError

logger = logging.getLogger(__name__)

GRADES = (0, 1, 2)
# MSLR-style five-level grades folded onto three levels.
MSLR_GRADE_MAP = {0: 0, 1: 0, 2: 1, 3: 2, 4: 2}


@dataclass(eq=False)
class LabeledItem:
    item_id: str
    features: np.ndarray
    relevance: Optional[int] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.relevance is not None and self.relevance not in GRADES:
            raise DataError(f"item {self.item_id}: relevance must be 0, 1 or 2, got {self.relevance!r}")

    def __eq__(self, other):
        if not isinstance(other, LabeledItem):
            return NotImplemented
        return (self.item_id == other.item_id and self.relevance == other.relevance
                and np.array_equal(self.features, other.features))


@dataclass(eq=False)
class RankingInstance:
    instance_id: str
    items: list

    def __post_init__(self):
        self._matrix = None

    @property
    def item_count(self):
        return len(self.items)

    @property
    def features(self):
        """Item features stacked into an ``(n_items, dim)`` array."""
        if self._matrix is None:
            self._matrix = np.stack([it.features for it in self.items])
        return self._matrix

    @property
    def grades(self):
        return [it.relevance for it in self.items]

    @property
    def graded(self):
        return all(it.relevance is not None for it in self.items)

    def without_grades(self):
        return RankingInstance(self.instance_id,
                               [LabeledItem(it.item_id, it.features, None) for it in self.items])

    def __eq__(self, other):
        if not isinstance(other, RankingInstance):
            return NotImplemented
        return (self.instance_id == other.instance_id and len(self.items) == len(other.items)
                and all(a == b for a, b in zip(self.items, other.items)))


@dataclass(frozen=True)
class PairSample:
    """Two item positions inside one instance.

    For annotated pairs ``preferred_index`` holds the more relevant item.  For
    unannotated stage-3 pairs the two indices are in dataset order.
    """

    instance_id: str
    preferred_index: int
    other_index: int

    def __post_init__(self):
        if self.preferred_index == self.other_index:
            raise DataError(f"pair in {self.instance_id} repeats index {self.preferred_index}")

    @property
    def initial(self):
        """The pair in dataset order."""
        return tuple(sorted((self.preferred_index, self.other_index)))

    @property
    def ordered(self):
        return (self.preferred_index, self.other_index)


class ParsedLetor(list):
    """List of instances with parse statistics attached."""

    def __init__(self, instances=(), clamped=0, width=0):
        super().__init__(instances)
        self.clamped = clamped
        self.width = width


# ---------------------------------------------------------------------------
# LETOR / SVMLight

def _map_grade(raw, scheme):
    if scheme == "clamp":
        return min(raw, 2), raw > 2
    if scheme == "mslr":
        if raw not in MSLR_GRADE_MAP:
            raise ValueError(f"grade {raw} outside 0..4")
        return MSLR_GRADE_MAP[raw], raw > 2
    raise ValueError(f"unknown grade scheme {scheme!r}")


def parse_letor(source, grade_scheme="clamp"):
    """Parse ``<grade> qid:<id> <k>:<v> ... # comment`` lines.

    ``source`` is a string or a text stream.  Items are grouped by qid in
    file order; the dense width is the largest feature index seen and absent
    features read as 0.0.  Grades above 2 are clamped to 2 (``"clamp"``) or
    folded 0,1->0 / 2->1 / 3,4->2 (``"mslr"``); either way the number of
    grades above 2 is reported as ``result.clamped``.
    """
    stream = io.StringIO(source) if isinstance(source, str) else source
    groups = {}
    order = []
    clamped = 0
    width = 0
    for lineno, raw_line in enumerate(stream, start=1):
        line = raw_line.rstrip("\n")
        body, hash_, comment = line.partition("#")
        tokens = body.split()
        if not tokens:
            continue
        try:
            raw_grade = int(tokens[0])
        except ValueError:
            raise LetorParseError(f"non-numeric grade {tokens[0]!r}", lineno) from None
        if raw_grade < 0:
            raise LetorParseError(f"negative grade {raw_grade}", lineno)
        try:
            grade, was_clamped = _map_grade(raw_grade, grade_scheme)
        except ValueError as exc:
            raise LetorParseError(str(exc), lineno) from None
        clamped += was_clamped
        if len(tokens) < 2 or not tokens[1].startswith("qid:") or len(tokens[1]) == 4:
            raise LetorParseError(f"expected qid:<id>, got {tokens[1] if len(tokens) > 1 else 'end of line'!r}", lineno)
        qid = tokens[1][4:]
        feats = {}
        for tok in tokens[2:]:
            key, colon, value = tok.partition(":")
            if not colon:
                raise LetorParseError(f"malformed feature token {tok!r}", lineno)
            try:
                index = int(key)
                val = float(value)
            except ValueError:
                raise LetorParseError(f"malformed feature token {tok!r}", lineno) from None
            if index < 1:
                raise LetorParseError(f"feature index must be >= 1, got {index}", lineno)
            if index in feats:
                raise LetorParseError(f"duplicate feature index {index}", lineno)
            feats[index] = val
            width = max(width, index)
        if qid not in groups:
            groups[qid] = []
            order.append(qid)
        item_id = comment.strip() if hash_ else f"{qid}-{len(groups[qid])}"
        groups[qid].append((item_id, feats, grade))
    if clamped:
        logger.warning("clamped %d grade(s) above 2", clamped)
    instances = []
    for qid in order:
        items = []
        for item_id, feats, grade in groups[qid]:
            dense = np.zeros(width)
            for index, val in feats.items():
                dense[index - 1] = val
            items.append(LabeledItem(item_id, dense, grade))
        instances.append(RankingInstance(qid, items))
    return ParsedLetor(instances, clamped=clamped, width=width)


def serialize_letor(instances):
    """Inverse of :func:`parse_letor` (every feature written, 17 significant digits)."""
    lines = []
    for inst in instances:
        for item in inst.items:
            if item.relevance is None:
                raise DataError(f"item {item.item_id} in {inst.instance_id} has no grade")
            feats = " ".join(f"{k + 1}:{v:.17g}" for k, v in enumerate(item.features))
            parts = [str(item.relevance), f"qid:{inst.instance_id}"]
            if feats:
                parts.append(feats)
            lines.append(" ".join(parts) + f" # {item.item_id}\n")
    return "".join(lines)


def read_letor(path, grade_scheme="clamp"):
    with open(path, encoding="utf-8") as fh:
        return parse_letor(fh, grade_scheme=grade_scheme)


def write_letor(path, instances):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_letor(instances))


# ---------------------------------------------------------------------------
# synthetic source/target data

@dataclass
class SyntheticConfig:
    n_instances: int = 300
    items_per_instance: int = 20
    feature_dim: int = 16
    domain: str = "source"
    seed: int = 0
    # shared between domains: base relevance direction and its rotation
    world_seed: int = 0
    rotation_deg: float = 60.0
    target_shift: float = 0.5
    context_dims: int = 4
    context_strength: float = 0.25
    noise: float = 0.25

    def validate(self):
        if self.items_per_instance < 2:
            raise DataError("items_per_instance must be >= 2")
        if self.feature_dim < 4:
            raise DataError("feature_dim must be >= 4")
        if self.n_instances < 1:
            raise DataError("n_instances must be >= 1")
        if self.domain not in ("source", "target"):
            raise DataError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if not 1 <= self.context_dims < self.feature_dim:
            raise DataError("context_dims must be in [1, feature_dim)")
        if self.noise < 0:
            raise DataError("noise must be >= 0")


def domain_weights(cfg):
    """Relevance direction over the item dims for ``cfg.domain``."""
    n_item = cfg.feature_dim - cfg.context_dims
    rng = np.random.default_rng([cfg.world_seed, n_item, 7919])
    w = rng.standard_normal(n_item)
    w /= np.linalg.norm(w)
    if cfg.domain == "source":
        return w
    perp = rng.standard_normal(n_item)
    perp -= perp.dot(w) * w
    perp /= np.linalg.norm(perp)
    theta = math.radians(cfg.rotation_deg)
    return math.cos(theta) * w + math.sin(theta) * perp


def grade_by_rank(latent):
    """Bottom 50% -> 0, next 30% -> 1, top 20% -> 2 (within one instance)."""
    n = len(latent)
    n_low = n // 2
    n_high = max(1, n // 5) if n >= 3 else 1
    ranks = np.empty(n, dtype=int)
    ranks[np.argsort(latent, kind="stable")] = np.arange(n)
    grades = np.ones(n, dtype=int)
    grades[ranks < n_low] = 0
    grades[ranks >= n - n_high] = 2
    return grades


def generate_synthetic(cfg):
    """Draw instances whose grades come from a latent per-item score.

    Each item has ``feature_dim - context_dims`` item-specific features and
    ``context_dims`` features shared by the whole instance.  The latent score
    is ``w . x + strength * sum(x[:c] * ctx) + noise``; target data uses a
    rotated ``w`` and shifted item-feature means.
    """
    cfg.validate()
    w = domain_weights(cfg)
    n_item = cfg.feature_dim - cfg.context_dims
    c = cfg.context_dims
    shift = np.zeros(n_item)
    if cfg.domain == "target":
        shift[: n_item // 2] = cfg.target_shift
    rng = np.random.default_rng([cfg.seed, 0 if cfg.domain == "source" else 1, cfg.world_seed])
    prefix = "s" if cfg.domain == "source" else "t"
    instances = []
    n = cfg.items_per_instance
    for k in range(cfg.n_instances):
        x = rng.standard_normal((n, n_item)) + shift
        ctx = rng.standard_normal(c)
        latent = x @ w + cfg.context_strength * (x[:, :c] @ ctx) + cfg.noise * rng.standard_normal(n)
        grades = grade_by_rank(latent)
        feats = np.hstack([x, np.tile(ctx, (n, 1))])
        iid = f"{prefix}{k:05d}"
        items = [LabeledItem(f"{iid}-{i:03d}", feats[i], int(grades[i])) for i in range(n)]
        instances.append(RankingInstance(iid, items))
    return instances


def pad_or_truncate(instance, target_count):
    """Keep the first ``target_count`` items, or repeat items cyclically."""
    if target_count < 2:
        raise DataError("target_count must be >= 2")
    items = instance.items
    if len(items) >= target_count:
        return RankingInstance(instance.instance_id, list(items[:target_count]))
    out = list(items)
    k = 0
    while len(out) < target_count:
        src = items[k % len(items)]
        cycle = k // len(items) + 1
        out.append(LabeledItem(f"{src.item_id}~dup{cycle}", src.features, src.relevance))
        k += 1
    return RankingInstance(instance.instance_id, out)


# ---------------------------------------------------------------------------
# pair sampling and splits

def _instance_rng(seed, instance_id, stream):
    return np.random.default_rng([seed, zlib.crc32(instance_id.encode("utf-8")), stream])


def pair_quota(proportion, n_items):
    """``ceil(proportion * C(n, 2))`` robust to float representation."""
    total = n_items * (n_items - 1) // 2
    return min(total, max(0, math.ceil(proportion * total - 1e-9)))


def sample_pair_annotations(instances, proportion, seed, stream=0):
    """Oriented preference pairs among unequal-grade items.

    Per instance the unequal-grade pairs are put in a seed-fixed random order
    and a prefix of length ``ceil(proportion * C(n, 2))`` is taken, so larger
    proportions always contain the smaller ones.
    """
    if not 0.0 <= proportion <= 1.0:
        raise DataError(f"proportion must be in [0, 1], got {proportion}")
    out = []
    for inst in instances:
        if not inst.graded:
            raise DataError(f"instance {inst.instance_id} has ungraded items")
        grades = inst.grades
        quota = pair_quota(proportion, inst.item_count)
        if quota == 0:
            continue
        candidates = [(i, j) for i, j in combinations(range(inst.item_count), 2) if grades[i] != grades[j]]
        if not candidates:
            continue
        perm = _instance_rng(seed, inst.instance_id, stream).permutation(len(candidates))
        for idx in perm[:quota]:
            i, j = candidates[idx]
            if grades[i] > grades[j]:
                out.append(PairSample(inst.instance_id, i, j))
            else:
                out.append(PairSample(inst.instance_id, j, i))
    return out


def sample_state_pairs(instances, fraction, seed, stream=2):
    """Unannotated pairs in dataset order, ``ceil(fraction * C(n, 2))`` per instance."""
    if not 0.0 <= fraction <= 1.0:
        raise DataError(f"fraction must be in [0, 1], got {fraction}")
    out = []
    for inst in instances:
        quota = pair_quota(fraction, inst.item_count)
        if quota == 0:
            continue
        pairs = list(combinations(range(inst.item_count), 2))
        perm = _instance_rng(seed, inst.instance_id, stream).permutation(len(pairs))
        out.extend(PairSample(inst.instance_id, *pairs[idx]) for idx in perm[:quota])
    return out


@dataclass
class DatasetSplit:
    stage1_instances: list
    stage2_target_pairs: list
    stage2_source_pairs: list
    stage3_pairs: list
    # target training instances with grades removed; stage 3 only sees these
    stage3_instances: list
    test_instances: list
    annotation_proportion: float = 0.1
    stage3_pair_fraction: float = 0.4
    seed: int = 0
    test_fraction: float = 0.2
    _lookup: dict = field(default=None, repr=False)

    @property
    def stage2_pairs(self):
        return self.stage2_target_pairs + self.stage2_source_pairs

    def instances_by_id(self):
        """Every instance a pair may reference (stage-3 ones ungraded)."""
        if self._lookup is None:
            self._lookup = {}
            for group in (self.stage1_instances, self.stage3_instances, self.test_instances):
                for inst in group:
                    self._lookup[inst.instance_id] = inst
        return self._lookup

    def manifest(self):
        return {
            "annotation_proportion": self.annotation_proportion,
            "stage3_pair_fraction": self.stage3_pair_fraction,
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "splits": {
                "stage1": [i.instance_id for i in self.stage1_instances],
                "target_train": [i.instance_id for i in self.stage3_instances],
                "test": [i.instance_id for i in self.test_instances],
            },
            "counts": {
                "stage2_target_pairs": len(self.stage2_target_pairs),
                "stage2_source_pairs": len(self.stage2_source_pairs),
                "stage3_pairs": len(self.stage3_pairs),
            },
        }


def split_test(target, test_fraction, seed):
    """Deterministically carve ``test_fraction`` of target instances for testing."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must be in (0, 1)")
    n_test = max(1, int(round(test_fraction * len(target))))
    if n_test >= len(target):
        raise DataError("not enough target instances to hold out a test split")
    perm = np.random.default_rng([seed, 3]).permutation(len(target))
    test_idx = set(perm[:n_test].tolist())
    train = [inst for k, inst in enumerate(target) if k not in test_idx]
    test = [inst for k, inst in enumerate(target) if k in test_idx]
    return train, test


def build_splits(source, target, annotation_proportion=0.1, stage3_pair_fraction=0.4,
                 seed=0, test_fraction=0.2):
    """Assemble every stage's training data from graded source and target sets.

    The test split is carved from ``target`` before any pair sampling.  Stage 2
    gets annotated target pairs plus an equal number of source pairs oriented
    by source grades; stage 3 gets unannotated target pairs.
    """
    src_ids = {i.instance_id for i in source}
    tgt_ids = {i.instance_id for i in target}
    overlap = src_ids & tgt_ids
    if overlap:
        raise DataError(f"source and target share instance ids: {sorted(overlap)[:5]}")
    if len(src_ids) != len(source) or len(tgt_ids) != len(target):
        raise DataError("duplicate instance ids within a domain")
    train_target, test = split_test(target, test_fraction, seed)
    target_pairs = sample_pair_annotations(train_target, annotation_proportion, seed, stream=0)
    pool = sample_pair_annotations(source, 1.0, seed, stream=1)
    order = np.random.default_rng([seed, 4]).permutation(len(pool))
    n_source = min(len(target_pairs), len(pool))
    if n_source < len(target_pairs):
        logger.warning("only %d source pairs available for %d target pairs", len(pool), len(target_pairs))
    source_pairs = [pool[k] for k in order[:n_source]]
    stage3_pairs = sample_state_pairs(train_target, stage3_pair_fraction, seed)
    return DatasetSplit(
        stage1_instances=list(source),
        stage2_target_pairs=target_pairs,
        stage2_source_pairs=source_pairs,
        stage3_pairs=stage3_pairs,
        stage3_instances=[inst.without_grades() for inst in train_target],
        test_instances=test,
        annotation_proportion=annotation_proportion,
        stage3_pair_fraction=stage3_pair_fraction,
        seed=seed,
        test_fraction=test_fraction,
    )


def write_manifest(path, manifest):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
