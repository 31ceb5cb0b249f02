import io
import math
from collections import Counter
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrppo.data import (
    LabeledItem,
    PairSample,
    RankingInstance,
    SyntheticConfig,
    build_splits,
    generate_synthetic,
    pad_or_truncate,
    pair_quota,
    parse_letor,
    read_letor,
    sample_pair_annotations,
    serialize_letor,
    write_letor,
)
from lrppo.errors import DataError, LetorParseError


def graded_instance(iid, grades, dim=3, seed=0):
    feats = np.random.default_rng(seed).normal(size=(len(grades), dim))
    return RankingInstance(iid, [LabeledItem(f"{iid}-{k}", feats[k], g) for k, g in enumerate(grades)])


# ---------------------------------------------------------------------------
# parsing


def test_parse_single_line():
    (inst,) = parse_letor("2 qid:1 1:0.5 3:0.25 # docA\n")
    assert inst.instance_id == "1"
    assert inst.item_count == 1
    item = inst.items[0]
    assert item.item_id == "docA"
    assert item.relevance == 2
    assert item.features.tolist() == [0.5, 0.0, 0.25]


def test_clamp_counter():
    parsed = parse_letor("4 qid:7 1:1.0")
    assert parsed[0].items[0].relevance == 2
    assert parsed.clamped == 1


def test_mslr_scheme_folds_five_levels():
    text = "".join(f"{g} qid:1 1:{g}\n" for g in range(5))
    parsed = parse_letor(text, grade_scheme="mslr")
    assert parsed[0].grades == [0, 0, 1, 2, 2]
    assert parsed.clamped == 2


def test_grouping_preserves_file_order():
    text = "0 qid:3 1:1 # a\n1 qid:9 1:2 # x\n2 qid:3 1:3 # b\n"
    parsed = parse_letor(text)
    assert [i.instance_id for i in parsed] == ["3", "9"]
    assert [it.item_id for it in parsed[0].items] == ["a", "b"]
    assert parsed[0].grades == [0, 2]


def test_dense_width_is_max_index_seen():
    parsed = parse_letor("1 qid:1 2:1\n0 qid:2 5:3\n")
    assert parsed.width == 5
    assert parsed[0].items[0].features.tolist() == [0.0, 1.0, 0.0, 0.0, 0.0]


def test_default_item_ids():
    parsed = parse_letor("1 qid:q 1:1\n0 qid:q 1:2\n")
    assert [it.item_id for it in parsed[0].items] == ["q-0", "q-1"]


def test_blank_lines_and_stream_input():
    parsed = parse_letor(io.StringIO("\n1 qid:1 1:1\n\n"))
    assert len(parsed) == 1


@pytest.mark.parametrize(
    "text, line, fragment",
    [
        ("x qid:1 1:1", 1, "non-numeric grade"),
        ("1 qid:1 1:1\n1 1:1", 2, "qid"),
        ("1 qid:1 1:1\n1 qid:1 a:1", 2, "malformed"),
        ("1 qid:1 1:1 1:2", 1, "duplicate"),
        ("1 qid:1 1:zz", 1, "malformed"),
        ("1 qid:1 15", 1, "malformed"),
        ("-1 qid:1 1:1", 1, "negative"),
    ],
)
def test_parse_errors_carry_line_number(text, line, fragment):
    with pytest.raises(LetorParseError, match=fragment) as info:
        parse_letor(text)
    assert info.value.line_number == line
    assert str(info.value).startswith(f"line {line}:")


# ---------------------------------------------------------------------------
# serialization


def test_round_trip_of_parse_example():
    parsed = parse_letor("2 qid:1 1:0.5 3:0.25 # docA\n")
    assert parse_letor(serialize_letor(parsed)) == parsed


def test_empty_serializes_to_empty():
    assert serialize_letor([]) == ""
    assert list(parse_letor("")) == []


def test_missing_grade_rejected():
    inst = graded_instance("q", [1, 0]).without_grades()
    with pytest.raises(DataError):
        serialize_letor([inst])


ids = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_-.", min_size=1, max_size=8)
finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@st.composite
def datasets(draw):
    dim = draw(st.integers(1, 6))
    qids = draw(st.lists(ids, min_size=0, max_size=5, unique=True))
    out = []
    for qid in qids:
        n = draw(st.integers(1, 5))
        items = [
            LabeledItem(draw(ids), np.array(draw(st.lists(finite, min_size=dim, max_size=dim))),
                        draw(st.sampled_from([0, 1, 2])))
            for _ in range(n)
        ]
        out.append(RankingInstance(qid, items))
    return out


@settings(max_examples=100, deadline=None, derandomize=True, database=None)
@given(datasets())
def test_round_trip_random_datasets(instances):
    parsed = parse_letor(serialize_letor(instances))
    assert list(parsed) == instances


def test_round_trip_seed7_synthetic(tmp_path):
    rng = np.random.default_rng(7)
    instances = []
    for k in range(100):
        n = int(rng.integers(2, 12))
        feats = rng.normal(scale=10.0 ** rng.integers(-8, 8), size=(n, 5))
        instances.append(RankingInstance(
            f"q{k}", [LabeledItem(f"d{k}_{i}", feats[i], int(rng.integers(0, 3))) for i in range(n)]))
    path = tmp_path / "x.letor"
    write_letor(path, instances)
    assert list(read_letor(path)) == instances


# ---------------------------------------------------------------------------
# synthetic data


def test_synthetic_is_deterministic():
    cfg = SyntheticConfig(n_instances=5, seed=3)
    assert generate_synthetic(cfg) == generate_synthetic(cfg)
    assert generate_synthetic(cfg) != generate_synthetic(SyntheticConfig(n_instances=5, seed=4))


def test_grade_histogram_per_instance():
    for inst in generate_synthetic(SyntheticConfig(n_instances=20, domain="target")):
        counts = Counter(inst.grades)
        n = inst.item_count
        assert abs(counts[0] - 0.5 * n) <= 1
        assert abs(counts[1] - 0.3 * n) <= 1
        assert abs(counts[2] - 0.2 * n) <= 1


@pytest.mark.parametrize(
    "kwargs",
    [{"items_per_instance": 1}, {"feature_dim": 3}, {"domain": "other"}, {"n_instances": 0}],
)
def test_synthetic_config_errors(kwargs):
    with pytest.raises(DataError):
        generate_synthetic(SyntheticConfig(**kwargs))


def _oracle_ndcg5(scores, grades):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    dcg = sum((2 ** grades[i] - 1) / math.log2(r + 2) for r, i in enumerate(order[:5]))
    ideal = sorted(grades, reverse=True)
    idcg = sum((2 ** g - 1) / math.log2(r + 2) for r, g in enumerate(ideal[:5]))
    return dcg / idcg if idcg else 1.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_source_scorer_degrades_on_target(seed):
    """A ridge scorer fit on source ranks held-out source clearly better than target."""
    source = generate_synthetic(SyntheticConfig(n_instances=300, seed=seed, domain="source"))
    target = generate_synthetic(SyntheticConfig(n_instances=100, seed=seed, domain="target"))
    train, held = source[:200], source[200:]
    X = np.vstack([i.features for i in train])
    X1 = np.hstack([X, np.ones((len(X), 1))])
    y = np.concatenate([i.grades for i in train]).astype(float)
    coef = np.linalg.solve(X1.T @ X1 + 1e-2 * np.eye(X1.shape[1]), X1.T @ y)

    def score(inst):
        return list(np.hstack([inst.features, np.ones((inst.item_count, 1))]) @ coef)

    src = np.mean([_oracle_ndcg5(score(i), i.grades) for i in held])
    tgt = np.mean([_oracle_ndcg5(score(i), i.grades) for i in target])
    assert src - tgt >= 0.05


# ---------------------------------------------------------------------------
# pad / truncate


def test_truncate():
    inst = graded_instance("q", [0] * 25)
    out = pad_or_truncate(inst, 20)
    assert out.items == inst.items[:20]


def test_exact_count_unchanged():
    inst = graded_instance("q", [0, 1] * 10)
    assert pad_or_truncate(inst, 20) == inst


def test_pad_cyclically_with_marker():
    inst = graded_instance("q", [2, 1, 0])
    out = pad_or_truncate(inst, 5)
    assert [it.item_id for it in out.items] == ["q-0", "q-1", "q-2", "q-0~dup1", "q-1~dup1"]
    np.testing.assert_array_equal(out.items[3].features, inst.items[0].features)
    assert out.grades == [2, 1, 0, 2, 1]


def test_pad_target_too_small():
    with pytest.raises(DataError):
        pad_or_truncate(graded_instance("q", [0, 1]), 1)


# ---------------------------------------------------------------------------
# pair sampling


def test_proportion_zero_is_empty():
    assert sample_pair_annotations([graded_instance("q", [2, 1, 0])], 0.0, seed=0) == []


def test_proportion_one_exhaustive():
    pairs = sample_pair_annotations([graded_instance("q", [2, 1, 0])], 1.0, seed=0)
    assert sorted(p.ordered for p in pairs) == [(0, 1), (0, 2), (1, 2)]


def test_all_equal_grades_contribute_nothing():
    assert sample_pair_annotations([graded_instance("q", [1, 1, 1])], 1.0, seed=0) == []


def test_ten_percent_of_twenty_items():
    instances = generate_synthetic(SyntheticConfig(n_instances=100, items_per_instance=20, seed=1))
    pairs = sample_pair_annotations(instances, 0.1, seed=1)
    per = Counter(p.instance_id for p in pairs)
    # oracle: enumerate unequal-grade pairs directly
    expected = {}
    for inst in instances:
        unequal = sum(1 for i, j in combinations(range(20), 2) if inst.grades[i] != inst.grades[j])
        if unequal:
            expected[inst.instance_id] = min(math.ceil(0.1 * 190), unequal)
    assert dict(per) == expected
    assert set(expected.values()) == {19}
    assert len(pairs) == 1900


def test_orientation_soundness():
    instances = generate_synthetic(SyntheticConfig(n_instances=30, seed=2))
    grades = {i.instance_id: i.grades for i in instances}
    for p in sample_pair_annotations(instances, 0.3, seed=5):
        g = grades[p.instance_id]
        assert g[p.preferred_index] > g[p.other_index]


def test_proportions_are_nested():
    instances = generate_synthetic(SyntheticConfig(n_instances=20, seed=2))
    prev = set()
    for prop in (0.05, 0.1, 0.2, 0.4):
        cur = set(sample_pair_annotations(instances, prop, seed=9))
        assert prev <= cur
        prev = cur


@pytest.mark.parametrize("bad", [-0.1, 1.5])
def test_proportion_out_of_range(bad):
    with pytest.raises(DataError):
        sample_pair_annotations([], bad, seed=0)


def test_pair_quota_handles_float_noise():
    assert pair_quota(0.1, 20) == 19
    assert pair_quota(0.4, 20) == 76
    assert pair_quota(0.3, 10) == math.ceil(0.3 * 45)


def test_pair_sample_rejects_self_pair():
    with pytest.raises(DataError):
        PairSample("q", 1, 1)


# ---------------------------------------------------------------------------
# splits


@pytest.fixture(scope="module")
def domains():
    source = generate_synthetic(SyntheticConfig(n_instances=60, seed=0, domain="source"))
    target = generate_synthetic(SyntheticConfig(n_instances=50, seed=0, domain="target"))
    return source, target


def test_split_counts(domains):
    source, target = domains
    split = build_splits(source, target, annotation_proportion=0.1, stage3_pair_fraction=0.4, seed=0)
    n_train = len(target) - len(split.test_instances)
    assert len(split.test_instances) == 10
    per = Counter(p.instance_id for p in split.stage3_pairs)
    assert set(per.values()) == {math.ceil(0.4 * 190)}
    assert len(per) == n_train
    assert len(split.stage2_target_pairs) == 19 * n_train
    assert len(split.stage2_source_pairs) == len(split.stage2_target_pairs)
    # stage-2 target pairs match a direct call on the same training instances
    train_graded = [i for i in target if i.instance_id in per]
    assert split.stage2_target_pairs == sample_pair_annotations(train_graded, 0.1, 0, stream=0)


def test_split_disjointness_and_stage_isolation(domains):
    source, target = domains
    split = build_splits(source, target, seed=1)
    test_ids = {i.instance_id for i in split.test_instances}
    train_ids = {i.instance_id for i in split.stage3_instances}
    assert not test_ids & train_ids
    assert test_ids | train_ids == {i.instance_id for i in target}
    assert {p.instance_id for p in split.stage3_pairs} <= train_ids
    assert {p.instance_id for p in split.stage2_target_pairs} <= train_ids
    assert {p.instance_id for p in split.stage2_source_pairs} <= {i.instance_id for i in source}
    assert all(not inst.graded for inst in split.stage3_instances)
    assert all(p.preferred_index < p.other_index for p in split.stage3_pairs)
    manifest = split.manifest()
    assert not set(manifest["splits"]["test"]) & set(manifest["splits"]["target_train"])


def test_split_is_deterministic(domains):
    source, target = domains
    a = build_splits(source, target, seed=4)
    b = build_splits(source, target, seed=4)
    assert a.manifest() == b.manifest()
    assert a.stage2_pairs == b.stage2_pairs and a.stage3_pairs == b.stage3_pairs


def test_split_annotation_nesting(domains):
    source, target = domains
    small = build_splits(source, target, annotation_proportion=0.05, seed=2)
    large = build_splits(source, target, annotation_proportion=0.2, seed=2)
    assert set(small.stage2_target_pairs) <= set(large.stage2_target_pairs)
    assert set(small.stage2_source_pairs) <= set(large.stage2_source_pairs)
    assert small.stage3_pairs == large.stage3_pairs


def test_overlapping_ids_rejected(domains):
    source, _ = domains
    with pytest.raises(DataError, match="share"):
        build_splits(source, source[:10], seed=0)
