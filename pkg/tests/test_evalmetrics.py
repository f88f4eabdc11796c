import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exprflow.encoders import identity_target
from exprflow.errors import DomainError, NumericError
from exprflow.evalmetrics import (
    METRIC_COLUMNS,
    EvalEmbedders,
    GeneratedItem,
    GeneratedSet,
    MetricReport,
    aggregate,
    consistency,
    embedding_similarity,
    evaluate_set,
    expression_error,
    format_table,
    fraction_within_iqr,
    identity_distance_distribution,
    identity_similarity,
    oracle_scores,
)
from exprflow.toyfaces import ExpressionParams, FaceImage, IdentityParams

REF_ID = IdentityParams(0.25, 1.0, 0.3, 0.1)
NEUTRAL = ExpressionParams(0.0, 0.6, 0.0)


def vec_image(v):
    """A fake 'image' that carries its own embedding; see ``flat``."""
    return np.asarray(v, dtype=np.float64).reshape(1, -1, 1)


def flat(images):
    return np.asarray(images, dtype=np.float64).reshape(len(images), -1)


def make_set(gen, ex, ref=None, classes=None):
    ref = np.ones(len(gen[0])) if ref is None else ref
    classes = classes or list(range(len(gen)))
    items = [GeneratedItem(c, vec_image(e), vec_image(g)) for c, e, g in zip(classes, ex, gen)]
    return GeneratedSet(FaceImage(vec_image(ref), REF_ID, NEUTRAL, -1), items)


def _cos_loop(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def _dist_loop(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


# ------------------------------------------------------ expression error


def test_expression_error_examples():
    e = [[0.1, 0.2], [0.5, -0.4]]
    assert expression_error(make_set(e, e), flat) == 0.0
    assert expression_error(make_set([[3.0, 4.0]], [[0.0, 0.0]]), flat) == 5.0
    with pytest.raises(DomainError):
        expression_error(GeneratedSet(make_set(e, e).identity_ref, []), flat)


def test_expression_error_matches_loop():
    rng = np.random.default_rng(0)
    gen, ex = rng.standard_normal((3, 4)).tolist(), rng.standard_normal((3, 4)).tolist()
    ref = sum(_dist_loop(g, e) for g, e in zip(gen, ex)) / 3
    assert abs(expression_error(make_set(gen, ex), flat) - ref) < 1e-12
    cross = sum(_dist_loop(g, e) for g in gen for e in ex) / 9
    assert abs(expression_error(make_set(gen, ex), flat, pairing="cross") - cross) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_expression_error_offset_bound(seed, dx, dy):
    rng = np.random.default_rng(seed)
    gen, ex = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    delta = np.array([dx, dy])
    base = expression_error(make_set(gen.tolist(), ex.tolist()), flat)
    moved = expression_error(make_set((gen + delta).tolist(), ex.tolist()), flat)
    assert abs(moved - base) <= np.linalg.norm(delta) + 1e-12


# ----------------------------------------------------------- similarity


def test_embedding_similarity_examples():
    e = [[0.1, 0.2], [0.5, -0.4]]
    assert embedding_similarity(make_set(e, e), flat) == pytest.approx(1.0, abs=1e-15)
    assert embedding_similarity(make_set([[1.0, 0.0], [0.0, 2.0]], [[0.0, 3.0], [-1.0, 0.0]]), flat) == 0.0
    with pytest.raises(NumericError):
        embedding_similarity(make_set([[0.0, 0.0]], [[1.0, 0.0]]), flat)


def test_embedding_similarity_matches_loop():
    rng = np.random.default_rng(1)
    gen, ex, ref = rng.standard_normal((4, 5)).tolist(), rng.standard_normal((4, 5)).tolist(), rng.standard_normal(5)
    gset = make_set(gen, ex, ref)
    want = sum(_cos_loop(g, e) for g, e in zip(gen, ex)) / 4
    assert abs(embedding_similarity(gset, flat, "exemplar") - want) < 1e-12
    want_ref = sum(_cos_loop(g, ref) for g in gen) / 4
    assert abs(embedding_similarity(gset, flat, "identity_ref") - want_ref) < 1e-12
    assert abs(identity_similarity(gset, flat) - want_ref) < 1e-12
    want_cross = sum(_cos_loop(g, e) for g in gen for e in ex) / 16
    assert abs(embedding_similarity(gset, flat, "exemplar", "cross") - want_cross) < 1e-12
    with pytest.raises(DomainError):
        embedding_similarity(gset, flat, "nothing")


# ----------------------------------------------------------- consistency


def test_consistency_examples():
    same = [[1.0, 2.0]] * 4
    assert consistency(make_set(same, same), flat) == pytest.approx(1.0, abs=1e-15)
    assert consistency(make_set([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0]] * 2), flat) == 0.0
    with pytest.raises(DomainError):
        consistency(make_set([[1.0, 0.0]], [[1.0, 0.0]]), flat)


def test_consistency_matches_double_loop():
    rng = np.random.default_rng(2)
    gen = rng.standard_normal((5, 3)).tolist()
    total, n = 0.0, 0
    for i in range(5):
        for j in range(i + 1, 5):
            total += _cos_loop(gen[i], gen[j])
            n += 1
    assert n == 10
    assert abs(consistency(make_set(gen, gen), flat) - total / n) < 1e-12


def test_consistency_constant_embedder():
    rng = np.random.default_rng(3)
    gen = rng.standard_normal((4, 3)).tolist()
    const = lambda images: np.tile([0.3, -0.2, 0.9], (len(images), 1))
    assert consistency(make_set(gen, gen), const) == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(5)))
def test_metrics_invariant_to_item_order(seed, perm):
    rng = np.random.default_rng(seed)
    gen, ex, ref = rng.standard_normal((5, 4)), rng.standard_normal((5, 4)), rng.standard_normal(4)
    a = make_set(gen.tolist(), ex.tolist(), ref)
    b = make_set(gen[list(perm)].tolist(), ex[list(perm)].tolist(), ref)
    emb = EvalEmbedders(flat, flat, flat)
    ra, rb = evaluate_set(a, emb), evaluate_set(b, emb)
    for col in METRIC_COLUMNS:
        assert getattr(ra, col) == pytest.approx(getattr(rb, col), abs=1e-12)


def test_brute_force_report_on_small_set():
    rng = np.random.default_rng(4)
    gen, ex, ref = rng.standard_normal((3, 4)).tolist(), rng.standard_normal((3, 4)).tolist(), rng.standard_normal(4)
    rep = evaluate_set(make_set(gen, ex, ref), EvalEmbedders(flat, flat, flat))
    pairs = list(itertools.combinations(range(3), 2))
    assert abs(rep.exp_error - sum(_dist_loop(g, e) for g, e in zip(gen, ex)) / 3) < 1e-9
    assert abs(rep.clip_like - sum(_cos_loop(g, e) for g, e in zip(gen, ex)) / 3) < 1e-9
    assert abs(rep.id_sim - sum(_cos_loop(g, ref) for g in gen) / 3) < 1e-9
    assert abs(rep.dino_like - rep.id_sim) < 1e-9
    assert abs(rep.dino_con - sum(_cos_loop(gen[i], gen[j]) for i, j in pairs) / 3) < 1e-9
    assert rep.id_con == rep.dino_con
    assert rep.n_items == 3
    for col in ("clip_like", "id_sim", "dino_like", "dino_con", "id_con"):
        assert -1 <= getattr(rep, col) <= 1


# --------------------------------------------------- distance distribution


def _unit(deg):
    r = math.radians(deg)
    return [math.cos(r), math.sin(r)]


def test_identity_distance_hand_case():
    real = np.stack([vec_image(_unit(a)) for a in (0, 90, 180)])
    gset = make_set([_unit(60), _unit(120)], [_unit(0)] * 2, ref=_unit(0))
    (row,) = identity_distance_distribution({7: real}, {7: gset}, flat)
    r2 = math.sqrt(2)
    assert row.identity == 7
    assert row.q1 == pytest.approx(r2, abs=1e-12)
    assert row.median == pytest.approx(r2, abs=1e-12)
    assert row.q3 == pytest.approx((r2 + 2) / 2, abs=1e-12)
    assert row.real_mean == pytest.approx((2 * r2 + 2) / 3, abs=1e-12)
    assert row.generated_mean == pytest.approx((1 + math.sqrt(3)) / 2, abs=1e-12)
    assert not row.within_iqr


def test_identity_distance_scale_invariant_and_within():
    # embeddings are normalized first, so scaling does not matter
    real = np.stack([vec_image(np.array(_unit(a)) * s) for a, s in ((0, 1), (90, 3), (180, 0.5), (270, 2))])
    gset = make_set([_unit(80), _unit(100)], [_unit(0)] * 2, ref=_unit(-10))
    (row,) = identity_distance_distribution({0: real}, {0: gset}, flat)
    assert row.q1 == pytest.approx(math.sqrt(2), abs=1e-12)
    assert row.within_iqr


def test_identity_distance_degenerate_cases(caplog):
    same = np.stack([vec_image([1.0, 2.0])] * 3)
    dup = make_set([[1.0, 2.0]] * 2, [[1.0, 0.0]] * 2, ref=[1.0, 2.0])
    (row,) = identity_distance_distribution({0: same}, {0: dup}, flat)
    assert row.q1 == row.median == row.q3 == 0.0
    assert row.generated_mean == pytest.approx(0.0, abs=1e-12)

    real = np.stack([vec_image(_unit(a)) for a in (0, 90, 180)])
    (row,) = identity_distance_distribution({0: real}, {0: make_set([_unit(0)] * 2, [_unit(0)] * 2, _unit(0))}, flat)
    assert row.generated_mean == pytest.approx(0.0, abs=1e-12) and row.generated_mean < row.q1

    rows = identity_distance_distribution({1: same[:1]}, {1: dup}, flat)
    assert rows == [] and "fewer than 2" in caplog.text
    assert math.isnan(fraction_within_iqr([]))


# ----------------------------------------------------------------- oracles


def test_oracle_scores_hand_count():
    ref_z = identity_target([FaceImage(None, REF_ID, NEUTRAL, -1)])[0].astype(np.float64)
    gset = make_set([[0.0]] * 5, [[1.0]] * 5, ref=[1.0], classes=[0, 1, 2, 3, 4])
    predicted = np.array([0, 1, 4, 3, 0])
    offsets = np.array([0.0, 0.1, 0.0, -0.2, 0.0])
    classifier = lambda imgs: np.eye(5)[predicted]
    regressor = lambda imgs: ref_z[None] + offsets[:, None]
    acc, mse = oracle_scores(gset, classifier, regressor)
    assert acc == 3 / 5
    assert mse == pytest.approx(np.mean(offsets ** 2), abs=1e-12)


def test_oracle_chance_level():
    gset = make_set([[0.0]] * 5, [[1.0]] * 5, classes=[0, 1, 2, 3, 4])
    acc, _ = oracle_scores(gset, lambda imgs: np.full(len(imgs), 2), lambda imgs: np.zeros((len(imgs), 5)))
    assert acc == 0.2


# ------------------------------------------------------------- reporting


def test_aggregate_is_unweighted_mean_of_rows():
    rows = [MetricReport(*(float(i + k) for k in range(8)), n_items=5) for i in range(3)]
    agg = aggregate(rows)
    for f in ("exp_error", "clip_like", "id_sim", "dino_like", "dino_con", "id_con", "oracle_class_acc", "oracle_id_mse"):
        assert getattr(agg, f) == pytest.approx(sum(getattr(r, f) for r in rows) / 3)
    assert agg.n_items == 15
    with pytest.raises(DomainError):
        aggregate([])


def test_report_json_roundtrip_and_table():
    rep = MetricReport(1.5, 0.5, 0.8, 0.7, 0.9, 0.6, 0.95, 0.01, 10)
    assert MetricReport.from_json(rep.to_json()) == rep
    table = format_table({"full": rep, "w/o consistent attention": rep, "w/o expression prompt": rep})
    lines = table.splitlines()
    assert len(lines) == 2 + 3
    for line in lines[2:]:
        assert len(line[26:].split()) == 6
