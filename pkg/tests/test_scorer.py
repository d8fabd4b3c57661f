import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from codit.datagen import BenchmarkCounts, generate_benchmark
from codit.scorer import (
    STAT_NAMES,
    IncompleteScoreTableError,
    Predictor,
    ScoreTable,
    ScoreTableError,
    TrainConfig,
    TrainingDivergedError,
    extract_features,
    init_params,
    load_external_scores,
    log_softmax,
    loss_and_grads,
    ncm_score,
    train_predictor,
    window_features,
)
from codit.timeseries import DimensionMismatchError, Trace, Window, ZScore, sliding_windows
from codit.transforms import TEMPORAL_SET, TransformId, TransformSpec, apply


def stat(feats, name, d):
    i = STAT_NAMES.index(name)
    return feats[..., i * d : (i + 1) * d]


# ---------------------------------------------------------------------------
# Features


def test_constant_window_conventions():
    f = extract_features(Window("a", 0, 16, np.full((16, 3), 2.5)))
    assert f.shape == (len(STAT_NAMES) * 3,)
    np.testing.assert_array_equal(stat(f, "lag1_autocorr", 3), 0.0)
    for name in ("diff_mean", "diff_var", "abs_diff_mean"):
        np.testing.assert_array_equal(stat(f, name, 3), 0.0)
    np.testing.assert_array_equal(stat(f, "repeat_frac", 3), 1.0)


def test_reverse_symmetric_statistics():
    win = Window("a", 0, 16, np.random.default_rng(0).normal(size=(16, 2)))
    f, r = extract_features(win), extract_features(apply(TransformId.REVERSE, win))
    for name in ("lag1_autocorr", "abs_diff_mean", "diff_var", "repeat_frac"):
        np.testing.assert_allclose(stat(r, name, 2), stat(f, name, 2), rtol=1e-12, atol=1e-12)
    # differences change sign under reversal, so these flip
    np.testing.assert_allclose(stat(r, "diff_mean", 2), -stat(f, "diff_mean", 2), atol=1e-12)
    np.testing.assert_allclose(stat(r, "reversal_asymmetry", 2), -stat(f, "reversal_asymmetry", 2), atol=1e-12)


@pytest.mark.parametrize("w", [3, 4, 8, 16, 17])
def test_alternating_sequence_autocorrelation(w):
    x = np.where(np.arange(w) % 2 == 0, 1.0, -1.0)[:, None]
    f = extract_features(Window("a", 0, w, x))
    assert abs(stat(f, "lag1_autocorr", 1)[0] + 1.0) < 1e-9


def test_half_energy_share():
    x = np.concatenate([np.arange(9.0), np.full(8, 8.0)])[:, None]
    f = extract_features(Window("a", 0, 17, x))
    assert stat(f, "half_energy_share", 1)[0] == 1.0
    assert stat(f, "repeat_frac", 1)[0] == 0.5


@settings(max_examples=100, deadline=None)
@given(x=st.tuples(st.integers(2, 20), st.integers(1, 5)).flatmap(
    lambda s: hnp.arrays(np.float64, s, elements=st.floats(-1e6, 1e6, allow_nan=False))))
def test_features_finite_and_bounded(x):
    f = extract_features(Window("a", 0, x.shape[0], x))
    d = x.shape[1]
    assert np.all(np.isfinite(f))
    assert np.all(np.abs(stat(f, "lag1_autocorr", d)) <= 1.0)
    share = stat(f, "half_energy_share", d)
    assert np.all((share >= 0) & (share <= 1))


def test_features_batch_equals_single():
    x = np.random.default_rng(1).normal(size=(5, 12, 3))
    batch = window_features(x)
    for i in range(5):
        np.testing.assert_array_equal(batch[i], extract_features(Window("a", 0, 12, x[i])))


# ---------------------------------------------------------------------------
# Network pieces


@settings(max_examples=100, deadline=None)
@given(logits=hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)),
                         elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_normalized(logits):
    p = np.exp(log_softmax(logits))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_log_softmax_stable_for_huge_logits():
    out = log_softmax(np.array([[1e300, 0.0, -1e300]]))
    assert np.all(np.isfinite(out[:, :2])) and out[0, 0] == 0.0


def test_gradient_descent_monotone_on_fixed_batch():
    rng = np.random.default_rng(3)
    params = init_params(10, 8, 4, rng)
    feats, labels = rng.normal(size=(32, 10)), rng.integers(0, 4, size=32)
    losses = []
    for _ in range(200):
        loss, grads = loss_and_grads(params, feats, labels)
        losses.append(loss)
        for k in params:
            params[k] -= 0.01 * grads[k]
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_init_is_seeded_and_scaled():
    a = init_params(16, 32, 5, np.random.default_rng(0))
    b = init_params(16, 32, 5, np.random.default_rng(0))
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    assert np.abs(a["W1"]).max() <= 1 / 4 and np.abs(a["W2"]).max() <= 1 / math.sqrt(32)
    np.testing.assert_array_equal(a["b1"], 0.0)


# ---------------------------------------------------------------------------
# Scores from hand-built predictors


def fixed_predictor(b2, spec=TransformSpec(TEMPORAL_SET), w=8, d=2):
    F = len(STAT_NAMES) * d
    params = {"W1": np.zeros((4, F)), "b1": np.zeros(4), "W2": np.zeros((spec.size, 4)), "b2": np.asarray(b2, float)}
    unit = ZScore(np.zeros(d), np.ones(d))
    return Predictor(spec, w, unit, ZScore(np.zeros(F), np.ones(F)), params)


def test_certain_predictor_scores_zero():
    model = fixed_predictor([0.0, 0.0, 0.0, 0.0, 1000.0])
    win = Window("a", 0, 8, np.random.default_rng(0).normal(size=(8, 2)))
    assert ncm_score(model, win, TransformId.IDENTITY) == 0.0
    assert ncm_score(model, win, TransformId.REVERSE) > 900


def test_uniform_predictor_scores_log_classes():
    model = fixed_predictor(np.zeros(5))
    win = Window("a", 0, 8, np.random.default_rng(0).normal(size=(8, 2)))
    for g in TEMPORAL_SET:
        assert ncm_score(model, win, g, np.random.default_rng(0)) == pytest.approx(math.log(5), abs=1e-12)


def test_score_rejects_shape_mismatch():
    model = fixed_predictor(np.zeros(5))
    with pytest.raises(DimensionMismatchError):
        ncm_score(model, Window("a", 0, 8, np.zeros((8, 3))), TransformId.IDENTITY)


def test_predictor_requires_finite_params_and_matching_classes():
    with pytest.raises(ValueError):
        fixed_predictor([0.0, np.nan, 0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        fixed_predictor(np.zeros(3))


# ---------------------------------------------------------------------------
# Training


@pytest.fixture(scope="module")
def corpus():
    return generate_benchmark(BenchmarkCounts(24, 0, 10, {"drift": 10}), 11).split


@pytest.fixture(scope="module")
def trained(corpus):
    return train_predictor(corpus.proper_training, TransformSpec(TEMPORAL_SET), TrainConfig(epochs=60))


def test_identity_vs_reverse_is_learnable(corpus):
    spec = TransformSpec.from_names(["identity", "reverse"])
    model = train_predictor(corpus.proper_training, spec, TrainConfig(epochs=50))
    # measured 0.9915 at this seed
    assert model.train_meta["train_accuracy"] >= 0.95


def test_training_is_bit_reproducible(corpus):
    cfg = TrainConfig(epochs=5, windows_per_trace=8)
    a = train_predictor(corpus.proper_training, TransformSpec(TEMPORAL_SET), cfg)
    b = train_predictor(corpus.proper_training, TransformSpec(TEMPORAL_SET), cfg)
    assert a.digest() == b.digest()
    c = train_predictor(corpus.proper_training, TransformSpec(TEMPORAL_SET), TrainConfig(epochs=5, windows_per_trace=8, seed=1))
    assert c.digest() != a.digest()


def test_zero_epochs_is_near_uniform(corpus):
    model = train_predictor(corpus.proper_training, TransformSpec(TEMPORAL_SET), TrainConfig(epochs=0))
    assert model.train_meta["final_loss"] == pytest.approx(math.log(5), abs=0.05)
    assert model.train_meta["epoch_loss"] == []


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(corpus):
    with pytest.raises(TrainingDivergedError, match="lr"):
        train_predictor(corpus.proper_training, TransformSpec(TEMPORAL_SET),
                        TrainConfig(epochs=3, windows_per_trace=4, lr=1e308))


def test_training_rejects_bad_inputs(corpus):
    with pytest.raises(ValueError):
        train_predictor([], TransformSpec(TEMPORAL_SET))
    with pytest.raises(ValueError):
        train_predictor(corpus.proper_training, TransformSpec(TEMPORAL_SET), TrainConfig(w=15))
    mixed = [corpus.proper_training[0], Trace("odd", np.zeros((64, 3)))]
    with pytest.raises(DimensionMismatchError):
        train_predictor(mixed, TransformSpec(TEMPORAL_SET))


def test_train_meta_contents(trained):
    meta = trained.train_meta
    assert len(meta["epoch_loss"]) == 60 and set(meta["per_class_accuracy"]) == {g.label for g in TEMPORAL_SET}
    assert meta["final_loss"] < math.log(5)
    assert meta["epoch_loss"][-1] < meta["epoch_loss"][0]


def test_many_features_use_projection():
    rng = np.random.default_rng(0)
    t = np.arange(64)[:, None]
    traces = [Trace(f"t{i}", np.sin(0.3 * t + rng.uniform(0, 6, size=12)) + 0.1 * rng.normal(size=(64, 12)))
              for i in range(4)]
    model = train_predictor(traces, TransformSpec(TEMPORAL_SET), TrainConfig(epochs=2, windows_per_trace=4))
    assert model.projection.shape == (12, 8)
    assert model.params["W1"].shape[1] == len(STAT_NAMES) * 8
    back = Predictor.from_json(json.loads(json.dumps(model.to_json())))
    win = traces[0].window(0, 16)
    assert ncm_score(back, win, TransformId.REVERSE) == ncm_score(model, win, TransformId.REVERSE)


def test_json_roundtrip_is_exact(trained, tmp_path):
    path = tmp_path / "m.json"
    trained.save(path)
    back = Predictor.load(path)
    assert back.digest() == trained.digest()
    assert path.read_text() == (tmp_path / "m.json").read_text()
    x = np.random.default_rng(2).normal(size=(6, 16, 4))
    classes = np.arange(6) % 5
    rngs = lambda: [np.random.default_rng(i) for i in range(6)]  # noqa: E731
    assert back.score_batch(x, classes, rngs()).tobytes() == trained.score_batch(x, classes, rngs()).tobytes()


def test_scores_are_pure_and_non_negative(trained, corpus):
    win = corpus.test_id[0].window(5, 16)
    for g in TEMPORAL_SET:
        a = ncm_score(trained, win, g, np.random.default_rng(4))
        assert a >= 0 and a == ncm_score(trained, win, g, np.random.default_rng(4))


def test_drift_windows_score_higher_than_id(trained, corpus):
    def mean_score(windows):
        x = np.stack([w.data for w in windows])
        rng = np.random.default_rng(0)
        classes = rng.integers(0, 5, size=len(windows))
        return trained.score_batch(x, classes, [np.random.default_rng(i) for i in range(len(windows))]).mean()

    id_wins = [w for tr in corpus.test_id for w in sliding_windows(tr, 16)]
    ood_wins = [w for tr in corpus.test_ood for w in sliding_windows(tr, 16) if w.t >= tr.ood_onset]
    assert mean_score(ood_wins) > mean_score(id_wins)


# ---------------------------------------------------------------------------
# External scores


def write_scores(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def test_external_table_complete(tmp_path):
    keys = [("a", 0, 16), ("a", 1, 16), ("b", 0, 16)]
    recs = [{"trace_id": t, "t": s, "w": w, "k": k, "score": 0.5 * k + s} for (t, s, w) in keys for k in range(2)]
    write_scores(tmp_path / "s.jsonl", recs)
    table = load_external_scores(tmp_path / "s.jsonl")
    assert len(table) == 6
    np.testing.assert_array_equal(table.scores(keys, 2), [[0.0, 0.5], [1.0, 1.5], [0.0, 0.5]])
    with pytest.raises(IncompleteScoreTableError):
        table.scores(keys, 3)


@pytest.mark.parametrize("score", [-0.1, float("inf")])
def test_external_table_rejects_bad_scores(tmp_path, score):
    write_scores(tmp_path / "s.jsonl", [{"trace_id": "a", "t": 0, "w": 4, "k": 0, "score": score}])
    with pytest.raises(ScoreTableError, match="s.jsonl:1"):
        load_external_scores(tmp_path / "s.jsonl")


def test_external_table_rejects_duplicates(tmp_path):
    rec = {"trace_id": "a", "t": 0, "w": 4, "k": 0, "score": 1.0}
    write_scores(tmp_path / "s.jsonl", [rec, dict(rec, score=2.0)])
    with pytest.raises(ScoreTableError, match="duplicate"):
        load_external_scores(tmp_path / "s.jsonl")


def test_external_table_rejects_malformed(tmp_path):
    (tmp_path / "s.jsonl").write_text('{"trace_id": "a", "t": 0}\n')
    with pytest.raises(ScoreTableError, match="malformed"):
        load_external_scores(tmp_path / "s.jsonl")


def test_score_table_direct_api():
    table = ScoreTable({("a", 0, 4, 0): 1.0})
    assert ("a", 0, 4, 0) in table and table.get(("a", 0, 4), 0) == 1.0
    with pytest.raises(KeyError):
        table.get(("a", 0, 4), 1)
    with pytest.raises(ScoreTableError):
        table.add("a", 0, 4, 0, 2.0)
