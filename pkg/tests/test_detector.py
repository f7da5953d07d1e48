from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import addbench.detector as det
from addbench.detector import (VAR_FLOOR, Adam, EarlyStopping, Gmm, GmmModel, TrainConfig, cross_entropy,
                               gmm_fit, gmm_score, init_mlp, load_model, mlp_loss_grad, mlp_score, mlp_scores,
                               mlp_train, model_header, save_model, train_gmm)
from addbench.errors import BadLength, ClassMissing, DimMismatch, KindMismatch, LengthMismatch, TooFewFrames
from addbench.features import FeatureMatrix


def fm(frames, kind="lfcc"):
    """FeatureMatrix from (T, D) frames."""
    return FeatureMatrix(kind, np.asarray(frames, dtype=np.float64).T.copy())


def gauss_logpdf(x, mu, var):
    return -0.5 * np.sum(np.log(2 * np.pi * var) + (x - mu) ** 2 / var)


def numeric_grad(model, X, y, name, h=1e-5):
    base = model.params()
    g = np.zeros_like(base[name])
    for idx in np.ndindex(g.shape):
        hi, lo = base[name].copy(), base[name].copy()
        hi[idx] += h
        lo[idx] -= h
        g[idx] = (mlp_loss_grad(model.with_params({name: hi}), X, y)[0]
                  - mlp_loss_grad(model.with_params({name: lo}), X, y)[0]) / (2 * h)
    return g


def max_rel_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


# --------------------------------------------------------------------- GMM

def test_single_component_is_closed_form():
    X = np.random.default_rng(0).standard_normal((500, 3)) * [1.0, 2.0, 0.001] + [1.0, -2.0, 5.0]
    g = gmm_fit(X, 1)
    assert g.weights.tolist() == [1.0]
    np.testing.assert_allclose(g.means[0], X.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(g.variances[0], np.maximum(X.var(axis=0), VAR_FLOOR), rtol=1e-10)


def test_two_clusters_found():
    rng = np.random.default_rng(1)
    X = np.vstack([rng.standard_normal((300, 2)) - 10, rng.standard_normal((300, 2)) + 10])
    g = gmm_fit(X, 2, seed=3)
    # oracle: the split by sign of the first coordinate is the obvious partition
    left, right = X[X[:, 0] < 0].mean(axis=0), X[X[:, 0] >= 0].mean(axis=0)
    got = g.means[np.argsort(g.means[:, 0])]
    np.testing.assert_allclose(got, [left, right], atol=1e-6)
    assert np.all(np.abs(got - [[-10, -10], [10, 10]]) < 0.5)


@given(st.integers(0, 10000), st.integers(1, 5))
def test_em_trace_non_decreasing(seed, K):
    X = np.random.default_rng(seed).standard_normal((200, 3)) ** 3
    g = gmm_fit(X, K, seed=seed, max_iter=30)
    assert np.all(np.diff(g.trace) >= -1e-8)
    assert abs(g.weights.sum() - 1.0) <= 1e-9
    assert (g.variances >= VAR_FLOOR).all()


def test_degenerate_cluster_is_floored():
    X = np.vstack([np.zeros((50, 2)), np.random.default_rng(2).standard_normal((50, 2))])
    g = gmm_fit(X, 3)
    assert (g.variances >= VAR_FLOOR).all() and np.isfinite(g.loglik(X)).all()


def test_too_few_frames():
    with pytest.raises(TooFewFrames):
        gmm_fit(np.zeros((3, 2)), 4)


def _unit(mu):
    return Gmm(np.array([1.0]), np.array([mu], float), np.ones((1, len(mu))))


def test_identical_models_score_zero():
    g = _unit([0.0, 1.0])
    x = np.random.default_rng(0).standard_normal((7, 2))
    assert gmm_score(GmmModel(g, g, "lfcc"), fm(x)) == 0.0


def test_score_closed_form():
    x = np.array([[0.3, -1.2]])
    model = GmmModel(_unit([0.0, 0.0]), _unit([1.0, 2.0]), "lfcc")
    ref = gauss_logpdf(x[0], np.zeros(2), np.ones(2)) - gauss_logpdf(x[0], np.array([1.0, 2.0]), np.ones(2))
    assert gmm_score(model, fm(x)) == pytest.approx(ref, abs=1e-9)


def test_score_sign_near_bonafide_mean():
    model = GmmModel(_unit([5.0, 5.0]), _unit([-5.0, -5.0]), "lfcc")
    assert gmm_score(model, fm([[5.0, 5.0], [5.1, 4.9]])) > 0


def test_score_kind_mismatch():
    g = _unit([0.0])
    with pytest.raises(KindMismatch):
        gmm_score(GmmModel(g, g, "cqcc"), fm([[0.0]]))


def _toy_gmm_model(seed=0):
    rng = np.random.default_rng(seed)
    feats = [fm(rng.standard_normal((30, 4)) + (0.5 if i % 2 else -0.5)) for i in range(10)]
    labels = ["fake" if i % 2 else "bonafide" for i in range(10)]
    return train_gmm(feats, labels, K=3, seed=seed), feats


def test_gmm_polarity_swap_negates():
    model, feats = _toy_gmm_model()
    for f in feats:
        assert gmm_score(model.swapped(), f) == -gmm_score(model, f)


def test_train_gmm_deterministic_and_separates():
    a, feats = _toy_gmm_model(4)
    b, _ = _toy_gmm_model(4)
    assert [gmm_score(a, f) for f in feats] == [gmm_score(b, f) for f in feats]
    s = [gmm_score(a, f) for f in feats]
    assert all(v > 0 for v in s[0::2]) and all(v < 0 for v in s[1::2])


def test_train_gmm_needs_both_classes():
    with pytest.raises(ClassMissing):
        train_gmm([fm(np.zeros((10, 2)))], ["fake"], K=1)


# ----------------------------------------------------------- cross-entropy

def test_cross_entropy_examples():
    assert cross_entropy([1], [1 - 1e-7]) == pytest.approx(1e-7, rel=1e-3)
    assert abs(cross_entropy([1, 0], [0.5, 0.5]) - np.log(2)) <= 1e-12
    ref = -(np.log(0.9) + np.log(0.8) + np.log(0.9)) / 3
    assert cross_entropy([1, 1, 0], [0.9, 0.8, 0.1]) == pytest.approx(ref, abs=1e-15)
    assert abs(ref - 0.144) < 1e-3


def test_cross_entropy_clamps_and_checks_length():
    assert np.isfinite(cross_entropy([1, 0], [0.0, 1.0]))
    with pytest.raises(LengthMismatch):
        cross_entropy([1, 0], [0.5])


@given(st.lists(st.tuples(st.integers(0, 1), st.floats(1e-6, 1 - 1e-6)), min_size=1, max_size=20))
def test_cross_entropy_symmetry(pairs):
    y = np.array([p[0] for p in pairs], float)
    p = np.array([p[1] for p in pairs])
    assert cross_entropy(y, p) == pytest.approx(cross_entropy(1 - y, 1 - p), rel=1e-9, abs=1e-12)


# -------------------------------------------------------------------- MLP

@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = init_mlp(6, 5, seed, mean=rng.standard_normal(6), std=rng.uniform(0.5, 2, 6))
    X = rng.standard_normal((10, 6)) * 2
    y = rng.integers(0, 2, 10)
    _, grads = mlp_loss_grad(model, X, y)
    for name in model.PARAMS:
        assert max_rel_error(grads[name], numeric_grad(model, X, y, name)) < 1e-4


def test_adam_first_step():
    opt = Adam()
    out = opt.step({"w": np.array(0.0)}, {"w": np.array(1.0)})
    assert out["w"] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-18)


def test_early_stopping_rule():
    stop = EarlyStopping(3)
    flags = [stop.update(e, v) for e, v in enumerate([0.5, 0.6, 0.61, 0.62], start=1)]
    assert flags == [False, False, False, True] and stop.best_epoch == 1


def _toy_samples(n=200, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        p = rng.uniform(-3, 3, 2)
        m = p[0] + p[1]
        if abs(m) >= 0.5 * np.sqrt(2):  # margin 1 about the line x + y = 0
            out.append((p, "fake" if m > 0 else "bonafide"))
    return out


def _separable(samples):
    # oracle: brute-force search over directions and offsets for a separating line
    X = np.array([s[0] for s in samples])
    y = np.array([s[1] == "fake" for s in samples])
    for a in np.linspace(0, np.pi, 721):
        proj = X @ [np.cos(a), np.sin(a)]
        for sgn in (1, -1):
            p = sgn * proj
            if p[y].min() > p[~y].max():
                return True
    return False


def test_toy_separable_set_is_learned():
    samples = _toy_samples()
    assert _separable(samples)
    model, hist = mlp_train(samples, TrainConfig(batch_size=16, lr=1e-2, hidden=16))
    X = np.array([s[0] for s in samples])
    pred_fake = mlp_scores(model, X) < 0
    acc = np.mean(pred_fake == np.array([s[1] == "fake" for s in samples]))
    assert len(hist) == 5 and acc >= 0.99


def test_training_stops_and_returns_best(monkeypatch):
    samples = _toy_samples(40, seed=3)
    cfg = TrainConfig(epochs=10, batch_size=64, hidden=4)
    first, _ = mlp_train(samples, TrainConfig(epochs=1, batch_size=64, hidden=4))
    scripted = iter([0.5, 0.6, 0.61, 0.62, 0.1, 0.1])
    real = det.cross_entropy

    def fake_val(y, p):
        # the validation set holds about 8 items, the single training batch the rest
        return next(scripted) if len(y) < 20 else real(y, p)

    monkeypatch.setattr(det, "cross_entropy", fake_val)
    model, hist = mlp_train(samples, cfg)
    assert [h["val_loss"] for h in hist] == [0.5, 0.6, 0.61, 0.62]
    for k in model.PARAMS:
        np.testing.assert_array_equal(getattr(model, k), getattr(first, k))


def test_mlp_train_deterministic():
    samples = _toy_samples(60, seed=5)
    a, ha = mlp_train(samples, TrainConfig(batch_size=8))
    b, hb = mlp_train(samples, TrainConfig(batch_size=8))
    assert ha == hb
    for k in a.PARAMS:
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))


def test_mlp_needs_two_per_class():
    with pytest.raises(ClassMissing):
        mlp_train([(np.zeros(2), "fake")] * 5 + [(np.ones(2), "bonafide")])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)


def test_mlp_score_extremes():
    m = init_mlp(3, 4, 0)
    zero = m.with_params({k: np.zeros_like(v) for k, v in m.params().items()})
    assert mlp_score(zero, np.ones(3)) == 0.0
    big = zero.with_params({"b2": np.array([50.0, -50.0])})
    assert mlp_score(big, np.ones(3)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(DimMismatch):
        mlp_score(m, np.ones(4))


def test_mlp_polarity_swap_negates():
    m = init_mlp(5, 7, 1)
    X = np.random.default_rng(0).standard_normal((20, 5))
    np.testing.assert_array_equal(mlp_scores(m.swapped(), X), -mlp_scores(m, X))


def test_softmax_outputs_valid():
    m = init_mlp(5, 7, 2)
    _, _, P = m.forward(np.random.default_rng(1).standard_normal((30, 5)) * 100)
    assert np.all((P >= 0) & (P <= 1)) and np.allclose(P.sum(axis=1), 1.0)


# ------------------------------------------------------------- model files

def test_gmm_file_roundtrip(tmp_path):
    model, feats = _toy_gmm_model(1)
    p = save_model(tmp_path / "g.bin", model)
    assert model_header(p) == ("gmm", "lfcc")
    back = load_model(p)
    assert [gmm_score(back, f) for f in feats] == [gmm_score(model, f) for f in feats]
    assert save_model(tmp_path / "h.bin", back).read_bytes() == p.read_bytes()


def test_mlp_file_roundtrip(tmp_path):
    m = init_mlp(4, 3, 0, mean=np.arange(4.0), std=np.full(4, 2.0), kind="cqcc")
    p = save_model(tmp_path / "m.bin", m)
    assert model_header(p) == ("mlp", "cqcc")
    back = load_model(p)
    X = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_array_equal(mlp_scores(back, X), mlp_scores(m, X))


def test_corrupt_model_file(tmp_path):
    p = save_model(tmp_path / "m.bin", init_mlp(4, 3, 0))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(BadLength):
        load_model(p)
    p.write_bytes(b"JUNKJUNK")
    with pytest.raises(BadLength):
        model_header(p)
