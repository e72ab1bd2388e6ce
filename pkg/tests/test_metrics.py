import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nh2st.config import TrainConfig
from nh2st.data import SynthConfig, synth_generate
from nh2st.metrics import CVReport, compute_metrics, cross_validate, per_gene_pearson


def test_identity(rng):
    y = rng.standard_normal((10, 4))
    r = compute_metrics(y, y)
    assert r.mse == 0.0 and r.mae == 0.0 and r.pcc == pytest.approx(1.0, abs=1e-12)


def test_negation(rng):
    y = rng.standard_normal((10, 4))
    assert compute_metrics(-y, y).pcc == pytest.approx(-1.0, abs=1e-12)


def test_scaled_column():
    pred = np.array([[2.0], [4.0], [6.0]])
    label = np.array([[1.0], [2.0], [3.0]])
    r = compute_metrics(pred, label)
    assert r.pcc == pytest.approx(1.0, abs=1e-12)
    assert r.mse == pytest.approx(14 / 3)
    assert r.mae == pytest.approx(2.0)


def test_constant_gene_scores_zero(rng):
    label = rng.standard_normal((6, 2))
    label[:, 1] = 3.0
    r = compute_metrics(label.copy(), label)
    np.testing.assert_allclose(r.per_gene_pcc, [1.0, 0.0], atol=1e-12)
    assert r.pcc == pytest.approx(0.5)


def test_pcc_is_mean_of_genes(rng):
    pred, label = rng.standard_normal((2, 12, 5))
    r = compute_metrics(pred, label)
    expected = [np.corrcoef(pred[:, j], label[:, j])[0, 1] for j in range(5)]
    np.testing.assert_allclose(r.per_gene_pcc, expected, atol=1e-12)
    assert r.pcc == pytest.approx(np.mean(expected), abs=1e-12)


def test_rejects_bad_shapes():
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((1, 2)), np.zeros((1, 2)))


finite = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (8, 3), elements=finite),
    arrays(np.float64, (8, 3), elements=finite),
    st.floats(0.1, 5.0),
    st.floats(-5.0, 5.0),
)
def test_pcc_affine_invariance(pred, label, a, b):
    r1 = per_gene_pearson(pred, label)
    r2 = per_gene_pearson(a * pred + b, label)
    ok = (pred.std(axis=0) > 1e-6) & (label.std(axis=0) > 1e-6)
    np.testing.assert_allclose(r1[ok], r2[ok], atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (5, 3), elements=finite), arrays(np.float64, (5, 3), elements=finite))
def test_mae_bounded_by_rmse(pred, label):
    r = compute_metrics(pred, label)
    assert r.mae <= np.sqrt(r.mse) + 1e-12
    assert -1.0 <= r.pcc <= 1.0


def test_report_population_std(tmp_path):
    rep = CVReport([(1.0, 2.0, 0.5), (3.0, 2.0, 0.7)])
    assert rep.mean == pytest.approx((2.0, 2.0, 0.6))
    assert rep.std == pytest.approx((1.0, 0.0, 0.1))
    path = tmp_path / "r.csv"
    rep.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "fold,mse,mae,pcc"
    assert len(lines) == 4 and lines[-1].startswith("summary,2.0±1.0,")


@pytest.fixture(scope="module")
def cv_setup():
    ds = synth_generate(SynthConfig(grid=14, P=8, n=8, sigma=0.0), 2)
    cfg = TrainConfig(N=64, P=8, n=8, T=4, K=4, lr=3e-3, epochs=20)
    return ds, cfg


def test_cross_validate_shape_and_determinism(cv_setup):
    ds, cfg = cv_setup
    a = cross_validate(ds, cfg.replace(epochs=2), 3, seed=4)
    b = cross_validate(ds, cfg.replace(epochs=2), 3, seed=4)
    assert len(a.folds) == 3 and a.folds == b.folds
    assert np.isfinite(a.values).all()


def test_cross_validate_noiseless_signal(cv_setup):
    ds, cfg = cv_setup
    rep = cross_validate(ds, cfg, 2, seed=0)
    assert rep.mean[2] > 0.95


def test_cross_validate_needs_two_folds(cv_setup):
    ds, cfg = cv_setup
    with pytest.raises(ValueError):
        cross_validate(ds, cfg, 1, seed=0)
