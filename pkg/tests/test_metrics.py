import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from mixnoise import metrics as mt
from mixnoise.losses import ElboEstimate
from mixnoise.noise_model import NoiseParams

TRUTH = NoiseParams(0.005, 0.1)


def test_distance_zero_at_truth():
    assert mt.distance_ab(TRUTH, TRUTH) == 0.0


def test_distance_hand_case():
    assert mt.distance_ab(NoiseParams(0.01, 0.2), TRUTH) == pytest.approx(2.0, abs=1e-15)


@pytest.mark.parametrize("truth", [NoiseParams(0.0, 0.1), NoiseParams(0.1, 0.0)])
def test_distance_rejects_zero_truth(truth):
    with pytest.raises(ValueError):
        mt.distance_ab(NoiseParams(0.1, 0.1), truth)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 10), st.floats(1e-4, 10), st.floats(1e-3, 1), st.floats(1e-3, 1), st.floats(1e-3, 1e3))
def test_distance_scale_invariant_and_symmetric(a, b, at, bt, lam):
    d = mt.distance_ab(NoiseParams(a, b), NoiseParams(at, bt))
    assert d >= 0
    assert mt.distance_ab(NoiseParams(lam * a, lam * b), NoiseParams(lam * at, lam * bt)) == pytest.approx(d, rel=1e-12)
    assert mt.distance_ab(NoiseParams(b, a), NoiseParams(bt, at)) == pytest.approx(d, rel=1e-15)


def test_histogram_identical_samples_single_bin():
    m = mt.marginal_histograms(np.full((100, 3), 0.3), -1.0, 1.0, bins=10, bins_2d=8)
    for h in m.one_d:
        assert np.count_nonzero(h.counts) == 1 and h.counts.sum() == 100
    for h in m.two_d:
        assert np.count_nonzero(h.counts) == 1


def test_histogram_totals_and_layout():
    rng = np.random.default_rng(0)
    x = rng.normal(scale=2.0, size=(777, 4))  # many outside the box
    m = mt.marginal_histograms(x, -1.0, 1.0, truth=[0.1, 0.2, 0.3, 0.4])
    assert len(m.one_d) == 4 and len(m.two_d) == 6
    assert [h.dims for h in m.two_d] == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    for h in m.one_d:
        assert h.counts.sum() == 777 and len(h.counts) == 50
    for h in m.two_d:
        assert h.counts.sum() == 777 and h.counts.shape == (40, 40)
    assert m.one_d[2].truth == 0.3 and m.two_d[0].truth == (0.1, 0.2)


def test_histogram_edges_depend_only_on_box():
    a = mt.marginal_histograms(np.zeros((5, 2)), [0.0, -1.0], [1.0, 1.0], bins=4)
    b = mt.marginal_histograms(np.ones((9, 2)), [0.0, -1.0], [1.0, 1.0], bins=4)
    for ha, hb in zip(a.one_d, b.one_d):
        assert np.array_equal(ha.edges, hb.edges)
    np.testing.assert_array_equal(a.one_d[0].edges, [0, 0.25, 0.5, 0.75, 1.0])


def test_histogram_uniform_chi_square():
    x = np.random.default_rng(1).uniform(0, 1, size=(100_000, 2))
    m = mt.marginal_histograms(x, 0.0, 1.0, bins=20)
    for h in m.one_d:
        assert stats.chisquare(h.counts).pvalue > 0.01


@pytest.mark.parametrize("kw", [dict(bins=1), dict(bins_2d=1)])
def test_histogram_rejects(kw):
    with pytest.raises(ValueError):
        mt.marginal_histograms(np.zeros((3, 2)), 0, 1, **kw)
    with pytest.raises(ValueError):
        mt.marginal_histograms(np.zeros((0, 2)), 0, 1)


def _trace(R):
    rng = np.random.default_rng(R)
    return [{"iter": r, "a": float(rng.uniform(1e-3, 1)), "b": float(rng.uniform(1e-3, 1)),
             "elbo": float(rng.normal(10, 5)), "elbo_se": 0.1} for r in range(R + 1)]


def test_trace_export_counts():
    rows = mt.trace_export(_trace(300))
    assert [r[0] for r in rows] == list(range(0, 301, 20))
    assert len(rows) == 16
    assert all(np.isfinite(v) for r in rows for v in r)
    assert len(mt.trace_export(_trace(300), thin=1)) == 301
    with pytest.raises(ValueError):
        mt.trace_export([])


def test_trace_csv_round_trip(tmp_path):
    rows = mt.trace_export(_trace(300), thin=7)
    mt.write_trace_csv(tmp_path / "t.csv", rows, "abc123", 4)
    back = mt.read_trace_csv(tmp_path / "t.csv")
    assert [r[0] for r in back] == [r[0] for r in rows]
    np.testing.assert_allclose(np.array(back)[:, 1:], np.array(rows)[:, 1:], rtol=1e-12, atol=0)
    meta, header, _ = mt.read_csv(tmp_path / "t.csv")
    assert meta == {"config_hash": "abc123", "seed": "4"}
    assert header == list(mt.TRACE_HEADER)


def test_marginal_csv_round_trip(tmp_path):
    m = mt.marginal_histograms(np.random.default_rng(2).uniform(-1, 1, (200, 3)), -1.0, 1.0, bins=5, bins_2d=3)
    mt.write_marginals_csv(tmp_path / "m.csv", m, "h", 0)
    mt.write_pairs_csv(tmp_path / "p.csv", m, "h", 0)
    rows = mt.read_marginals_csv(tmp_path / "m.csv")
    assert len(rows) == 15 and sum(r[3] for r in rows) == 600
    _, header, prow = mt.read_csv(tmp_path / "p.csv")
    assert tuple(header) == mt.PAIR_HEADER and len(prow) == 3 * 9
    with pytest.raises(ValueError):
        mt.read_trace_csv(tmp_path / "m.csv")


def test_report_round_trip(tmp_path):
    rep = mt.MetricReport("forward", 8, 3, NoiseParams(0.006, 0.09), TRUTH, ElboEstimate(12.5, 500, 0.2),
                          "cafe", 211, {"runtime_s": 1.5})
    assert rep.D == pytest.approx(0.2 + 0.1)
    rep.save(tmp_path / "r.json")
    back = mt.MetricReport.load(tmp_path / "r.json")
    assert back == rep
    no_truth = mt.MetricReport("reverse", 1, 0, NoiseParams(0.1, 0.1), None, ElboEstimate(0.0, 2, 0.0))
    assert no_truth.D is None and mt.MetricReport.from_dict(no_truth.to_dict()) == no_truth
    with pytest.raises(ValueError):
        mt.MetricReport.from_dict({"format": "other"})
