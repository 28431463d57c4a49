import numpy as np
import pytest
from scipy import optimize

from mixnoise import em_driver as em
from mixnoise import flow as fl
from mixnoise.forward_op import LinearOperator, MeasurementSet, make_random_surrogate, simulate_measurements
from mixnoise.losses import GaussianPrior, PriorBox
from mixnoise.noise_model import NoiseParams

from oracles import lg_log_evidence, lg_posterior


def tiny_problem(N=3, seed=0):
    op = make_random_surrogate(2, 4, widths=(8,), seed=1)
    ms = simulate_measurements(op, NoiseParams(0.02, 0.1), (-1.0, 1.0), N, seed)
    return op, ms


def tiny_flow(op, seed=0):
    return fl.build_flow(op.d, op.n, n_blocks=2, hidden=(8,), seed=seed)


def tiny_config(**kw):
    base = dict(R=4, P=2, L=3, K=12, m_elbo=20, batch_size=16, seed=3)
    return em.EMConfig(**{**base, **kw})


# --- configs ---------------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(R=0), dict(P=0), dict(L=0), dict(loss="both"), dict(m_elbo=1)])
def test_em_config_rejects(kw):
    with pytest.raises(ValueError):
        tiny_config(**kw).check()


def test_em_config_k_at_least_n():
    with pytest.raises(ValueError):
        tiny_config(K=2).check(3)


def test_presets():
    d = em.EMConfig.desk()
    assert (d.R, d.K, d.m_elbo, d.P, d.L) == (300, 500, 500, 10, 20)
    p = em.EMConfig.paper()
    assert (p.R, p.K, p.m_elbo, p.P, p.L, p.lr) == (5000, 2000, 2000, 10, 20, 1e-3)


def test_grid_config_defaults_and_validation():
    g = em.GridConfig()
    assert len(g.a_grid) == len(g.b_grid) == 8 and g.steps == 1200
    assert g.a_grid[0] == pytest.approx(0.001) and g.a_grid[-1] == pytest.approx(0.03)
    assert g.b_grid[0] == pytest.approx(0.01) and g.b_grid[-1] == pytest.approx(0.2)
    with pytest.raises(ValueError):
        em.GridConfig(a_grid=(), b_grid=(0.1,))
    with pytest.raises(ValueError):
        em.GridConfig(a_grid=(0.2, 0.1), b_grid=(0.1,))


# --- initialisation and repetition --------------------------------------------------


def test_init_theta_degenerate_and_deterministic():
    th = em.init_theta(np.zeros((3, 4)))
    assert th == NoiseParams(1e-4, 1e-4)
    _, ms = tiny_problem()
    assert em.init_theta(ms) == em.init_theta(ms)
    with pytest.raises(ValueError):
        em.init_theta(ms, factor=1.0)


@pytest.mark.parametrize("d,n,truth,box", [(3, 23, (0.005, 0.1), (-1.0, 1.0)), (7, 77, (0.03, 0.25), (0.0, 1.0))])
def test_init_theta_from_above(d, n, truth, box):
    op = make_random_surrogate(d, n, seed=0, box=box)
    for N in (1, 8):
        for seed in range(5):
            th = em.init_theta(simulate_measurements(op, NoiseParams(*truth), box, N, seed))
            assert th.a > truth[0] and th.b > truth[1]


def test_repeat_measurements_round_robin():
    ys = np.arange(3)[:, None] * np.ones((3, 2))
    rep = em.repeat_measurements(ys, 8)
    counts = [int(np.sum(rep[:, 0] == i)) for i in range(3)]
    assert counts == [3, 3, 2] and len(rep) == 8
    assert np.all(np.diff(rep[:, 0]) >= 0)
    with pytest.raises(ValueError):
        em.repeat_measurements(ys, 2)


# --- run_em bookkeeping -------------------------------------------------------------


def test_run_em_traces_and_best():
    op, ms = tiny_problem()
    st = em.run_em(ms, tiny_flow(op), tiny_config(), op)
    assert len(st.trace) == 5 and [r["iter"] for r in st.trace] == list(range(5))
    assert st.best.elbo == max(st.elbo_trace)
    assert st.best.elbo >= st.elbo_trace[-1]
    # re-evaluating the best snapshot with its validation stream reproduces the value
    est = em.validate(st.best_flow(), ms.ys, st.best.theta, PriorBox(ms.prior_lo, ms.prior_hi), op, 20, 3, st.best.r)
    assert est.value == st.best.elbo


def test_run_em_deterministic():
    op, ms = tiny_problem()
    a = em.run_em(ms, tiny_flow(op), tiny_config(loss="reverse"), op)
    b = em.run_em(ms, tiny_flow(op), tiny_config(loss="reverse"), op)
    assert a.trace == b.trace
    assert np.array_equal(a.flow.params.values, b.flow.params.values)


def test_resume_matches_uninterrupted(tmp_path):
    op, ms = tiny_problem()
    full = em.run_em(ms, tiny_flow(op), tiny_config(R=6), op)
    part = em.run_em(ms, tiny_flow(op), tiny_config(R=3), op, checkpoint_dir=tmp_path)
    assert (tmp_path / "checkpoint_best.json").exists()
    loaded = em.load_state(tmp_path / "checkpoint_final.json")
    assert loaded.trace == part.trace
    resumed = em.run_em(ms, loaded.flow, tiny_config(R=6), op, resume=loaded)
    assert resumed.trace == full.trace
    assert np.array_equal(resumed.flow.params.values, full.flow.params.values)


def test_nonfinite_aborts_with_dump(tmp_path):
    op, ms = tiny_problem()

    class Broken:
        d, n = op.d, op.n

        def __call__(self, x):
            from mixnoise import diffcore as dc

            return dc.mul(op(x), np.nan)

    with pytest.raises(em.EMAborted) as info:
        em.run_em(ms, tiny_flow(op), tiny_config(loss="reverse"), Broken(), checkpoint_dir=tmp_path)
    assert info.value.state is not None
    assert (tmp_path / "checkpoint_abort.json").exists()


@pytest.mark.parametrize("loss", ["forward", "reverse"])
def test_lg_recovers_additive_noise(loss):
    """b = 0 linear-Gaussian problem, N = 8, against the exact marginal-likelihood maximiser."""
    rng = np.random.default_rng(0)
    A, c = rng.normal(size=(12, 1)), np.zeros(12)
    op = LinearOperator(A, c)
    xs = rng.normal(size=(8, 1))
    ys = op(xs) + 0.3 * rng.normal(size=(8, 12))
    nll = lambda la: -sum(lg_log_evidence(y, A, c, np.exp(la), [0.0], [[1.0]]) for y in ys)
    a_mle = float(np.exp(optimize.minimize_scalar(nll, bounds=(-6, 1), method="bounded").x))
    ms = MeasurementSet(ys, [-5.0], [5.0], xs, NoiseParams(0.3, 0.0))
    f = fl.build_flow(1, 12, n_blocks=2, hidden=(16,), transform="affine", seed=0)
    cfg = em.EMConfig(R=300, K=2000, m_elbo=200, batch_size=128, loss=loss, seed=0)
    st = em.run_em(ms, f, cfg, op, GaussianPrior([0.0], [[1.0]]))
    assert abs(st.theta.a / a_mle - 1) < 0.15
    assert st.theta.b < 0.05


# --- grid -------------------------------------------------------------------------


def test_grid_table_shape_and_single_point():
    op, ms = tiny_problem(N=2)
    grid = em.GridConfig((0.01, 0.02, 0.04), (0.05, 0.1), steps=3)
    res = em.run_grid(ms, grid, "forward", op, lambda: tiny_flow(op), tiny_config())
    assert res.elbo_table.shape == (3, 2) and len(res.rows()) == 6
    i, j = np.unravel_index(np.argmax(res.elbo_table), res.elbo_table.shape)
    assert res.theta == NoiseParams(grid.a_grid[i], grid.b_grid[j])
    one = em.run_grid(ms, em.GridConfig((0.02,), (0.1,), steps=3), "reverse", op, lambda: tiny_flow(op), tiny_config())
    assert one.theta == NoiseParams(0.02, 0.1) and one.elbo_table.shape == (1, 1)


def test_grid_selects_near_truth_on_easy_problem():
    A = np.array([[1.0], [0.5], [2.0]])
    op = LinearOperator(A, np.array([1.0, 1.5, 2.0]))
    truth = NoiseParams(0.05, 0.2)
    ms = simulate_measurements(op, truth, (-0.5, 0.5), 8, seed=2)
    grid = em.GridConfig((0.0125, 0.025, 0.05, 0.1, 0.2), (0.05, 0.1, 0.2, 0.4, 0.8), steps=150)
    factory = lambda: fl.build_flow(1, 3, n_blocks=2, hidden=(16,), transform="affine", seed=0)
    res = em.run_grid(ms, grid, "reverse", op, factory, em.EMConfig(m_elbo=300, batch_size=64, lr=1e-2, seed=0))
    i = grid.a_grid.index(res.theta.a)
    j = grid.b_grid.index(res.theta.b)
    assert abs(i - 2) <= 1 and abs(j - 2) <= 1


# --- exact E-step EM -------------------------------------------------------------------


def test_exact_em_monotone_elbo():
    A, c = np.array([[1.2]]), np.array([0.1])
    op = LinearOperator(A, c)
    prior = GaussianPrior([0.0], [[1.0]])
    rng = np.random.default_rng(1)
    ys = op(rng.normal(size=(6, 1))) + 0.2 * rng.normal(size=(6, 1))
    post = lambda y, th: lg_posterior(y, A, c, th.a, [0.0], [[1.0]])
    _, elbos = em.run_exact_em(ys, op, prior, post, NoiseParams(2.0, 0.0), R=50)
    assert all(e1 >= e0 - 1e-8 for e0, e1 in zip(elbos, elbos[1:]))


def test_gauss_hermite_moments():
    mean, cov = np.array([0.5, -1.0]), np.array([[0.3, 0.1], [0.1, 0.2]])
    x, w = em.gauss_hermite_nodes(mean, cov, order=6)
    assert abs(w.sum() - 1) < 1e-12
    np.testing.assert_allclose(w @ x, mean, atol=1e-12)
    np.testing.assert_allclose((x - mean).T @ np.diag(w) @ (x - mean), cov, atol=1e-12)
