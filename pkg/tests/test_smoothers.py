import numpy as np
import pytest
from scipy.linalg import cholesky

from skewtvb.experiments import ExperimentConfig, _scenario, positioning_1d_model
from skewtvb.filters import (
    GaussianBelief,
    VbConfig,
    run_kf,
    run_kf_gated,
    stvbf_step,
    student_t_noise_shape,
)
from skewtvb.rng import stream
from skewtvb.smoothers import kf_forward, rtss, rtss_g, stvbs, tvbs
from skewtvb.statespace import (
    PseudorangeScenario,
    StateSpaceModel,
    build_pseudorange_model,
    simulate,
    simulate_pseudorange,
)

ONE_D = positioning_1d_model(ExperimentConfig("positioning-1d"))


def gaussian_model(**kw):
    base = dict(
        A=[[0.9, 0.2], [0.0, 0.95]],
        C=[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
        Q=np.diag([0.5, 0.3]),
        R=[1.0, 0.5, 2.0],
        Delta=0.0,
        nu=1e9,
        x0=[0.0, 0.0],
        P0=np.eye(2),
    )
    base.update(kw)
    return StateSpaceModel(**base)


def pseudorange_case(q=10.0, seed=0, K=100):
    sc = PseudorangeScenario(q=q, K=K)
    m = build_pseudorange_model(sc)
    return m, simulate_pseudorange(sc, m, stream(seed))


def assert_beliefs_close(a, b, atol):
    assert len(a) == len(b)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u.mean, v.mean, rtol=0, atol=atol)
        np.testing.assert_allclose(u.cov, v.cov, rtol=0, atol=atol)


def assert_pd(beliefs):
    for b in beliefs:
        assert np.array_equal(b.cov, b.cov.T)
        cholesky(b.cov, lower=True)


# -- RTS -----------------------------------------------------------------------


def test_rtss_single_step():
    m = gaussian_model()
    tr = simulate(m, 1, stream(1))
    filt, pred = run_kf(m, tr.measurements)
    sm = rtss(m, filt, pred)
    assert len(sm) == 1 and sm[0] is filt[0]


def test_rtss_empty_and_misaligned():
    assert rtss(ONE_D, [], []) == []
    with pytest.raises(ValueError):
        rtss(ONE_D, [GaussianBelief(np.zeros(1), np.eye(1))], [])


def test_rtss_static_limit():
    m = gaussian_model(A=np.eye(2), Q=1e-8 * np.eye(2))
    tr = simulate(m, 50, stream(3))
    filt, pred = run_kf(m, tr.measurements)
    sm = rtss(m, filt, pred)
    for b in sm:
        np.testing.assert_allclose(b.mean, filt[-1].mean, atol=1e-3)


@pytest.mark.invariant
def test_rtss_reduces_covariance():
    m = gaussian_model()
    tr = simulate(m, 60, stream(4))
    filt, pred = run_kf(m, tr.measurements)
    sm = rtss(m, filt, pred)
    assert_pd(sm)
    for s, f in zip(sm, filt):
        cholesky(f.cov - s.cov + 1e-10 * np.eye(2), lower=True)


def test_rtss_handles_constant_bias_state():
    m, tr = pseudorange_case()
    filt, pred = run_kf(m, tr.measurements)
    sm = rtss(m, filt, pred)
    assert_pd(sm)
    # The bias is constant, so every smoothed bias estimate is the last filtered one.
    np.testing.assert_allclose([b.mean[3] for b in sm], filt[-1].mean[3], atol=1e-8)


def test_kf_forward_matches_run_kf():
    m = gaussian_model()
    tr = simulate(m, 25, stream(5))
    a = kf_forward(m, tr.measurements, 0.3, m.R)
    b = run_kf(m, tr.measurements, 0.3, m.R)
    assert_beliefs_close(a[0], b[0], 1e-13)
    assert_beliefs_close(a[1], b[1], 1e-13)


# -- skew t VB smoother --------------------------------------------------------


def test_stvbs_one_iteration_is_kalman_rts():
    m, tr = pseudorange_case()
    sm, _, it = stvbs(m, tr.measurements, VbConfig(1))
    ref = rtss(m, *run_kf(m, tr.measurements, 0.0, m.R))
    assert it == 1
    assert_beliefs_close(sm, ref, 1e-12)


def test_stvbs_gaussian_limit():
    m = gaussian_model()
    tr = simulate(m, 100, stream(6))
    sm, _, _ = stvbs(m, tr.measurements, VbConfig(30, 1e-12))
    ref = rtss(m, *run_kf(m, tr.measurements, 0.0, m.R))
    assert_beliefs_close(sm, ref, 1e-6)


@pytest.mark.invariant
def test_stvbs_single_step_is_filter():
    m, tr = pseudorange_case(K=1)
    y = tr.measurements
    sm, lat, it_s = stvbs(m, y, VbConfig(30, 1e-2))
    b, lat_f, it_f = stvbf_step(m, GaussianBelief(m.x0, m.P0), y[0], VbConfig(30, 1e-2))
    assert it_s == it_f
    np.testing.assert_allclose(sm[0].mean, b.mean, atol=1e-10)
    np.testing.assert_allclose(sm[0].cov, b.cov, atol=1e-10)
    np.testing.assert_allclose(lat[0].lambda_bar, lat_f.lambda_bar, atol=1e-10)


@pytest.mark.invariant
def test_stvbs_latent_invariants():
    m, tr = pseudorange_case(seed=2)
    sm, lat, _ = stvbs(m, tr.measurements, VbConfig(7, 0.0))
    for l in lat:
        assert np.all(l.lambda_bar > 0) and np.all(l.lambda_bar <= (m.nu + 2) / m.nu)
        assert np.all(l.u_bar >= 0) and np.all(l.upsilon >= l.u_bar**2)
        assert np.all(l.psi > 0) and np.all(l.u_cov > 0)
    assert_pd(sm)


@pytest.mark.invariant
def test_stvbs_final_belief_is_forward_filter():
    # Sweep n filters with the latent state left by sweep n - 1.
    m, tr = pseudorange_case(seed=2)
    ys = tr.measurements
    _, lat, _ = stvbs(m, ys, VbConfig(6, 0.0))
    lam = np.array([l.lambda_bar for l in lat])
    u = np.array([l.u_bar for l in lat])
    filt, _ = kf_forward(m, ys, m.Delta * u, m.R / lam)
    sm, _, _ = stvbs(m, ys, VbConfig(7, 0.0))
    np.testing.assert_array_equal(sm[-1].mean, filt[-1].mean)
    np.testing.assert_array_equal(sm[-1].cov, filt[-1].cov)


@pytest.mark.invariant
def test_stvbs_terminates_and_respects_limit():
    m, tr = pseudorange_case(seed=3)
    for n in (1, 4, 30):
        _, _, it = stvbs(m, tr.measurements, VbConfig(n, 1e-2))
        assert 1 <= it <= n


def test_stvbs_smooths_better_than_filtering_on_average():
    from skewtvb.filters import run_stvbf

    err_f = err_s = 0.0
    for s in range(10):
        m, tr = pseudorange_case(q=1.0, seed=100 + s)
        f = np.array([b.mean for b in run_stvbf(m, tr.measurements)[0]])
        sm = np.array([b.mean for b in stvbs(m, tr.measurements)[0]])
        err_f += np.sqrt(np.mean(np.sum((f[:, :3] - tr.states[:, :3]) ** 2, axis=1)))
        err_s += np.sqrt(np.mean(np.sum((sm[:, :3] - tr.states[:, :3]) ** 2, axis=1)))
    assert err_s <= err_f


def final_iteration_change(q, seeds=range(10)):
    cfg = ExperimentConfig("pseudorange", q=q)
    out = []
    for s in seeds:
        g = stream(s, 0)
        sc = _scenario(cfg, g)
        m = build_pseudorange_model(sc)
        ys = simulate_pseudorange(sc, m, g).measurements
        a = stvbs(m, ys, VbConfig(30, 0.0))[0]
        b = stvbs(m, ys, VbConfig(29, 0.0))[0]
        out.append(max(np.max(np.abs(u.mean - v.mean)) for u, v in zip(a, b)))
    return float(np.mean(out))


@pytest.mark.invariant
@pytest.mark.xfail(
    strict=True,
    reason=(
        "the smoother's coordinate-ascent iteration converges geometrically but slowly on the "
        "pseudorange configurations: the mean final change after 30 sweeps is about 0.02 m at q=1 "
        "and 0.12 m at q=10, reaching 1e-3 only after roughly 150 sweeps"
    ),
)
@pytest.mark.parametrize("q", [1.0, 10.0, 40.0])
def test_stvbs_converged_after_30_iterations(q):
    assert final_iteration_change(q) < 1e-3


def test_stvbs_iteration_change_shrinks():
    # What does hold: the sweep-to-sweep change decreases over the 30 sweeps.
    cfg = ExperimentConfig("pseudorange", q=10.0)
    g = stream(0, 0)
    sc = _scenario(cfg, g)
    m = build_pseudorange_model(sc)
    ys = simulate_pseudorange(sc, m, g).measurements
    means = [np.array([b.mean for b in stvbs(m, ys, VbConfig(n, 0.0))[0]]) for n in (1, 2, 29, 30)]
    assert np.max(np.abs(means[3] - means[2])) < 0.1 * np.max(np.abs(means[1] - means[0]))


# -- Student t VB smoother -----------------------------------------------------


def test_tvbs_gaussian_limit():
    m = gaussian_model()
    tr = simulate(m, 100, stream(7))
    sm, _ = tvbs(m, tr.measurements, VbConfig(30, 1e-12))
    ref = rtss(m, *run_kf(m, tr.measurements, 0.0, m.R))
    assert_beliefs_close(sm, ref, 1e-6)


def test_tvbs_one_iteration_is_kalman_rts():
    m, tr = pseudorange_case(seed=4)
    mean, shape = student_t_noise_shape([m.noise_params(i) for i in range(m.n_y)])
    sm, it = tvbs(m, tr.measurements, VbConfig(1))
    ref = rtss(m, *run_kf(m, tr.measurements, mean, shape))
    assert it == 1
    assert_beliefs_close(sm, ref, 1e-12)
    assert_pd(sm)


# -- gated RTS -----------------------------------------------------------------


def test_rtss_g_without_outliers_equals_rtss():
    m = gaussian_model()
    # Measurements far quieter than the filter assumes, so the gate never fires.
    ys = simulate(m.with_noise(R=m.R * 1e-2), 40, stream(8)).measurements
    gated, _ = run_kf_gated(m, ys, 0.0, m.R)
    plain = run_kf(m, ys, 0.0, m.R)
    assert_beliefs_close(gated, plain[0], 0.0)
    assert_beliefs_close(rtss_g(m, ys, 0.0, m.R), rtss(m, *plain), 0.0)


def test_rtss_g_all_gated_is_prior_propagation():
    m = gaussian_model()
    ys = np.full((10, 3), 1e6)
    sm = rtss_g(m, ys, 0.0, m.R)
    for k, b in enumerate(sm):
        np.testing.assert_allclose(b.mean, 0.0, atol=0)
    # Propagated prior covariance at the last step.
    P = m.P0
    for _ in range(9):
        P = m.A @ P @ m.A.T + m.Q
    np.testing.assert_allclose(sm[-1].cov, P, atol=1e-12)


def test_rtss_g_single_step():
    m, tr = pseudorange_case(K=1)
    sm = rtss_g(m, tr.measurements)
    filt, _ = run_kf_gated(m, tr.measurements)
    assert len(sm) == 1
    np.testing.assert_array_equal(sm[0].mean, filt[0].mean)


@pytest.mark.invariant
def test_final_smoothed_equals_final_filtered():
    m, tr = pseudorange_case(seed=9)
    ys = tr.measurements
    f_g, _ = run_kf_gated(m, ys)
    np.testing.assert_array_equal(rtss_g(m, ys)[-1].mean, f_g[-1].mean)
    f, p = run_kf(m, ys)
    np.testing.assert_array_equal(rtss(m, f, p)[-1].mean, f[-1].mean)
