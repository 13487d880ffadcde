import numpy as np
import pytest

from hjbhom.control import (BENCHMARK_B, CordesCertificate, bellman_max,
                            cordes_slack, gamma_at, get_family, l_lambda,
                            make_control_grid, make_family, select_lambda,
                            uniform_y_grid)


def constant_family(A, c=1.0, f=0.0, b=(0.0, 0.0), controls=(0.0,),
                    **kwargs):
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)

    def A_fn(x, y, alpha):
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(A, y.shape[:-1] + (2, 2)).copy()

    def b_fn(x, y, alpha):
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(b, y.shape[:-1] + (2,)).copy()

    def c_fn(x, y, alpha):
        y = np.asarray(y, dtype=float)
        return np.full(y.shape[:-1], c)

    def f_fn(x, y, alpha):
        y = np.asarray(y, dtype=float)
        return np.full(y.shape[:-1], f)

    return make_family(A_fn, b_fn, c_fn, f_fn,
                       controls=make_control_grid(controls), **kwargs)


GRID16 = uniform_y_grid(16)


# ----------------------------------------------------------------------------
# Cordes slack

def test_slack_identity_coefficients():
    fam = constant_family(np.eye(2))
    assert cordes_slack(fam, 1.0, 0.5, GRID16) == pytest.approx(0.6)


def test_slack_vanishes_at_the_limit():
    fam = constant_family(np.eye(2))
    assert cordes_slack(fam, 1.0, 1.0 - 1e-12, GRID16) == \
        pytest.approx(0.0, abs=1e-9)


def test_slack_input_validation():
    fam = constant_family(np.eye(2))
    with pytest.raises(ValueError):
        cordes_slack(fam, -1.0, 0.5, GRID16)
    with pytest.raises(ValueError):
        cordes_slack(fam, 1.0, 1.5, GRID16)
    with pytest.raises(ValueError):
        cordes_slack(fam, 1.0, 0.5, np.empty((0, 2)))


def test_benchmark_certificate_on_dense_oracle_grid():
    fam = get_family("fo-benchmark")
    cert = select_lambda(fam, uniform_y_grid(128))
    # independent dense-sampling oracle
    assert cordes_slack(fam, cert.lam, cert.delta, uniform_y_grid(256)) >= 0.0


# ----------------------------------------------------------------------------
# certificate selection

def test_select_identity_reaches_delta_near_one():
    cert = select_lambda(constant_family(np.eye(2)), GRID16)
    assert cert.delta > 0.99
    assert cert.margin >= 0.0


def test_select_against_sweep_oracle():
    fam = constant_family(np.diag([1.0, 2.0]))
    cert = select_lambda(fam, GRID16)
    # analytic sweep oracle: delta_max(t) = (3+t)^2/(5+t^2) - 2, maximum 0.8
    ts = np.linspace(1e-3, 50.0, 200001)
    oracle = np.max((3.0 + ts) ** 2 / (5.0 + ts ** 2) - 2.0)
    assert oracle == pytest.approx(0.8, abs=1e-6)
    assert cert.delta == pytest.approx(0.8, abs=2e-3)
    # at lam = 1 only delta <= 2/3 is admissible
    assert cordes_slack(fam, 1.0, 2.0 / 3.0 + 1e-6, GRID16) < 0.0
    assert cert.delta > 2.0 / 3.0


def test_select_rejects_degenerate_family():
    fam = constant_family(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        select_lambda(fam, GRID16)


def test_family_construction_rejects_bad_coefficients():
    with pytest.raises(ValueError):
        constant_family(np.eye(2), c=-1.0)
    with pytest.raises(ValueError):
        constant_family(np.array([[1.0, 0.5], [0.0, 1.0]]))


# ----------------------------------------------------------------------------
# gamma

def test_gamma_identity():
    fam = constant_family(np.eye(2))
    cert = CordesCertificate(1.0, 0.5, 0.0)
    assert gamma_at(fam, cert, None, np.zeros(2), 0.0) == pytest.approx(1.0)


def test_gamma_arithmetic():
    fam = constant_family(2.0 * np.eye(2), c=2.0)
    cert = CordesCertificate(2.0, 0.5, 0.0)
    assert gamma_at(fam, cert, None, np.zeros(2), 0.0) == \
        pytest.approx(5.0 / 9.0)


def test_gamma_benchmark_plugin():
    fam = get_family("fo-benchmark")
    cert = select_lambda(fam)
    lam = cert.lam
    got = gamma_at(fam, cert, None, np.zeros(2), 0.0)
    assert got == pytest.approx((6.0 + 1.0 / lam) / (22.0 + 1.0 / lam ** 2))


# ----------------------------------------------------------------------------
# Bellman maximum

def test_bellman_singleton():
    fam = constant_family(np.eye(2), c=1.0, f=0.0)
    cert = CordesCertificate(1.0, 0.5, 0.0)
    val, alpha = bellman_max(fam, cert, None, np.zeros(2), -np.eye(2),
                             np.zeros(2), 0.0)
    assert alpha == 0.0
    assert val == pytest.approx(2.0)      # gamma = 1, -A : (-I) = 2


def test_bellman_affine_endpoints():
    fam_dense = get_family("fo-benchmark")
    dense = make_family(fam_dense.A, fam_dense.b, fam_dense.c, fam_dense.f,
                        controls=make_control_grid(np.linspace(0, 1, 41)))
    cert = select_lambda(get_family("fo-benchmark"))
    rng = np.random.default_rng(17)
    for _ in range(10):
        y = rng.random(2)
        M = rng.normal(size=(2, 2))
        val, alpha = bellman_max(dense, cert, None, y, M, rng.normal(size=2),
                                 rng.normal())
        assert alpha in (0.0, 1.0)


def test_bellman_monotone_in_grid():
    base = get_family("fo-benchmark")
    cert = select_lambda(base)
    small = base
    big = make_family(base.A, base.b, base.c, base.f,
                      controls=make_control_grid([0.0, 0.25, 0.5, 1.0]))
    rng = np.random.default_rng(4)
    for _ in range(10):
        y = rng.random(2)
        M, q, v = rng.normal(size=(2, 2)), rng.normal(size=2), rng.normal()
        v_small, _ = bellman_max(small, cert, None, y, M, q, v)
        v_big, _ = bellman_max(big, cert, None, y, M, q, v)
        assert v_big >= v_small - 1e-13


def test_l_lambda_values():
    assert l_lambda(2.0, 1.0, 2.0) == pytest.approx(0.0)
    assert l_lambda(0.0, 0.0, 1.0) == pytest.approx(0.0)
    assert l_lambda(-1.0, 3.0, 0.5) == pytest.approx(2.5)


# ----------------------------------------------------------------------------
# pointwise Cordes contraction (Lemma-level property)

def test_pointwise_cordes_contraction():
    fam = get_family("fo-benchmark")
    cert = select_lambda(fam, uniform_y_grid(128))
    lam, delta = cert.lam, cert.delta
    root = np.sqrt(1.0 - delta)
    rng = np.random.default_rng(12345)
    for _ in range(100):
        y = rng.random(2)
        M, M2 = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        q, q2 = rng.normal(size=2), rng.normal(size=2)
        v, v2 = rng.normal(), rng.normal()
        F1, _ = bellman_max(fam, cert, None, y, M, q, v)
        F2, _ = bellman_max(fam, cert, None, y, M2, q2, v2)
        lhs = abs(F1 - F2 - (-np.trace(M - M2) + lam * (v - v2)))
        rhs = root * np.sqrt(np.sum((M - M2) ** 2)
                             + 2 * lam * np.sum((q - q2) ** 2)
                             + lam ** 2 * (v - v2) ** 2)
        assert lhs <= rhs + 1e-10


def test_gamma_positive_on_benchmark():
    fam = get_family("fo-benchmark")
    cert = select_lambda(fam)
    ys = uniform_y_grid(64)
    for alpha in fam.controls.values:
        assert np.all(gamma_at(fam, cert, None, ys, alpha) > 0.0)


def test_registry_contents():
    fam = get_family("fo-benchmark")
    y = np.array([0.125, 0.375])
    a1 = np.sin(2 * np.pi * y[0]) ** 2 * np.cos(2 * np.pi * y[1]) ** 2 + 1.0
    assert np.allclose(fam.A(None, y, 1.0), (1.0 + a1) * BENCHMARK_B)
    assert np.allclose(fam.A(None, y, 0.0), BENCHMARK_B)
    assert np.allclose(fam.b(None, y, 0.5), 0.0)
    assert fam.c(None, y, 0.3) == pytest.approx(1.0)
    assert fam.f(None, y, 0.3) == pytest.approx(1.0)
    with pytest.raises(KeyError):
        get_family("unknown")
