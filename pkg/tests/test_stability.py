import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odeflow import diffcore as dc
from odeflow import stability as stb
from odeflow.diffcore import ContractError, Graph, Tensor
from odeflow.dynamics import HeadMaps, OdeBlockParams, spectral_init
from odeflow.integrator import euler_integrate

from oracles import jacobi_singular_values, jasmin_loop


def linear(A):
    At = Tensor(np.asarray(A).T)
    return lambda x: dc.matmul(x, At)


def contraction_matrix():
    rng = np.random.default_rng(0)
    S = rng.standard_normal((4, 4))
    return -np.eye(4) + 0.25 * (S - S.T)


ZERO = OdeBlockParams.zeros(8, 2, 1)


# ---------------------------------------------------------------- Lipschitz


def test_lipschitz_zero_field():
    assert stb.local_lipschitz(ZERO, np.random.default_rng(0).standard_normal((3, 8))) == 0.0


def test_lipschitz_linear_matches_svd_oracle():
    A = np.random.default_rng(1).standard_normal((5, 5))
    want = jacobi_singular_values(A)[0]
    for x0, eps in [(np.zeros((1, 5)), 1e-2), (np.ones((1, 5)) * 3, 0.5)]:
        assert stb.local_lipschitz(linear(A), x0, eps=eps) == pytest.approx(want, rel=1e-5)


def test_lipschitz_scalar_doubling():
    assert stb.local_lipschitz(lambda x: dc.scale(x, 2.0), np.ones((2, 3))) == pytest.approx(2.0, abs=1e-4)


def test_lipschitz_contract():
    with pytest.raises(ContractError):
        stb.local_lipschitz(ZERO, np.zeros((1, 8)), eps=0.0)


def test_vjp_and_jvp_agree_with_jacobian():
    A = np.random.default_rng(2).standard_normal((3, 3))
    x = np.ones((1, 3))
    v = np.array([[0.3, -1.0, 2.0]])
    np.testing.assert_allclose(stb.jvp_fd(linear(A), x, v), v @ A.T, atol=1e-8)
    np.testing.assert_allclose(stb.vjp(linear(A), x, v), v @ A, atol=1e-14)


# ---------------------------------------------------------------- JaSMin


def test_jasmin_uniform_is_zero():
    P = np.full((2, 3, 5, 5), 0.2)
    assert stb.jasmin_loss([P, P]).data == pytest.approx(0.0, abs=1e-15)


def test_jasmin_hand_case_log9():
    P = np.array([[[0.5, 0.5], [0.9, 0.1]]])  # one head, one step
    val = float(stb.jasmin_loss([P], k=2).data)
    assert val == pytest.approx(math.log(9), abs=1e-12)
    assert val == pytest.approx(2.1972, abs=1e-4)


@pytest.mark.parametrize("seed", range(5))
def test_jasmin_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    maps = [dc.softmax_rows(Tensor(rng.standard_normal((2, 3, 6, 6)))).data for _ in range(3)]
    for k in (2, 3):
        assert float(stb.jasmin_loss(maps, k).data) == pytest.approx(jasmin_loop(maps, k), abs=1e-10)


def test_jasmin_accepts_headmaps_and_validates_k():
    P = dc.softmax_rows(Tensor(np.random.default_rng(0).standard_normal((2, 4, 4))))
    assert float(stb.jasmin_loss([HeadMaps(A=None, P=P)]).data) == float(stb.jasmin_loss([P]).data)
    with pytest.raises(ContractError):
        stb.jasmin_loss([P], k=1)
    with pytest.raises(ContractError):
        stb.jasmin_loss([P], k=5)


def test_jasmin_descent_strictly_decreases():
    Z = Tensor(np.random.default_rng(3).standard_normal((2, 5, 5)) * 2, requires_grad=True)
    values = []
    for _ in range(11):
        with Graph() as g:
            loss = stb.jasmin_loss([dc.softmax_rows(Z)], k=2)
        values.append(float(loss.data))
        Z.grad = None
        g.backward(loss)
        Z.data -= 0.1 * Z.grad
    assert all(b < a for a, b in zip(values, values[1:])), values


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_jasmin_non_negative(seed, n):
    P = dc.softmax_rows(Tensor(np.random.default_rng(seed).standard_normal((2, n, n)) * 3))
    assert float(stb.jasmin_loss([P], k=min(2, n)).data) >= 0.0


# ---------------------------------------------------------------- bounds


def test_euler_bound_values():
    assert stb.bound_prop1(0.0, 1.0, 10) == pytest.approx(0.05)
    assert stb.bound_prop1(1.0, 2.0, 4) == pytest.approx(0.25)
    assert stb.bound_prop1(0.7, 0.0, 9) == 0.0
    with pytest.raises(ContractError):
        stb.bound_prop1(-1.0, 1.0, 4)


# tiny positive L overflows the bound to inf for every N, so keep L finite-valued
@settings(max_examples=40, deadline=None)
@given(st.one_of(st.just(0.0), st.floats(1e-6, 5.0)), st.floats(1e-3, 10.0), st.integers(1, 500))
def test_euler_bound_monotone(L, c, N):
    assert stb.bound_prop1(L, c, N + 1) < stb.bound_prop1(L, c, N)
    assert stb.bound_prop1(L, 2 * c, N) > stb.bound_prop1(L, c, N)


def closed(**kw):
    base = dict(R=10.0, L=0.5, N=24, d=16, norm_wv=1.0, norm_wkq=1.0)
    base.update(kw)
    return stb.bound_closed_form(stb.BoundInputs(**base))


@pytest.mark.parametrize("N", [1, 3, 24, 100, 777])
def test_closed_form_ratio_is_eight(N):
    assert closed(N=N) / closed(N=2 * N) == pytest.approx(8.0, rel=1e-15, abs=0)


def test_closed_form_value():
    # (e^0.5 - 1)/(2*0.5*24) * 100 * 1 * (10 + 4) / (24^2 * 4)
    want = (math.exp(0.5) - 1) / 24 * 1400 / (576 * 4)
    assert closed() == pytest.approx(want, rel=1e-15)
    assert closed(norm_wv=0.0) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 20), st.floats(0.05, 3), st.integers(1, 200), st.integers(1, 64),
       st.floats(0.01, 5), st.floats(0.01, 5))
def test_closed_form_monotone(R, L, N, d, wv, wkq):
    b = dict(R=R, L=L, N=N, d=d, norm_wv=wv, norm_wkq=wkq)
    v = closed(**b)
    assert closed(**{**b, "R": R * 1.1}) > v
    assert closed(**{**b, "L": L * 1.1}) > v
    assert closed(**{**b, "N": N + 1}) < v
    assert closed(**{**b, "d": d + 1}) < v
    assert closed(**{**b, "norm_wv": wv * 2}) == pytest.approx(2 * v, rel=1e-12)
    assert closed(**{**b, "norm_wkq": wkq * 1.1}) > v


def test_bound_inputs_validated():
    for bad in (dict(R=0.0), dict(L=0.0), dict(N=0), dict(d=0)):
        with pytest.raises(ContractError):
            closed(**bad)


def test_closed_form_for_initialized_block():
    p = OdeBlockParams.zeros(64, 4, 2)
    spectral_init(p, seed=0)
    wv, wkq = stb.block_norms(p)
    assert wv == pytest.approx(1.0, abs=1e-9)
    assert 0 < wkq <= 1.0 + 1e-9
    v = stb.closed_form_for(p, 24, R=10.0, L=0.5)
    assert math.isfinite(v) and v > 0


# ---------------------------------------------------------------- C_N and empirical error


def test_cn_linear_oracle_both_norms():
    A = contraction_matrix()
    x0 = np.array([[1.0, -2.0, 0.5, 0.25]])
    traj = euler_integrate(x0, linear(A), 16, 1.0)
    A2 = A @ A
    want_l2 = max(np.linalg.norm(x @ A2.T) for x in traj.states)
    want_max = max(np.abs(x @ A2.T).max() for x in traj.states)
    assert stb.estimate_cn_sup(linear(A), traj) == pytest.approx(want_l2, rel=1e-8)
    assert stb.estimate_cn_sup(linear(A), traj, norm="max") == pytest.approx(want_max, rel=1e-8)


def test_cn_trivial_fields():
    x0 = np.ones((2, 8))
    assert stb.estimate_cn_sup(ZERO, euler_integrate(x0, ZERO, 4, 1.0)) == 0.0
    const = lambda x: dc.add(dc.scale(x, 0.0), 1.0)  # noqa: E731
    assert stb.estimate_cn_sup(const, euler_integrate(x0, const, 4, 1.0)) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ContractError):
        stb.estimate_cn_sup(ZERO, euler_integrate(x0, ZERO, 4, 1.0, record=False))


def test_empirical_err_trivial_and_contract():
    x0 = np.ones((2, 8))
    assert stb.empirical_err(ZERO, x0, 16, 1024) == 0.0
    with pytest.raises(ContractError):
        stb.empirical_err(ZERO, x0, 16, 1000)
    with pytest.raises(ContractError):
        stb.empirical_err(ZERO, x0, 16, 64)


def test_empirical_err_first_order():
    A = contraction_matrix()
    x0 = np.array([[1.0, -2.0, 0.5, 0.25]])
    e16 = stb.empirical_err(linear(A), x0, 16, 2048)
    e32 = stb.empirical_err(linear(A), x0, 32, 2048)
    assert e16 > 0
    assert e32 / e16 == pytest.approx(0.5, rel=0.2)


# ---------------------------------------------------------------- Lyapunov


@pytest.mark.parametrize("a", [0.8, -0.6, 2.0])
def test_lyapunov_scalar_growth_rate(a):
    lam, tl = stb.lyapunov_max(lambda x: dc.scale(x, a), np.array([[1.0]]), N=2048, T=1.0)
    assert lam == pytest.approx(a, rel=0.05)
    assert (tl == pytest.approx(1 / lam)) if a > 0 else math.isinf(tl)


def test_lyapunov_rotation_is_neutral():
    R = np.array([[0.0, -1.0], [1.0, 0.0]])
    lam, _ = stb.lyapunov_max(linear(R), np.array([[1.0, 0.0]]), N=4096, T=1.0)
    assert abs(lam) < 0.01


def test_lyapunov_zero_field_exact():
    lam, tl = stb.lyapunov_max(ZERO, np.random.default_rng(0).standard_normal((3, 8)), N=24)
    assert lam == 0.0
    assert math.isinf(tl)


def test_lyapunov_renormalization_interval_is_irrelevant_for_linear_growth():
    f = lambda x: dc.scale(x, 0.5)  # noqa: E731
    a = stb.lyapunov_max(f, np.array([[1.0]]), N=64, renorm_every=1)[0]
    b = stb.lyapunov_max(f, np.array([[1.0]]), N=64, renorm_every=8)[0]
    assert a == pytest.approx(b, rel=1e-9)
    with pytest.raises(ContractError):
        stb.lyapunov_max(f, np.array([[1.0]]), N=4, renorm_every=5)


def test_separation_ratio_contraction():
    A = contraction_matrix()
    r = stb.separation_ratio(linear(A), np.zeros((1, 4)), np.full((1, 4), 1e-3), N=24)
    assert r < 1.0


# ---------------------------------------------------------------- reports


def test_zero_field_report():
    rep = stb.stability_report(ZERO, np.random.default_rng(0).standard_normal((5, 8)), N=8)
    assert rep.lambda_max == 0.0 and math.isinf(rep.lyapunov_time)
    assert rep.bound_prop1 == 0.0 and rep.bound_closed_form == 0.0
    assert rep.err_empirical == 0.0 and rep.lipschitz_local == 0.0
    d = json.loads(rep.to_json())
    assert set(d) == {"lipschitz_local", "cn_sup", "bound_prop1", "bound_closed_form", "err_empirical",
                      "lambda_max", "lyapunov_time"}
    assert d["lyapunov_time"] == "inf"


def test_per_class_rows():
    p = OdeBlockParams.zeros(8, 2, 1)
    spectral_init(p, seed=0)
    x0s = np.random.default_rng(0).standard_normal((6, 3, 8))
    labels = np.array([0, 1, 0, 1, 0, 1])
    rows = stb.per_class_lyapunov(p, x0s, labels, labels, N=8, num_classes=2)
    assert [r.label for r in rows] == [0, 1]
    assert all(r.accuracy == 1.0 for r in rows)
    assert [r.count for r in rows] == [3, 3]
    threaded = stb.per_class_lyapunov(p, x0s, labels, labels, N=8, num_classes=2, workers=2)
    assert [r.mean_lambda for r in threaded] == [r.mean_lambda for r in rows]
    assert stb.per_class_csv(rows).startswith("class,mean_lambda,accuracy,count\n")


def test_per_class_single_class_and_empty_warning():
    x0s = np.zeros((2, 3, 8))
    with pytest.warns(UserWarning):
        rows = stb.per_class_lyapunov(ZERO, x0s, np.array([1, 1]), np.array([1, 0]), N=4, num_classes=3)
    assert len(rows) == 1 and rows[0].accuracy == 0.5


def test_lyapunov_accuracy_spearman():
    rows = [stb.ClassLyapunov(c, lam, acc, 5) for c, lam, acc in [(0, 0.1, 0.9), (1, 0.3, 0.7), (2, 0.2, 0.8)]]
    assert stb.lyapunov_accuracy_spearman(rows) == pytest.approx(-1.0)
    assert math.isnan(stb.lyapunov_accuracy_spearman(rows[:1]))
