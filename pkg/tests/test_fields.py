import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fluctsim.dynamics import SystemState, advance
from fluctsim.fields import (FieldEnsemble, MomentRequest, OstarSpec, distinct_tuple_sum,
                             empirical_field, estimate_moments, fisher_z_interval, fluctuation_field,
                             gaussianity, jackknife, m_particle_field, ostar_product, write_moments_csv)
from fluctsim.phasespace import CollisionInvariant, Custom, DomainParams, FourierHermite
from fluctsim.sampler import SamplerConfig, sample_configuration

H = [FourierHermite((1, 0), (1, 0)), FourierHermite((0, 1), (0, 2)), CollisionInvariant("energy"),
     FourierHermite((0, 0), (1, 1))]


def _random_state(n, seed, eps=0.01):
    r = np.random.default_rng(seed)
    return SystemState(DomainParams(2, eps), r.random((n, 2)), r.standard_normal((n, 2)))


def brute(state, factors):
    vals = [h(state.x, state.v) for h in factors]
    tot = 0.0
    for idx in itertools.permutations(range(state.n), len(factors)):
        tot += np.prod([vals[k][i] for k, i in enumerate(idx)])
    return tot / state.domain.mu_eps ** len(factors)


def test_empirical_field_examples():
    s = _random_state(37, 0)
    assert empirical_field(s, CollisionInvariant("mass")) == pytest.approx(37 / s.domain.mu_eps)
    empty = SystemState(DomainParams(2, 0.01), np.empty((0, 2)), np.empty((0, 2)))
    assert empirical_field(empty, H[0]) == 0.0
    st0 = sample_configuration(DomainParams(2, 0.01), SamplerConfig(), np.random.default_rng(1))
    e0 = empirical_field(st0, H[2])
    e1 = empirical_field(advance(st0, 1.0), H[2])
    assert abs(e1 - e0) <= 1e-9 * abs(e0)


@given(st.integers(0, 12), st.integers(1, 3), st.integers(0, 10_000))
def test_m_particle_field_brute_force(n, m, seed):
    s = _random_state(n, seed)
    fac = [H[(seed + k) % len(H)] for k in range(m)]
    assert m_particle_field(s, fac) == pytest.approx(brute(s, fac), rel=1e-10, abs=1e-12)


def test_m_particle_field_examples():
    s = _random_state(50, 3)
    h = H[0]
    assert m_particle_field(s, [h]) == empirical_field(s, h)
    v = h(s.x, s.v)
    assert m_particle_field(s, [h, h]) == pytest.approx((v.sum() ** 2 - (v ** 2).sum()) / s.domain.mu_eps ** 2)
    assert m_particle_field(s, [h, h]) == pytest.approx(brute(s, [h, h]))
    assert m_particle_field(_random_state(1, 4), [h, h]) == 0.0
    with pytest.raises(ValueError):
        m_particle_field(s, [h] * 4)


@given(st.integers(0, 7), st.integers(1, 5), st.integers(0, 10_000))
def test_distinct_tuple_sum(n, m, seed):
    r = np.random.default_rng(seed)
    vals = r.standard_normal((m, n))
    want = sum(np.prod([vals[k, i] for k, i in enumerate(idx)])
               for idx in itertools.permutations(range(n), m))
    assert distinct_tuple_sum(vals) == pytest.approx(want, rel=1e-9, abs=1e-9)


def test_ostar_single_factor():
    s = _random_state(30, 5)
    c = 0.37
    want = math.sqrt(s.domain.mu_eps) * (m_particle_field(s, [H[0], H[1]]) - c)
    assert ostar_product(OstarSpec(((2, (H[0], H[1])),)), s, [c]) == pytest.approx(want)


def test_ostar_two_factors_brute_force():
    s = _random_state(30, 6)
    mu = s.domain.mu_eps
    c1, c2 = 0.1, -0.2
    got = ostar_product(OstarSpec(((1, (H[0],)), (1, (H[2],)))), s, [c1, c2])
    a, b = H[0](s.x, s.v), H[2](s.x, s.v)
    dist = sum(a[i] * b[j] for i in range(s.n) for j in range(s.n) if i != j) / mu ** 2
    want = mu * (dist - c1 * b.sum() / mu - c2 * a.sum() / mu + c1 * c2)
    assert got == pytest.approx(want)
    zero = Custom(lambda x, v: np.zeros(x.shape[0]), name="zero")
    assert ostar_product(OstarSpec(((1, (zero,)), (1, (H[2],)))), s, [0.0, c2]) == 0.0


def test_ostar_caps():
    with pytest.raises(ValueError):
        OstarSpec(((4, (H[0],) * 4), (3, (H[1],) * 3)))
    with pytest.raises(ValueError):
        OstarSpec(((2, (H[0],)),))


def _gaussian_ensemble(cov, n, seed, mu=400.0):
    r = np.random.default_rng(seed)
    z = r.multivariate_normal(np.zeros(len(cov)), cov, size=n)
    raw = 5.0 + z / math.sqrt(mu)  # arbitrary offset removed by centering
    times = [0.0, 1.0]
    ids = ["a", "b"]
    # (runs, times, tests): t=0 carries columns 0,1 and t=1 columns 2,3
    arr = raw.reshape(n, 2, 2)
    return FieldEnsemble(mu, times, ids, arr)


COV = np.array([[1.0, 0.3, 0.5, 0.1], [0.3, 1.0, 0.2, 0.4], [0.5, 0.2, 1.0, 0.3], [0.1, 0.4, 0.3, 1.0]])


def test_zeta_centering_and_io(tmp_path):
    ens = _gaussian_ensemble(COV, 500, 1)
    assert np.allclose(ens.zeta().mean(0), 0.0, atol=1e-12)
    p = tmp_path / "e.npz"
    ens.save(p)
    back = FieldEnsemble.load(p)
    assert np.array_equal(back.raw, ens.raw) and back.test_ids == ens.test_ids
    sub = ens.subset(np.arange(200))
    assert sub.n_runs == 200
    with pytest.raises(ValueError):
        ens.subset(np.arange(50)).zeta()
    samples = fluctuation_field([s for s in ens.samples() if s.time == 0.0], ens.mu)
    assert abs(np.mean([s.values["a"] for s in samples])) < 1e-12
    with pytest.raises(ValueError):
        fluctuation_field(samples[:10], ens.mu)


def test_wick_synthetic_gaussian():
    ens = _gaussian_ensemble(COV, 20_000, 2)
    plan = [MomentRequest((0.0, 0.0, 1.0, 1.0), ("a", "b", "a", "b")),
            MomentRequest((0.0, 0.0, 1.0), ("a", "b", "a")),
            MomentRequest((0.0, 0.0, 0.0, 0.0), ("a",) * 4),
            MomentRequest((0.0, 1.0), ("a", "a"))]
    est = estimate_moments(ens, plan)
    assert abs(est[0].estimate - est[0].wick_prediction) <= 3 * est[0].diff_std_error
    w = COV[0, 1] * COV[2, 3] + COV[0, 2] * COV[1, 3] + COV[0, 3] * COV[1, 2]
    assert abs(est[0].wick_prediction - w) < 0.1
    assert est[1].wick_prediction == 0.0 and abs(est[1].estimate) <= 3 * est[1].std_error
    c = est[3].estimate
    assert abs(c - COV[0, 2]) <= 3 * est[3].std_error
    # all-equal: Wick prediction is 3 Cov^2 of the same ensemble
    z = ens.zeta()[:, 0, 0]
    assert est[2].wick_prediction == pytest.approx(3 * np.mean(z * z) ** 2)
    g = gaussianity(ens, 0.0, "a")
    assert abs(g["skewness"]) <= 3 * g["skewness_se"]
    assert abs(g["excess_kurtosis"]) <= 3 * g["excess_kurtosis_se"]
    with pytest.raises(ValueError):
        estimate_moments(ens.subset(np.arange(50)), plan)


def test_jackknife_mean_matches_standard_error():
    x = np.random.default_rng(3).standard_normal((10_000, 1))
    est, se = jackknife(lambda d: d.mean(0), x, 100)
    assert se[0] == pytest.approx(x.std(ddof=1) / 100, rel=0.2)


def test_fisher_interval_contains_truth():
    r = np.random.default_rng(4)
    z = r.multivariate_normal([0, 0], [[1, 0.4], [0.4, 1]], size=5000)
    lo, hi = fisher_z_interval(z[:, 0], z[:, 1])
    assert lo < 0.4 < hi


def test_write_moments(tmp_path):
    ens = _gaussian_ensemble(COV, 300, 5)
    est = estimate_moments(ens, [MomentRequest((0.0, 1.0), ("a", "b"))])
    p = tmp_path / "m.csv"
    write_moments_csv(est, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "P,times,test_ids,estimate,std_error,wick_prediction,z_score"
    assert len(lines) == 2


def test_poisson_count_variance():
    # ideal-gas surrogate: Var(zeta(1)) = 1 for Poisson(mu) counts
    from fluctsim.ensemble import run_ensemble
    ens, _ = run_ensemble(DomainParams(2, 0.01), SamplerConfig(hard_core=False), [0.0],
                          [CollisionInvariant("mass")], 4000, base_seed=11, workers=1)
    z = ens.zeta()[:, 0, 0]
    est, se = jackknife(lambda d: np.array([np.var(d)]), z[:, None])
    assert abs(est[0] - 1) <= 3 * se[0]
