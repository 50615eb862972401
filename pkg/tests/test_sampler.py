import math

import numpy as np
import pytest
from scipy import stats

from fluctsim.phasespace import DomainParams
from fluctsim.sampler import (RejectionBudgetExhausted, SamplerConfig, depletion_constant, has_overlap,
                              mean_count_check, poisson_mixture_mean, sample_configuration)


def test_support_condition(rng):
    dom = DomainParams(2, 0.05)
    for mode in ("exact_rejection", "birth_death"):
        for _ in range(50):
            s = sample_configuration(dom, SamplerConfig(mode=mode), rng)
            assert s.min_distance() > dom.eps


def test_mean_count_matches_poisson_mixture():
    dom = DomainParams(2, 0.05)  # expected N = 20
    diag = mean_count_check(dom, SamplerConfig(), 10_000, np.random.default_rng(1))
    mean, err = poisson_mixture_mean(dom, 2000, np.random.default_rng(2))
    sig = math.hypot(diag.count_stderr, err)
    assert abs(diag.mean_count - mean) <= 3 * sig
    assert 0.0 <= diag.acceptance_rate <= 1.0


def test_birth_death_matches_exact():
    dom = DomainParams(2, 0.05)
    r1, r2 = np.random.default_rng(3), np.random.default_rng(4)
    n1 = [sample_configuration(dom, SamplerConfig(), r1).n for _ in range(2000)]
    n2 = [sample_configuration(dom, SamplerConfig(mode="birth_death"), r2).n for _ in range(2000)]
    assert stats.ks_2samp(n1, n2).pvalue > 0.01


def test_ideal_gas_surrogate():
    dom = DomainParams(2, 0.01)
    diag = mean_count_check(dom, SamplerConfig(hard_core=False), 2000, np.random.default_rng(5))
    assert abs(diag.ratio - 1) <= 3 * diag.ratio_stderr


def test_depletion_monotone():
    r = np.random.default_rng(6)
    big = mean_count_check(DomainParams(2, 0.04), SamplerConfig(), 4000, r)
    small = mean_count_check(DomainParams(2, 0.02), SamplerConfig(), 4000, r)
    c = depletion_constant(2)
    for dg, eps in ((big, 0.04), (small, 0.02)):
        assert 1 - c * eps - 3 * dg.ratio_stderr <= dg.ratio <= 1 + 3 * dg.ratio_stderr
    # depletion is about c*eps/2 here; the eps ensemble must sit lower
    assert big.ratio < small.ratio + 3 * math.hypot(big.ratio_stderr, small.ratio_stderr)


def test_errors(rng):
    with pytest.raises(ValueError):
        sample_configuration(DomainParams(3, 0.2), SamplerConfig(), rng)
    with pytest.raises(RejectionBudgetExhausted):
        _exhaust()
    with pytest.raises(ValueError):
        SamplerConfig(mode="gibbs")
    with pytest.raises(ValueError):
        SamplerConfig(mode="birth_death", burn_in_sweeps=5).burn_in(DomainParams(2, 0.05))
    with pytest.raises(ValueError):
        mean_count_check(DomainParams(2, 0.05), SamplerConfig(), 10, rng)


def _exhaust():
    # d=3, eps=0.1: mu = 100 spheres of diameter 0.1, rejection rate is huge
    dom = DomainParams(3, 0.1)
    r = np.random.default_rng(0)
    for _ in range(5):
        sample_configuration(dom, SamplerConfig(max_rejections=1), r)


def test_has_overlap_paths():
    x = np.array([[0.0, 0.0], [0.999, 0.0]])
    assert has_overlap(x, 0.01)
    rng = np.random.default_rng(9)
    y = rng.random((400, 2))
    brute = False
    for i in range(400):
        d = y[i + 1:] - y[i]
        d -= np.floor(d + 0.5)
        if np.any((d ** 2).sum(1) <= 0.003 ** 2):
            brute = True
            break
    assert has_overlap(y, 0.003) == brute
