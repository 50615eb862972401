import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fluctsim.phasespace import (CollisionInvariant, Custom, DomainParams, FourierHermite, Particle,
                                 evaluate, gram_inner, hermite_table, maxwellian_sample,
                                 torus_displacement)
from fluctsim.phasespace import test_function_from_json as from_json

unit = st.floats(0.0, 1.0, exclude_max=True, allow_nan=False)


def test_domain_params():
    assert DomainParams(2, 1e-3).mu_eps == pytest.approx(1e3, rel=1e-15)
    assert DomainParams(3, 0.1).mu_eps == pytest.approx(100.0)
    with pytest.raises(ValueError):
        DomainParams(4, 0.1)
    with pytest.raises(ValueError):
        DomainParams(2, 0.3)


def test_displacement_examples():
    assert torus_displacement([0.9], [0.1])[0] == pytest.approx(-0.2)
    assert np.all(torus_displacement([0.3, 0.7], [0.3, 0.7]) == 0.0)


@given(arrays(float, 3, elements=unit), arrays(float, 3, elements=unit))
def test_displacement_properties(x1, x2):
    dx = torus_displacement(x1, x2)
    assert np.all(dx >= -0.5) and np.all(dx < 0.5)
    back = (x2 + dx - x1) % 1.0
    assert np.all(np.minimum(back, 1 - back) < 1e-12)
    rev = torus_displacement(x2, x1)
    # antisymmetric except on the half-boundary
    ok = np.isclose(rev, -dx, atol=1e-12) | np.isclose(np.abs(dx), 0.5, atol=1e-12)
    assert np.all(ok)


def test_displacement_lattice():
    g = np.linspace(0, 1, 17, endpoint=False)
    a, b = np.meshgrid(g, g)
    dx = torus_displacement(a.ravel()[:, None], b.ravel()[:, None])
    assert np.all(np.abs(dx) <= 0.5)
    r = (b.ravel()[:, None] + dx - a.ravel()[:, None]) % 1.0
    assert np.all(np.minimum(r, 1 - r) < 1e-12)


def test_maxwellian_moments(rng):
    v = maxwellian_sample(rng, d=3, size=1_000_000)
    n = v.shape[0]
    assert np.all(np.abs(v.mean(0)) <= 4 / math.sqrt(n))
    # var of the sample variance of a unit Gaussian is 2/n
    assert np.all(np.abs(v.var(0) - 1) <= 4 * math.sqrt(2 / n))
    e = (v ** 2).sum(1)
    assert abs(e.mean() - 3) <= 4 * e.std() / math.sqrt(n)


def test_eval_examples():
    p = Particle(np.array([0.3, 0.6]), np.array([2.0, 0.0]))
    assert evaluate(CollisionInvariant("mass"), p) == 1.0
    assert evaluate(FourierHermite((0, 0), (0, 0)), p) == 1.0
    assert evaluate(FourierHermite((0, 0), (1, 0)), p) == pytest.approx(2.0)
    assert evaluate(CollisionInvariant("energy"), p) == pytest.approx(4.0)
    assert evaluate(CollisionInvariant("momentum", 1), p) == 0.0


def test_hermite_orthonormal_by_quadrature():
    # Gauss-Hermite (probabilists') quadrature is exact for these products
    x, w = np.polynomial.hermite_e.hermegauss(30)
    w = w / w.sum()
    H = hermite_table(x, 10)
    G = (H * w) @ H.T
    assert np.allclose(G, np.eye(11), atol=1e-12)


def test_fourier_hermite_gram_by_quadrature():
    # closed-form orthonormality checked with tensor quadrature in d=2
    xs = (np.arange(16) + 0.5) / 16
    vx, vw = np.polynomial.hermite_e.hermegauss(8)
    vw = vw / vw.sum()
    X = np.stack(np.meshgrid(xs, xs, indexing="ij"), -1).reshape(-1, 2)
    V = np.stack(np.meshgrid(vx, vx, indexing="ij"), -1).reshape(-1, 2)
    W = np.outer(vw, vw).ravel()
    els = [FourierHermite(k, a) for k in [(0, 0), (1, 0), (-1, 0), (1, -1), (0, 2)]
           for a in [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1)]]
    Fx = np.array([e.spatial(X) for e in els]) / X.shape[0]
    Fv = np.array([e.velocity(V) for e in els])
    Gx = np.array([[np.sum(Fx[i] * Fx[j]) * X.shape[0] for j in range(len(els))] for i in range(len(els))])
    Gv = (Fv * W) @ Fv.T
    assert np.allclose(Gx * Gv, np.eye(len(els)), atol=1e-12)


def test_gram_inner_examples(rng):
    h = FourierHermite((1, 0), (1, 1))
    assert gram_inner(h, h) == (1.0, 0.0)
    assert gram_inner(h, FourierHermite((1, 0), (1, 0))) == (0.0, 0.0)
    val, err = gram_inner(CollisionInvariant("mass"), CollisionInvariant("energy"), 200_000, rng, d=3)
    assert abs(val - 3) <= 3 * err
    # force the MC path on two orthogonal elements
    a = Custom(lambda x, v: FourierHermite((1, 0), (1, 0))(x, v), name="a")
    b = Custom(lambda x, v: FourierHermite((1, 0), (0, 1))(x, v), name="b")
    val, err = gram_inner(a, b, 200_000, rng, d=2)
    assert abs(val) <= 3 * err
    val, err = gram_inner(a, a, 200_000, rng, d=2)
    assert abs(val - 1) <= 3 * err
    with pytest.raises(ValueError):
        gram_inner(a, b, 10)


@given(st.lists(st.integers(-3, 3), min_size=2, max_size=3).flatmap(
    lambda k: st.tuples(st.just(tuple(k)), st.lists(st.integers(0, 4), min_size=len(k), max_size=len(k)))))
def test_json_round_trip(ka):
    k, a = ka
    h = FourierHermite(k, tuple(a))
    h2 = from_json(json.dumps(h.to_json()))
    assert h2 == h and h2.id == h.id


def test_invariant_json_and_unknown():
    for h in (CollisionInvariant("mass"), CollisionInvariant("momentum", 1), CollisionInvariant("energy")):
        assert from_json(h.to_json()) == h
    with pytest.raises(ValueError):
        from_json({"kind": "nope"})
    with pytest.raises(KeyError):
        from_json({"kind": "custom", "name": "not-registered"})


def test_sin_cos_labels():
    x = np.array([[0.125, 0.0]])
    v = np.zeros((1, 2))
    assert FourierHermite((1, 0), (0, 0))(x, v)[0] == pytest.approx(1.0)  # sqrt2 cos(pi/4)
    assert FourierHermite((-1, 0), (0, 0))(x, v)[0] == pytest.approx(1.0)  # sqrt2 sin(pi/4)
    assert FourierHermite((-1, 0), (0, 0)).parity == "sin"
