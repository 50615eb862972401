import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fluctsim.lbe import (GalerkinBasis, assemble_generator, assemble_noise, dissipativity,
                          equilibrium_balance, fd_check, ou_lagged_covariance, ou_simulate,
                          propagate_covariance, propagate_covariance_rk4, psd_sqrt, sector_basis,
                          stationary_covariance_em, transport_matrix, velocity_operator_mc,
                          velocity_operator_quadrature, write_curve_csv, write_matrix_csv)
from fluctsim.phasespace import CollisionInvariant, FourierHermite


@pytest.fixture(scope="module")
def full2():
    b = GalerkinBasis.full(2, 1, 2)
    gen = assemble_generator(b, 200_000, np.random.default_rng(1))
    noise = assemble_noise(b, 200_000, np.random.default_rng(2))
    return b, gen, noise


@pytest.fixture(scope="module")
def quad2():
    b = GalerkinBasis.full(2, 1, 2)
    return b, assemble_generator(b, method="quadrature"), assemble_noise(b, method="quadrature")


def test_basis_layout():
    b = GalerkinBasis.full(2, 1, 2)
    assert len(b) == 9 * 6
    assert len(set(b.elements)) == len(b)
    assert b.alphas[0] == (0, 0)
    with pytest.raises(ValueError):
        GalerkinBasis((FourierHermite((0, 0), (0, 0)),) * 2)
    s = sector_basis((1, 0), 3)
    assert all(e.alpha[1] % 2 == 0 for e in s.elements)
    with pytest.raises(ValueError):
        sector_basis((1, 1), 2)
    j = json.loads(json.dumps(b.to_json()))
    assert j["K"] == 1 and len(j["elements"]) == len(b)


def test_invariant_coordinates():
    b = GalerkinBasis.full(2, 0, 2)
    rng = np.random.default_rng(0)
    x, v = rng.random((50, 2)), rng.standard_normal((50, 2))
    vals = np.array([e(x, v) for e in b.elements])
    for h in (CollisionInvariant("mass"), CollisionInvariant("momentum", 1), CollisionInvariant("energy")):
        assert np.allclose(b.coeffs(h) @ vals, h(x, v))
    assert b.invariant_coeffs().shape == (4, len(b))


def test_transport_antisymmetric_exact():
    for b in (GalerkinBasis.full(2, 1, 3), GalerkinBasis.full(3, 1, 2), sector_basis((0, 2), 4)):
        T = transport_matrix(b)
        assert np.array_equal(T, -T.T)


def test_transport_by_quadrature():
    # T_kl = -\int phi_k v.grad(phi_l) M, checked with tensor quadrature
    b = GalerkinBasis.full(2, 1, 1)
    xs = (np.arange(12) + 0.5) / 12
    vx, vw = np.polynomial.hermite_e.hermegauss(6)
    vw = vw / vw.sum()
    X = np.stack(np.meshgrid(xs, xs, indexing="ij"), -1).reshape(-1, 2)
    V = np.stack(np.meshgrid(vx, vx, indexing="ij"), -1).reshape(-1, 2)
    W = np.outer(vw, vw).ravel()
    h = 1e-6
    T = np.zeros((len(b), len(b)))
    for l, el in enumerate(b.elements):
        grad = [(el.spatial(X + h * np.eye(2)[j]) - el.spatial(X - h * np.eye(2)[j])) / (2 * h) for j in range(2)]
        for k, ek in enumerate(b.elements):
            fk = ek.spatial(X)
            s = 0.0
            for j in range(2):
                s += np.mean(fk * grad[j]) * np.sum(W * ek.velocity(V) * V[:, j] * el.velocity(V))
            T[k, l] = -s
    assert np.allclose(T, transport_matrix(b), atol=1e-6)


@pytest.mark.parametrize("d,A", [(2, 3), (3, 2)])
def test_mc_matches_quadrature(d, A):
    b = GalerkinBasis.full(d, 0, A)
    al = b.alphas
    J = velocity_operator_quadrature(al, d)
    Lv, err, _ = velocity_operator_mc(al, d, 400_000, np.random.default_rng(3), "L")
    C, cerr = velocity_operator_mc(al, d, 400_000, np.random.default_rng(4), "C")
    assert np.all(np.abs(Lv + J / 4) <= 4.5 * err + 1e-12)
    assert np.all(np.abs(C - J / 2) <= 4.5 * cerr + 1e-12)


def test_invariant_columns_vanish(full2, quad2):
    b, gen, noise = full2
    inv = b.invariant_coeffs()
    col = gen.B @ inv.T
    err = np.sqrt(gen.mc_error ** 2 @ (inv.T ** 2))
    assert np.all(np.abs(col) <= 3 * err + 1e-12)
    assert np.all(np.abs(quad2[1].B @ inv.T) < 1e-12)


def test_noise_structure(full2):
    b, gen, noise = full2
    x_only = [i for i, e in enumerate(b.elements) if e.alpha == (0, 0)]
    mom = [i for i, e in enumerate(b.elements) if sum(e.alpha) == 1]
    assert np.all(noise.C[x_only] == 0.0) and np.all(noise.C[:, x_only] == 0.0)
    assert np.all(noise.C[mom] == 0.0)
    assert np.allclose(noise.C, noise.C.T)
    lam = np.linalg.eigvalsh(noise.C)
    assert lam.min() >= -3 * np.linalg.norm(noise.mc_error)
    # energy row: sum_j C[2e_j] is zero up to rounding
    e = b.coeffs(CollisionInvariant("energy"))
    assert np.abs(noise.C @ e).max() < 1e-10


def test_dissipativity(full2):
    lam, tol, ok = dissipativity(full2[1])
    assert ok


def test_fd_check_sub_bases(full2):
    b, gen, noise = full2
    xo = b.sub(lambda e: e.alpha == (0, 0))
    rep = fd_check(gen.restrict(xo), noise.restrict(xo))
    assert rep.passed and rep.max_abs == 0.0
    inv = b.sub(lambda e: e.k == (0, 0) and sum(e.alpha) <= 1)
    rep = fd_check(gen.restrict(inv), noise.restrict(inv))
    assert rep.passed and rep.max_abs <= 1e-12


def test_fd_check_full(full2, quad2):
    rep = fd_check(full2[1], full2[2])
    assert rep.passed, rep.to_dict()
    rq = fd_check(quad2[1], quad2[2])
    assert rq.max_abs < 1e-12
    with pytest.raises(ValueError):
        fd_check(full2[1], full2[2].restrict(full2[0].sub(lambda e: e.k == (0, 0))))


def test_lyapunov_residual_shrinks():
    b = GalerkinBasis.full(2, 0, 2)
    res = []
    for n in (100_000, 400_000):
        g = assemble_generator(b, n, np.random.default_rng(10))
        c = assemble_noise(b, n, np.random.default_rng(11))
        R = fd_check(g, c).residual
        res.append(np.sqrt(np.mean(R ** 2)))
    assert res[1] < 0.8 * res[0]


def test_propagate_covariance():
    b = GalerkinBasis.full(2, 1, 2)
    gen = assemble_generator(b, method="quadrature")
    g = b.coeffs(FourierHermite((1, 0), (1, 0)))
    h = b.coeffs(FourierHermite((-1, 0), (0, 0)))
    t = np.linspace(0, 2, 9)
    p = propagate_covariance(gen, g, h, t)
    assert p[0] == g @ h
    assert np.allclose(p, propagate_covariance_rk4(gen, g, h, t), atol=1e-8)
    e = b.coeffs(CollisionInvariant("energy"))
    pe = propagate_covariance(gen, e, e, t)
    assert np.allclose(pe, pe[0], atol=1e-12)
    with pytest.raises(ValueError):
        propagate_covariance(gen, g, h, [1.0, 0.5])


def test_ou_trivial():
    res = ou_simulate(np.zeros((3, 3)), np.zeros((3, 3)), 0.1, 1.0, 5, np.random.default_rng(0))
    assert np.all(res.paths == res.paths[0])


def test_ou_stationary_and_lagged(quad2):
    b, gen, noise = quad2
    s = sector_basis((1, 0), 2)
    gs, cs = gen.restrict(s), noise.restrict(s)
    res = ou_simulate(gs, cs, 0.05, 30.0, 500, np.random.default_rng(5), scheme="exact", record_every=0.25)
    iu = np.triu_indices(len(s))
    z = np.abs(res.stationary_cov - np.eye(len(s)))[iu] / res.cov_error[iu]
    assert z.max() < 4.0
    g = s.coeffs(FourierHermite((1, 0), (1, 0)))
    m, e = ou_lagged_covariance(res, 0.5, g, g)
    assert abs(m - propagate_covariance(gs, g, g, [0.5])[0]) <= 4 * e


def test_ou_euler_bias_vanishes_with_dt(quad2):
    b, gen, noise = quad2
    s = sector_basis((1, 0), 2)
    B, C = gen.restrict(s).B, noise.restrict(s).C
    h = 0.1 / np.linalg.norm(B, 2)
    bias = [np.abs(stationary_covariance_em(B, C, h / f) - np.eye(len(s))).max() for f in (10, 100)]
    assert bias[1] < 0.2 * bias[0]
    with pytest.raises(ValueError):
        ou_simulate(B, C, 2 * h, 1.0, 2, np.random.default_rng(0))


def test_psd_projection():
    C = np.diag([1.0, -1e-3])
    S, clipped = psd_sqrt(C, np.full((2, 2), 1e-3))
    assert clipped == 1 and np.allclose(S @ S, np.diag([1.0, 0.0]))
    with pytest.raises(ValueError):
        psd_sqrt(np.diag([1.0, -1.0]), np.full((2, 2), 1e-3))


def test_balance():
    rep = equilibrium_balance(1_000_000, 1e-3, np.random.default_rng(7))
    assert rep.passed, rep.rows()
    # degree-2 elements: gain and loss are both nonzero and agree
    i = rep.test_ids.index("fh:k=0,0:a=2,0")
    assert rep.gain[i] != 0.0 and abs(rep.gain[i] - rep.loss[i]) <= 3 * rep.mc_error[i]
    sym = equilibrium_balance(1_000_000, 1e-3, np.random.default_rng(7), symmetrized=True)
    inv = [k for k, t in enumerate(sym.test_ids) if t in ("fh:k=0,0:a=0,0", "fh:k=0,0:a=1,0", "fh:k=0,0:a=0,1")]
    assert np.all(sym.residual[inv] == 0.0)
    with pytest.raises(ValueError):
        equilibrium_balance(10, 1e-3, np.random.default_rng(0))


def test_balance_error_scaling():
    r1 = equilibrium_balance(1_000_000, 1e-3, np.random.default_rng(8))
    r4 = equilibrium_balance(4_000_000, 1e-3, np.random.default_rng(9))
    nz = r1.mc_error > 0
    ratio = r4.mc_error[nz] / r1.mc_error[nz]
    assert np.allclose(ratio, 0.5, rtol=0.1)
    assert np.abs(r4.residual).max() <= max(np.abs(r1.residual).max(), 3 * r4.mc_error.max())


def test_matrix_and_curve_io(tmp_path, quad2):
    b, gen, _ = quad2
    p = tmp_path / "B.csv"
    write_matrix_csv(p, gen.B, b, {"n_mc": 0}, gen.mc_error)
    lines = p.read_text().splitlines()
    assert lines[0] == "row,col,value,error" and len(lines) == 1 + len(b) ** 2
    meta = json.loads((tmp_path / "B.csv.json").read_text())
    assert meta["n_mc"] == 0 and len(meta["basis"]["elements"]) == len(b)
    q = tmp_path / "c.csv"
    write_curve_csv(q, [0, 1], [1.0, 0.5], [0.1, 0.1], name="cov")
    assert q.read_text().splitlines()[0] == "t,cov,std_error"


@given(st.integers(0, 4))
def test_quadrature_invariants_and_symmetry(A):
    # J symmetric PSD with the collision invariants in its kernel
    b = GalerkinBasis.full(2, 0, A)
    J = velocity_operator_quadrature(b.alphas, 2)
    assert np.allclose(J, J.T, atol=1e-12)
    assert np.linalg.eigvalsh(J).min() >= -1e-10
    if A >= 2:
        e = b.coeffs(CollisionInvariant("energy"))
        assert np.abs(J @ e).max() < 1e-10
