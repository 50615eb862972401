import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fluctsim.dynamics import (EventCapExceeded, SystemState, advance, predict_pair_collision,
                               read_snapshot_jsonl, reverse_run_check, scatter,
                               write_collision_log_csv, write_snapshot_jsonl)
from fluctsim.phasespace import DomainParams, Particle, torus_displacement
from fluctsim.sampler import SamplerConfig, sample_configuration

vel = arrays(float, 3, elements=st.floats(-20, 20, allow_nan=False))


def test_scatter_examples():
    a, b = scatter([1.0, 0.0], [-1.0, 0.0], [1.0, 0.0])
    assert np.allclose(a, [-1, 0]) and np.allclose(b, [1, 0])
    a, b = scatter([1.0, 2.0], [1.0, -1.0], [1.0, 0.0])
    assert np.allclose(a, [1, 2]) and np.allclose(b, [1, -1])


@given(vel, vel, arrays(float, 3, elements=st.floats(-1, 1, allow_nan=False)))
def test_scatter_conservation_and_involution(vi, vj, om):
    n = np.linalg.norm(om)
    if n < 1e-3:
        return
    om = om / n
    a, b = scatter(vi, vj, om)
    scale = 1.0 + np.abs(vi).max() + np.abs(vj).max()
    assert np.allclose(a + b, vi + vj, atol=1e-12 * scale)
    assert abs(a @ a + b @ b - vi @ vi - vj @ vj) <= 1e-12 * scale ** 2
    a2, b2 = scatter(a, b, om)
    assert np.allclose(a2, vi, atol=1e-12 * scale) and np.allclose(b2, vj, atol=1e-12 * scale)


def test_predict_examples():
    p = Particle(np.array([0.25, 0.5]), np.array([1.0, 0.0]))
    q = Particle(np.array([0.75, 0.5]), np.array([-1.0, 0.0]))
    # separation 0.5, relative speed 2, eps 0.1
    assert predict_pair_collision(p, q, 0.1) == pytest.approx(0.2)
    r = Particle(np.array([0.25, 0.7]), np.array([1.0, 0.0]))
    assert predict_pair_collision(p, r, 0.1) is None


@given(st.integers(0, 10_000))
def test_predict_dense_scan(seed):
    rng = np.random.default_rng(seed)
    eps = 0.05
    x = rng.random((2, 2))
    if np.linalg.norm(torus_displacement(x[0], x[1])) <= eps:
        return
    v = rng.standard_normal((2, 2))
    s = predict_pair_collision(Particle(x[0], v[0]), Particle(x[1], v[1]), eps)
    dx = torus_displacement(x[0], x[1])
    dv = v[0] - v[1]
    if s is None:
        return
    assert abs(np.linalg.norm(dx + s * dv) - eps) < 1e-10
    ts = np.arange(0.0, s, 1e-4)
    d = np.linalg.norm(dx[None] + ts[:, None] * dv[None], axis=1)
    assert np.all(d > eps - 1e-12)


def _state(n, eps, seed, d=2):
    dom = DomainParams(d, eps)
    return sample_configuration(dom, SamplerConfig(), np.random.default_rng(seed))


def test_free_flight():
    dom = DomainParams(2, 0.01)
    s = SystemState(dom, [[0.1, 0.2]], [[0.7, -2.3]])
    out = advance(s, 1.5)
    exp = np.array([0.1 + 1.5 * 0.7, 0.2 - 1.5 * 2.3]) % 1.0
    assert np.allclose(out.x[0], exp, atol=1e-14)
    assert out.n_collisions == 0


def test_head_on_composition():
    dom = DomainParams(2, 0.1)
    s = SystemState(dom, [[0.25, 0.5], [0.75, 0.5]], [[1.0, 0.0], [-1.0, 0.0]])
    out = advance(s, 0.3)
    assert out.n_collisions == 1
    assert out.log_t[0] == pytest.approx(0.2)
    assert np.allclose(out.v, [[-1, 0], [1, 0]])
    assert np.allclose(out.log_omega[0], [-1, 0]) or np.allclose(out.log_omega[0], [1, 0])
    # positions at contact are eps apart
    mid = advance(s, 0.2)
    assert np.linalg.norm(torus_displacement(mid.x[0], mid.x[1])) == pytest.approx(0.1)


def test_conservation_and_no_overlap():
    s = _state(100, 0.01, 3)  # d=2, mu=100
    e0, p0 = s.energy(), s.momentum()
    cur = s
    for t in np.linspace(0.1, 1.0, 10):
        cur = advance(cur, t)
        assert cur.min_distance() >= s.domain.eps - 1e-10
    assert abs(cur.energy() - e0) <= 1e-9 * e0
    assert np.all(np.abs(cur.momentum() - p0) <= 1e-9 * math.sqrt(e0))
    assert np.all(np.diff(cur.log_t) > 0)
    assert cur.n_collisions > 0
    om = cur.log_omega
    assert np.allclose(np.linalg.norm(om, axis=1), 1.0, atol=1e-12)


def test_collision_log_omega_convention():
    # omega = (x_i - x_j)/eps at contact, so an approaching pair has (v_i - v_j).omega < 0
    s = SystemState(DomainParams(2, 0.1), [[0.25, 0.5], [0.75, 0.52]], [[1.0, 0.1], [-1.0, 0.0]])
    out = advance(s, 0.3)
    assert out.n_collisions == 1
    om = out.log_omega[0]
    i, j = out.log_ij[0]
    at = advance(s, float(out.log_t[0]))
    assert np.allclose(torus_displacement(at.x[i], at.x[j]) / 0.1, om, atol=1e-9)
    assert (s.v[i] - s.v[j]) @ om < 0


def test_event_cap():
    s = _state(100, 0.01, 4)
    with pytest.raises(EventCapExceeded):
        advance(s, 1.0, max_events=3)


def test_reverse_run():
    s = _state(50, 0.02, 5)  # mu=50
    assert reverse_run_check(s, 0.0)["deviation"] == 0.0
    r = reverse_run_check(s, 0.5)
    assert r["n_events"] > 0
    assert r["passed"], r
    one = SystemState(DomainParams(2, 0.01), [[0.3, 0.4]], [[1.3, -0.2]])
    assert reverse_run_check(one, 7.0)["deviation"] < 1e-13


def test_reverse_run_double_double():
    s = _state(100, 0.01, 6)
    r = reverse_run_check(s, 0.5, precision="double-double")
    assert r["passed"] and r["deviation"] < 1e-9


def test_snapshot_and_log_io(tmp_path):
    s = advance(_state(20, 0.05, 7), 0.5)
    p = tmp_path / "snap.jsonl"
    write_snapshot_jsonl([s, s], p)
    back = read_snapshot_jsonl(p)
    assert len(back) == 2 and np.allclose(back[0].x, s.x) and np.allclose(back[1].v, s.v)
    assert back[0].time == s.time
    q = tmp_path / "log.csv"
    write_collision_log_csv(s, q)
    lines = q.read_text().splitlines()
    assert lines[0] == "time,i,j,omega0,omega1"
    assert len(lines) == 1 + s.n_collisions
