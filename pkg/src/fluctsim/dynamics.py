"""Event-driven hard-sphere flow on the unit torus.

The heavy lifting lives in :mod:`fluctsim._engine` (numba).  This module
holds the state container, the scattering map, the pair predictor exposed
for testing, and export helpers.

Contact vectors are stored as ``omega = (x_i - x_j) / eps`` (minimum image)
at the contact instant, so an approaching pair has ``(v_i - v_j).omega < 0``
just before the collision.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _ddengine, _engine
from .phasespace import DomainParams, Particle, torus_displacement

__all__ = [
    "CollisionEvent",
    "SystemState",
    "EventCapExceeded",
    "scatter",
    "predict_pair_collision",
    "advance",
    "reverse_run_check",
    "write_collision_log_csv",
    "write_snapshot_jsonl",
    "read_snapshot_jsonl",
]


class EventCapExceeded(RuntimeError):
    """Raised when a run needs more events than the safety cap allows."""


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    i: int
    j: int
    omega: np.ndarray


@dataclass
class SystemState:
    """Hard-sphere configuration ``(x, v)`` at ``time`` plus its collision log.

    ``x`` and ``v`` are ``(N, d)`` float arrays.  The log is kept as three
    parallel arrays (times, index pairs, contact vectors) since runs may log
    tens of thousands of events; :attr:`collision_log` gives the event view.
    """

    domain: DomainParams
    x: np.ndarray
    v: np.ndarray
    time: float = 0.0
    log_t: np.ndarray = field(default=None)
    log_ij: np.ndarray = field(default=None)
    log_omega: np.ndarray = field(default=None)
    n_ties: int = 0

    def __post_init__(self):
        d = self.domain.d
        self.x = np.array(self.x, dtype=float).reshape(-1, d)
        self.v = np.array(self.v, dtype=float).reshape(-1, d)
        self.x -= np.floor(self.x)
        self.x[self.x >= 1.0] -= 1.0
        if self.x.shape != self.v.shape:
            raise ValueError("x and v must have the same shape")
        if self.log_t is None:
            self.log_t = np.empty(0)
            self.log_ij = np.empty((0, 2), dtype=np.int64)
            self.log_omega = np.empty((0, d))

    @classmethod
    def from_particles(cls, domain: DomainParams, particles, time: float = 0.0):
        particles = list(particles)
        d = domain.d
        x = np.array([p.x for p in particles]).reshape(-1, d)
        v = np.array([p.v for p in particles]).reshape(-1, d)
        return cls(domain, x, v, time)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def particles(self) -> list[Particle]:
        return [Particle(xi, vi) for xi, vi in zip(self.x, self.v)]

    @property
    def collision_log(self) -> list[CollisionEvent]:
        return [CollisionEvent(float(t), int(ij[0]), int(ij[1]), om.copy())
                for t, ij, om in zip(self.log_t, self.log_ij, self.log_omega)]

    @property
    def n_collisions(self) -> int:
        return self.log_t.shape[0]

    def copy(self, keep_log: bool = True) -> "SystemState":
        out = SystemState(self.domain, self.x.copy(), self.v.copy(), self.time)
        if keep_log:
            out.log_t = self.log_t.copy()
            out.log_ij = self.log_ij.copy()
            out.log_omega = self.log_omega.copy()
            out.n_ties = self.n_ties
        return out

    def momentum(self) -> np.ndarray:
        return self.v.sum(axis=0)

    def energy(self) -> float:
        return float(np.einsum("ij,ij->", self.v, self.v))

    def min_distance(self) -> float:
        if self.n < 2:
            return math.inf
        return float(_engine.min_pair_distance(self.x))


def scatter(v_i, v_j, omega):
    """Specular reflection of a pair with unit contact vector ``omega``."""
    v_i = np.asarray(v_i, dtype=float)
    v_j = np.asarray(v_j, dtype=float)
    omega = np.asarray(omega, dtype=float)
    vn = np.sum((v_i - v_j) * omega, axis=-1, keepdims=True)
    return v_i - vn * omega, v_j + vn * omega


def predict_pair_collision(p_i: Particle, p_j: Particle, eps: float):
    """Time until ``p_i`` and ``p_j`` reach distance ``eps``, or ``None``.

    Only the minimum-image copy is considered, and only while the relative
    travel stays below ``0.5 - eps`` (beyond that another image may come
    closer first and the caller must re-predict).
    """
    dx = torus_displacement(p_i.x, p_j.x)
    dv = np.asarray(p_i.v, dtype=float) - np.asarray(p_j.v, dtype=float)
    s = _engine.pair_time(dx, dv, float(eps))
    return None if s < 0 else float(s)


def _default_cap(n: int, dt: float) -> int:
    # roughly 100x the expected Boltzmann-Grad collision count
    return int(1000 * (n + 10) * (dt + 1.0)) + 10_000


def advance(state: SystemState, t_target: float, max_events: int | None = None,
            record: bool = True) -> SystemState:
    """Run the exact hard-sphere flow from ``state.time`` to ``t_target``.

    Returns a new state; the collision log of the input is extended.
    """
    if t_target < state.time:
        raise ValueError("t_target must not precede the current time")
    out = state.copy()
    dt = t_target - state.time
    if out.n == 0 or dt == 0.0:
        out.time = t_target
        return out
    cap = _default_cap(out.n, dt) if max_events is None else int(max_events)
    m_cells = _engine.choose_cells(out.n, out.domain.d, out.domain.eps)
    n_ev, n_ties, status, t_stop, lt, lij, lom = _engine.run_events(
        out.x, out.v, float(state.time), float(t_target), out.domain.eps, cap, record, m_cells)
    out.n_ties += int(n_ties)
    if record and n_ev:
        out.log_t = np.concatenate([out.log_t, lt])
        out.log_ij = np.concatenate([out.log_ij, lij])
        out.log_omega = np.concatenate([out.log_omega, lom])
    if status == _engine.STATUS_EVENT_CAP:
        raise EventCapExceeded(
            f"more than {cap} collisions before t={t_target} (stopped at t={t_stop:.6g}); "
            "the configuration is probably pathological")
    out.time = t_target
    return out


def reverse_run_check(state0: SystemState, t: float, tol: float = 1e-6,
                      precision: str = "double") -> dict:
    """Run forward for ``t``, flip velocities, run back, flip again, and
    compare with the starting configuration.

    ``precision="double-double"`` uses the slower extended-precision engine;
    in double precision the chaotic amplification of rounding errors limits
    round trips to a few collisions per particle.
    """
    if precision not in ("double", "double-double"):
        raise ValueError(f"unknown precision {precision!r}")
    n_events = 0
    if state0.n == 0 or t == 0.0:
        bx, bv = state0.x.copy(), state0.v.copy()
    elif precision == "double":
        fwd = advance(state0, state0.time + t)
        n_events = fwd.n_collisions - state0.n_collisions
        fwd.v = -fwd.v
        back = advance(fwd, fwd.time + t, record=False)
        bx, bv = back.x, -back.v
    else:
        xh, xl = state0.x.copy(), np.zeros_like(state0.x)
        vh, vl = state0.v.copy(), np.zeros_like(state0.v)
        cap = _default_cap(state0.n, t)
        eps = state0.domain.eps
        t0 = float(state0.time)
        n_events, st1 = _ddengine.run_events_dd(xh, xl, vh, vl, t0, t0 + t, eps, cap)
        vh, vl = -vh, -vl
        n2, st2 = _ddengine.run_events_dd(xh, xl, vh, vl, t0 + t, t0 + 2 * t, eps, cap)
        if st1 or st2:
            raise EventCapExceeded("event cap hit during the reversibility check")
        bx = xh + xl
        bx -= np.floor(bx)
        bv = -(vh + vl)
    if state0.n:
        dx = float(np.max(np.abs(torus_displacement(bx, state0.x))))
        dv = float(np.max(np.abs(bv - state0.v)))
    else:
        dx = dv = 0.0
    dev = max(dx, dv)
    return {"t": t, "precision": precision, "n_events": int(n_events), "max_dx": dx,
            "max_dv": dv, "deviation": dev, "tol": tol, "passed": dev <= tol}


def write_collision_log_csv(state: SystemState, path) -> None:
    d = state.domain.d
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "i", "j"] + [f"omega{k}" for k in range(d)])
        for t, ij, om in zip(state.log_t, state.log_ij, state.log_omega):
            w.writerow([repr(float(t)), int(ij[0]), int(ij[1])] + [repr(float(c)) for c in om])


def write_snapshot_jsonl(states, path) -> None:
    """One header line then one ``{"x":..., "v":...}`` line per particle, per state."""
    with open(path, "w") as fh:
        for s in states:
            fh.write(json.dumps({"d": s.domain.d, "eps": s.domain.eps, "N": s.n,
                                 "time": s.time}) + "\n")
            for xi, vi in zip(s.x, s.v):
                fh.write(json.dumps({"x": xi.tolist(), "v": vi.tolist()}) + "\n")


def read_snapshot_jsonl(path) -> list[SystemState]:
    out = []
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    k = 0
    while k < len(lines):
        hdr = lines[k]
        n = hdr["N"]
        rows = lines[k + 1:k + 1 + n]
        dom = DomainParams(hdr["d"], hdr["eps"])
        x = np.array([r["x"] for r in rows], dtype=float).reshape(-1, dom.d)
        v = np.array([r["v"] for r in rows], dtype=float).reshape(-1, dom.d)
        out.append(SystemState(dom, x, v, hdr["time"]))
        k += 1 + n
    return out
