"""Cluster and recollision diagnostics.

* Microscopic clusters: connected components of the proximity graph with
  threshold ``3 sqrt(gamma) V delta``; the conditioning event ``Upsilon``
  asks that along a grid of sample times every cluster has at most ``gamma``
  particles and every speed is at most ``V``.
* Collision graphs: encounters of a forward run inserted in time order; an
  edge joining two particles that are already connected closes a cycle
  (a recollision in the backward picture).
* Pseudo-trajectories: the branching backward construction that adds
  particles at contact, and the forward flow with annihilations that
  inverts it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.stats import binomtest

from . import _engine
from .dynamics import SystemState, advance, scatter
from .phasespace import DomainParams, torus_displacement
from .unionfind import UnionFind

__all__ = [
    "ConditioningParams",
    "ClusterSnapshot",
    "ClusterReport",
    "detect_microscopic_clusters",
    "upsilon_check",
    "upsilon_probability_scan",
    "upsilon_trend",
    "GraphEdge",
    "CollisionGraph",
    "classify_collision_graph",
    "PseudoTrajectory",
    "ForwardResult",
    "EncounterBudgetExceeded",
    "build_backward_pseudo_trajectory",
    "reconstruct_forward",
    "round_trip_error",
    "random_pseudo_trajectory",
]


# ----------------------------------------------------------------------------
# conditioning


@dataclass(frozen=True)
class ConditioningParams:
    """Cluster cap ``gamma``, speed cap ``V``, steps ``delta < tau`` and horizon ``Theta``.

    ``thetas`` are the observation times ``theta_1 < ... < theta_P``
    (default ``(0, Theta)``).  The scale separation
    ``eps < delta/10 < tau/100 < Theta/100`` is enforced unless
    ``strict=False``; with the asymptotic choices of :meth:`standard` it only
    holds for very small ``eps`` (``eps < 1e-4`` in d=2), so desk-scale runs
    must opt out and the report records the violation.
    """

    d: int
    eps: float
    gamma: int
    V: float
    delta: float
    tau: float
    Theta: float
    thetas: tuple = ()
    strict: bool = True

    def __post_init__(self):
        if min(self.eps, self.delta, self.tau, self.Theta) <= 0 or self.gamma < 1 or self.V < 0:
            raise ValueError("conditioning parameters must be positive")
        if not self.thetas:
            object.__setattr__(self, "thetas", (0.0, float(self.Theta)))
        th = tuple(float(t) for t in self.thetas)
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError("thetas must be increasing")
        object.__setattr__(self, "thetas", th)
        if self.strict and not self.scale_separation_ok:
            raise ValueError("scale separation eps < delta/10 < tau/100 < Theta/100 violated "
                             f"(eps={self.eps:.3g}, delta={self.delta:.3g}, tau={self.tau:.3g}, "
                             f"Theta={self.Theta:.3g}); pass strict=False to proceed")

    @classmethod
    def standard(cls, d: int, eps: float, tau: float | None = None, Theta: float = 1.0,
                 thetas: Sequence[float] = (), strict: bool = True) -> "ConditioningParams":
        """``gamma = 4d``, ``V = |log eps|``, ``delta = eps^(1 - 1/(2d))``."""
        delta = eps ** (1.0 - 1.0 / (2 * d))
        if tau is None:
            tau = min(max(20.0 * delta, 0.01), 0.5 * Theta)
        return cls(d, eps, 4 * d, abs(math.log(eps)), delta, tau, Theta, tuple(thetas), strict)

    @property
    def scale_separation_ok(self) -> bool:
        return self.eps < self.delta / 10 < self.tau / 100 < 0.01 * self.Theta

    @property
    def threshold(self) -> float:
        return 3.0 * math.sqrt(self.gamma) * self.V * self.delta

    def sample_times(self) -> np.ndarray:
        """``theta_p - (k-1) tau - r delta`` for ``p >= 2``, ``1 <= k <= (theta_p - theta_{p-1})/tau``,
        ``0 <= r <= tau/delta`` (sorted, duplicates merged)."""
        out = []
        kmax_r = int(math.floor(self.tau / self.delta + 1e-9))
        for lo, hi in zip(self.thetas, self.thetas[1:]):
            kmax = max(1, int(math.floor((hi - lo) / self.tau + 1e-9)))
            for k in range(1, kmax + 1):
                for r in range(kmax_r + 1):
                    t = hi - (k - 1) * self.tau - r * self.delta
                    if t >= lo - 1e-12:
                        out.append(max(t, lo))
        return np.unique(np.round(np.array(out), 12))

    def with_(self, **kw) -> "ConditioningParams":
        data = asdict(self)
        data.update(kw)
        return ConditioningParams(**data)


@dataclass
class ClusterSnapshot:
    time: float
    n: int
    max_size: int
    histogram: dict
    max_speed: float
    sizes_ok: bool
    speeds_ok: bool

    @property
    def upsilon_ok(self) -> bool:
        return self.sizes_ok and self.speeds_ok


@dataclass
class ClusterReport:
    gamma: int
    V: float
    threshold: float
    snapshots: list = field(default_factory=list)

    @property
    def upsilon_ok(self) -> bool:
        return all(s.upsilon_ok for s in self.snapshots)

    @property
    def max_size(self) -> int:
        return max((s.max_size for s in self.snapshots), default=0)

    def to_jsonl(self) -> str:
        lines = []
        for s in self.snapshots:
            row = asdict(s)
            row["histogram"] = {str(k): v for k, v in sorted(s.histogram.items())}
            row["upsilon_ok"] = s.upsilon_ok
            lines.append(json.dumps(row, sort_keys=True))
        lines.append(json.dumps({"overall_upsilon_ok": self.upsilon_ok, "gamma": self.gamma,
                                 "V": self.V, "threshold": self.threshold}, sort_keys=True))
        return "\n".join(lines) + "\n"


def _proximity_pairs(x: np.ndarray, r: float) -> np.ndarray:
    n = x.shape[0]
    if n < 2:
        return np.empty((0, 2), dtype=int)
    if r < 0.25:
        return cKDTree(x, boxsize=1.0).query_pairs(r, output_type="ndarray")
    # large radius: minimum-image brute force, blocked by rows
    out = []
    for s in range(0, n, 256):
        dx = x[s:s + 256, None, :] - x[None, :, :]
        dx -= np.floor(dx + 0.5)
        i, j = np.nonzero(np.einsum("abk,abk->ab", dx, dx) <= r * r)
        i = i + s
        keep = i < j
        out.append(np.stack([i[keep], j[keep]], axis=1))
    return np.concatenate(out)


def cluster_sizes(x: np.ndarray, r: float) -> np.ndarray:
    """Sizes of the connected components of the proximity graph at radius ``r``."""
    n = x.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int)
    pairs = _proximity_pairs(x, r)
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, lab = connected_components(g, directed=False)
    return np.bincount(lab)


def _snapshot(state: SystemState, p: ConditioningParams) -> ClusterSnapshot:
    sizes = cluster_sizes(state.x, p.threshold)
    hist = {int(k): int(c) for k, c in zip(*np.unique(sizes, return_counts=True))}
    vmax = float(np.sqrt((state.v ** 2).sum(1)).max()) if state.n else 0.0
    mx = int(sizes.max()) if sizes.size else 0
    return ClusterSnapshot(float(state.time), state.n, mx, hist, vmax, mx <= p.gamma, vmax <= p.V)


def detect_microscopic_clusters(state: SystemState, params: ConditioningParams) -> ClusterReport:
    """Cluster sizes, speed check and Upsilon verdict at the state's current time."""
    return ClusterReport(params.gamma, params.V, params.threshold, [_snapshot(state, params)])


def upsilon_check(state: SystemState, params: ConditioningParams, stop_early: bool = True) -> ClusterReport:
    """Run ``state`` through the sample-time grid and check every time.

    With ``stop_early`` the run ends at the first violation (the verdict is
    already decided).
    """
    rep = ClusterReport(params.gamma, params.V, params.threshold)
    cur = state
    for t in params.sample_times():
        if t > cur.time:
            cur = advance(cur, float(t), record=False)
        snap = _snapshot(cur, params)
        snap.time = float(t)
        rep.snapshots.append(snap)
        if stop_early and not snap.upsilon_ok:
            break
    return rep


def _scan_task(task):
    from .ensemble import stream
    from .sampler import SamplerConfig, sample_configuration

    dom, sampler, params, seed, run = task
    rng = stream(seed, run, "upsilon")
    st = sample_configuration(DomainParams(**dom), SamplerConfig(**sampler), rng)
    rep = upsilon_check(st, params)
    first = next((s.time for s in rep.snapshots if not s.upsilon_ok), None)
    return (not rep.upsilon_ok), first, rep.max_size


def upsilon_probability_scan(domains: Sequence[DomainParams], params, n_runs: int, rng=None,
                             base_seed: int | None = None, sampler=None, workers: int | None = None,
                             confidence: float = 0.95) -> list[dict]:
    """Empirical ``P(not Upsilon)`` per domain with Wilson intervals.

    ``params`` is one :class:`ConditioningParams`, a list aligned with
    ``domains`` or a callable ``domain -> ConditioningParams``.
    """
    from .ensemble import parallel_map
    from .sampler import SamplerConfig

    if n_runs < 1000:
        raise ValueError("upsilon_probability_scan needs >= 1e3 runs per eps")
    if base_seed is None:
        base_seed = int((rng or np.random.default_rng()).integers(2**31))
    sampler = sampler or SamplerConfig()
    rows = []
    for q, dom in enumerate(domains):
        p = params(dom) if callable(params) else (params[q] if isinstance(params, (list, tuple)) else params)
        tasks = [(dom.to_dict(), sampler.to_dict(), p, base_seed + 7919 * q, r) for r in range(n_runs)]
        res = parallel_map(_scan_task, tasks, workers)
        k = sum(1 for r in res if r[0])
        ci = binomtest(k, n_runs).proportion_ci(confidence_level=confidence, method="wilson")
        firsts = [r[1] for r in res if r[1] is not None]
        rows.append({"d": dom.d, "eps": dom.eps, "n_runs": n_runs, "violations": k,
                     "frequency": k / n_runs, "ci_low": float(ci.low), "ci_high": float(ci.high),
                     "threshold": p.threshold, "gamma": p.gamma, "V": p.V, "delta": p.delta,
                     "n_sample_times": int(p.sample_times().size),
                     "scale_separation_ok": p.scale_separation_ok,
                     "median_first_violation": float(np.median(firsts)) if firsts else None,
                     "mean_max_cluster": float(np.mean([r[2] for r in res]))})
    return rows


def upsilon_trend(rows: Sequence[dict], d: int, max_freq: float = 0.05) -> dict:
    """Trend verdict for two rows (larger eps first, ratio 2).

    ``trend_ok``: the decrease factor can reach ``2^(d-1)`` inside the Wilson
    intervals, i.e. ``hi(large) >= 2^(d-1) lo(small)``.
    ``level_ok``: the frequency at the smaller eps is at most ``max_freq``.
    """
    big, small = sorted(rows, key=lambda r: -r["eps"])[:2]
    need = 2.0 ** (d - 1)
    trend = big["ci_high"] >= need * small["ci_low"]
    level = small["frequency"] <= max_freq
    ratio = big["frequency"] / small["frequency"] if small["frequency"] > 0 else math.inf
    return {"ratio": ratio, "required": need, "trend_ok": bool(trend), "level_ok": bool(level),
            "passed": bool(trend and level)}


# ----------------------------------------------------------------------------
# collision graphs


@dataclass
class GraphEdge:
    i: int
    j: int
    time: float
    kind: str  # "tree" or "cycle"


@dataclass
class CollisionGraph:
    window: tuple
    vertices: list
    edges: list

    @property
    def n_tree(self) -> int:
        return sum(e.kind == "tree" for e in self.edges)

    @property
    def n_cycle(self) -> int:
        return sum(e.kind == "cycle" for e in self.edges)

    @property
    def n_repeat(self) -> int:
        """Cycle edges whose pair had already collided inside the window."""
        seen, k = set(), 0
        for e in self.edges:
            key = (min(e.i, e.j), max(e.i, e.j))
            k += key in seen
            seen.add(key)
        return k

    def components(self) -> list[set]:
        uf = UnionFind(len(self.vertices))
        pos = {v: k for k, v in enumerate(self.vertices)}
        for e in self.edges:
            uf.union(pos[e.i], pos[e.j])
        groups: dict = {}
        for v in self.vertices:
            groups.setdefault(uf.find(pos[v]), set()).add(v)
        return list(groups.values())

    def cycle_counts(self, cap: int | None = None) -> dict:
        """Cycle edges per particle (the observable shadow of recollision indices)."""
        out: dict = {}
        for e in self.edges:
            if e.kind == "cycle":
                for p in (e.i, e.j):
                    out[p] = out.get(p, 0) + 1
        if cap is not None:
            out = {k: min(v, cap) for k, v in out.items()}
        return out

    def summary(self) -> dict:
        sizes = [len(c) for c in self.components()]
        hist = {int(k): int(c) for k, c in zip(*np.unique(sizes, return_counts=True))} if sizes else {}
        return {"window": list(self.window), "n_vertices": len(self.vertices), "n_tree": self.n_tree,
                "n_cycle": self.n_cycle, "n_repeat": self.n_repeat, "component_sizes": {str(k): v for k, v in hist.items()}}


def _log_arrays(log):
    if isinstance(log, SystemState):
        return log.log_t, log.log_ij
    if isinstance(log, tuple):
        return np.asarray(log[0], dtype=float), np.asarray(log[1], dtype=int).reshape(-1, 2)
    t = np.array([e.time for e in log], dtype=float)
    ij = np.array([(e.i, e.j) for e in log], dtype=int).reshape(-1, 2)
    return t, ij


def classify_collision_graph(log, window: tuple) -> CollisionGraph:
    """Insert the encounters of ``window = (t0, t1)`` in time order; an edge is
    a cycle iff its endpoints were already connected by earlier edges.

    ``log`` is a :class:`SystemState`, a list of collision events, or a pair
    of arrays ``(times, ij)``.  Vertices are the particles that take part in
    at least one encounter of the window.
    """
    t, ij = _log_arrays(log)
    if np.any(np.diff(t) < 0):
        raise ValueError("collision log must be sorted by time")
    t0, t1 = window
    sel = (t >= t0) & (t <= t1)
    t, ij = t[sel], ij[sel]
    verts = sorted(set(ij.ravel().tolist()))
    pos = {v: k for k, v in enumerate(verts)}
    uf = UnionFind(len(verts))
    edges = []
    for tk, (i, j) in zip(t, ij):
        new = uf.union(pos[int(i)], pos[int(j)])
        edges.append(GraphEdge(int(i), int(j), float(tk), "tree" if new else "cycle"))
    return CollisionGraph((float(t0), float(t1)), verts, edges)


# ----------------------------------------------------------------------------
# pseudo-trajectories


class EncounterBudgetExceeded(RuntimeError):
    pass


def _wrap(x):
    x = x - np.floor(x)
    x[x >= 1.0] -= 1.0
    return x


def _flow(x, v, alive, t0, t1, eps, on_contact, budget=10_000):
    """Free flight plus contacts for a handful of particles from ``t0`` to ``t1``.

    ``on_contact(i, j, t)`` mutates ``v`` / ``alive``.  Positions are
    advanced eagerly; pair times only trust the minimum image up to a
    relative travel of ``0.5 - eps``, so long gaps are split.
    """
    now = t0
    n_contacts = 0
    while True:
        idx = np.flatnonzero(alive)
        best, bi, bj = math.inf, -1, -1
        horizon = math.inf
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                i, j = idx[a], idx[b]
                dv = v[i] - v[j]
                sp = math.sqrt(float(dv @ dv))
                if sp > 0:
                    horizon = min(horizon, (0.5 - eps) / sp * (1.0 - 1e-9))
                s = _engine.pair_time(torus_displacement(x[i], x[j]), dv, float(eps))
                if 0 <= s < best:
                    best, bi, bj = s, i, j
        if now + best > t1:
            step = min(t1 - now, horizon)
            x[alive] = _wrap(x[alive] + step * v[alive])
            now += step
            if now >= t1:
                return n_contacts
            continue
        x[alive] = _wrap(x[alive] + best * v[alive])
        now += best
        n_contacts += 1
        if n_contacts > budget:
            raise EncounterBudgetExceeded(f"more than {budget} encounters")
        on_contact(bi, bj, now)


def _elastic(x, v, eps):
    def hit(i, j, t):
        om = torus_displacement(x[i], x[j])
        om /= np.linalg.norm(om)
        v[i], v[j] = scatter(v[i], v[j], om)
    return hit


@dataclass
class PseudoTrajectory:
    """Backward construction record.

    ``tree[j] = (a_j, s_j)`` attaches particle ``M + j`` (0-based labels) to
    ``a_j`` at time ``params[j][0]`` with impact vector ``params[j][1]`` and
    velocity ``params[j][2]``.  ``x``/``v`` hold the configuration at the
    start of the window.
    """

    roots_x: np.ndarray
    roots_v: np.ndarray
    tree: list
    params: list
    window: tuple
    eps: float
    x: np.ndarray | None = None
    v: np.ndarray | None = None
    recollisions: list = field(default_factory=list)
    events: list = field(default_factory=list)
    valid: bool = True
    reason: str = ""

    @property
    def M(self) -> int:
        return self.roots_x.shape[0]

    @property
    def N(self) -> int:
        return len(self.tree)

    def signs(self):
        """``(S, S_bar)`` in creation order; the added particle (largest label)
        is the one that disappears in the forward flow, so ``S_bar`` is all -1."""
        return [int(s) for _, s in self.tree], [-1] * self.N

    def to_json(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return {"roots_x": arr(self.roots_x), "roots_v": arr(self.roots_v),
                "tree": [[int(a), int(s)] for a, s in self.tree],
                "params": [[float(t), arr(om), arr(u)] for t, om, u in self.params],
                "window": list(self.window), "eps": self.eps, "x": arr(self.x), "v": arr(self.v),
                "recollisions": [[float(t), int(i), int(j)] for t, i, j in self.recollisions],
                "valid": self.valid, "reason": self.reason}


def build_backward_pseudo_trajectory(roots_x, roots_v, tree, params, window, eps: float) -> PseudoTrajectory:
    """Backward pseudo-trajectory on ``window = (theta - delta, theta)``.

    Starting from the roots at ``theta``: transport backward with specular
    reflection, add particle ``M + j`` at ``x_{a_j} + eps s_j omega_j`` with
    velocity ``u_j`` at time ``t_j``, scatter the pair if ``s_j > 0``, and
    finally transport to ``theta - delta``.  Inadmissible parameters (overlap
    at creation, ``omega.(u - v_a) <= 0``, or a recollision of a creation
    pair, which makes the forward flow ambiguous) give ``valid=False``.
    """
    rx = np.array(roots_x, dtype=float).reshape(len(roots_x), -1)
    rv = np.array(roots_v, dtype=float).reshape(rx.shape)
    M, d = rx.shape
    lo, hi = map(float, window)
    if len(tree) != len(params):
        raise ValueError("tree and params must have equal length")
    times = [float(p[0]) for p in params]
    if any(not lo < t < hi for t in times) or any(b >= a for a, b in zip(times, times[1:])):
        raise ValueError("creation times must be strictly decreasing inside the window")
    for j, (a, s) in enumerate(tree):
        if not 0 <= a < M + j or s not in (1, -1):
            raise ValueError(f"bad tree entry {j}: ({a}, {s})")
    pt = PseudoTrajectory(rx.copy(), rv.copy(), [(int(a), int(s)) for a, s in tree],
                          [(float(t), np.asarray(om, float), np.asarray(u, float)) for t, om, u in params],
                          (lo, hi), float(eps))
    n = M + len(tree)
    x = np.zeros((n, d))
    v = np.zeros((n, d))
    x[:M], v[:M] = _wrap(rx.copy()), rv.copy()
    alive = np.zeros(n, dtype=bool)
    alive[:M] = True
    pairs = set()

    def hit(i, j, t):
        # backward time is -t
        om = torus_displacement(x[i], x[j])
        om /= np.linalg.norm(om)
        v[i], v[j] = scatter(v[i], v[j], om)
        pt.recollisions.append((-t, int(min(i, j)), int(max(i, j))))

    now = hi
    for j, ((a, s), (t, om, u)) in enumerate(zip(pt.tree, pt.params)):
        v *= -1.0
        _flow(x, v, alive, -now, -t, eps, hit)
        v *= -1.0
        now = t
        om = om / np.linalg.norm(om)
        flux = float(om @ (u - v[a]))
        if flux <= 0:
            pt.valid, pt.reason = False, f"non-positive flux at creation {j}"
            return pt
        new = M + j
        x[new] = _wrap(x[a] + eps * s * om)
        others = np.flatnonzero(alive)
        others = others[others != a]
        if others.size:
            dist = np.linalg.norm(torus_displacement(x[new][None, :], x[others]), axis=1)
            if np.any(dist <= eps):
                pt.valid, pt.reason = False, f"overlap at creation {j}"
                return pt
        v[new] = u
        if s > 0:
            v[a], v[new] = scatter(v[a], v[new], om)
        alive[new] = True
        pairs.add((min(a, new), max(a, new)))
        pt.events.append({"time": t, "kind": "creation", "label": new, "parent": a, "sign": s})
    v *= -1.0
    _flow(x, v, alive, -now, -lo, eps, hit)
    v *= -1.0
    bad = [r for r in pt.recollisions if (r[1], r[2]) in pairs]
    if bad:
        pt.valid, pt.reason = False, f"recollision of creation pair {bad[0][1:]}"
    pt.x, pt.v = x, v
    return pt


@dataclass
class ForwardResult:
    labels: np.ndarray
    x: np.ndarray
    v: np.ndarray
    annihilations: list
    n_encounters: int
    n_scatterings: int


def reconstruct_forward(x0, v0, window, eps: float, S=(), S_bar=(), tree=None,
                        n_roots: int | None = None, max_encounters: int = 1000) -> ForwardResult:
    """Forward flow on ``window`` with annihilations.

    Annihilation ``l`` (processed for ``l = N-1, ..., 0``, the reverse of
    creation order) is triggered by the encounter of the pair
    ``(a_l, n_roots + l)`` when ``tree`` is given, or by the next encounter
    otherwise.  ``S_bar[l] = -1`` removes the particle with the larger label,
    ``+1`` the smaller one; the survivor is scattered iff ``S[l] = +1``.
    Every other encounter is an elastic collision.  Each annihilation
    records ``(t, omega, u)`` recovered in the backward convention.
    """
    x = _wrap(np.array(x0, dtype=float))
    v = np.array(v0, dtype=float)
    n = x.shape[0]
    S, S_bar = list(S), list(S_bar)
    if len(S) != len(S_bar):
        raise ValueError("S and S_bar must have equal length")
    N = len(S)
    M = n - N if n_roots is None else n_roots
    alive = np.ones(n, dtype=bool)
    pending = list(range(N - 1, -1, -1))
    ann: list = []
    counts = {"enc": 0, "sc": 0}

    def hit(i, j, t):
        counts["enc"] += 1
        if counts["enc"] > max_encounters:
            raise EncounterBudgetExceeded(f"more than {max_encounters} encounters")
        lo_, hi_ = min(i, j), max(i, j)
        l = None
        if pending:
            if tree is None:
                l = pending[0]
            else:
                l = next((q for q in pending if (min(tree[q][0], M + q), max(tree[q][0], M + q)) == (lo_, hi_)), None)
        om = torus_displacement(x[i], x[j])
        om /= np.linalg.norm(om)
        if l is None:
            v[i], v[j] = scatter(v[i], v[j], om)
            counts["sc"] += 1
            return
        pending.remove(l)
        gone, keep = (hi_, lo_) if S_bar[l] == -1 else (lo_, hi_)
        # omega from the survivor towards the removed particle, divided by s
        om_k = torus_displacement(x[gone], x[keep])
        om_k /= np.linalg.norm(om_k)
        if S[l] > 0:
            vk, vg = scatter(v[keep], v[gone], om_k)
        else:
            vk, vg = v[keep].copy(), v[gone].copy()
        v[keep] = vk
        alive[gone] = False
        ann.append({"index": l, "time": t, "removed": int(gone), "survivor": int(keep),
                    "omega": (S[l] * om_k).copy(), "u": vg.copy(), "scattered": S[l] > 0})

    _flow(x, v, alive, float(window[0]), float(window[1]), eps, hit, budget=max_encounters + 1)
    labels = np.flatnonzero(alive)
    ann.sort(key=lambda r: r["index"])
    return ForwardResult(labels, x[labels], v[labels], ann, counts["enc"], counts["sc"])


def round_trip_error(pt: PseudoTrajectory) -> float:
    """Max deviation of the forward reconstruction from the recorded roots and
    parameters; ``inf`` if the set of survivors or annihilations differs."""
    S, Sb = pt.signs()
    fr = reconstruct_forward(pt.x, pt.v, pt.window, pt.eps, S, Sb, tree=pt.tree, n_roots=pt.M)
    if list(fr.labels) != list(range(pt.M)) or len(fr.annihilations) != pt.N:
        return math.inf
    err = max(float(np.max(np.abs(torus_displacement(fr.x, pt.roots_x)))),
              float(np.max(np.abs(fr.v - pt.roots_v))))
    for rec, (t, om, u) in zip(fr.annihilations, pt.params):
        om = om / np.linalg.norm(om)
        err = max(err, abs(rec["time"] - t), float(np.max(np.abs(rec["omega"] - om))),
                  float(np.max(np.abs(rec["u"] - u))))
    return err


def random_pseudo_trajectory(rng: np.random.Generator, d: int = 2, eps: float = 0.01,
                             M: int = 2, N: int = 3, theta: float = 0.0, delta: float = 0.05,
                             spread: float = 0.1) -> PseudoTrajectory:
    """Random construction: roots within ``spread`` of each other, uniform
    creation times, uniform trees and signs, impact vectors flipped onto the
    positive-flux side.  The result may still be invalid (overlap or a
    recollision of a creation pair)."""
    x = np.empty((M, d))
    x[0] = rng.random(d)
    for m in range(1, M):
        while True:
            x[m] = _wrap(x[0] + spread * (2 * rng.random(d) - 1))
            if np.all(np.linalg.norm(torus_displacement(x[m][None, :], x[:m]), axis=1) > 2 * eps):
                break
    v = rng.standard_normal((M, d))
    times = np.sort(rng.uniform(theta - delta, theta, N))[::-1]
    tree, params = [], []
    # velocities of parents at creation are unknown before the construction,
    # so the flux sign is fixed by a dry run of each prefix
    for j in range(N):
        a = int(rng.integers(M + j))
        s = int(rng.choice([-1, 1]))
        om = rng.standard_normal(d)
        om /= np.linalg.norm(om)
        u = rng.standard_normal(d)
        pre = build_backward_pseudo_trajectory(x, v, tree + [(a, s)], params + [(times[j], om, u)],
                                               (theta - delta, theta), eps)
        if not pre.valid and pre.reason.startswith("non-positive flux"):
            om = -om
        tree.append((a, s))
        params.append((float(times[j]), om, u))
    return build_backward_pseudo_trajectory(x, v, tree, params, (theta - delta, theta), eps)
