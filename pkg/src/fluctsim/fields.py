"""Empirical and fluctuation fields, distinct-index products and moment tests.

Conventions: ``pi(h) = mu^{-1} sum_i h(z_i)``, ``zeta(h) = sqrt(mu) (pi(h) - E pi(h))``
with the expectation replaced by the ensemble mean at each sample time.

Sums over ordered tuples of *distinct* particle indices are evaluated from
single-index power sums by Moebius inversion on the partition lattice,

    sum_{i_1..i_m distinct} prod_k h_k(z_{i_k})
        = sum_{partitions P of {1..m}} prod_{B in P} (-1)^{|B|-1} (|B|-1)!  S_B,

where ``S_B = sum_i prod_{k in B} h_k(z_i)``.  This is O(N * Bell(m)).
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .phasespace import CollisionInvariant, FourierHermite, TestFunction, gram_inner

__all__ = [
    "empirical_field",
    "m_particle_field",
    "distinct_tuple_sum",
    "OstarSpec",
    "ostar_product",
    "FieldSample",
    "FieldEnsemble",
    "fluctuation_field",
    "maxwellian_mean",
    "MomentRequest",
    "MomentEstimate",
    "estimate_moments",
    "gaussianity",
    "jackknife",
    "fisher_z_interval",
    "write_moments_csv",
]

MAX_PUBLIC_M = 3
MAX_TOTAL_M = 6


def empirical_field(state, h: TestFunction) -> float:
    if state.n == 0:
        return 0.0
    return float(np.sum(h(state.x, state.v)) / state.domain.mu_eps)


@lru_cache(maxsize=None)
def _set_partitions(m: int):
    """All set partitions of range(m) as tuples of tuples."""
    if m == 0:
        return ((),)
    out = []
    for part in _set_partitions(m - 1):
        # put element m-1 in its own block or into each existing block
        out.append(part + ((m - 1,),))
        for b in range(len(part)):
            new = list(part)
            new[b] = part[b] + (m - 1,)
            out.append(tuple(new))
    return tuple(out)


def distinct_tuple_sum(vals: np.ndarray) -> float:
    """``sum over distinct (i_1..i_m) of prod_k vals[k, i_k]`` for ``vals`` of shape (m, N)."""
    vals = np.asarray(vals, dtype=float)
    m = vals.shape[0]
    if m == 0:
        return 1.0
    if m > MAX_TOTAL_M:
        raise ValueError(f"distinct-tuple sums limited to m <= {MAX_TOTAL_M}")
    cache = {}
    total = 0.0
    for part in _set_partitions(m):
        term = 1.0
        for block in part:
            if block not in cache:
                cache[block] = float(np.prod(vals[list(block)], axis=0).sum())
            nb = len(block)
            term *= (-1) ** (nb - 1) * math.factorial(nb - 1) * cache[block]
        total += term
    return total


def m_particle_field(state, H_m: Sequence[TestFunction], m: int | None = None) -> float:
    """``mu^{-m} sum over distinct ordered m-tuples of (h_1 x ... x h_m)``.

    ``H_m`` is the list of single-particle factors of a tensor product; the
    sum over all ordered tuples is already symmetric in the factors.
    """
    H_m = list(H_m)
    m = len(H_m) if m is None else m
    if m != len(H_m):
        raise ValueError("m must equal the number of tensor factors")
    if m > MAX_PUBLIC_M:
        raise ValueError(f"m_particle_field supports m <= {MAX_PUBLIC_M}")
    return _m_field(state, H_m)


def _m_field(state, factors) -> float:
    m = len(factors)
    if m == 0:
        return 1.0
    if state.n == 0:
        return 0.0
    vals = np.stack([h(state.x, state.v) for h in factors])
    return distinct_tuple_sum(vals) / state.domain.mu_eps ** m


@dataclass(frozen=True)
class OstarSpec:
    """Factors ``(m_j, [h_{j,1}, ..., h_{j,m_j}])`` of a distinct-index product."""

    factors: tuple

    def __post_init__(self):
        fs = tuple((int(m), tuple(hs)) for m, hs in self.factors)
        for m, hs in fs:
            if m != len(hs) or m < 1:
                raise ValueError("each factor needs m >= 1 single-particle functions")
        if sum(m for m, _ in fs) > MAX_TOTAL_M:
            raise ValueError(f"total particle count of the product limited to {MAX_TOTAL_M}")
        if len(fs) > 3:
            raise ValueError("at most three factors")
        object.__setattr__(self, "factors", fs)


def ostar_product(spec: OstarSpec, state, centerings: Sequence[float]) -> float:
    """``mu^{|B|/2} sum_{A subset B} pi_{M_A}(tensor of factors in A) prod_{j not in A} (-E_j)``.

    ``centerings[j]`` is the (ensemble) expectation of ``pi_{m_j}`` of factor j.
    """
    nb = len(spec.factors)
    if len(centerings) != nb:
        raise ValueError("one centering per factor")
    total = 0.0
    for r in range(nb + 1):
        for A in itertools.combinations(range(nb), r):
            hs = [h for j in A for h in spec.factors[j][1]]
            term = _m_field(state, hs)
            for j in range(nb):
                if j not in A:
                    term *= -centerings[j]
            total += term
    return state.domain.mu_eps ** (nb / 2) * total


# --------------------------------------------------------------------------
# ensembles


def maxwellian_mean(h: TestFunction, d: int, n_mc: int = 200_000, rng=None) -> float:
    """``\\int h M dx dv``, exact for basis elements and invariants."""
    if isinstance(h, FourierHermite):
        return 1.0 if (not any(h.k) and not any(h.alpha)) else 0.0
    if isinstance(h, CollisionInvariant):
        return {"mass": 1.0, "momentum": 0.0, "energy": float(d)}[h.which]
    one = CollisionInvariant("mass")
    return gram_inner(h, one, n_mc=n_mc, rng=rng, d=d)[0]


@dataclass
class FieldSample:
    run_id: int
    time: float
    values: dict
    raw: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class FieldEnsemble:
    """Raw empirical fields ``raw[r, t, h] = pi_t(h)`` for runs ``r``."""

    mu: float
    times: np.ndarray
    test_ids: list
    raw: np.ndarray
    run_ids: np.ndarray = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.raw = np.asarray(self.raw, dtype=float)
        if self.run_ids is None:
            self.run_ids = np.arange(self.raw.shape[0])
        if self.raw.shape[1:] != (self.times.size, len(self.test_ids)):
            raise ValueError("raw must have shape (runs, times, test functions)")

    @property
    def n_runs(self) -> int:
        return self.raw.shape[0]

    def t_index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9:
            raise KeyError(f"time {t} not sampled")
        return k

    def h_index(self, test_id: str) -> int:
        return self.test_ids.index(test_id)

    def zeta(self, centering: str = "ensemble_mean", maxwellian_means=None) -> np.ndarray:
        if centering == "ensemble_mean":
            if self.n_runs < 100:
                raise ValueError("ensemble-mean centering needs at least 100 runs")
            c = self.raw.mean(axis=0, keepdims=True)
        elif centering == "maxwellian":
            c = np.asarray(maxwellian_means, dtype=float)[None, None, :]
        else:
            raise ValueError(f"unknown centering {centering!r}")
        return math.sqrt(self.mu) * (self.raw - c)

    def subset(self, runs) -> "FieldEnsemble":
        return FieldEnsemble(self.mu, self.times, list(self.test_ids), self.raw[runs],
                             self.run_ids[runs])

    def samples(self, centering: str = "ensemble_mean", maxwellian_means=None):
        z = self.zeta(centering, maxwellian_means)
        for r in range(self.n_runs):
            for k, t in enumerate(self.times):
                yield FieldSample(int(self.run_ids[r]), float(t),
                                  dict(zip(self.test_ids, map(float, z[r, k]))),
                                  dict(zip(self.test_ids, map(float, self.raw[r, k]))))

    def save(self, path) -> None:
        np.savez_compressed(path, mu=self.mu, times=self.times, raw=self.raw,
                            run_ids=self.run_ids, test_ids=np.array(self.test_ids))

    @classmethod
    def load(cls, path) -> "FieldEnsemble":
        with np.load(path) as f:
            return cls(float(f["mu"]), f["times"], [str(s) for s in f["test_ids"]],
                       f["raw"], f["run_ids"])


def fluctuation_field(samples: Sequence[FieldSample], mu: float,
                      centering: str = "ensemble_mean", maxwellian_means: dict | None = None):
    """Centre a fixed-time ensemble of :class:`FieldSample` records in place
    of their ``values`` and return them."""
    samples = list(samples)
    ids = list(samples[0].raw)
    raw = np.array([[s.raw[h] for h in ids] for s in samples])
    if centering == "ensemble_mean":
        if len(samples) < 100:
            raise ValueError("ensemble-mean centering needs at least 100 runs")
        c = raw.mean(axis=0)
    elif centering == "maxwellian":
        c = np.array([maxwellian_means[h] for h in ids])
    else:
        raise ValueError(f"unknown centering {centering!r}")
    z = math.sqrt(mu) * (raw - c)
    return [FieldSample(s.run_id, s.time, dict(zip(ids, map(float, row))), dict(s.raw))
            for s, row in zip(samples, z)]


# --------------------------------------------------------------------------
# moments


def jackknife(stat, data: np.ndarray, n_groups: int = 100):
    """Delete-a-group jackknife.

    ``stat(subset) -> array`` is evaluated on the full sample and with each
    of ``n_groups`` contiguous blocks of rows removed.  Returns
    ``(estimate, std_error)`` arrays.
    """
    n = data.shape[0]
    g = min(n_groups, n)
    full = np.asarray(stat(data), dtype=float)
    edges = np.linspace(0, n, g + 1).astype(int)
    reps = []
    for a, b in zip(edges[:-1], edges[1:]):
        keep = np.concatenate([np.arange(0, a), np.arange(b, n)])
        reps.append(np.asarray(stat(data[keep]), dtype=float))
    reps = np.array(reps)
    se = np.sqrt((g - 1) / g * np.sum((reps - reps.mean(axis=0)) ** 2, axis=0))
    return full, se


@dataclass(frozen=True)
class MomentRequest:
    times: tuple
    test_ids: tuple

    @property
    def P(self) -> int:
        return len(self.times)


@dataclass
class MomentEstimate:
    P: int
    times: list
    test_ids: list
    estimate: float
    std_error: float
    n_runs: int
    wick_prediction: float = float("nan")
    diff_std_error: float = float("nan")
    z_score: float = float("nan")

    def to_row(self) -> dict:
        return {"P": self.P, "times": ";".join(map(repr, self.times)),
                "test_ids": ";".join(self.test_ids), "estimate": repr(self.estimate),
                "std_error": repr(self.std_error), "wick_prediction": repr(self.wick_prediction),
                "z_score": repr(self.z_score)}


def _centered(cols: np.ndarray) -> np.ndarray:
    return cols - cols.mean(axis=0, keepdims=True)


def _moment_stats(cols: np.ndarray) -> np.ndarray:
    """``[I_P, prediction, I_P - prediction]`` for columns ``cols`` (runs, P)."""
    z = _centered(cols)
    P = z.shape[1]
    ip = float(np.mean(np.prod(z, axis=1)))
    if P == 4:
        c = lambda a, b: float(np.mean(z[:, a] * z[:, b]))
        pred = c(0, 1) * c(2, 3) + c(0, 2) * c(1, 3) + c(0, 3) * c(1, 2)
    elif P in (1, 3):
        pred = 0.0
    else:
        pred = float("nan")
    return np.array([ip, pred, ip - pred])


def estimate_moments(ensemble: FieldEnsemble, plan: Sequence[MomentRequest],
                     n_groups: int = 100) -> list[MomentEstimate]:
    """Product moments ``E prod_k zeta_{t_k}(h_k)`` with jackknife errors.

    Each jackknife replicate recentres the fields, so the error bars include
    the uncertainty of the ensemble-mean centering.  For P=4 the Wick
    prediction (sum over the three pairings of the covariances, from the same
    ensemble) and the jackknife error of the difference are reported; for P=3
    the prediction is 0.
    """
    if ensemble.n_runs < 100:
        raise ValueError("estimate_moments needs at least 100 runs")
    sq = math.sqrt(ensemble.mu)
    out = []
    for req in plan:
        if req.P > 4 or req.P < 1:
            raise ValueError("moment order must be 1..4")
        cols = np.stack([ensemble.raw[:, ensemble.t_index(t), ensemble.h_index(h)] * sq
                         for t, h in zip(req.times, req.test_ids)], axis=1)
        est, se = jackknife(_moment_stats, cols, n_groups)
        pred = est[1]
        diff_se = se[2] if req.P in (1, 3, 4) else float("nan")
        z = (est[2] / diff_se) if req.P in (1, 3, 4) and diff_se > 0 else float("nan")
        out.append(MomentEstimate(req.P, list(req.times), list(req.test_ids), float(est[0]),
                                  float(se[0]), ensemble.n_runs, float(pred), float(diff_se),
                                  float(z)))
    return out


def _shape_stats(col: np.ndarray) -> np.ndarray:
    z = col - col.mean()
    m2 = np.mean(z ** 2)
    return np.array([np.mean(z ** 3) / m2 ** 1.5, np.mean(z ** 4) / m2 ** 2 - 3.0])


def gaussianity(ensemble: FieldEnsemble, t: float, test_id: str, n_groups: int = 100) -> dict:
    """Skewness and excess kurtosis of a single field, with jackknife errors."""
    col = ensemble.raw[:, ensemble.t_index(t), ensemble.h_index(test_id)]
    est, se = jackknife(_shape_stats, col, n_groups)
    return {"time": t, "test_id": test_id, "skewness": float(est[0]),
            "skewness_se": float(se[0]), "excess_kurtosis": float(est[1]),
            "excess_kurtosis_se": float(se[1])}


def fisher_z_interval(x: np.ndarray, y: np.ndarray, z_crit: float = 3.0):
    """Covariance interval from the Fisher transform of the correlation,
    rescaled by the sample standard deviations (cross-check for jackknife)."""
    n = x.size
    r = float(np.corrcoef(x, y)[0, 1])
    zr = math.atanh(max(min(r, 1 - 1e-15), -1 + 1e-15))
    h = z_crit / math.sqrt(n - 3)
    s = float(np.std(x, ddof=1) * np.std(y, ddof=1))
    return s * math.tanh(zr - h), s * math.tanh(zr + h)


def write_moments_csv(estimates: Sequence[MomentEstimate], path) -> None:
    cols = ["P", "times", "test_ids", "estimate", "std_error", "wick_prediction", "z_score"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for e in estimates:
            w.writerow(e.to_row())
