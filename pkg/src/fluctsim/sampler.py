"""Grand-canonical hard-sphere equilibrium sampler.

The target law draws ``N`` with weight ``mu^N / N!``, positions uniform on the
torus subject to the hard-core constraint, and i.i.d. Maxwellian velocities.

``exact_rejection`` draws an ideal (Poisson) gas and keeps it only if no pair
overlaps, which is an exact draw from the conditioned law.  In the
Boltzmann-Grad scaling the expected number of overlapping pairs is about
``V_d eps^d mu^2 / 2 = V_d eps^{2-d} / 2``, so rejection is cheap in d=2
(acceptance near ``exp(-pi/2)``) and hopeless in d=3 at small eps, where the
``birth_death`` Metropolis chain takes over.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import _engine
from .dynamics import SystemState
from .phasespace import DomainParams

__all__ = [
    "SamplerConfig",
    "SamplerDiagnostics",
    "RejectionBudgetExhausted",
    "sample_configuration",
    "mean_count_check",
    "unit_ball_volume",
    "depletion_constant",
    "poisson_mixture_mean",
    "has_overlap",
]


class RejectionBudgetExhausted(RuntimeError):
    pass


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def depletion_constant(d: int) -> float:
    """Documented ``C`` in ``1 - C eps <= E[N]/mu <= 1``.

    The second virial coefficient gives ``E[N]/mu = 1 - V_d eps + O(eps^2)``;
    ``C = 2 V_d`` leaves room for the quadratic correction at desk-scale eps.
    """
    return 2.0 * unit_ball_volume(d)


@dataclass(frozen=True)
class SamplerConfig:
    """``burn_in_sweeps`` counts single trial moves of the birth/death chain
    (birth, death or displacement); ``0`` selects the default ``100 * ceil(mu)``.
    ``hard_core=False`` switches the overlap test off (ideal-gas surrogate)."""

    mode: str = "exact_rejection"
    burn_in_sweeps: int = 0
    max_rejections: int = 10_000
    hard_core: bool = True
    max_disp: float = 0.05

    def __post_init__(self):
        if self.mode not in ("exact_rejection", "birth_death"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.max_rejections < 1:
            raise ValueError("max_rejections must be positive")

    def burn_in(self, domain: DomainParams) -> int:
        floor = 100 * math.ceil(domain.mu_eps)
        if self.burn_in_sweeps == 0:
            return floor
        if self.burn_in_sweeps < floor:
            raise ValueError(f"burn_in_sweeps must be >= 100*ceil(mu_eps) = {floor}")
        return self.burn_in_sweeps

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SamplerDiagnostics:
    mean_count: float
    acceptance_rate: float
    samples_drawn: int
    mu_eps: float = float("nan")
    count_stderr: float = float("nan")

    @property
    def ratio(self) -> float:
        return self.mean_count / self.mu_eps

    @property
    def ratio_stderr(self) -> float:
        return self.count_stderr / self.mu_eps

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ratio"] = self.ratio
        return out


def has_overlap(x: np.ndarray, eps: float) -> bool:
    """True if some pair sits at minimum-image distance <= eps."""
    n = x.shape[0]
    if n < 2:
        return False
    if n < 300:
        return bool(_engine.any_overlap(x, eps))
    tree = cKDTree(x, boxsize=1.0)
    return bool(tree.query_pairs(eps, output_type="ndarray").shape[0])


def _draw_ideal(domain, rng):
    n = int(rng.poisson(domain.mu_eps))
    x = rng.random((n, domain.d))
    v = rng.standard_normal((n, domain.d))
    return x, v


def sample_configuration(domain: DomainParams, cfg: SamplerConfig, rng: np.random.Generator,
                         stats: dict | None = None) -> SystemState:
    """One configuration from the grand-canonical hard-sphere measure.

    ``stats`` (optional) accumulates ``attempts`` / ``accepted`` counters.
    """
    if domain.mu_eps * domain.eps ** domain.d > 0.1 + 1e-12:
        raise ValueError("low-density regime required: mu_eps * eps^d <= 0.1")
    if not cfg.hard_core:
        x, v = _draw_ideal(domain, rng)
        if stats is not None:
            stats["attempts"] = stats.get("attempts", 0) + 1
            stats["accepted"] = stats.get("accepted", 0) + 1
        return SystemState(domain, x, v)
    if cfg.mode == "exact_rejection":
        for attempt in range(1, cfg.max_rejections + 1):
            x, v = _draw_ideal(domain, rng)
            if not has_overlap(x, domain.eps):
                if stats is not None:
                    stats["attempts"] = stats.get("attempts", 0) + attempt
                    stats["accepted"] = stats.get("accepted", 0) + 1
                return SystemState(domain, x, v)
        raise RejectionBudgetExhausted(
            f"no overlap-free draw in {cfg.max_rejections} attempts "
            f"(d={domain.d}, eps={domain.eps}); use mode='birth_death'")
    # birth/death: start from a thinned ideal gas, then burn in
    x, v = _draw_ideal(domain, rng)
    if x.shape[0] > 1:
        tree = cKDTree(x, boxsize=1.0)
        bad = np.unique(tree.query_pairs(domain.eps, output_type="ndarray").ravel())
        keep = np.setdiff1d(np.arange(x.shape[0]), bad)
        x, v = x[keep], v[keep]
    n_steps = cfg.burn_in(domain)
    n_max = int(domain.mu_eps + 20 * math.sqrt(domain.mu_eps) + 50)
    seed = int(rng.integers(0, 2**31 - 1))
    x, v, acc = _engine.birth_death_chain(x, v, float(domain.mu_eps), float(domain.eps),
                                          n_steps, float(cfg.max_disp), seed, n_max)
    if stats is not None:
        stats["attempts"] = stats.get("attempts", 0) + n_steps
        stats["accepted"] = stats.get("accepted", 0) + int(acc)
    return SystemState(domain, x, v)


def mean_count_check(domain: DomainParams, cfg: SamplerConfig, n_draws: int,
                     rng: np.random.Generator) -> SamplerDiagnostics:
    """Mean particle number over ``n_draws`` independent draws."""
    if n_draws < 1000:
        raise ValueError("mean_count_check needs n_draws >= 1e3")
    stats: dict = {}
    counts = np.empty(n_draws)
    for k in range(n_draws):
        counts[k] = sample_configuration(domain, cfg, rng, stats).n
    return SamplerDiagnostics(
        mean_count=float(counts.mean()),
        acceptance_rate=stats["accepted"] / stats["attempts"],
        samples_drawn=n_draws,
        mu_eps=domain.mu_eps,
        count_stderr=float(counts.std(ddof=1) / math.sqrt(n_draws)),
    )


def poisson_mixture_mean(domain: DomainParams, n_mc: int, rng: np.random.Generator,
                         n_sigma: float = 8.0):
    """Oracle for ``E[N]`` under the hard-core measure.

    Enumerates ``N`` over the bulk of the Poisson(mu) law and estimates the
    per-``N`` non-overlap probability ``a_N`` by Monte Carlo, then returns
    ``sum N p_N a_N / sum p_N a_N`` and a delta-method standard error.
    """
    from scipy.stats import poisson

    mu = domain.mu_eps
    lo = max(0, int(mu - n_sigma * math.sqrt(mu)))
    hi = int(mu + n_sigma * math.sqrt(mu)) + 1
    ns = np.arange(lo, hi + 1)
    pn = poisson.pmf(ns, mu)
    a = np.empty(ns.size)
    for idx, n in enumerate(ns):
        ok = 0
        for _ in range(n_mc):
            if not has_overlap(rng.random((n, domain.d)), domain.eps):
                ok += 1
        a[idx] = ok / n_mc
    w = pn * a
    z = w.sum()
    mean = float((ns * w).sum() / z)
    # each a_N is binomial; propagate through the ratio
    var_a = a * (1 - a) / n_mc
    grad = pn * (ns - mean) / z
    return mean, float(math.sqrt(np.sum(grad ** 2 * var_a)))
