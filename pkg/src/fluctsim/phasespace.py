"""Torus geometry, Maxwellian velocities and the test-function basis.

Positions live on the unit torus ``[0, 1)^d``; velocities are distributed
according to the standard Maxwellian ``M(v) = (2 pi)^{-d/2} exp(-|v|^2 / 2)``.

Test functions are real observables ``h(x, v)``.  The Fourier-Hermite family
is orthonormal for the weighted inner product

    <g, h> = \\int g h M dx dv,

using real Fourier modes ``sqrt(2) cos(2 pi k.x)`` / ``sqrt(2) sin(2 pi k.x)``
and normalised probabilists' Hermite polynomials ``He_n(v) / sqrt(n!)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DomainParams",
    "Particle",
    "TestFunction",
    "FourierHermite",
    "CollisionInvariant",
    "Custom",
    "torus_displacement",
    "maxwellian_sample",
    "evaluate",
    "gram_inner",
    "hermite_table",
    "test_function_from_json",
]


@dataclass(frozen=True)
class DomainParams:
    """Spatial dimension and sphere diameter in the Boltzmann-Grad scaling."""

    d: int
    eps: float

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"d must be 2 or 3, got {self.d}")
        if not 0.0 < self.eps < 0.25:
            raise ValueError(f"eps must lie in (0, 0.25), got {self.eps}")

    @property
    def mu_eps(self) -> float:
        return self.eps ** (-(self.d - 1))

    def to_dict(self) -> dict:
        return {"d": self.d, "eps": self.eps}


@dataclass(frozen=True)
class Particle:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        object.__setattr__(self, "x", x - np.floor(x))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))


def torus_displacement(x1, x2) -> np.ndarray:
    """Minimum-image representative of ``x1 - x2``, each coordinate in [-0.5, 0.5)."""
    dx = np.asarray(x1, dtype=float) - np.asarray(x2, dtype=float)
    return dx - np.floor(dx + 0.5)


def maxwellian_sample(rng: np.random.Generator, d: int = 3, size=None) -> np.ndarray:
    """Draw velocities from the unit Maxwellian (i.i.d. standard normal components)."""
    shape = (d,) if size is None else (size, d)
    return rng.standard_normal(shape)


def hermite_table(v: np.ndarray, nmax: int) -> np.ndarray:
    """Normalised Hermite values ``He_n(v)/sqrt(n!)`` for n = 0..nmax.

    Returns an array of shape ``(nmax + 1,) + v.shape``.
    """
    v = np.asarray(v, dtype=float)
    out = np.empty((nmax + 1,) + v.shape)
    out[0] = 1.0
    if nmax >= 1:
        out[1] = v
    for n in range(1, nmax):
        out[n + 1] = (v * out[n] - math.sqrt(n) * out[n - 1]) / math.sqrt(n + 1)
    return out


class TestFunction:
    """Base class for observables ``h(x, v)``.

    Subclasses implement :meth:`__call__` on arrays ``x`` of shape ``(n, d)``
    and ``v`` of shape ``(n, d)``, returning shape ``(n,)``.
    """

    __test__ = False  # keep pytest from collecting this class

    sup_norm: float | None = None

    def __call__(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def id(self) -> str:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


def _canonical_sign(k: Sequence[int]) -> int:
    for c in k:
        if c != 0:
            return 1 if c > 0 else -1
    return 0


@dataclass(frozen=True)
class FourierHermite(TestFunction):
    """Orthonormal basis element ``F_k(x) prod_j h_{alpha_j}(v_j)``.

    The integer wave vector ``k`` labels both members of a real Fourier pair:
    if the first nonzero entry of ``k`` is positive the spatial factor is
    ``sqrt(2) cos(2 pi k.x)``, otherwise it is ``sqrt(2) sin(2 pi (-k).x)``.
    ``k = 0`` gives the constant 1.
    """

    k: tuple
    alpha: tuple

    def __post_init__(self):
        object.__setattr__(self, "k", tuple(int(c) for c in self.k))
        object.__setattr__(self, "alpha", tuple(int(a) for a in self.alpha))
        if len(self.k) != len(self.alpha):
            raise ValueError("k and alpha must have the same dimension")
        if any(a < 0 for a in self.alpha):
            raise ValueError("Hermite indices must be nonnegative")

    @property
    def d(self) -> int:
        return len(self.k)

    @property
    def degree(self) -> int:
        return sum(self.alpha)

    @property
    def parity(self) -> str:
        s = _canonical_sign(self.k)
        return "const" if s == 0 else ("cos" if s > 0 else "sin")

    @property
    def wave(self) -> tuple:
        """Canonical (positive) wave vector of the spatial factor."""
        s = _canonical_sign(self.k)
        return tuple(s * c for c in self.k) if s else self.k

    def spatial(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        s = _canonical_sign(self.k)
        if s == 0:
            return np.ones(x.shape[0])
        phase = 2.0 * math.pi * (x @ np.asarray(self.wave, dtype=float))
        return math.sqrt(2.0) * (np.cos(phase) if s > 0 else np.sin(phase))

    def velocity(self, v: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(v)
        out = np.ones(v.shape[0])
        for j, a in enumerate(self.alpha):
            if a:
                out = out * hermite_table(v[:, j], a)[a]
        return out

    def __call__(self, x, v):
        return self.spatial(x) * self.velocity(v)

    @property
    def id(self) -> str:
        return "fh:k=" + ",".join(map(str, self.k)) + ":a=" + ",".join(map(str, self.alpha))

    def to_json(self) -> dict:
        return {"kind": "fourier_hermite", "k": list(self.k), "alpha": list(self.alpha)}


@dataclass(frozen=True)
class CollisionInvariant(TestFunction):
    """``mass`` (1), ``momentum`` (v_j, with component ``j``) or ``energy`` (|v|^2)."""

    which: str
    j: int = 0

    def __post_init__(self):
        if self.which not in ("mass", "momentum", "energy"):
            raise ValueError(f"unknown collision invariant {self.which!r}")

    def __call__(self, x, v):
        v = np.atleast_2d(v)
        if self.which == "mass":
            return np.ones(v.shape[0])
        if self.which == "momentum":
            return v[:, self.j].copy()
        return np.einsum("ij,ij->i", v, v)

    @property
    def id(self) -> str:
        return f"inv:momentum{self.j}" if self.which == "momentum" else f"inv:{self.which}"

    def to_json(self) -> dict:
        out = {"kind": "collision_invariant", "which": self.which}
        if self.which == "momentum":
            out["j"] = self.j
        return out


@dataclass(frozen=True)
class Custom(TestFunction):
    """User-supplied bounded observable ``fn(x, v) -> (n,)``.

    Only ``name`` and ``sup_norm`` survive JSON serialisation; deserialising
    requires the name to be present in :data:`CUSTOM_REGISTRY`.
    """

    fn: Callable = field(compare=False)
    name: str = "custom"
    sup_norm: float | None = None

    def __call__(self, x, v):
        return np.asarray(self.fn(np.atleast_2d(x), np.atleast_2d(v)), dtype=float)

    @property
    def id(self) -> str:
        return f"custom:{self.name}"

    def to_json(self) -> dict:
        out = {"kind": "custom", "name": self.name}
        if self.sup_norm is not None:
            out["sup_norm"] = self.sup_norm
        return out


CUSTOM_REGISTRY: dict[str, Callable] = {}


def test_function_from_json(obj) -> TestFunction:
    if isinstance(obj, str):
        obj = json.loads(obj)
    kind = obj.get("kind")
    if kind == "fourier_hermite":
        return FourierHermite(tuple(obj["k"]), tuple(obj["alpha"]))
    if kind == "collision_invariant":
        return CollisionInvariant(obj["which"], int(obj.get("j", 0)))
    if kind == "custom":
        name = obj["name"]
        if name not in CUSTOM_REGISTRY:
            raise KeyError(f"custom test function {name!r} is not registered")
        return Custom(CUSTOM_REGISTRY[name], name=name, sup_norm=obj.get("sup_norm"))
    raise ValueError(f"unknown test-function kind {kind!r}")


def evaluate(h: TestFunction, particle: Particle) -> float:
    """Value of ``h`` at a single particle."""
    return float(h(particle.x[None, :], particle.v[None, :])[0])


def gram_inner(h1: TestFunction, h2: TestFunction, n_mc: int = 100_000,
               rng: np.random.Generator | None = None, d: int | None = None):
    """Weighted inner product ``\\int h1 h2 M dx dv`` and its standard error.

    Exact (zero error) when both arguments are Fourier-Hermite elements,
    otherwise a Monte Carlo average over uniform positions and Maxwellian
    velocities.
    """
    if isinstance(h1, FourierHermite) and isinstance(h2, FourierHermite):
        return (1.0 if h1 == h2 else 0.0), 0.0
    if n_mc < 10_000:
        raise ValueError("gram_inner needs n_mc >= 1e4")
    if d is None:
        d = next((h.d for h in (h1, h2) if isinstance(h, FourierHermite)), 3)
    rng = np.random.default_rng() if rng is None else rng
    x = rng.random((n_mc, d))
    v = rng.standard_normal((n_mc, d))
    prod = h1(x, v) * h2(x, v)
    return float(prod.mean()), float(prod.std(ddof=1) / math.sqrt(n_mc))
