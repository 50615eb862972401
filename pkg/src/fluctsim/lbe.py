"""Galerkin form of the linearized hard-sphere Boltzmann generator.

Conventions (all matrices live in the orthonormal Fourier-Hermite coordinates
of :mod:`fluctsim.phasespace`, where the equilibrium covariance is the
identity):

    L(M phi) = -v.grad_x(M phi)
               + M(v) \\int M(w) [phi(v') + phi(w') - phi(v) - phi(w)] b dw domega,
    b = ((v - w).omega)_+,   omega over the whole unit sphere,

    B_kl = \\int phi_k L(M phi_l) dz            (generator, weak form)
    C_kl = 1/2 \\int M M b  Dphi_k Dphi_l       (noise covariance, x1 = x2)

with ``D phi = phi(v') + phi(w') - phi(v) - phi(w)``.  A coefficient vector
``a`` of ``g = sum a_l phi_l`` evolves by ``da/dt = B a`` and the equilibrium
time correlation is ``Cov(zeta_0(g), zeta_t(h)) = h^T exp(tB) g``.

Because Fourier modes are orthonormal and collisions act at a single point,
the collision block factorises as ``delta(F_k, F_l) * Lv[alpha_k, alpha_l]``
with a velocity-only matrix ``Lv``; the x integral is done exactly.
Symmetrising over ``v <-> w`` and pre/post-collisional variables gives
``Lv = -J / 4`` and ``C = J / 2`` with ``J = \\int M M b D D``, so
``B + B^T + C = 0`` holds identically.  The Monte Carlo assembly estimates
``Lv`` from the direct (non-symmetrised) four-term integrand and ``C`` from
independent draws of the ``D D`` form, so the identity is a real check.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import linalg, special

from .phasespace import CollisionInvariant, FourierHermite, TestFunction, hermite_table

__all__ = [
    "GalerkinBasis",
    "GeneratorMatrix",
    "NoiseMatrix",
    "FDReport",
    "OUState",
    "OUResult",
    "BalanceReport",
    "sector_basis",
    "velocity_operator_mc",
    "velocity_operator_quadrature",
    "assemble_generator",
    "assemble_noise",
    "fd_check",
    "dissipativity",
    "propagate_covariance",
    "propagate_covariance_rk4",
    "psd_sqrt",
    "ou_simulate",
    "ou_lagged_covariance",
    "stationary_covariance_em",
    "equilibrium_balance",
    "write_matrix_csv",
    "write_curve_csv",
]

SHARD = 1 << 16


def sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


# ----------------------------------------------------------------------------
# basis


def _wave_vectors(d: int, K: int):
    """Nonzero integer vectors with entries in [-K, K], one per +-pair."""
    out = []
    for k in itertools.product(range(-K, K + 1), repeat=d):
        first = next((c for c in k if c), 0)
        if first > 0:
            out.append(k)
    return out


def _alphas(d: int, A: int):
    out = [a for a in itertools.product(range(A + 1), repeat=d) if sum(a) <= A]
    out.sort(key=lambda a: (sum(a), tuple(-c for c in a)))
    return out


@dataclass(frozen=True)
class GalerkinBasis:
    """Ordered list of Fourier-Hermite elements.

    ``K`` and ``A`` record the cutoffs when the basis was built by
    :meth:`full` (``|k|_inf <= K``, ``|alpha| <= A``); for hand-made bases
    they are ``None``.
    """

    elements: tuple
    K: int | None = None
    A: int | None = None

    def __post_init__(self):
        els = tuple(self.elements)
        if not els:
            raise ValueError("empty basis")
        if not all(isinstance(e, FourierHermite) for e in els):
            raise TypeError("Galerkin bases hold FourierHermite elements only")
        if len({e.d for e in els}) != 1:
            raise ValueError("mixed dimensions in basis")
        if len(set(els)) != len(els):
            raise ValueError("duplicate basis elements")
        object.__setattr__(self, "elements", els)

    @classmethod
    def full(cls, d: int, K: int, A: int) -> "GalerkinBasis":
        modes = [(0,) * d]
        for k in _wave_vectors(d, K):
            modes += [k, tuple(-c for c in k)]
        els = [FourierHermite(k, a) for k in modes for a in _alphas(d, A)]
        return cls(tuple(els), K, A)

    @property
    def d(self) -> int:
        return self.elements[0].d

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def alphas(self) -> list:
        """Distinct Hermite indices in first-appearance order."""
        return list(dict.fromkeys(e.alpha for e in self.elements))

    def index(self, h: FourierHermite) -> int:
        return self.elements.index(h)

    def sub(self, keep) -> "GalerkinBasis":
        """Sub-basis of the elements satisfying ``keep(element)``."""
        return GalerkinBasis(tuple(e for e in self.elements if keep(e)))

    def positions(self, other: "GalerkinBasis") -> np.ndarray:
        return np.array([self.index(e) for e in other.elements])

    def coeffs(self, h: TestFunction) -> np.ndarray:
        """Coordinates of ``h`` (must lie in the span of the basis)."""
        out = np.zeros(len(self))
        d = self.d
        zero = (0,) * d

        def put(k, a, c):
            e = FourierHermite(k, a)
            if e not in self.elements:
                raise ValueError(f"{h.id} needs {e.id}, which is not in the basis")
            out[self.index(e)] += c

        if isinstance(h, FourierHermite):
            put(h.k, h.alpha, 1.0)
        elif isinstance(h, CollisionInvariant):
            if h.which == "mass":
                put(zero, zero, 1.0)
            elif h.which == "momentum":
                put(zero, tuple(int(j == h.j) for j in range(d)), 1.0)
            else:
                # |v|^2 = sum_j (sqrt(2) h_2(v_j) + 1)
                put(zero, zero, float(d))
                for j in range(d):
                    put(zero, tuple(2 * int(i == j) for i in range(d)), math.sqrt(2.0))
        else:
            raise TypeError("only Fourier-Hermite elements and collision invariants have coordinates")
        return out

    def invariant_coeffs(self) -> np.ndarray:
        """Rows: mass, momentum components, energy (those present in the basis)."""
        rows = []
        for h in [CollisionInvariant("mass")] + [CollisionInvariant("momentum", j) for j in range(self.d)] \
                + [CollisionInvariant("energy")]:
            try:
                rows.append(self.coeffs(h))
            except ValueError:
                pass
        return np.array(rows).reshape(len(rows), len(self))

    def to_json(self) -> dict:
        return {"d": self.d, "K": self.K, "A": self.A,
                "elements": [e.to_json() for e in self.elements]}


def sector_basis(k: Sequence[int], A: int) -> GalerkinBasis:
    """``{cos_k, sin_k} x {|alpha| <= A, alpha_j even for j transverse}``.

    For an axis-aligned ``k`` transport only involves the velocity component
    along the axis, and the collision operator commutes with reflections of
    the other components, so this set is invariant under the generator.
    """
    k = tuple(int(c) for c in k)
    axes = [j for j, c in enumerate(k) if c]
    if len(axes) != 1 or k[axes[0]] < 0:
        raise ValueError("sector_basis needs a positive axis-aligned wave vector")
    ax = axes[0]
    d = len(k)
    alphas = [a for a in _alphas(d, A) if all(a[j] % 2 == 0 for j in range(d) if j != ax)]
    neg = tuple(-c for c in k)
    els = [FourierHermite(m, a) for m in (k, neg) for a in alphas]
    return GalerkinBasis(tuple(els), None, A)


# ----------------------------------------------------------------------------
# transport block (closed form)


def _spatial_derivative(F: tuple, j: int):
    """``d/dx_j`` of the real Fourier mode with key ``F``: returns (coeff, key)."""
    first = next((c for c in F if c), 0)
    if first == 0:
        return 0.0, F
    if first > 0:  # sqrt2 cos(2 pi q.x) -> -2 pi q_j sqrt2 sin
        return -2.0 * math.pi * F[j], tuple(-c for c in F)
    q = tuple(-c for c in F)  # sqrt2 sin(2 pi q.x) -> 2 pi q_j sqrt2 cos
    return 2.0 * math.pi * q[j], q


def transport_matrix(basis: GalerkinBasis) -> np.ndarray:
    """``T_kl = -sum_j (\\int F_k d_j F_l dx) (\\int M h_{a_k} v_j h_{a_l} dv)``."""
    n = len(basis)
    T = np.zeros((n, n))
    lookup = {e: i for i, e in enumerate(basis.elements)}
    for l, el in enumerate(basis.elements):
        for j in range(basis.d):
            c, key = _spatial_derivative(el.k, j)
            if c == 0.0:
                continue
            b = el.alpha
            for step in (1, -1):
                a = list(b)
                a[j] += step
                if a[j] < 0:
                    continue
                vel = math.sqrt(b[j] + 1) if step == 1 else math.sqrt(b[j])
                k = lookup.get(FourierHermite(key, tuple(a)))
                if k is not None:
                    T[k, l] -= c * vel
    return T


# ----------------------------------------------------------------------------
# velocity collision block


def _hermite_rows(vel: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """``prod_j h_{alpha_j}(v_j)`` for each row of ``vel``: shape (n, n_alpha)."""
    amax = int(alphas.max()) if alphas.size else 0
    out = np.ones((vel.shape[0], alphas.shape[0]))
    for j in range(vel.shape[1]):
        tab = hermite_table(vel[:, j], amax)  # (amax+1, n)
        out *= tab[alphas[:, j]].T
    return out


def _invariant_masks(alphas: np.ndarray):
    d = alphas.shape[1]
    deg = alphas.sum(axis=1)
    zero = deg <= 1  # mass and momentum: D h = 0 identically
    energy = [int(np.flatnonzero((alphas == 2 * np.eye(d, dtype=int)[j]).all(axis=1))[0])
              for j in range(d) if (alphas == 2 * np.eye(d, dtype=int)[j]).all(axis=1).any()]
    return zero, (energy if len(energy) == d else [])


def _delta(v, w, vp, wp, alphas, zero, energy):
    D = (_hermite_rows(vp, alphas) + _hermite_rows(wp, alphas)
         - _hermite_rows(v, alphas) - _hermite_rows(w, alphas))
    D[:, zero] = 0.0
    if energy:
        # sum_j D h_{2e_j} = D|v|^2 / sqrt2 = 0: remove the rounding residue
        D[:, energy] -= D[:, energy].mean(axis=1, keepdims=True)
    return D


def _collide(v, w, om):
    dn = np.einsum("ij,ij->i", v - w, om)[:, None] * om
    return v - dn, w + dn


def _draw(rng, n, d):
    """Maxwellian pairs and omega uniform on the hemisphere (v-w).omega > 0."""
    v = rng.standard_normal((n, d))
    w = rng.standard_normal((n, d))
    om = rng.standard_normal((n, d))
    om /= np.linalg.norm(om, axis=1, keepdims=True)
    c = np.einsum("ij,ij->i", v - w, om)
    om[c < 0] *= -1.0
    weight = 0.5 * sphere_area(d) * np.abs(c)
    return v, w, om, weight


def _lv_shard(args):
    alphas, d, n, seed = args
    rng = np.random.default_rng(seed)
    zero, energy = _invariant_masks(alphas)
    v, w, om, wt = _draw(rng, n, d)
    vp, wp = _collide(v, w, om)
    H = _hermite_rows(v, alphas)
    D = _delta(v, w, vp, wp, alphas, zero, energy)
    X = (wt[:, None] * H)[:, :, None] * D[:, None, :]  # (n, a, b)
    S = X + X.transpose(0, 2, 1)
    return X.sum(0), (X ** 2).sum(0), (S ** 2).sum(0)


def _c_shard(args):
    alphas, d, n, seed = args
    rng = np.random.default_rng(seed)
    zero, energy = _invariant_masks(alphas)
    v, w, om, wt = _draw(rng, n, d)
    vp, wp = _collide(v, w, om)
    D = _delta(v, w, vp, wp, alphas, zero, energy)
    Y = 0.5 * (wt[:, None] * D)[:, :, None] * D[:, None, :]
    return Y.sum(0), (Y ** 2).sum(0)


def _shards(n_mc: int, rng):
    sizes = [SHARD] * (n_mc // SHARD) + ([n_mc % SHARD] if n_mc % SHARD else [])
    seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(len(sizes))
    return sizes, seeds


def velocity_operator_mc(alphas, d: int, n_mc: int, rng, which: str = "L", workers: int = 1):
    """Monte Carlo estimate of the velocity collision block.

    ``which="L"`` returns ``(Lv, err, sym_err)`` from the direct integrand
    ``b h_a(v) D h_b``; ``sym_err`` is the standard error of ``Lv + Lv^T``.
    ``which="C"`` returns ``(C, err)`` from ``b D h_a D h_b / 2``.
    """
    from .ensemble import parallel_map

    alphas = np.asarray(alphas, dtype=int).reshape(-1, d)
    sizes, seeds = _shards(n_mc, rng)
    tasks = [(alphas, d, n, s) for n, s in zip(sizes, seeds)]
    fn = _lv_shard if which == "L" else _c_shard
    parts = parallel_map(fn, tasks, workers, chunksize=1)
    sums = [sum(p[q] for p in parts) for q in range(len(parts[0]))]
    mean = sums[0] / n_mc
    err = np.sqrt(np.maximum(sums[1] / n_mc - mean ** 2, 0.0) / (n_mc - 1))
    if which == "C":
        mean = 0.5 * (mean + mean.T)
        return mean, err
    sym = mean + mean.T
    sym_err = np.sqrt(np.maximum(sums[2] / n_mc - sym ** 2, 0.0) / (n_mc - 1))
    return mean, err, sym_err


def _quad_rules(d: int, A: int, n_theta: int | None):
    """Inner nodes over (r, u-direction, omega) and their weights."""
    ns = (A + 2) // 2 + 1
    s, ws = special.roots_genlaguerre(ns, 0.5 * (d - 1))
    r = 2.0 * np.sqrt(s)
    wr = (2.0 ** d) * ws
    nphi = 2 * A + 2
    phi = 2.0 * math.pi * np.arange(nphi) / nphi
    wphi = np.full(nphi, 2.0 * math.pi / nphi)
    n_theta = n_theta or max(2 * A + 24, 3 * A + 8)
    if d == 2:
        t, wt = np.polynomial.legendre.leggauss(n_theta)
        th = 0.5 * math.pi * t
        wth = 0.5 * math.pi * wt * np.cos(th)
        U, UP, W = [], [], []
        for p, wp in zip(phi, wphi):
            uh = np.array([math.cos(p), math.sin(p)])
            om = np.stack([np.cos(p + th), np.sin(p + th)], axis=1)
            c = om @ uh
            uph = uh[None, :] - 2.0 * c[:, None] * om
            U.append(np.repeat(uh[None, :], n_theta, 0))
            UP.append(uph)
            W.append(wp * wth)
        U, UP, W = np.concatenate(U), np.concatenate(UP), np.concatenate(W)
    else:
        ct, wct = np.polynomial.legendre.leggauss(A + 2)
        cc, wcc = np.polynomial.legendre.leggauss(n_theta)
        cc, wcc = 0.5 * (cc + 1.0), 0.5 * wcc
        npsi = 4 * A + 4
        psi = 2.0 * math.pi * np.arange(npsi) / npsi
        U, UP, W = [], [], []
        for c0, w0 in zip(ct, wct):
            sn = math.sqrt(max(0.0, 1.0 - c0 * c0))
            for p, wp in zip(phi, wphi):
                uh = np.array([sn * math.cos(p), sn * math.sin(p), c0])
                e1 = np.array([math.cos(p) * c0, math.sin(p) * c0, -sn])
                e2 = np.cross(uh, e1)
                cg, pg = np.meshgrid(cc, psi, indexing="ij")
                wg = np.outer(wcc * cc, np.full(npsi, 2.0 * math.pi / npsi)).ravel()
                sg = np.sqrt(1.0 - cg ** 2)
                om = (cg.ravel()[:, None] * uh + (sg * np.cos(pg)).ravel()[:, None] * e1
                      + (sg * np.sin(pg)).ravel()[:, None] * e2)
                c = om @ uh
                U.append(np.repeat(uh[None, :], om.shape[0], 0))
                UP.append(uh[None, :] - 2.0 * c[:, None] * om)
                W.append(w0 * wp * wg)
        U, UP, W = np.concatenate(U), np.concatenate(UP), np.concatenate(W)
    u = (r[:, None, None] * U[None]).reshape(-1, d)
    up = (r[:, None, None] * UP[None]).reshape(-1, d)
    w = (wr[:, None] * W[None]).ravel()
    return u, up, w


@lru_cache(maxsize=16)
def _quadrature_J(alphas_key: tuple, d: int, n_theta: int | None, A: int):
    alphas = np.array(alphas_key, dtype=int).reshape(-1, d)
    zero, energy = _invariant_masks(alphas)
    u, up, wi = _quad_rules(d, A, n_theta)
    x, wx = np.polynomial.hermite.hermgauss(A + 1)
    grids = np.meshgrid(*([x] * d), indexing="ij")
    V = np.stack([g.ravel() for g in grids], axis=1)
    wV = np.ones(V.shape[0])
    for g in np.meshgrid(*([wx] * d), indexing="ij"):
        wV = wV * g.ravel()
    J = np.zeros((alphas.shape[0],) * 2)
    per = max(1, 400_000 // u.shape[0])
    for s in range(0, V.shape[0], per):
        Vc = V[s:s + per]
        vv = (Vc[:, None, :] + 0.5 * u[None]).reshape(-1, d)
        ww = (Vc[:, None, :] - 0.5 * u[None]).reshape(-1, d)
        vp = (Vc[:, None, :] + 0.5 * up[None]).reshape(-1, d)
        wp = (Vc[:, None, :] - 0.5 * up[None]).reshape(-1, d)
        D = _delta(vv, ww, vp, wp, alphas, zero, energy)
        wt = (wV[s:s + per, None] * wi[None]).ravel()
        J += (D * wt[:, None]).T @ D
    J *= (2.0 * math.pi) ** (-d)
    J = 0.5 * (J + J.T)
    J.flags.writeable = False
    return J


def velocity_operator_quadrature(alphas, d: int, n_theta: int | None = None) -> np.ndarray:
    """``J_ab = \\int M M b D h_a D h_b`` by deterministic product quadrature.

    Centre-of-mass velocity ``(v+w)/2``: Gauss-Hermite (exact).  Relative
    speed: generalised Gauss-Laguerre in ``|v-w|^2/4`` (exact after the
    angular sum cancels odd powers).  Directions of ``v-w``: trapezoid or
    Gauss-Legendre x trapezoid (exact).  Impact angle: Gauss-Legendre on the
    half circle (spectrally accurate, not exact).
    Then ``Lv = -J/4`` and ``C = J/2``.
    """
    alphas = np.asarray(alphas, dtype=int).reshape(-1, d)
    # reflections v_j -> -v_j commute with collisions, so J is block diagonal
    # in the parity pattern of alpha
    J = np.zeros((alphas.shape[0],) * 2)
    par = alphas % 2
    for p in np.unique(par, axis=0):
        ix = np.flatnonzero((par == p).all(axis=1))
        key = tuple(int(c) for c in alphas[ix].ravel())
        J[np.ix_(ix, ix)] = _quadrature_J(key, d, n_theta, int(alphas.sum(axis=1).max()))
    return J



# ----------------------------------------------------------------------------
# assembled matrices


@dataclass
class GeneratorMatrix:
    """``B`` with per-entry standard errors.

    ``sym_error`` is the standard error of ``B + B^T`` (entries of ``B`` and
    ``B^T`` share samples, so it is not derivable from ``mc_error``).
    """

    basis: GalerkinBasis
    B: np.ndarray
    mc_error: np.ndarray
    n_mc: int
    sym_error: np.ndarray | None = None
    method: str = "mc"

    def __post_init__(self):
        if self.sym_error is None:
            self.sym_error = np.sqrt(self.mc_error ** 2 + self.mc_error.T ** 2)

    def restrict(self, sub: GalerkinBasis) -> "GeneratorMatrix":
        ix = self.basis.positions(sub)
        g = np.ix_(ix, ix)
        return GeneratorMatrix(sub, self.B[g], self.mc_error[g], self.n_mc, self.sym_error[g], self.method)


@dataclass
class NoiseMatrix:
    basis: GalerkinBasis
    C: np.ndarray
    mc_error: np.ndarray
    n_mc: int
    method: str = "mc"

    def restrict(self, sub: GalerkinBasis) -> "NoiseMatrix":
        ix = self.basis.positions(sub)
        g = np.ix_(ix, ix)
        return NoiseMatrix(sub, self.C[g], self.mc_error[g], self.n_mc, self.method)


def _block(basis: GalerkinBasis, alphas: list, V: np.ndarray) -> np.ndarray:
    """Lift a velocity matrix to ``delta(F_k, F_l) V[a_k, a_l]``."""
    pos = {a: i for i, a in enumerate(alphas)}
    ia = np.array([pos[e.alpha] for e in basis.elements])
    same = np.array([[ek.k == el.k for el in basis.elements] for ek in basis.elements])
    return np.where(same, V[np.ix_(ia, ia)], 0.0)


def assemble_generator(basis: GalerkinBasis, n_mc: int = 0, rng=None, method: str = "mc",
                       workers: int = 1, n_theta: int | None = None) -> GeneratorMatrix:
    """Galerkin generator: exact transport plus the collision block.

    ``method="mc"`` (needs ``n_mc >= 1e5``) uses the direct four-term
    integrand with Maxwellian ``v, w`` and hemisphere ``omega`` weighted by
    ``((v-w).omega)_+``; ``method="quadrature"`` uses
    :func:`velocity_operator_quadrature` and reports zero error.
    """
    alphas = basis.alphas
    T = transport_matrix(basis)
    if method == "mc":
        if n_mc < 100_000:
            raise ValueError("assemble_generator needs n_mc >= 1e5")
        rng = np.random.default_rng() if rng is None else rng
        Lv, err, sym = velocity_operator_mc(alphas, basis.d, n_mc, rng, "L", workers)
        return GeneratorMatrix(basis, T + _block(basis, alphas, Lv), _block(basis, alphas, err),
                               n_mc, _block(basis, alphas, sym), "mc")
    if method == "quadrature":
        Lv = -0.25 * velocity_operator_quadrature(alphas, basis.d, n_theta)
        z = np.zeros((len(basis),) * 2)
        return GeneratorMatrix(basis, T + _block(basis, alphas, Lv), z, 0, z.copy(), "quadrature")
    raise ValueError(f"unknown method {method!r}")


def assemble_noise(basis: GalerkinBasis, n_mc: int = 0, rng=None, method: str = "mc",
                   workers: int = 1, n_theta: int | None = None) -> NoiseMatrix:
    """Noise covariance ``C``; x is shared by both particles and integrates out exactly."""
    alphas = basis.alphas
    if method == "mc":
        if n_mc < 100_000:
            raise ValueError("assemble_noise needs n_mc >= 1e5")
        rng = np.random.default_rng() if rng is None else rng
        C, err = velocity_operator_mc(alphas, basis.d, n_mc, rng, "C", workers)
        return NoiseMatrix(basis, _block(basis, alphas, C), _block(basis, alphas, err), n_mc, "mc")
    if method == "quadrature":
        C = 0.5 * velocity_operator_quadrature(alphas, basis.d, n_theta)
        return NoiseMatrix(basis, _block(basis, alphas, C), np.zeros((len(basis),) * 2), 0, "quadrature")
    raise ValueError(f"unknown method {method!r}")


@dataclass
class FDReport:
    residual: np.ndarray
    sigma: np.ndarray
    max_abs: float
    max_z: float
    n_entries: int
    passed: bool
    round_off: float

    def to_dict(self) -> dict:
        return {"max_abs": self.max_abs, "max_z": self.max_z, "n_entries": self.n_entries,
                "passed": self.passed, "round_off": self.round_off}


def fd_check(gen: GeneratorMatrix, noise: NoiseMatrix, n_sigma: float = 3.0,
             round_off: float = 1e-10) -> FDReport:
    """Lyapunov residual ``R = B + B^T + C`` against its combined error.

    Entries pass if ``|R| <= n_sigma * sigma + round_off``; entries with no
    Monte Carlo content (``sigma = 0``) must vanish to round-off.
    """
    if gen.basis != noise.basis:
        raise ValueError("generator and noise were assembled on different bases")
    R = gen.B + gen.B.T + noise.C
    sig = np.sqrt(gen.sym_error ** 2 + noise.mc_error ** 2)
    z = np.where(sig > 0, np.abs(R) / np.where(sig > 0, sig, 1.0), np.where(np.abs(R) > round_off, np.inf, 0.0))
    ok = np.abs(R) <= n_sigma * sig + round_off
    return FDReport(R, sig, float(np.abs(R).max()), float(z.max()), int(R.size), bool(ok.all()), round_off)


def dissipativity(gen: GeneratorMatrix, n_sigma: float = 3.0):
    """Largest eigenvalue of ``(B + B^T)/2`` and the allowance ``n_sigma * ||err||``."""
    S = 0.5 * (gen.B + gen.B.T)
    lam = float(np.linalg.eigvalsh(S).max())
    tol = n_sigma * float(np.linalg.norm(0.5 * gen.sym_error, 2))
    return lam, tol, lam <= tol + 1e-12


# ----------------------------------------------------------------------------
# covariance propagation


def _as_matrix(B) -> np.ndarray:
    return np.asarray(B.B if isinstance(B, GeneratorMatrix) else B, dtype=float)


def propagate_covariance(B, g_coeffs, h_coeffs, t_grid) -> np.ndarray:
    """Predicted ``Cov(zeta_0(g), zeta_t(h)) = h^T exp(tB) g`` on ``t_grid``."""
    M = _as_matrix(B)
    t = np.asarray(t_grid, dtype=float)
    if np.any(t < 0) or np.any(np.diff(t) < 0):
        raise ValueError("t_grid must be nonnegative and increasing")
    g = np.asarray(g_coeffs, dtype=float)
    h = np.asarray(h_coeffs, dtype=float)
    return np.array([h @ (linalg.expm(tk * M) @ g) if tk > 0 else h @ g for tk in t])


def propagate_covariance_rk4(B, g_coeffs, h_coeffs, t_grid, cfl: float = 0.05) -> np.ndarray:
    """Same quantity by classical RK4 on ``da/dt = B a`` (cross-check)."""
    M = _as_matrix(B)
    t = np.asarray(t_grid, dtype=float)
    h = np.asarray(h_coeffs, dtype=float)
    a = np.asarray(g_coeffs, dtype=float).copy()
    hmax = cfl / max(np.linalg.norm(M, 2), 1e-300)
    out = np.empty(t.size)
    now = 0.0
    for q, tq in enumerate(t):
        n = int(math.ceil((tq - now) / hmax)) if tq > now else 0
        if n:
            dt = (tq - now) / n
            for _ in range(n):
                k1 = M @ a
                k2 = M @ (a + 0.5 * dt * k1)
                k3 = M @ (a + 0.5 * dt * k2)
                k4 = M @ (a + dt * k3)
                a = a + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        now = tq
        out[q] = h @ a
    return out


# ----------------------------------------------------------------------------
# Ornstein-Uhlenbeck field


@dataclass
class OUState:
    coefficients: np.ndarray
    time: float


@dataclass
class OUResult:
    """Recorded paths ``(n_rec, n_paths, n)`` and the time-averaged covariance.

    ``cov_error`` comes from the spread of per-path time averages, which are
    independent across paths.
    """

    times: np.ndarray
    paths: np.ndarray
    stationary_cov: np.ndarray
    cov_error: np.ndarray
    dt: float
    scheme: str
    clipped: int = 0

    def states(self, path: int) -> list[OUState]:
        return [OUState(self.paths[i, path].copy(), float(t)) for i, t in enumerate(self.times)]


def psd_sqrt(C: np.ndarray, mc_error: np.ndarray | None = None, n_sigma: float = 3.0):
    """Symmetric square root of ``C`` after clipping small negative eigenvalues.

    Eigenvalues in ``[-n_sigma * ||err||_F, 0)`` are set to zero; anything
    more negative raises.  Returns ``(sqrt, n_clipped)``.
    """
    C = 0.5 * (C + C.T)
    lam, U = np.linalg.eigh(C)
    tol = n_sigma * (float(np.linalg.norm(mc_error)) if mc_error is not None else 0.0)
    tol = max(tol, 1e-12 * max(1.0, float(np.abs(lam).max())))
    if lam.min() < -tol:
        raise ValueError(f"noise matrix is not PSD: eigenvalue {lam.min():.3e} below -{tol:.3e}")
    clipped = int(np.sum(lam < 0))
    lam = np.clip(lam, 0.0, None)
    return (U * np.sqrt(lam)) @ U.T, clipped


def ou_simulate(B, C, dt: float, t_end: float, n_paths: int, rng, scheme: str = "euler",
                record_every: float | None = None, burn_in: float = 0.0,
                C_error: np.ndarray | None = None) -> OUResult:
    """Simulate ``dX = B X dt + dW``, ``Cov(dW) = C dt``, from ``X_0 ~ N(0, I)``.

    ``scheme="euler"`` is Euler-Maruyama with increment ``sqrt(dt) C^{1/2} xi``
    and requires ``dt <= 0.1/||B||``.  ``scheme="exact"`` uses the exact
    Gaussian transition ``X -> exp(B dt) X + N(0, Q)`` with ``Q`` from the
    Van Loan block exponential; it has no step-size bias.
    Paths are recorded every ``record_every`` time units (default ``dt``);
    the stationary covariance averages over recorded times after ``burn_in``.
    """
    if isinstance(C, NoiseMatrix):
        C_error = C.mc_error if C_error is None else C_error
        C = C.C
    Bm = _as_matrix(B)
    C = np.asarray(C, dtype=float)
    n = Bm.shape[0]
    norm = float(np.linalg.norm(Bm, 2))
    if scheme == "euler":
        if norm > 0 and dt > 0.1 / norm * (1 + 1e-12):
            raise ValueError(f"dt must be <= 0.1/||B|| = {0.1 / norm:.4g}")
        S, clipped = psd_sqrt(C, C_error)
        F = np.eye(n) + dt * Bm
        G = math.sqrt(dt) * S
    elif scheme == "exact":
        _, clipped = psd_sqrt(C, C_error)
        F, Q = _van_loan(Bm, C, dt)
        G, _ = psd_sqrt(Q, None)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    n_steps = int(round(t_end / dt))
    every = max(1, int(round((record_every or dt) / dt)))
    X = rng.standard_normal((n_paths, n))
    times, rec = [0.0], [X.copy()]
    FT, GT = F.T, G.T
    for step in range(1, n_steps + 1):
        X = X @ FT + rng.standard_normal((n_paths, n)) @ GT
        if step % every == 0:
            times.append(step * dt)
            rec.append(X.copy())
    times = np.array(times)
    paths = np.array(rec)
    keep = paths[times >= burn_in - 1e-12]
    per_path = np.einsum("tpi,tpj->pij", keep, keep) / keep.shape[0]
    cov = per_path.mean(0)
    err = per_path.std(0, ddof=1) / math.sqrt(n_paths) if n_paths > 1 else np.full_like(cov, np.nan)
    return OUResult(times, paths, cov, err, dt, scheme, clipped)


def _van_loan(B: np.ndarray, C: np.ndarray, dt: float):
    n = B.shape[0]
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = -B
    M[:n, n:] = C
    M[n:, n:] = B.T
    E = linalg.expm(M * dt)
    F = E[n:, n:].T
    Q = F @ E[:n, n:]
    return F, 0.5 * (Q + Q.T)


def ou_lagged_covariance(res: OUResult, lag: float, g=None, h=None):
    """``E[X_s X_{s+lag}^T]`` (or ``g^T E[...] h``) averaged over s and paths."""
    step = res.times[1] - res.times[0] if res.times.size > 1 else res.dt
    k = int(round(lag / step))
    if abs(k * step - lag) > 1e-9 * max(1.0, lag):
        raise ValueError("lag must be a multiple of the recording interval")
    a = res.paths[: res.paths.shape[0] - k]
    b = res.paths[k:]
    if g is not None:
        a = a @ np.asarray(g)
        b = b @ np.asarray(h)
        per_path = (a * b).mean(0)
    else:
        per_path = np.einsum("tpi,tpj->pij", a, b) / a.shape[0]
    return per_path.mean(0), per_path.std(0, ddof=1) / math.sqrt(per_path.shape[0])


def stationary_covariance_em(B, C, dt: float, t_end: float = 100.0) -> np.ndarray:
    """Covariance of the Euler-Maruyama recursion at ``t_end`` from ``X_0 ~ N(0, I)``
    (bias diagnostic).

    Computed by doubling ``Q <- A Q A^T + Q``, ``A <- A^2``.  A discrete
    Lyapunov solve would be singular when ``B`` has neutral directions that
    also carry no noise (their variance simply stays at its initial value).
    """
    Bm = _as_matrix(B)
    n = Bm.shape[0]
    A = np.eye(n) + dt * Bm
    Q = dt * np.asarray(C, dtype=float)
    for _ in range(max(0, math.ceil(math.log2(t_end / dt)))):
        Q = A @ Q @ A.T + Q
        A = A @ A
    return A @ A.T + Q


# ----------------------------------------------------------------------------
# hierarchy-level balance


@dataclass
class BalanceReport:
    test_ids: list
    gain: np.ndarray
    loss: np.ndarray
    residual: np.ndarray
    mc_error: np.ndarray
    n_mc: int
    eps: float
    symmetrized: bool
    passed: bool = field(init=False)

    def __post_init__(self):
        ok = np.abs(self.residual) <= 3.0 * self.mc_error + 1e-12
        self.passed = bool(ok.all())

    @property
    def z(self) -> np.ndarray:
        return np.abs(self.residual) / np.where(self.mc_error > 0, self.mc_error, np.inf)

    def rows(self) -> list[dict]:
        return [{"test_id": t, "gain": float(g), "loss": float(l), "residual": float(r),
                 "mc_error": float(e)}
                for t, g, l, r, e in zip(self.test_ids, self.gain, self.loss, self.residual, self.mc_error)]


def equilibrium_balance(n_mc: int, eps: float, rng, basis: GalerkinBasis | None = None,
                        symmetrized: bool = False) -> BalanceReport:
    """Gain minus loss of the one-fresh-particle collision operator on ``M (x) M`` data.

    The operator acts on ``G_2 = M(v_1) M(v_2) 1{|x_1 - x_2| > eps}``; both
    terms evaluate ``G_2`` at contact, where the indicator is one (closure of
    the phase space), and ``G_2`` is translation invariant, so each basis
    element contributes ``(\\int F_k dx) * (velocity integral)``.

    The gain term is written in pre-collisional variables, giving
    ``E[((u - v).omega)_- phi(v')]`` and the loss term
    ``E[((u - v).omega)_+ phi(v)]``; the two are estimated from independent
    draws.  ``symmetrized=True`` instead averages the gain and loss of both
    particles on shared draws, which makes the integrand vanish pointwise
    for collision invariants.
    """
    if n_mc < 1_000_000:
        raise ValueError("equilibrium_balance needs n_mc >= 1e6")
    if not 0.0 < eps < 0.25:
        raise ValueError("eps must lie in (0, 0.25)")
    basis = GalerkinBasis.full(2, 1, 2) if basis is None else basis
    d = basis.d
    alphas = np.array(basis.alphas, dtype=int).reshape(-1, d)
    zero, energy = _invariant_masks(alphas)
    k = alphas.shape[0]
    sg, sg2, sl, sl2, sd, sd2 = (np.zeros(k) for _ in range(6))
    sizes, seeds = _shards(n_mc, rng)
    for n, seed in zip(sizes, seeds):
        r = np.random.default_rng(seed)
        # _draw puts omega on (v - u).omega > 0, i.e. ((u - v).omega)_- > 0; the
        # loss term only needs the weight, the gain term the scattered velocity
        v, u, om, wt = _draw(r, n, d)
        vp, up = _collide(v, u, om)
        if symmetrized:
            Hg = 0.5 * wt[:, None] * (_hermite_rows(vp, alphas) + _hermite_rows(up, alphas))
            Hl = 0.5 * wt[:, None] * (_hermite_rows(v, alphas) + _hermite_rows(u, alphas))
            D = 0.5 * wt[:, None] * _delta(v, u, vp, up, alphas, zero, energy)
            sd += D.sum(0)
            sd2 += (D ** 2).sum(0)
        else:
            Hg = wt[:, None] * _hermite_rows(vp, alphas)
            v2, _, _, wt2 = _draw(r, n, d)
            Hl = wt2[:, None] * _hermite_rows(v2, alphas)
        sg += Hg.sum(0)
        sg2 += (Hg ** 2).sum(0)
        sl += Hl.sum(0)
        sl2 += (Hl ** 2).sum(0)
    g = sg / n_mc
    l = sl / n_mc
    eg = np.sqrt(np.maximum(sg2 / n_mc - g ** 2, 0) / (n_mc - 1))
    el = np.sqrt(np.maximum(sl2 / n_mc - l ** 2, 0) / (n_mc - 1))
    if symmetrized:
        res = sd / n_mc
        ed = np.sqrt(np.maximum(sd2 / n_mc - res ** 2, 0) / (n_mc - 1))
    else:
        res = g - l
        ed = np.hypot(eg, el)
    pos = {tuple(a): i for i, a in enumerate(alphas.tolist())}
    fx = np.array([0.0 if any(e.k) else 1.0 for e in basis.elements])  # \\int F_k dx
    ia = np.array([pos[e.alpha] for e in basis.elements])
    return BalanceReport([e.id for e in basis.elements], fx * g[ia], fx * l[ia], fx * res[ia],
                         fx * ed[ia], n_mc, eps, symmetrized)


# ----------------------------------------------------------------------------
# export


def write_matrix_csv(path, M: np.ndarray, basis: GalerkinBasis, header: dict | None = None,
                     error: np.ndarray | None = None) -> None:
    """CSV rows ``row_id,col_id,value[,error]`` plus ``<path>.json`` describing the basis."""
    ids = [e.id for e in basis.elements]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "col", "value"] + (["error"] if error is not None else []))
        for i, a in enumerate(ids):
            for j, b in enumerate(ids):
                row = [a, b, repr(float(M[i, j]))]
                if error is not None:
                    row.append(repr(float(error[i, j])))
                w.writerow(row)
    meta = {"basis": basis.to_json()}
    meta.update(header or {})
    with open(str(path) + ".json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def write_curve_csv(path, t, values, errors=None, name: str = "value") -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", name] + (["std_error"] if errors is not None else []))
        for q, tq in enumerate(t):
            row = [repr(float(tq)), repr(float(values[q]))]
            if errors is not None:
                row.append(repr(float(errors[q])))
            w.writerow(row)
