"""Numba kernels for the event-driven hard-sphere flow on the unit torus.

Particles carry their own clock ``tp[i]``: ``x[i]`` is the position at time
``tp[i]`` and is only brought forward when the particle takes part in an
event.  Pair predictions use the minimum image and are trusted only while the
relative travel stays below ``0.5 - eps`` (after that another periodic image
could come closer first).

Neighbour search uses a cell grid of width ``1/m >= eps`` with cell-crossing
events; a pair that ever touches sits in adjacent cells from the last moment
either of them changed velocity or entered the other's neighbourhood, so one
prediction at that moment is enough.  For coarse grids (``m < 5``) adjacency
no longer bounds the displacement, and every particle instead schedules a
"recheck" at its shortest minimum-image horizon.

Events live in a binary heap ordered by ``(t, i, j)`` and are invalidated
lazily through per-particle collision counters.  Event codes: ``j >= 0`` pair
collision, ``j == -1`` recheck, ``j = -2 - k`` crossing along axis ``k``.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

GRAZING_TOL = 1e-12
TIE_TOL = 1e-12
HORIZON_SLACK = 1e-12

STATUS_OK = 0
STATUS_EVENT_CAP = 1


@njit(cache=True, inline="always")
def _less(t1, i1, j1, t2, i2, j2):
    if t1 != t2:
        return t1 < t2
    if i1 != i2:
        return i1 < i2
    return j1 < j2


@njit(cache=True)
def _push(ht, hv, hs, t, i, j, ci, cj):
    # caller guarantees capacity
    k = hs[0]
    while k > 0:
        p = (k - 1) >> 1
        if _less(t, i, j, ht[p], hv[p, 0], hv[p, 1]):
            ht[k] = ht[p]
            hv[k, 0] = hv[p, 0]
            hv[k, 1] = hv[p, 1]
            hv[k, 2] = hv[p, 2]
            hv[k, 3] = hv[p, 3]
            k = p
        else:
            break
    ht[k] = t
    hv[k, 0] = i
    hv[k, 1] = j
    hv[k, 2] = ci
    hv[k, 3] = cj
    hs[0] += 1


@njit(cache=True)
def _pop(ht, hv, hs):
    t, i, j, ci, cj = ht[0], hv[0, 0], hv[0, 1], hv[0, 2], hv[0, 3]
    size = hs[0] - 1
    hs[0] = size
    if size > 0:
        lt = ht[size]
        li, lj, lci, lcj = hv[size, 0], hv[size, 1], hv[size, 2], hv[size, 3]
        k = 0
        while True:
            c = 2 * k + 1
            if c >= size:
                break
            if c + 1 < size and _less(ht[c + 1], hv[c + 1, 0], hv[c + 1, 1],
                                      ht[c], hv[c, 0], hv[c, 1]):
                c += 1
            if _less(ht[c], hv[c, 0], hv[c, 1], lt, li, lj):
                ht[k] = ht[c]
                hv[k, 0] = hv[c, 0]
                hv[k, 1] = hv[c, 1]
                hv[k, 2] = hv[c, 2]
                hv[k, 3] = hv[c, 3]
                k = c
            else:
                break
        ht[k] = lt
        hv[k, 0] = li
        hv[k, 1] = lj
        hv[k, 2] = lci
        hv[k, 3] = lcj
    return t, i, j, ci, cj


@njit(cache=True, inline="always")
def _contact_time(b, vv, xx, eps):
    # b = dx.dv, vv = |dv|^2, xx = |dx|^2 for the minimum-image displacement
    if b >= 0.0 or vv == 0.0:
        return -1.0
    cc = xx - eps * eps
    disc = b * b - vv * cc
    if disc <= 0.0:
        return -1.0
    sq = math.sqrt(disc)
    if sq < GRAZING_TOL * eps:
        return -1.0
    if cc <= 0.0:
        s = 0.0
    else:
        s = cc / (-b + sq)
    if s * math.sqrt(vv) > 0.5 - eps + HORIZON_SLACK:
        return -1.0
    return s


@njit(cache=True)
def pair_time(dx, dv, eps):
    """Time to contact for minimum-image displacement ``dx`` and relative
    velocity ``dv``; -1 if none within the minimum-image validity horizon."""
    b = 0.0
    vv = 0.0
    xx = 0.0
    for k in range(dx.shape[0]):
        b += dx[k] * dv[k]
        vv += dv[k] * dv[k]
        xx += dx[k] * dx[k]
    return _contact_time(b, vv, xx, eps)


@njit(cache=True, inline="always")
def _wrap(y):
    y -= math.floor(y)
    if y >= 1.0:
        y -= 1.0
    return y


@njit(cache=True)
def _predict(i, tnow, t_end, x, v, tp, cnt, cell, head, nxt, m_cells, use_recheck, eps,
             ht, hv, hs):
    """Schedule pair events of ``i`` against particles in neighbouring cells
    (all particles when ``m_cells == 1``) and, if needed, a recheck."""
    d = x.shape[1]
    maxrel = 0.0
    n_nb = 1
    if m_cells > 1:
        for k in range(d):
            n_nb *= 3
    dti = tnow - tp[i]
    for q in range(n_nb):
        c = 0
        r = q
        for k in range(d):
            ck = cell[i, k]
            if m_cells > 1:
                ck += r % 3 - 1
                r //= 3
                if ck < 0:
                    ck += m_cells
                elif ck >= m_cells:
                    ck -= m_cells
            c = c * m_cells + ck
        j = head[c]
        while j >= 0:
            if j != i:
                dtj = tnow - tp[j]
                b = 0.0
                vv = 0.0
                xx = 0.0
                for k in range(d):
                    a = (x[i, k] + dti * v[i, k]) - (x[j, k] + dtj * v[j, k])
                    a -= math.floor(a + 0.5)
                    dvk = v[i, k] - v[j, k]
                    b += a * dvk
                    vv += dvk * dvk
                    xx += a * a
                if vv > maxrel:
                    maxrel = vv
                s = _contact_time(b, vv, xx, eps)
                if s >= 0.0 and tnow + s <= t_end:
                    if i < j:
                        _push(ht, hv, hs, tnow + s, i, j, cnt[i], cnt[j])
                    else:
                        _push(ht, hv, hs, tnow + s, j, i, cnt[j], cnt[i])
            j = nxt[j]
    if use_recheck and maxrel > 0.0:
        tr = tnow + (0.5 - eps) / math.sqrt(maxrel)
        if tr < t_end:
            _push(ht, hv, hs, tr, i, -1, cnt[i], 0)


@njit(cache=True)
def _push_crossing(i, tnow, t_end, x, v, tp, cnt, cell, w, ht, hv, hs):
    d = x.shape[1]
    best = np.inf
    kbest = -1
    for k in range(d):
        if v[i, k] == 0.0:
            continue
        rel = x[i, k] + (tnow - tp[i]) * v[i, k] - cell[i, k] * w
        rel -= math.floor(rel + 0.5)
        if v[i, k] > 0.0:
            s = (w - rel) / v[i, k]
        else:
            s = rel / -v[i, k]
        if s < 0.0:
            s = 0.0
        if s < best:
            best = s
            kbest = k
    if kbest >= 0 and tnow + best <= t_end:
        _push(ht, hv, hs, tnow + best, i, -2 - kbest, cnt[i], 0)


@njit(cache=True, inline="always")
def _cell_index(cell, i, m_cells):
    c = 0
    for k in range(cell.shape[1]):
        c = c * m_cells + cell[i, k]
    return c


@njit(cache=True)
def _unlink(i, c, head, nxt, prv):
    if prv[i] >= 0:
        nxt[prv[i]] = nxt[i]
    else:
        head[c] = nxt[i]
    if nxt[i] >= 0:
        prv[nxt[i]] = prv[i]


@njit(cache=True)
def _link(i, c, head, nxt, prv):
    nxt[i] = head[c]
    prv[i] = -1
    if head[c] >= 0:
        prv[head[c]] = i
    head[c] = i


def choose_cells(n, d, eps):
    """Cells per side: width at least ``eps``, about two particles per cell;
    a single cell (all-pairs search) for small systems."""
    if n < 2:
        return 1
    m = int(min(1.0 / eps, (n / 2.0) ** (1.0 / d)))
    return m if m >= 3 else 1


@njit(cache=True)
def _grow(ht, hv):
    cap = ht.shape[0]
    nt = np.empty(2 * cap)
    nv = np.empty((2 * cap, 4), np.int64)
    nt[:cap] = ht
    nv[:cap] = hv
    return nt, nv


@njit(cache=True)
def run_events(x, v, t_start, t_end, eps, max_events, record, m_cells):
    """Advance ``x, v`` (modified in place) from ``t_start`` to ``t_end``.

    Returns ``(n_events, n_ties, status, t_stop, log_t, log_ij, log_omega)``;
    the log arrays are empty unless ``record`` is true.
    """
    n, d = x.shape
    w = 1.0 / m_cells
    use_recheck = m_cells < 5
    tp = np.full(n, t_start)
    cnt = np.zeros(n, np.int64)
    cell = np.zeros((n, d), np.int64)
    head = np.full(m_cells ** d, -1, np.int64)
    nxt = np.full(n, -1, np.int64)
    prv = np.full(n, -1, np.int64)
    for i in range(n):
        for k in range(d):
            c = int(x[i, k] * m_cells)
            cell[i, k] = min(max(c, 0), m_cells - 1)
        _link(i, _cell_index(cell, i, m_cells), head, nxt, prv)

    # a single particle update pushes at most n + 1 events
    cap = 16 * n + 64
    ht = np.empty(cap)
    hv = np.empty((cap, 4), np.int64)
    hs = np.zeros(1, np.int64)
    lcap = 1024 if record else 1
    log_t = np.empty(lcap)
    log_ij = np.empty((lcap, 2), np.int64)
    log_om = np.empty((lcap, d))

    for i in range(n):
        if hs[0] + n + 2 > ht.shape[0]:
            ht, hv = _grow(ht, hv)
        _predict(i, t_start, t_end, x, v, tp, cnt, cell, head, nxt, m_cells, use_recheck, eps,
                 ht, hv, hs)
        if m_cells > 1:
            _push_crossing(i, t_start, t_end, x, v, tp, cnt, cell, w, ht, hv, hs)
    n_events = 0
    n_ties = 0
    status = STATUS_OK
    last_t = -np.inf
    om = np.empty(d)
    while hs[0] > 0:
        if hs[0] + 2 * n + 4 > ht.shape[0]:
            ht, hv = _grow(ht, hv)
        t, i, j, ci, cj = _pop(ht, hv, hs)
        if j == -1:
            if cnt[i] == ci:
                _predict(i, t, t_end, x, v, tp, cnt, cell, head, nxt, m_cells, use_recheck, eps,
                         ht, hv, hs)
            continue
        if j < -1:
            if cnt[i] != ci:
                continue
            k = -2 - j
            c_old = _cell_index(cell, i, m_cells)
            for kk in range(d):
                x[i, kk] = _wrap(x[i, kk] + (t - tp[i]) * v[i, kk])
            tp[i] = t
            if v[i, k] > 0.0:
                cell[i, k] = (cell[i, k] + 1) % m_cells
            else:
                cell[i, k] = (cell[i, k] - 1) % m_cells
            _unlink(i, c_old, head, nxt, prv)
            _link(i, _cell_index(cell, i, m_cells), head, nxt, prv)
            _predict(i, t, t_end, x, v, tp, cnt, cell, head, nxt, m_cells, use_recheck, eps,
                     ht, hv, hs)
            _push_crossing(i, t, t_end, x, v, tp, cnt, cell, w, ht, hv, hs)
            continue
        if cnt[i] != ci or cnt[j] != cj:
            continue
        if n_events >= max_events:
            status = STATUS_EVENT_CAP
            break
        if t - last_t <= TIE_TOL:
            n_ties += 1
        last_t = t
        for k in range(d):
            x[i, k] = _wrap(x[i, k] + (t - tp[i]) * v[i, k])
            x[j, k] = _wrap(x[j, k] + (t - tp[j]) * v[j, k])
        tp[i] = t
        tp[j] = t
        r2 = 0.0
        for k in range(d):
            a = x[i, k] - x[j, k]
            om[k] = a - math.floor(a + 0.5)
            r2 += om[k] * om[k]
        r = math.sqrt(r2)
        vn = 0.0
        for k in range(d):
            om[k] /= r
            vn += (v[i, k] - v[j, k]) * om[k]
        for k in range(d):
            v[i, k] -= vn * om[k]
            v[j, k] += vn * om[k]
        cnt[i] += 1
        cnt[j] += 1
        if record:
            if n_events >= log_t.shape[0]:
                m = log_t.shape[0]
                nt = np.empty(2 * m)
                nij = np.empty((2 * m, 2), np.int64)
                nom = np.empty((2 * m, d))
                nt[:m] = log_t
                nij[:m] = log_ij
                nom[:m] = log_om
                log_t, log_ij, log_om = nt, nij, nom
            log_t[n_events] = t
            log_ij[n_events, 0] = i
            log_ij[n_events, 1] = j
            for k in range(d):
                log_om[n_events, k] = om[k]
        n_events += 1
        _predict(i, t, t_end, x, v, tp, cnt, cell, head, nxt, m_cells, use_recheck, eps,
                 ht, hv, hs)
        _predict(j, t, t_end, x, v, tp, cnt, cell, head, nxt, m_cells, use_recheck, eps,
                 ht, hv, hs)
        if m_cells > 1:
            _push_crossing(i, t, t_end, x, v, tp, cnt, cell, w, ht, hv, hs)
            _push_crossing(j, t, t_end, x, v, tp, cnt, cell, w, ht, hv, hs)
    t_stop = t_end if status == STATUS_OK else last_t
    for i in range(n):
        for k in range(d):
            x[i, k] = _wrap(x[i, k] + (t_stop - tp[i]) * v[i, k])
    m = n_events if record else 0
    return n_events, n_ties, status, t_stop, log_t[:m].copy(), log_ij[:m].copy(), log_om[:m].copy()


@njit(cache=True)
def min_pair_distance(x):
    """Brute-force minimum-image minimum pair distance (O(N^2))."""
    n, d = x.shape
    best = np.inf
    for i in range(n):
        for j in range(i + 1, n):
            r2 = 0.0
            for k in range(d):
                a = x[i, k] - x[j, k]
                a -= math.floor(a + 0.5)
                r2 += a * a
            if r2 < best:
                best = r2
    return math.sqrt(best)


@njit(cache=True)
def any_overlap(x, eps):
    n, d = x.shape
    e2 = eps * eps
    for i in range(n):
        for j in range(i + 1, n):
            r2 = 0.0
            for k in range(d):
                a = x[i, k] - x[j, k]
                a -= math.floor(a + 0.5)
                r2 += a * a
            if r2 <= e2:
                return True
    return False


@njit(cache=True)
def birth_death_chain(x0, v0, mu, eps, n_steps, max_disp, seed, n_max):
    """Metropolis birth/death/displacement chain for the grand-canonical
    hard-sphere measure.  Velocities of newborn particles are Maxwellian and
    are never updated, so they stay i.i.d. Gaussian.

    Each step picks birth, death or displacement with probability 1/3.
    Returns ``(x, v, n_accepted)``.
    """
    np.random.seed(seed)
    d = x0.shape[1]
    x = np.empty((n_max, d))
    v = np.empty((n_max, d))
    n = x0.shape[0]
    x[:n] = x0
    v[:n] = v0
    e2 = eps * eps
    acc = 0
    y = np.empty(d)
    for step in range(n_steps):
        u = np.random.random()
        if u < 1.0 / 3.0:
            if n >= n_max:
                continue
            for k in range(d):
                y[k] = np.random.random()
            if np.random.random() * (n + 1) >= mu:
                continue
            ok = True
            for j in range(n):
                r2 = 0.0
                for k in range(d):
                    a = y[k] - x[j, k]
                    a -= math.floor(a + 0.5)
                    r2 += a * a
                if r2 <= e2:
                    ok = False
                    break
            if ok:
                for k in range(d):
                    x[n, k] = y[k]
                    v[n, k] = np.random.standard_normal()
                n += 1
                acc += 1
        elif u < 2.0 / 3.0:
            if n == 0:
                continue
            i = np.random.randint(n)
            if np.random.random() * mu >= n:
                continue
            x[i] = x[n - 1]
            v[i] = v[n - 1]
            n -= 1
            acc += 1
        else:
            if n == 0:
                continue
            i = np.random.randint(n)
            for k in range(d):
                a = x[i, k] + max_disp * (2.0 * np.random.random() - 1.0)
                y[k] = _wrap(a)
            ok = True
            for j in range(n):
                if j == i:
                    continue
                r2 = 0.0
                for k in range(d):
                    a = y[k] - x[j, k]
                    a -= math.floor(a + 0.5)
                    r2 += a * a
                if r2 <= e2:
                    ok = False
                    break
            if ok:
                for k in range(d):
                    x[i, k] = y[k]
                acc += 1
    return x[:n].copy(), v[:n].copy(), acc
