"""Double-double (about 32 significant digits) variant of the event engine.

Dilute hard spheres are strongly chaotic: a rounding error of 1e-16 grows by
roughly ``mean_free_path / eps`` per collision, so a forward-and-back run in
double precision loses all accuracy after a few collisions per particle.
This engine carries positions, velocities and event times as unevaluated sums
``hi + lo`` and is used for reversibility checks only.  It is an all-pairs
search with minimum-image recheck events, so it is O(N) per event and far
slower than :mod:`fluctsim._engine`.

The arithmetic follows the classic error-free transformations (Dekker,
Knuth two-sum); no FMA is assumed.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_SPLIT = 134217729.0  # 2**27 + 1


@njit(cache=True, inline="always")
def two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


@njit(cache=True, inline="always")
def quick_two_sum(a, b):
    s = a + b
    return s, b - (s - a)


@njit(cache=True, inline="always")
def _split(a):
    t = _SPLIT * a
    hi = t - (t - a)
    return hi, a - hi


@njit(cache=True, inline="always")
def two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


@njit(cache=True, inline="always")
def add(ah, al, bh, bl):
    s, e = two_sum(ah, bh)
    t, f = two_sum(al, bl)
    e += t
    s, e = quick_two_sum(s, e)
    e += f
    return quick_two_sum(s, e)


@njit(cache=True, inline="always")
def sub(ah, al, bh, bl):
    return add(ah, al, -bh, -bl)


@njit(cache=True, inline="always")
def mul(ah, al, bh, bl):
    p, e = two_prod(ah, bh)
    e += ah * bl + al * bh
    return quick_two_sum(p, e)


@njit(cache=True, inline="always")
def div(ah, al, bh, bl):
    q1 = ah / bh
    ph, pl = mul(q1, 0.0, bh, bl)
    rh, rl = sub(ah, al, ph, pl)
    q2 = rh / bh
    ph, pl = mul(q2, 0.0, bh, bl)
    rh, rl = sub(rh, rl, ph, pl)
    q3 = rh / bh
    qh, ql = quick_two_sum(q1, q2)
    return add(qh, ql, q3, 0.0)


@njit(cache=True, inline="always")
def sqrt(ah, al):
    if ah <= 0.0:
        return 0.0, 0.0
    q = math.sqrt(ah)
    ph, pl = two_prod(q, q)
    rh, rl = sub(ah, al, ph, pl)
    return quick_two_sum(q, rh / (2.0 * q))


@njit(cache=True, inline="always")
def floor(ah, al):
    fh = math.floor(ah)
    if fh == ah:
        return quick_two_sum(fh, math.floor(al))
    return fh, 0.0


@njit(cache=True, inline="always")
def _less(th1, tl1, i1, j1, th2, tl2, i2, j2):
    if th1 != th2:
        return th1 < th2
    if tl1 != tl2:
        return tl1 < tl2
    if i1 != i2:
        return i1 < i2
    return j1 < j2


@njit(cache=True)
def _push(ht, hv, hs, th, tl, i, j, ci, cj):
    k = hs[0]
    while k > 0:
        p = (k - 1) >> 1
        if _less(th, tl, i, j, ht[p, 0], ht[p, 1], hv[p, 0], hv[p, 1]):
            ht[k, 0] = ht[p, 0]
            ht[k, 1] = ht[p, 1]
            for c in range(4):
                hv[k, c] = hv[p, c]
            k = p
        else:
            break
    ht[k, 0] = th
    ht[k, 1] = tl
    hv[k, 0] = i
    hv[k, 1] = j
    hv[k, 2] = ci
    hv[k, 3] = cj
    hs[0] += 1


@njit(cache=True)
def _pop(ht, hv, hs):
    th, tl = ht[0, 0], ht[0, 1]
    i, j, ci, cj = hv[0, 0], hv[0, 1], hv[0, 2], hv[0, 3]
    size = hs[0] - 1
    hs[0] = size
    if size > 0:
        lth, ltl = ht[size, 0], ht[size, 1]
        li, lj, lci, lcj = hv[size, 0], hv[size, 1], hv[size, 2], hv[size, 3]
        k = 0
        while True:
            c = 2 * k + 1
            if c >= size:
                break
            if c + 1 < size and _less(ht[c + 1, 0], ht[c + 1, 1], hv[c + 1, 0], hv[c + 1, 1],
                                      ht[c, 0], ht[c, 1], hv[c, 0], hv[c, 1]):
                c += 1
            if _less(ht[c, 0], ht[c, 1], hv[c, 0], hv[c, 1], lth, ltl, li, lj):
                ht[k, 0] = ht[c, 0]
                ht[k, 1] = ht[c, 1]
                for q in range(4):
                    hv[k, q] = hv[c, q]
                k = c
            else:
                break
        ht[k, 0] = lth
        ht[k, 1] = ltl
        hv[k, 0] = li
        hv[k, 1] = lj
        hv[k, 2] = lci
        hv[k, 3] = lcj
    return th, tl, i, j, ci, cj


@njit(cache=True)
def _pos(xh, xl, vh, vl, tph, tpl, i, k, th, tl):
    dh, dl = sub(th, tl, tph[i], tpl[i])
    mh, ml = mul(dh, dl, vh[i, k], vl[i, k])
    return add(xh[i, k], xl[i, k], mh, ml)


@njit(cache=True)
def _predict(i, th, tl, t_end, xh, xl, vh, vl, tph, tpl, cnt, eps, ht, hv, hs):
    n, d = xh.shape
    e2h, e2l = mul(eps, 0.0, eps, 0.0)
    maxrel = 0.0
    for j in range(n):
        if j == i:
            continue
        bh, bl = 0.0, 0.0
        vvh, vvl = 0.0, 0.0
        xxh, xxl = 0.0, 0.0
        for k in range(d):
            pih, pil = _pos(xh, xl, vh, vl, tph, tpl, i, k, th, tl)
            pjh, pjl = _pos(xh, xl, vh, vl, tph, tpl, j, k, th, tl)
            ah, al = sub(pih, pil, pjh, pjl)
            fh, fl = floor(ah + 0.5, 0.0)
            # floor(a + 1/2) only needs the leading part unless a sits on a half-integer
            ah, al = sub(ah, al, fh, fl)
            dvh, dvl = sub(vh[i, k], vl[i, k], vh[j, k], vl[j, k])
            ph, pl = mul(ah, al, dvh, dvl)
            bh, bl = add(bh, bl, ph, pl)
            ph, pl = mul(dvh, dvl, dvh, dvl)
            vvh, vvl = add(vvh, vvl, ph, pl)
            ph, pl = mul(ah, al, ah, al)
            xxh, xxl = add(xxh, xxl, ph, pl)
        if vvh > maxrel:
            maxrel = vvh
        if bh >= 0.0 or vvh == 0.0:
            continue
        cch, ccl = sub(xxh, xxl, e2h, e2l)
        p1h, p1l = mul(bh, bl, bh, bl)
        p2h, p2l = mul(vvh, vvl, cch, ccl)
        dh, dl = sub(p1h, p1l, p2h, p2l)
        if dh <= 0.0:
            continue
        sqh, sql = sqrt(dh, dl)
        if sqh < 1e-12 * eps:
            continue
        if cch <= 0.0:
            sh, sl = 0.0, 0.0
        else:
            denh, denl = sub(sqh, sql, bh, bl)
            sh, sl = div(cch, ccl, denh, denl)
        if sh * math.sqrt(vvh) > 0.5 - eps + 1e-12:
            continue
        teh, tel = add(th, tl, sh, sl)
        if teh > t_end:
            continue
        if i < j:
            _push(ht, hv, hs, teh, tel, i, j, cnt[i], cnt[j])
        else:
            _push(ht, hv, hs, teh, tel, j, i, cnt[j], cnt[i])
    if maxrel > 0.0:
        # recheck slightly early so rounding never lets a contact slip past
        trh = th + (0.5 - eps) / math.sqrt(maxrel) * (1.0 - 1e-9)
        if trh < t_end:
            _push(ht, hv, hs, trh, 0.0, i, -1, cnt[i], 0)


@njit(cache=True)
def run_events_dd(xh, xl, vh, vl, t_start, t_end, eps, max_events):
    """Double-double flow from ``t_start`` to ``t_end``; arrays modified in place.

    Returns ``(n_events, status)`` with status 1 if ``max_events`` was hit.
    """
    n, d = xh.shape
    tph = np.full(n, t_start)
    tpl = np.zeros(n)
    cnt = np.zeros(n, np.int64)
    cap = 16 * n + 64
    ht = np.empty((cap, 2))
    hv = np.empty((cap, 4), np.int64)
    hs = np.zeros(1, np.int64)
    for i in range(n):
        if hs[0] + n + 2 > ht.shape[0]:
            ht, hv = _grow(ht, hv)
        _predict(i, t_start, 0.0, t_end, xh, xl, vh, vl, tph, tpl, cnt, eps, ht, hv, hs)
    n_events = 0
    status = 0
    omh = np.empty(d)
    oml = np.empty(d)
    while hs[0] > 0:
        if hs[0] + 2 * n + 4 > ht.shape[0]:
            ht, hv = _grow(ht, hv)
        th, tl, i, j, ci, cj = _pop(ht, hv, hs)
        if j < 0:
            if cnt[i] == ci:
                _predict(i, th, tl, t_end, xh, xl, vh, vl, tph, tpl, cnt, eps, ht, hv, hs)
            continue
        if cnt[i] != ci or cnt[j] != cj:
            continue
        if n_events >= max_events:
            status = 1
            break
        for p in (i, j):
            for k in range(d):
                yh, yl = _pos(xh, xl, vh, vl, tph, tpl, p, k, th, tl)
                fh, fl = floor(yh, yl)
                xh[p, k], xl[p, k] = sub(yh, yl, fh, fl)
            tph[p] = th
            tpl[p] = tl
        rh, rl = 0.0, 0.0
        for k in range(d):
            ah, al = sub(xh[i, k], xl[i, k], xh[j, k], xl[j, k])
            fh, fl = floor(ah + 0.5, 0.0)
            ah, al = sub(ah, al, fh, fl)
            omh[k] = ah
            oml[k] = al
            ph, pl = mul(ah, al, ah, al)
            rh, rl = add(rh, rl, ph, pl)
        rh, rl = sqrt(rh, rl)
        vnh, vnl = 0.0, 0.0
        for k in range(d):
            omh[k], oml[k] = div(omh[k], oml[k], rh, rl)
            dvh, dvl = sub(vh[i, k], vl[i, k], vh[j, k], vl[j, k])
            ph, pl = mul(dvh, dvl, omh[k], oml[k])
            vnh, vnl = add(vnh, vnl, ph, pl)
        for k in range(d):
            ph, pl = mul(vnh, vnl, omh[k], oml[k])
            vh[i, k], vl[i, k] = sub(vh[i, k], vl[i, k], ph, pl)
            vh[j, k], vl[j, k] = add(vh[j, k], vl[j, k], ph, pl)
        cnt[i] += 1
        cnt[j] += 1
        n_events += 1
        _predict(i, th, tl, t_end, xh, xl, vh, vl, tph, tpl, cnt, eps, ht, hv, hs)
        _predict(j, th, tl, t_end, xh, xl, vh, vl, tph, tpl, cnt, eps, ht, hv, hs)
    for p in range(n):
        for k in range(d):
            yh, yl = _pos(xh, xl, vh, vl, tph, tpl, p, k, t_end, 0.0)
            fh, fl = floor(yh, yl)
            xh[p, k], xl[p, k] = sub(yh, yl, fh, fl)
    return n_events, status


@njit(cache=True)
def _grow(ht, hv):
    cap = ht.shape[0]
    nt = np.empty((2 * cap, 2))
    nv = np.empty((2 * cap, 4), np.int64)
    nt[:cap] = ht
    nv[:cap] = hv
    return nt, nv
