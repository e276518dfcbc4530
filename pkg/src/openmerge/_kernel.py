"""Compiled per-step kernels for the engine.

These are loop versions of the vectorized reference functions in
:mod:`openmerge.dynamics`.  The engine calls them on every step, where
per-call numpy overhead would otherwise dominate; tests check that both
versions agree.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def stopping_distance(v, decel, dt):
    u = decel * dt
    m = max(math.ceil(v / u - 1e-12) - 1.0, 0.0)
    return max(dt * m * (v - u * (m + 1.0) / 2.0), 0.0)


@njit(cache=True)
def max_speed_with_travel(budget, decel, dt):
    r = budget / dt
    if not r > 0.0:
        return 0.0
    if math.isinf(r):
        return math.inf
    u = decel * dt
    k = math.floor((-1.0 + math.sqrt(1.0 + 8.0 * r / u)) / 2.0)
    return r / (k + 1.0) + u * k / 2.0


@njit(cache=True)
def safe_next_speed(gap, leader_speed, decel, dt, margin):
    if math.isinf(gap):
        return math.inf
    vl_next = max(leader_speed - decel * dt, 0.0)
    budget = gap + vl_next * dt + stopping_distance(vl_next, decel, dt) - margin
    by_stop = max_speed_with_travel(budget, decel, dt)
    by_gap = (gap + vl_next * dt - margin) / dt
    return min(by_stop, max(by_gap, 0.0))


@njit(cache=True)
def idm(v, vl, gap, v0, T, a, b, delta, s0):
    free = 1.0 - (v / v0) ** delta
    if math.isinf(gap):
        return a * free
    s = max(gap, 1e-3)
    dyn = v * T + v * (v - vl) / (2.0 * math.sqrt(a * b))
    s_star = s0 + max(0.0, dyn)
    return a * (free - (s_star / s) ** 2)


@njit(cache=True)
def route_neighbors(x, cp, cm, length):
    """Leader/follower indices and gaps for columns sorted post, main, ramp."""
    n = x.shape[0]
    lead = np.arange(-1, n - 1)
    fol = np.arange(1, n + 1)
    post_tail = cp - 1 if cp > 0 else -1
    best = -1
    for lo, hi in ((cp, cp + cm), (cp + cm, n)):
        if hi > lo:
            lead[lo] = post_tail
            fol[hi - 1] = -1
            if best < 0 or x[lo] > x[best]:
                best = lo
    if cp > 0:
        lead[0] = -1
        fol[post_tail] = best
    lgap = np.full(n, np.inf)
    fgap = np.full(n, np.inf)
    for i in range(n):
        if lead[i] >= 0:
            lgap[i] = x[lead[i]] - x[i] - length
        if fol[i] >= 0:
            fgap[i] = x[i] - x[fol[i]] - length
    return lead, lgap, fol, fgap


@njit(cache=True)
def advance(pos, speed, edge, lead, lgap, stop_gap, action, pre_len, post_len,
            v0, T, a, b, delta, s0, accel_max, decel_max, dt, vlim, margin):
    """One integration step for every vehicle.

    ``action`` is NaN for vehicles that follow the IDM.  Returns new speed,
    new position and new edge; positions past ``post_len`` on the post-merge
    edge (kind 2) mean the vehicle leaves.
    """
    n = pos.shape[0]
    new_speed = np.empty(n)
    new_pos = np.empty(n)
    new_edge = edge.copy()
    for i in range(n):
        v = speed[i]
        if lead[i] >= 0:
            vl = speed[lead[i]]
            g = lgap[i]
        else:
            vl = 0.0
            g = math.inf
        acc = idm(v, vl, g, v0, T, a, b, delta, s0)
        vn = safe_next_speed(g, vl, decel_max, dt, margin)
        sg = stop_gap[i]
        if not math.isinf(sg):
            acc = min(acc, idm(v, 0.0, sg, v0, T, a, b, delta, s0))
            vn = min(vn, safe_next_speed(sg, 0.0, decel_max, dt, margin))
        if not math.isnan(action[i]):
            acc = action[i]
        lo = max(-decel_max, -v / dt)
        hi = max(min(accel_max, (vlim - v) / dt), lo)
        acc = min(max(acc, lo), hi)
        acc = max(min(acc, (vn - v) / dt), lo)
        s = min(max(v + acc * dt, 0.0), vlim)
        p = pos[i] + s * dt
        e = edge[i]
        if e != 2 and p > pre_len[e]:
            p -= pre_len[e]
            new_edge[i] = 2
        new_speed[i] = s
        new_pos[i] = p
    return new_speed, new_pos, new_edge
