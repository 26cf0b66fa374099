"""Compiled inner loops for the label-setting and sweeping solvers."""
from __future__ import annotations

import numpy as np
from numba import njit

INF = np.inf


@njit(cache=True, inline="always")
def _push(hk, hv, size, key, val):
    i = size
    hk[i] = key
    hv[i] = val
    while i > 0:
        parent = (i - 1) >> 1
        if hk[parent] < key or (hk[parent] == key and hv[parent] <= val):
            break
        hk[i] = hk[parent]
        hv[i] = hv[parent]
        i = parent
    hk[i] = key
    hv[i] = val
    return size + 1


@njit(cache=True, inline="always")
def _pop(hk, hv, size):
    key = hk[0]
    val = hv[0]
    size -= 1
    lk = hk[size]
    lv = hv[size]
    i = 0
    while True:
        c = 2 * i + 1
        if c >= size:
            break
        if c + 1 < size and (hk[c + 1] < hk[c] or (hk[c + 1] == hk[c] and hv[c + 1] < hv[c])):
            c += 1
        if lk < hk[c] or (lk == hk[c] and lv <= hv[c]):
            break
        hk[i] = hk[c]
        hv[i] = hv[c]
        i = c
    if size > 0:
        hk[i] = lk
        hv[i] = lv
    return key, val, size


@njit(cache=True)
def label_pass(n, goal, base, pred_ptr, pred_x, pred_row, pred_p):
    """Dijkstra-like labelling; unlabelled outcomes are treated as self-loops."""
    v = np.full(n, INF)
    key = np.full(n, INF)
    done = np.zeros(n, dtype=np.bool_)
    n_rows = base.shape[0]
    sF = np.zeros(n_rows)
    pF = np.zeros(n_rows)
    cap = pred_x.shape[0] + 1
    hk = np.empty(cap)
    hv = np.empty(cap, dtype=np.int64)
    size = 0
    size = _push(hk, hv, size, 0.0, goal)
    v[goal] = 0.0
    done[goal] = True
    order = np.empty(n, dtype=np.int64)
    n_order = 0
    pops = 0
    while size > 0:
        q, y, size = _pop(hk, hv, size)
        pops += 1
        if y != goal:
            if done[y] or q > key[y]:
                continue
            done[y] = True
            v[y] = q
            order[n_order] = y
            n_order += 1
        vy = v[y]
        for k in range(pred_ptr[y], pred_ptr[y + 1]):
            x = pred_x[k]
            if done[x]:
                continue
            r = pred_row[k]
            p = pred_p[k]
            sF[r] += p * vy
            pF[r] += p
            qn = (base[r] + sF[r]) / pF[r]
            if qn < key[x]:
                key[x] = qn
                size = _push(hk, hv, size, qn, x)
    return v, order[:n_order], pops


@njit(cache=True)
def sweep_pass(goal, v, order, use_ptr, use_rows, base, inv, ex_ptr, ex_next, ex_prob,
               pred_ptr, pred_x, pred_w, tol, max_sweeps):
    """Gauss-Seidel backups in ``order`` until no state can be off by more than ``tol``."""
    n = v.shape[0]
    dirty = np.zeros(n, dtype=np.bool_)
    for i in range(order.shape[0]):
        dirty[order[i]] = True
    pending = np.zeros(n)
    choice = np.full(n, -1, dtype=np.int64)
    backups = 0
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        sweeps += 1
        again = False
        for i in range(order.shape[0]):
            x = order[i]
            if not dirty[x]:
                continue
            dirty[x] = False
            pending[x] = 0.0
            best = INF
            brow = -1
            for j in range(use_ptr[x], use_ptr[x + 1]):
                r = use_rows[j]
                s = base[r]
                for k in range(ex_ptr[r], ex_ptr[r + 1]):
                    s += ex_prob[k] * v[ex_next[k]]
                qv = s * inv[r]
                if qv < best:
                    best = qv
                    brow = r
            backups += 1
            choice[x] = brow
            d = v[x] - best
            if d != 0.0:
                v[x] = best
                ad = d if d > 0 else -d
                for k in range(pred_ptr[x], pred_ptr[x + 1]):
                    z = pred_x[k]
                    # a dirty state is backed up anyway and its pending sum reset
                    if dirty[z] or z == goal:
                        continue
                    pz = pending[z] + pred_w[k] * ad
                    pending[z] = pz
                    if pz > tol:
                        dirty[z] = True
                        again = True
        if not again:
            converged = True
            break
    return choice, backups, sweeps, converged


@njit(cache=True)
def dijkstra_pass(n, goal, rp_ptr, rp_x, rp_row, rp_cost):
    dist = np.full(n, INF)
    choice = np.full(n, -1, dtype=np.int64)
    done = np.zeros(n, dtype=np.bool_)
    cap = rp_x.shape[0] + 1
    hk = np.empty(cap)
    hv = np.empty(cap, dtype=np.int64)
    size = 0
    size = _push(hk, hv, size, 0.0, goal)
    dist[goal] = 0.0
    pops = 0
    while size > 0:
        d, y, size = _pop(hk, hv, size)
        pops += 1
        if done[y]:
            continue
        done[y] = True
        for k in range(rp_ptr[y], rp_ptr[y + 1]):
            x = rp_x[k]
            if done[x] or x == goal:
                continue
            nd = rp_cost[k] + d
            dx = dist[x]
            r = rp_row[k]
            if nd < dx:
                dist[x] = nd
                choice[x] = r
                size = _push(hk, hv, size, nd, x)
            elif nd == dx and r < choice[x]:
                choice[x] = r
    return dist, choice, pops


@njit(cache=True)
def restrict_pass(act_ptr, out_ptr, out_next, out_prob, out_cost, states, loc, terminal, exit_cost):
    """Rows of ``states`` relabelled through ``loc``; exits go to ``terminal``.

    Outcomes of a row sharing (next, cost) are summed in order of first
    occurrence. Returns ``(rows, cnt, ptr, nxt, prob, cost)``.
    """
    k = states.shape[0]
    cnt = np.empty(k, dtype=np.int64)
    n_rows = 0
    n_out = 0
    for i in range(k):
        s = states[i]
        cnt[i] = act_ptr[s + 1] - act_ptr[s]
        n_rows += cnt[i]
        n_out += out_ptr[act_ptr[s + 1]] - out_ptr[act_ptr[s]]
    rows = np.empty(n_rows, dtype=np.int64)
    ptr = np.zeros(n_rows + 1, dtype=np.int64)
    nxt = np.empty(n_out, dtype=np.int64)
    prob = np.empty(n_out)
    cost = np.empty(n_out)
    r_out = 0
    m = 0
    for i in range(k):
        s = states[i]
        for r in range(act_ptr[s], act_ptr[s + 1]):
            rows[r_out] = r
            start = m
            for j in range(out_ptr[r], out_ptr[r + 1]):
                y = loc[out_next[j]]
                c = out_cost[j]
                if y < 0:
                    y = terminal
                    c = exit_cost
                hit = -1
                for q in range(start, m):
                    if nxt[q] == y and cost[q] == c:
                        hit = q
                        break
                if hit >= 0:
                    prob[hit] += out_prob[j]
                else:
                    nxt[m] = y
                    prob[m] = out_prob[j]
                    cost[m] = c
                    m += 1
            r_out += 1
            ptr[r_out] = m
    return rows, cnt, ptr, nxt[:m].copy(), prob[:m].copy(), cost[:m].copy()


@njit(cache=True)
def ips_tables_pass(n, row_state, out_ptr, out_next, out_prob, p_self):
    """Self-loop-free outcome lists and predecessor lists for IPS."""
    n_rows = out_ptr.shape[0] - 1
    usable = p_self < 1.0 - 1e-15
    inv = np.empty(n_rows)
    for r in range(n_rows):
        inv[r] = 1.0 / (1.0 - p_self[r]) if usable[r] else INF
    m = 0
    for r in range(n_rows):
        if usable[r]:
            s = row_state[r]
            for j in range(out_ptr[r], out_ptr[r + 1]):
                if out_next[j] != s:
                    m += 1
    ex_row = np.empty(m, dtype=np.int64)
    ex_next = np.empty(m, dtype=np.int64)
    ex_prob = np.empty(m)
    ex_ptr = np.zeros(n_rows + 1, dtype=np.int64)
    pred_ptr = np.zeros(n + 1, dtype=np.int64)
    q = 0
    for r in range(n_rows):
        if usable[r]:
            s = row_state[r]
            for j in range(out_ptr[r], out_ptr[r + 1]):
                y = out_next[j]
                if y != s:
                    ex_row[q] = r
                    ex_next[q] = y
                    ex_prob[q] = out_prob[j]
                    pred_ptr[y + 1] += 1
                    q += 1
        ex_ptr[r + 1] = q
    for y in range(n):
        pred_ptr[y + 1] += pred_ptr[y]
    # stable counting sort of the outcomes by next state
    fill = pred_ptr[:-1].copy()
    pred_row = np.empty(m, dtype=np.int64)
    pred_p = np.empty(m)
    for q in range(m):
        y = ex_next[q]
        pos = fill[y]
        fill[y] += 1
        pred_row[pos] = ex_row[q]
        pred_p[pos] = ex_prob[q]
    pred_x = np.empty(m, dtype=np.int64)
    pred_w = np.empty(m)
    for q in range(m):
        pred_x[q] = row_state[pred_row[q]]
        pred_w[q] = pred_p[q] * inv[pred_row[q]]
    return inv, usable, ex_ptr, ex_next, ex_prob, pred_ptr, pred_x, pred_row, pred_p, pred_w
