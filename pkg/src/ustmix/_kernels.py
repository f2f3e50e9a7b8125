"""Compiled inner loops: walks, Wilson's algorithm, batched hitting.

All kernels work on the CSR kernel of a WiredGraph (``indptr``, ``targets``,
``cum``) and seed numba's thread-local generator from an explicit integer, so
a call is a pure function of its arguments.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _seed(seed):
    np.random.seed(seed)


@njit(cache=True, nogil=True)
def _step(indptr, cum, v):
    a = indptr[v]
    b = indptr[v + 1]
    u = np.random.random()
    lo = a
    hi = b - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[mid] < u:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True, nogil=True)
def walk(indptr, targets, cum, start, stop, step_cap, seed):
    """Walk from ``start`` until a vertex with ``stop[v]`` is entered.

    ``stop`` has length n+1 (cemetery last). Returns (vertices, slots, flag)
    with flag 0 = stopped, 1 = step cap.
    """
    np.random.seed(seed)
    cap = 64
    verts = np.empty(cap, np.int64)
    slots = np.empty(cap, np.int64)
    verts[0] = start
    k = 0
    v = start
    n = len(indptr) - 1
    flag = 1
    while k < step_cap:
        s = _step(indptr, cum, v)
        v = targets[s]
        if k + 1 >= cap:
            cap *= 2
            nv = np.empty(cap, np.int64)
            ns = np.empty(cap, np.int64)
            nv[: k + 1] = verts[: k + 1]
            ns[:k] = slots[:k]
            verts = nv
            slots = ns
        slots[k] = s
        k += 1
        verts[k] = v
        if v == n or stop[v]:
            flag = 0
            break
    return verts[: k + 1].copy(), slots[:k].copy(), flag


@njit(cache=True, nogil=True)
def wilson(indptr, targets, cum, order, in_tree, parent, step_cap, seed):
    """Wilson's algorithm with last-exit pointers (cycle popping).

    ``in_tree``/``parent`` (slot of the outgoing edge, -1 if none) are
    modified in place and may describe a pre-installed partial tree. Only the
    vertices of ``order`` are attached. Returns the total number of steps, or
    -1 if some walk hit the step cap.
    """
    np.random.seed(seed)
    n = len(indptr) - 1
    nxt = np.full(n, -1, np.int64)
    total = 0
    for i in range(len(order)):
        s0 = order[i]
        if in_tree[s0]:
            continue
        v = s0
        steps = 0
        while v != n and not in_tree[v]:
            s = _step(indptr, cum, v)
            nxt[v] = s
            v = targets[s]
            steps += 1
            if steps > step_cap:
                return -1
        total += steps
        v = s0
        while v != n and not in_tree[v]:
            in_tree[v] = True
            parent[v] = nxt[v]
            v = targets[nxt[v]]
    return total


@njit(cache=True, nogil=True)
def wilson_batch(indptr, targets, cum, order, step_cap, seed, n_runs):
    """``n_runs`` full Wilson trees; returns parent slots, shape (n_runs, n)."""
    np.random.seed(seed)
    n = len(indptr) - 1
    out = np.empty((n_runs, n), np.int64)
    nxt = np.full(n, -1, np.int64)
    in_tree = np.zeros(n + 1, np.bool_)
    for r in range(n_runs):
        in_tree[:] = False
        in_tree[n] = True
        for i in range(len(order)):
            s0 = order[i]
            if in_tree[s0]:
                continue
            v = s0
            steps = 0
            while not in_tree[v]:
                s = _step(indptr, cum, v)
                nxt[v] = s
                v = targets[s]
                steps += 1
                if steps > step_cap:
                    out[r, 0] = -2
                    return out
            v = s0
            while not in_tree[v]:
                in_tree[v] = True
                out[r, v] = nxt[v]
                v = targets[nxt[v]]
    return out


@njit(cache=True, nogil=True)
def hit_batch(indptr, targets, cum, starts, stop, step_cap, seed):
    """Final vertex and final slot of a walk from each start (stop as in walk)."""
    np.random.seed(seed)
    n = len(indptr) - 1
    m = len(starts)
    last_v = np.empty(m, np.int64)
    last_s = np.empty(m, np.int64)
    for i in range(m):
        v = starts[i]
        s = -1
        k = 0
        while k < step_cap:
            s = _step(indptr, cum, v)
            v = targets[s]
            k += 1
            if v == n or stop[v]:
                break
        last_v[i] = v if k < step_cap or v == n or stop[v] else -1
        last_s[i] = s
    return last_v, last_s


@njit(cache=True, nogil=True)
def lerw_batch(indptr, targets, cum, start, step_cap, seed, n_runs, max_len):
    """Forward loop-erasures (as slot sequences) of walks from ``start``.

    Returns (slots, lengths): row r holds the first lengths[r] slots.
    """
    np.random.seed(seed)
    n = len(indptr) - 1
    out = np.full((n_runs, max_len), -1, np.int64)
    lens = np.zeros(n_runs, np.int64)
    nxt = np.full(n, -1, np.int64)
    for r in range(n_runs):
        v = start
        steps = 0
        while v != n:
            s = _step(indptr, cum, v)
            nxt[v] = s
            v = targets[s]
            steps += 1
            if steps > step_cap:
                lens[r] = -1
                break
        if lens[r] < 0:
            continue
        v = start
        k = 0
        while v != n:
            if k >= max_len:
                lens[r] = -2
                break
            out[r, k] = nxt[v]
            k += 1
            v = targets[nxt[v]]
        if lens[r] == 0:
            lens[r] = k
    return out, lens


@njit(cache=True, nogil=True)
def shared_walk(out_indptr, out_edges, cum_global, heads, start, stop1, stop2, bflag1, bflag2, step_cap, seed):
    """One walk on the ambient graph, run until both domains have stopped.

    ``stop*`` flag global vertices already in the respective partial tree;
    ``bflag*`` flag the boundary edges of the respective domain. Returns the
    edge sequence and the stopping lengths (number of edges) for each domain.
    """
    np.random.seed(seed)
    cap = 64
    edges = np.empty(cap, np.int64)
    k = 0
    v = start
    len1 = -1
    len2 = -1
    if stop1[v]:
        len1 = 0
    if stop2[v]:
        len2 = 0
    while (len1 < 0 or len2 < 0) and k < step_cap:
        s = _step(out_indptr, cum_global, v)
        e = out_edges[s]
        if k >= cap:
            cap *= 2
            ne = np.empty(cap, np.int64)
            ne[:k] = edges[:k]
            edges = ne
        edges[k] = e
        k += 1
        v = heads[e]
        if len1 < 0 and (bflag1[e] or stop1[v]):
            len1 = k
        if len2 < 0 and (bflag2[e] or stop2[v]):
            len2 = k
    return edges[:k].copy(), len1, len2


@njit(cache=True, nogil=True)
def hit_batch_slots(indptr, targets, cum, starts, stop, stop_slot, step_cap, seed):
    """Like hit_batch, but a walk also stops right after using a flagged slot."""
    np.random.seed(seed)
    n = len(indptr) - 1
    m = len(starts)
    last_v = np.empty(m, np.int64)
    last_s = np.empty(m, np.int64)
    for i in range(m):
        v = starts[i]
        s = -1
        done = False
        for _ in range(step_cap):
            s = _step(indptr, cum, v)
            v = targets[s]
            if v == n or stop[v] or stop_slot[s]:
                done = True
                break
        last_v[i] = v if done else -1
        last_s[i] = s
    return last_v, last_s


@njit(cache=True, nogil=True)
def frechet_prefix(P, Q):
    """Discrete Frechet distance of every prefix P[:i+1] against all of Q.

    Rolling-row coupling recursion; returns an array of length len(P).
    """
    n = P.shape[0]
    m = Q.shape[0]
    out = np.empty(n)
    row = np.empty(m)
    for j in range(m):
        d = math.hypot(P[0, 0] - Q[j, 0], P[0, 1] - Q[j, 1])
        row[j] = d if j == 0 else max(row[j - 1], d)
    out[0] = row[m - 1]
    for i in range(1, n):
        prev_left = row[0]
        d = math.hypot(P[i, 0] - Q[0, 0], P[i, 1] - Q[0, 1])
        row[0] = max(row[0], d)
        for j in range(1, m):
            d = math.hypot(P[i, 0] - Q[j, 0], P[i, 1] - Q[j, 1])
            best = min(row[j], prev_left, row[j - 1])
            prev_left = row[j]
            row[j] = max(best, d)
        out[i] = row[m - 1]
    return out


@njit(cache=True, nogil=True)
def htransform_walk(indptr, targets, probs, value, goals, K, absorbing, start, step_cap, seed):
    """Walk driven by staged Doob weights ``probs * value[stage]``.

    The stage advances when the walk enters ``goals[stage]``; the walk stops
    on entering ``absorbing``. Returns (vertices, slots, capped).
    """
    np.random.seed(seed)
    cap = 64
    verts = np.empty(cap + 1, np.int64)
    slots = np.empty(cap, np.int64)
    verts[0] = start
    v = start
    k = 0
    m = 0
    while m < step_cap:
        a = indptr[v]
        b = indptr[v + 1]
        tot = 0.0
        for s in range(a, b):
            tot += probs[s] * value[k, s]
        u = np.random.random() * tot
        acc = 0.0
        s = b - 1
        for j in range(a, b):
            acc += probs[j] * value[k, j]
            if u < acc:
                s = j
                break
        while value[k, s] <= 0.0 and s > a:
            s -= 1
        if m >= cap:
            cap *= 2
            nv = np.empty(cap + 1, np.int64)
            nv[: m + 1] = verts[: m + 1]
            verts = nv
            ns = np.empty(cap, np.int64)
            ns[:m] = slots[:m]
            slots = ns
        v = targets[s]
        slots[m] = s
        m += 1
        verts[m] = v
        if absorbing[v]:
            return verts[: m + 1].copy(), slots[:m].copy(), False
        if k < K and goals[k, v]:
            k += 1
    return verts[: m + 1].copy(), slots[:m].copy(), True


@njit(cache=True, nogil=True)
def _find(par, i):
    while par[i] != i:
        par[i] = par[par[i]]
        i = par[i]
    return i


@njit(cache=True, nogil=True)
def coarse_key_batch(indptr, targets, cum, marked, in_u, sector, n_sectors, step_cap, seed, n_runs):
    """Coarse restriction keys of ``n_runs`` trees, one integer per tree.

    Wilson's algorithm is run from the ``marked`` vertices only. Two marked
    points are linked when the path of the later one meets the path of the
    earlier one before leaving U (``in_u``); each point also records the
    sector (``sector[v]`` of the first vertex outside U) where its path
    exits. The code packs the canonical partition labels and the sectors.
    Returns -1 for a run that hit the step cap.
    """
    np.random.seed(seed)
    n = len(indptr) - 1
    k = len(marked)
    out = np.empty(n_runs, np.int64)
    nxt = np.full(n, -1, np.int64)
    parent = np.full(n, -1, np.int64)
    in_tree = np.zeros(n + 1, np.bool_)
    in_tree[n] = True
    lab = np.full(n, -1, np.int64)
    par = np.empty(k, np.int64)
    exits = np.empty(k, np.int64)
    canon = np.empty(k, np.int64)
    for r in range(n_runs):
        t_list = []
        failed = False
        for i in range(k):
            s0 = marked[i]
            if in_tree[s0]:
                continue
            v = s0
            steps = 0
            while not in_tree[v]:
                s = _step(indptr, cum, v)
                nxt[v] = s
                v = targets[s]
                steps += 1
                if steps > step_cap:
                    failed = True
                    break
            if failed:
                break
            v = s0
            while not in_tree[v]:
                in_tree[v] = True
                parent[v] = nxt[v]
                t_list.append(v)
                v = targets[nxt[v]]
        if failed:
            out[r] = -1
        else:
            for i in range(k):
                par[i] = i
                exits[i] = -1
            for j in range(k):
                v = marked[j]
                while v != n and in_u[v]:
                    if lab[v] >= 0:
                        a = _find(par, j)
                        b = _find(par, lab[v])
                        if a != b:
                            if a < b:
                                par[b] = a
                            else:
                                par[a] = b
                        exits[j] = exits[lab[v]]
                        break
                    lab[v] = j
                    v = targets[parent[v]]
                if exits[j] < 0:
                    exits[j] = sector[v]
            code = 0
            nlab = 0
            for j in range(k):
                canon[j] = -1
            for j in range(k):
                root = _find(par, j)
                if canon[root] < 0:
                    canon[root] = nlab
                    nlab += 1
                code = code * k + canon[root]
            for j in range(k):
                code = code * n_sectors + exits[j]
            out[r] = code
        for v in t_list:
            in_tree[v] = False
            parent[v] = -1
            lab[v] = -1
    return out
