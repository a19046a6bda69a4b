"""Compiled round loops.

Both loops draw destinations the same way: one double from the destination
buffer per non-empty node, nodes taken in ascending index order. The traced
loop additionally reads the order buffer for ball selection and arrival
shuffling. Each call runs at most ``max_rounds`` rounds and stops early when a
buffer could run dry mid-round; the caller refills and calls again.

Per-call statistics are written to ``out``:

    0 rounds done          5 sum of empty-node counts
    1 dest buffer position 6 forwarding events
    2 first legit round    7 balls inserted (dominating variant)
    3 first violation      8 samples written
    4 largest max load     9 balls moved in the last round
    10 order buffer position, 11 covered balls (traced only)
"""

import numpy as np
from numba import njit

from ssbins.graph import pick_neighbor

FIFO, LIFO, RANDOM = 0, 1, 2

N_OUT = 12


@njit(cache=True)
def _scan(loads, n):
    # branch-free: load patterns are random, so branches mispredict
    mx = 0
    empty = 0
    for v in range(n):
        x = loads[v]
        mx = max(mx, x)
        empty += x == 0
    return mx, empty


@njit(cache=True)
def anonymous_rounds(code, n, offsets, targets, loads, dominating,
                     ubuf, upos, max_rounds, round0, threshold, stride,
                     s_round, s_max, s_empty, srcs, dsts, out):
    ulen = len(ubuf)
    done = 0
    ns = 0
    first_legit = -1
    first_violation = -1
    overall = 0
    sum_empty = 0
    moves = 0
    inserted = 0
    k = 0
    while done < max_rounds and ulen - upos >= n:
        if dominating:
            for v in range(n):
                fresh = loads[v] == 0
                loads[v] += fresh
                inserted += fresh
        k = 0
        for v in range(n):
            srcs[k] = v
            k += loads[v] > 0
        for i in range(k):
            dsts[i] = pick_neighbor(code, n, offsets, targets, srcs[i], ubuf[upos + i])
        upos += k
        for i in range(k):
            loads[srcs[i]] -= 1
        for i in range(k):
            loads[dsts[i]] += 1
        done += 1
        t = round0 + done
        mx, empty = _scan(loads, n)
        if mx <= threshold:
            if first_legit < 0:
                first_legit = t
        elif first_violation < 0:
            first_violation = t
        if mx > overall:
            overall = mx
        sum_empty += empty
        moves += k
        if t % stride == 0:
            s_round[ns] = t
            s_max[ns] = mx
            s_empty[ns] = empty
            ns += 1
    out[0] = done
    out[1] = upos
    out[2] = first_legit
    out[3] = first_violation
    out[4] = overall
    out[5] = sum_empty
    out[6] = moves
    out[7] = inserted
    out[8] = ns
    out[9] = k


@njit(cache=True)
def traced_rounds(code, n, offsets, targets, loads, head, tail, nxt, prv, loc,
                  visited, vcount, progress, cover, strategy, shuffle_arrivals,
                  stop_on_cover, covered0,
                  ubuf, upos, obuf, opos, max_rounds, round0, threshold, stride,
                  s_round, s_max, s_empty, srcs, dsts, balls, perm, out):
    ulen = len(ubuf)
    olen = len(obuf)
    m = len(nxt)
    done = 0
    ns = 0
    first_legit = -1
    first_violation = -1
    overall = 0
    sum_empty = 0
    moves = 0
    covered = covered0
    k = 0
    while (done < max_rounds and ulen - upos >= n and olen - opos >= 2 * n
           and not (stop_on_cover and covered == m)):
        # phase 1: every non-empty node detaches one ball
        k = 0
        for v in range(n):
            if loads[v] == 0:
                continue
            if strategy == FIFO:
                b = head[v]
            elif strategy == LIFO:
                b = tail[v]
            else:
                j = min(int(obuf[opos] * loads[v]), loads[v] - 1)
                opos += 1
                b = head[v]
                for _ in range(j):
                    b = nxt[b]
            p = prv[b]
            q = nxt[b]
            if p >= 0:
                nxt[p] = q
            else:
                head[v] = q
            if q >= 0:
                prv[q] = p
            else:
                tail[v] = p
            loads[v] -= 1
            srcs[k] = v
            balls[k] = b
            k += 1
        # phase 2: destinations, same draw order as the anonymous loop
        for i in range(k):
            dsts[i] = pick_neighbor(code, n, offsets, targets, srcs[i], ubuf[upos])
            upos += 1
        # phase 3: append arrivals at queue tails
        for i in range(k):
            perm[i] = i
        if shuffle_arrivals:
            for i in range(k - 1, 0, -1):
                j = min(int(obuf[opos] * (i + 1)), i)
                opos += 1
                tmp = perm[i]
                perm[i] = perm[j]
                perm[j] = tmp
        t = round0 + done + 1
        for i in range(k):
            idx = perm[i]
            b = balls[idx]
            w = dsts[idx]
            last = tail[w]
            prv[b] = last
            nxt[b] = -1
            if last >= 0:
                nxt[last] = b
            else:
                head[w] = b
            tail[w] = b
            loads[w] += 1
            loc[b] = w
            progress[b] += 1
            word = w >> 6
            bit = np.uint64(1) << np.uint64(w & 63)
            if visited[b, word] & bit == 0:
                visited[b, word] |= bit
                vcount[b] += 1
                if vcount[b] == n:
                    cover[b] = t
                    covered += 1
        done += 1
        mx, empty = _scan(loads, n)
        if mx <= threshold:
            if first_legit < 0:
                first_legit = t
        elif first_violation < 0:
            first_violation = t
        if mx > overall:
            overall = mx
        sum_empty += empty
        moves += k
        if t % stride == 0:
            s_round[ns] = t
            s_max[ns] = mx
            s_empty[ns] = empty
            ns += 1
    out[0] = done
    out[1] = upos
    out[2] = first_legit
    out[3] = first_violation
    out[4] = overall
    out[5] = sum_empty
    out[6] = moves
    out[7] = 0
    out[8] = ns
    out[9] = k
    out[10] = opos
    out[11] = covered


@njit(cache=True)
def walk_cover(code, n, offsets, targets, ubuf, upos, max_hops, visited, state):
    """Undelayed single-ball walk. ``state`` = [position, hops, distinct visited]."""
    ulen = len(ubuf)
    v = state[0]
    hops = state[1]
    seen = state[2]
    done = 0
    while seen < n and done < max_hops and upos < ulen:
        v = pick_neighbor(code, n, offsets, targets, v, ubuf[upos])
        upos += 1
        hops += 1
        done += 1
        if not visited[v]:
            visited[v] = True
            seen += 1
    state[0] = v
    state[1] = hops
    state[2] = seen
    return upos
