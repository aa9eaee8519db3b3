"""Compiled time-stepping kernel.

State lives in flat numpy arrays so the whole warm-up plus horizon can be
advanced without returning to Python.  Column indices below are the only
schema; `engine.py` builds and reads these arrays.
"""

import numpy as np
from numba import njit

# vehicle float columns
F_DEPART, F_POS, F_SPD, F_TENTER, F_TARR = 0, 1, 2, 3, 4
F_A, F_B, F_T, F_S0, F_SF, F_DELTA, F_LEN, F_BMAX = 5, 6, 7, 8, 9, 10, 11, 12
F_ALPHA, F_BETA, F_VMAX, F_D0, F_POSOLD = 13, 14, 15, 16, 17
NF = 18
# vehicle int columns
I_PATH, I_STATUS, I_PIDX, I_LANE, I_FIXED, I_MODEL, I_NEXTLANE = 0, 1, 2, 3, 4, 5, 6
NI = 7
# link columns
LF_LEN, LF_VLIM, LF_CYCLE, LF_OFFSET = 0, 1, 2, 3
LI_LANES, LI_SEG0, LI_NSEG, LI_NGW, LI_RAMP = 0, 1, 2, 3, 4
NLI = 5
# state ints
S_NACT, S_FIRST_PENDING, S_STEP = 0, 1, 2
# diagnostics
D_DEPARTED, D_ARRIVED, D_HOLDS, D_DEFERRED, D_FAULT, D_MERGE_YIELDS, D_LANE_CHANGES = 0, 1, 2, 3, 4, 5, 6
ND = 8

PENDING, ACTIVE, ARRIVED = 0, 1, 2
MODEL_IDM, MODEL_BANDO = 0, 1

KEY_SPAN = 1.0e5  # must exceed every link length
QUEUE_SPEED = 2.0
EMPTY_SPACE = 1.0e9
MIN_VIRTUAL_GAP = 0.5
MERGE_ZONE = 50.0
LC_ZONE = 400.0  # mandatory lane changes start this far before the link end
LC_SAFE_DECEL = 4.0
LC_GAIN = 0.5  # m/s^2 needed for a balancing change
LC_POLITE_DECEL = 1.0


@njit(cache=True)
def accel(vf, k, model, v, has_leader, gap, v_lead, vlim):
    if model == MODEL_BANDO:
        if has_leader:
            acc = vf[k, F_ALPHA] * (vf[k, F_VMAX] * np.tanh(gap / vf[k, F_D0]) - v) \
                + vf[k, F_BETA] * (v_lead - v) / (gap * gap)
        else:
            acc = vf[k, F_ALPHA] * (vf[k, F_VMAX] - v)
    else:
        a = vf[k, F_A]
        v0 = vlim * vf[k, F_SF]
        acc = 1.0 - (v / v0) ** vf[k, F_DELTA]
        if has_leader:
            dyn = v * vf[k, F_T] + v * (v - v_lead) / (2.0 * np.sqrt(a * vf[k, F_B]))
            if dyn < 0.0:
                dyn = 0.0
            s = (vf[k, F_S0] + dyn) / gap
            acc -= s * s
        acc *= a
    if acc < -vf[k, F_BMAX]:
        acc = -vf[k, F_BMAX]
    return acc


@njit(cache=True)
def is_green(lf, li, gw, link, t_clock):
    cyc = lf[link, LF_CYCLE]
    if cyc <= 0.0:
        return True
    tc = (t_clock - lf[link, LF_OFFSET]) % cyc
    for g in range(li[link, LI_NGW]):
        if gw[link, g, 0] <= tc < gw[link, g, 1]:
            return True
    return False


@njit(cache=True)
def _rear_valid(vi, rid, link, lane, path_links):
    if rid < 0 or vi[rid, I_STATUS] != ACTIVE or vi[rid, I_LANE] != lane:
        return False
    return path_links[vi[rid, I_PATH], vi[rid, I_PIDX]] == link


@njit(cache=True)
def aligned_lane(li, l, nl, z):
    """Lane on `nl` that continues lane `z` of `l`, or -1 if lane `z` ends.

    Lanes are left-aligned, except around ramps where they line up on the right.
    """
    lanes = li[l, LI_LANES]
    nlanes = li[nl, LI_LANES]
    if li[l, LI_RAMP] != li[nl, LI_RAMP]:
        zn = z + nlanes - lanes
    else:
        zn = z
    if 0 <= zn < nlanes:
        return zn
    return -1


@njit(cache=True)
def nearest_lane(li, l, nl, z):
    """Continuing lane of `z`, or the closest surviving lane when `z` ends."""
    zn = aligned_lane(li, l, nl, z)
    if zn >= 0:
        return zn
    if li[l, LI_RAMP] != li[nl, LI_RAMP]:
        zn = z + li[nl, LI_LANES] - li[l, LI_LANES]
    else:
        zn = z
    return min(max(zn, 0), li[nl, LI_LANES] - 1)


@njit(cache=True)
def _lc_check(vf, vi, k, l, zt, nl, dist, b_safe, act, order, sk, n_act, li, lf, maxl, rear, path_links):
    """Safety check for moving `k` into lane `zt` of link `l`.

    Returns (status, follower, acceleration behind the new leader), where
    status is 0 when safe, 1 when the leader blocks and 2 when only the
    follower blocks.
    """
    x = vf[k, F_POS]
    v = vf[k, F_SPD]
    vlim = lf[l, LF_VLIM]
    a_new = accel(vf, k, vi[k, I_MODEL], v, False, 1e9, v, vlim)
    gbase = (l * maxl + zt) * KEY_SPAN
    j = np.searchsorted(sk, gbase + x)
    if j < n_act and sk[j] < gbase + KEY_SPAN:
        kl = act[order[j]]
        g = vf[kl, F_POS] - vf[kl, F_LEN] - x
        if g < 2.0:
            return 1, -1, 0.0
        a_new = accel(vf, k, vi[k, I_MODEL], v, True, g, vf[kl, F_SPD], vlim)
        if a_new < -b_safe:
            return 1, -1, a_new
    else:
        zn = aligned_lane(li, l, nl, zt)
        kl = rear[nl, zn] if zn >= 0 else -1
        if _rear_valid(vi, kl, nl, zn, path_links):
            g = dist + vf[kl, F_POS] - vf[kl, F_LEN]
            if g < 2.0:
                return 1, -1, 0.0
            a_new = accel(vf, k, vi[k, I_MODEL], v, True, g, vf[kl, F_SPD], vlim)
            if a_new < -b_safe:
                return 1, -1, a_new
    if j > 0 and sk[j - 1] >= gbase:
        kf = act[order[j - 1]]
        g = x - vf[k, F_LEN] - vf[kf, F_POS]
        if g < 2.0 or accel(vf, kf, vi[kf, I_MODEL], vf[kf, F_SPD], True, g, v, vlim) < -b_safe:
            return 2, kf, a_new
    return 0, -1, a_new


@njit(cache=True)
def lane_changes(vf, vi, act, order, sk, n_act, lf, li, path_links, path_n, maxl, rear, used, yield_to, diag):
    """Lane changes on the approach to a lane drop.

    Within `LC_ZONE` of the link end a vehicle whose lane does not continue
    steps one lane toward the lanes that do, if neither it nor its new
    follower would have to brake harder than a threshold that rises to
    `LC_SAFE_DECEL` at the end.  Vehicles in continuing lanes may also move
    to another continuing lane when that gains at least `LC_GAIN` of
    acceleration, so the remaining lanes share the load.  At most one
    vehicle enters or leaves a lane per step so the stale ordering stays
    valid.  Returns whether any vehicle changed lane.
    """
    used[:, :] = False
    changed = False
    for q in range(n_act):
        k = act[order[q]]
        if vi[k, I_FIXED] >= 0:
            continue
        p = vi[k, I_PATH]
        pi = vi[k, I_PIDX]
        if pi + 1 >= path_n[p]:
            continue
        l = path_links[p, pi]
        dist = lf[l, LF_LEN] - vf[k, F_POS]
        if dist > LC_ZONE:
            continue
        lanes = li[l, LI_LANES]
        nl = path_links[p, pi + 1]
        if li[nl, LI_LANES] >= lanes:
            continue
        z = vi[k, I_LANE]
        if used[l, z]:
            continue
        if aligned_lane(li, l, nl, z) < 0:
            # mandatory: accept harsher braking as the end of the lane approaches
            b_safe = LC_SAFE_DECEL * (1.0 - 0.75 * dist / LC_ZONE)
            zt = z - 1 if aligned_lane(li, l, nl, 0) >= 0 else z + 1
            if used[l, zt]:
                continue
            status, kf, _ = _lc_check(vf, vi, k, l, zt, nl, dist, b_safe, act, order, sk, n_act,
                                      li, lf, maxl, rear, path_links)
            if status == 2 and yield_to[kf] < 0:
                yield_to[kf] = k  # ask the blocking follower to open a gap
            if status != 0:
                continue
        else:
            # discretionary balancing between continuing lanes
            vlim = lf[l, LF_VLIM]
            v = vf[k, F_SPD]
            a_own = accel(vf, k, vi[k, I_MODEL], v, False, 1e9, v, vlim)
            if q + 1 < n_act:
                k2 = act[order[q + 1]]
                if sk[q + 1] < (l * maxl + z + 1) * KEY_SPAN:
                    g = vf[k2, F_POS] - vf[k2, F_LEN] - vf[k, F_POS]
                    a_own = accel(vf, k, vi[k, I_MODEL], v, True, g, vf[k2, F_SPD], vlim)
            zt = -1
            best = a_own + LC_GAIN
            for cand in (z - 1, z + 1):
                if cand < 0 or cand >= lanes or used[l, cand] or aligned_lane(li, l, nl, cand) < 0:
                    continue
                status, kf, a_new = _lc_check(vf, vi, k, l, cand, nl, dist, LC_POLITE_DECEL, act, order,
                                              sk, n_act, li, lf, maxl, rear, path_links)
                if status == 0 and a_new > best:
                    zt = cand
                    best = a_new
            if zt < 0:
                continue
        vi[k, I_LANE] = zt
        vi[k, I_NEXTLANE] = -1
        used[l, z] = True
        used[l, zt] = True
        diag[D_LANE_CHANGES] += 1
        changed = True
    return changed


@njit(cache=True, nogil=True)
def advance(
    n_steps, dt, warmup, horizon, dk, dr, t_clock0,
    vf, vi, state, act, lf, li, gw, seg_bounds, path_links, path_n,
    cross, seg_sum, seg_cnt, net_vsum, net_nsum, net_steps, gapst,
    q_max, q_sum, q_steps, spill, diag, fault,
):
    """Advance `n_steps` steps; returns 0, or 1 on a collision fault."""
    N = vf.shape[0]
    L = lf.shape[0]
    maxl = 1
    for l in range(L):
        if li[l, LI_LANES] > maxl:
            maxl = li[l, LI_LANES]
    K = cross.shape[1]
    R = seg_sum.shape[1]
    rear = np.empty((L, maxl), dtype=np.int64)
    lead = np.empty(N, dtype=np.int64)
    hgap = np.empty(N)
    hvl = np.empty(N)
    hhas = np.zeros(N, dtype=np.bool_)
    hvirt = np.zeros(N, dtype=np.bool_)
    acc = np.empty(N)
    blocked = np.zeros(L, dtype=np.bool_)
    qcount = np.zeros(L, dtype=np.int64)
    claim_pos = np.empty(maxl)
    claim_len = np.empty(maxl)
    claim_spd = np.empty(maxl)
    claim_has = np.zeros(maxl, dtype=np.bool_)
    claim_virt = np.zeros(maxl, dtype=np.bool_)
    lc_used = np.zeros((L, maxl), dtype=np.bool_)
    yield_to = np.full(N, -1, dtype=np.int64)

    for _ in range(n_steps):
        step = state[S_STEP]
        t = step * dt
        t1 = (step + 1) * dt
        n_act = state[S_NACT]
        measuring_now = t >= warmup and t < warmup + horizon

        # 1. order active vehicles by (link, lane, position); a second pass
        # re-sorts after mandatory lane changes
        for q in range(n_act):
            yield_to[act[q]] = -1
        for attempt in range(2):
            keys = np.empty(n_act)
            for q in range(n_act):
                k = act[q]
                l = path_links[vi[k, I_PATH], vi[k, I_PIDX]]
                keys[q] = (l * maxl + vi[k, I_LANE]) * KEY_SPAN + vf[k, F_POS]
            order = np.argsort(keys, kind="mergesort")
            rear[:, :] = -1
            prev_group = -1
            for q in range(n_act):
                k = act[order[q]]
                l = path_links[vi[k, I_PATH], vi[k, I_PIDX]]
                group = l * maxl + vi[k, I_LANE]
                if group != prev_group:
                    rear[l, vi[k, I_LANE]] = k
                    prev_group = group
                lead[k] = -1
                if q + 1 < n_act:
                    k2 = act[order[q + 1]]
                    l2 = path_links[vi[k2, I_PATH], vi[k2, I_PIDX]]
                    if l2 == l and vi[k2, I_LANE] == vi[k, I_LANE]:
                        lead[k] = k2
                        gap = vf[k2, F_POS] - vf[k2, F_LEN] - vf[k, F_POS]
                        if gap <= 0.0:
                            diag[D_FAULT] = 1
                            fault[0] = t
                            fault[1] = k
                            fault[2] = k2
                            fault[3] = gap
                            return 1
            if attempt == 1 or not lane_changes(vf, vi, act, order, keys[order], n_act, lf, li,
                                                path_links, path_n, maxl, rear, lc_used, yield_to, diag):
                break
        sk = keys[order]
        n_sorted = sk.shape[0]
        if measuring_now:
            for q in range(n_act):
                k = act[q]
                if lead[k] >= 0:
                    gap = vf[lead[k], F_POS] - vf[lead[k], F_LEN] - vf[k, F_POS]
                    gapst[0] += 1.0
                    gapst[1] += gap
                    gapst[2] += gap * gap
                    if gap < gapst[3]:
                        gapst[3] = gap
                    if gap > gapst[4]:
                        gapst[4] = gap

        # 2. insert due vehicles, FIFO per origin link
        blocked[:] = False
        i = state[S_FIRST_PENDING]
        while i < N and vf[i, F_DEPART] <= t + 1e-9:
            if vi[i, I_STATUS] == PENDING:
                l0 = path_links[vi[i, I_PATH], 0]
                if not blocked[l0]:
                    lanes = li[l0, LI_LANES]
                    best_lane = -1
                    best_space = -1e18
                    if vi[i, I_FIXED] >= 0:
                        best_lane = min(vi[i, I_FIXED], lanes - 1)
                        rid = rear[l0, best_lane]
                        if _rear_valid(vi, rid, l0, best_lane, path_links):
                            best_space = vf[rid, F_POS] - vf[rid, F_LEN]
                        else:
                            best_space = EMPTY_SPACE
                    else:
                        for z in range(lanes):
                            rid = rear[l0, z]
                            if _rear_valid(vi, rid, l0, z, path_links):
                                sp = vf[rid, F_POS] - vf[rid, F_LEN]
                            else:
                                sp = EMPTY_SPACE
                            if sp > best_space:
                                best_space = sp
                                best_lane = z
                    s0 = vf[i, F_S0]
                    v0 = lf[l0, LF_VLIM] * vf[i, F_SF]
                    if vi[i, I_MODEL] == MODEL_BANDO:
                        v0 = vf[i, F_VMAX]
                    rid = rear[l0, best_lane]
                    has_rear = _rear_valid(vi, rid, l0, best_lane, path_links)
                    # enter at the rear vehicle's speed once the gap is at equilibrium for it
                    v_ins = v0
                    need = s0 + 1.0
                    if has_rear and best_space < 2.0 * (s0 + v0 * vf[i, F_T]):
                        if vf[rid, F_SPD] < v_ins:
                            v_ins = vf[rid, F_SPD]
                        need = max(need, s0 + v_ins * vf[i, F_T])
                    if best_space >= need:
                        if v_ins < 0.0:
                            v_ins = 0.0
                        vi[i, I_STATUS] = ACTIVE
                        vi[i, I_PIDX] = 0
                        vi[i, I_LANE] = best_lane
                        vi[i, I_NEXTLANE] = -1
                        vf[i, F_POS] = 0.0
                        vf[i, F_SPD] = v_ins
                        vf[i, F_TENTER] = t
                        lead[i] = rid if has_rear else -1
                        rear[l0, best_lane] = i
                        act[n_act] = i
                        n_act += 1
                        diag[D_DEPARTED] += 1
                        if t > vf[i, F_DEPART] + dt:
                            diag[D_DEFERRED] += 1
                    else:
                        blocked[l0] = True
            i += 1
        fp = state[S_FIRST_PENDING]
        while fp < N and vi[fp, I_STATUS] != PENDING:
            fp += 1
        state[S_FIRST_PENDING] = fp

        # 3. heads: leaders across the link boundary, merge claims
        n_heads = 0
        for q in range(n_act):
            k = act[q]
            hhas[k] = False
            hvirt[k] = False
            if lead[k] < 0:
                n_heads += 1
        hidx = np.empty(n_heads, dtype=np.int64)
        hkey = np.empty(n_heads)
        h = 0
        for q in range(n_act):
            k = act[q]
            if lead[k] < 0:
                p = vi[k, I_PATH]
                pi = vi[k, I_PIDX]
                l = path_links[p, pi]
                dist = lf[l, LF_LEN] - vf[k, F_POS]
                nl = path_links[p, pi + 1] if pi + 1 < path_n[p] else -1
                hidx[h] = k
                hkey[h] = (nl + 1) * KEY_SPAN + dist
                h += 1
        horder = np.argsort(hkey, kind="mergesort")
        cur_nl = -2
        for q in range(n_heads):
            k = hidx[horder[q]]
            p = vi[k, I_PATH]
            pi = vi[k, I_PIDX]
            l = path_links[p, pi]
            dist = lf[l, LF_LEN] - vf[k, F_POS]
            if pi + 1 >= path_n[p]:
                continue
            nl = path_links[p, pi + 1]
            lanes = li[nl, LI_LANES]
            if nl != cur_nl:
                cur_nl = nl
                for z in range(lanes):
                    rid = rear[nl, z]
                    claim_virt[z] = False
                    if _rear_valid(vi, rid, nl, z, path_links):
                        claim_has[z] = True
                        claim_pos[z] = vf[rid, F_POS]
                        claim_len[z] = vf[rid, F_LEN]
                        claim_spd[z] = vf[rid, F_SPD]
                    else:
                        claim_has[z] = False
            if vi[k, I_FIXED] >= 0:
                zsel = min(vi[k, I_FIXED], lanes - 1)
            elif 0 <= vi[k, I_NEXTLANE] < lanes:
                zsel = vi[k, I_NEXTLANE]  # keep the lane chosen on an earlier step
            else:
                zsel = nearest_lane(li, l, nl, vi[k, I_LANE])
            vi[k, I_NEXTLANE] = zsel
            if claim_has[zsel]:
                g = dist + claim_pos[zsel] - claim_len[zsel]
                if claim_virt[zsel]:
                    hvirt[k] = True
                    # side-by-side is tolerated far from the boundary and resolved on approach
                    g += claim_len[zsel] * min(1.0, dist / MERGE_ZONE)
                    if g < MIN_VIRTUAL_GAP:
                        g = MIN_VIRTUAL_GAP
                        diag[D_MERGE_YIELDS] += 1
                hhas[k] = True
                hgap[k] = max(g, MIN_VIRTUAL_GAP)
                hvl[k] = claim_spd[zsel]
            elif pi + 2 < path_n[p]:
                nnl = path_links[p, pi + 2]
                bestsp = EMPTY_SPACE
                bestv = 0.0
                for z in range(li[nnl, LI_LANES]):
                    rid = rear[nnl, z]
                    if _rear_valid(vi, rid, nnl, z, path_links):
                        sp = vf[rid, F_POS] - vf[rid, F_LEN]
                        if sp < bestsp:
                            bestsp = sp
                            bestv = vf[rid, F_SPD]
                if bestsp < EMPTY_SPACE:
                    hhas[k] = True
                    hgap[k] = max(dist + lf[nl, LF_LEN] + bestsp, MIN_VIRTUAL_GAP)
                    hvl[k] = bestv
            # vehicles further ahead in other lanes of this link bound for the same lane
            for zf in range(li[l, LI_LANES]):
                if zf == vi[k, I_LANE] or nearest_lane(li, l, nl, zf) != zsel:
                    continue
                gb = (l * maxl + zf) * KEY_SPAN
                j = np.searchsorted(sk, gb + vf[k, F_POS], side="right")
                while j < n_sorted and sk[j] < gb + KEY_SPAN:
                    kj = act[order[j]]
                    pj = vi[kj, I_PATH]
                    pij = vi[kj, I_PIDX]
                    nxt = vi[kj, I_NEXTLANE]
                    if pij + 1 < path_n[pj] and path_links[pj, pij + 1] == nl and (nxt < 0 or nxt == zsel):
                        g = vf[kj, F_POS] - vf[kj, F_LEN] - vf[k, F_POS] + vf[kj, F_LEN] * min(1.0, dist / MERGE_ZONE)
                        if g < MIN_VIRTUAL_GAP:
                            g = MIN_VIRTUAL_GAP
                            diag[D_MERGE_YIELDS] += 1
                        if not hhas[k] or g < hgap[k]:
                            hhas[k] = True
                            hvirt[k] = True
                            hgap[k] = g
                            hvl[k] = vf[kj, F_SPD]
                        break
                    j += 1
            claim_has[zsel] = True
            claim_virt[zsel] = True
            claim_pos[zsel] = -dist
            claim_len[zsel] = vf[k, F_LEN]
            claim_spd[zsel] = vf[k, F_SPD]

        # 4. accelerations
        t_clock = t_clock0 + t
        for q in range(n_act):
            k = act[q]
            l = path_links[vi[k, I_PATH], vi[k, I_PIDX]]
            v = vf[k, F_SPD]
            model = vi[k, I_MODEL]
            vlim = lf[l, LF_VLIM]
            ld = lead[k]
            if ld >= 0:
                a = accel(vf, k, model, v, True, vf[ld, F_POS] - vf[ld, F_LEN] - vf[k, F_POS], vf[ld, F_SPD], vlim)
                y = yield_to[k]
                if y >= 0 and vi[y, I_STATUS] == ACTIVE:
                    # courtesy: treat the waiting changer as a leader, but never brake hard for it
                    gy = vf[y, F_POS] - vf[y, F_LEN] - vf[k, F_POS]
                    a_y = accel(vf, k, model, v, True, max(gy, MIN_VIRTUAL_GAP), vf[y, F_SPD], vlim)
                    a_y = max(a_y, -vf[k, F_B])
                    if a_y < a:
                        a = a_y
            else:
                a = accel(vf, k, model, v, hhas[k], hgap[k], hvl[k], vlim)
                if lf[l, LF_CYCLE] > 0.0 and not is_green(lf, li, gw, l, t_clock):
                    d = lf[l, LF_LEN] - vf[k, F_POS]
                    if d * 2.0 * vf[k, F_BMAX] >= v * v:
                        a_sig = accel(vf, k, model, v, True, max(d, 1e-3), 0.0, vlim)
                        if a_sig < a:
                            a = a_sig
            acc[k] = a

        # 5. ballistic update
        for q in range(n_act):
            k = act[q]
            v = vf[k, F_SPD]
            v2 = v + acc[k] * dt
            if v2 < 0.0:
                v2 = 0.0
            vf[k, F_POSOLD] = vf[k, F_POS]
            vf[k, F_POS] = vf[k, F_POS] + 0.5 * (v + v2) * dt
            vf[k, F_SPD] = v2

        # 6. link transitions, most advanced vehicles first
        measure_t1 = t1 > warmup + 1e-9 and t1 <= warmup + horizon + 1e-9
        kk = -1
        if measure_t1:
            kk = int((t1 - warmup - 1e-9) / dk)
            if kk >= K:
                kk = K - 1
        n_cross = 0
        for q in range(n_act):
            k = act[q]
            l = path_links[vi[k, I_PATH], vi[k, I_PIDX]]
            if vf[k, F_POS] >= lf[l, LF_LEN]:
                n_cross += 1
        if n_cross > 0:
            cidx = np.empty(n_cross, dtype=np.int64)
            ckey = np.empty(n_cross)
            c = 0
            for q in range(n_act):
                k = act[q]
                l = path_links[vi[k, I_PATH], vi[k, I_PIDX]]
                if vf[k, F_POS] >= lf[l, LF_LEN]:
                    cidx[c] = k
                    ckey[c] = -(vf[k, F_POS] - lf[l, LF_LEN])
                    c += 1
            corder = np.argsort(ckey, kind="mergesort")
            for c in range(n_cross):
                k = cidx[corder[c]]
                while True:
                    p = vi[k, I_PATH]
                    pi = vi[k, I_PIDX]
                    l = path_links[p, pi]
                    ll = lf[l, LF_LEN]
                    if vf[k, F_POS] < ll:
                        break
                    if pi + 1 >= path_n[p]:
                        vi[k, I_STATUS] = ARRIVED
                        vf[k, F_TARR] = t1
                        diag[D_ARRIVED] += 1
                        if kk >= 0:
                            cross[l, kk] += 1
                        break
                    nl = path_links[p, pi + 1]
                    lanes = li[nl, LI_LANES]
                    z = vi[k, I_NEXTLANE]
                    if vi[k, I_FIXED] >= 0:
                        z = min(vi[k, I_FIXED], lanes - 1)
                    elif z < 0 or z >= lanes:
                        best = -1e18
                        z = 0
                        for zz in range(lanes):
                            rid = rear[nl, zz]
                            sp = vf[rid, F_POS] - vf[rid, F_LEN] if _rear_valid(vi, rid, nl, zz, path_links) else EMPTY_SPACE
                            if sp > best:
                                best = sp
                                z = zz
                    newpos = vf[k, F_POS] - ll
                    rid = rear[nl, z]
                    if _rear_valid(vi, rid, nl, z, path_links) and rid != k:
                        space = vf[rid, F_POS] - vf[rid, F_LEN]
                        if newpos > space - 0.5:
                            newpos = space - 0.5
                            if vf[rid, F_SPD] < vf[k, F_SPD]:
                                vf[k, F_SPD] = vf[rid, F_SPD]
                            diag[D_HOLDS] += 1
                        if newpos < 0.0:
                            # no room to enter: wait at the stop line
                            vf[k, F_POS] = max(vf[k, F_POSOLD], ll - 1e-3)
                            vf[k, F_SPD] = 0.0
                            break
                    if kk >= 0:
                        cross[l, kk] += 1
                    vi[k, I_PIDX] = pi + 1
                    vi[k, I_LANE] = z
                    vi[k, I_NEXTLANE] = -1
                    vf[k, F_POS] = newpos
                    rear[nl, z] = k

        # 7. drop arrived vehicles from the active list
        m = 0
        for q in range(n_act):
            k = act[q]
            if vi[k, I_STATUS] == ACTIVE:
                act[m] = k
                m += 1
        n_act = m
        state[S_NACT] = n_act

        # 8. segment speeds, network indicators, signal queues
        if measure_t1:
            r = int((t1 - warmup - 1e-9) / dr)
            if r >= R:
                r = R - 1
            net_steps[r] += 1
            for l in range(L):
                qcount[l] = 0
            for q in range(n_act):
                k = act[q]
                l = path_links[vi[k, I_PATH], vi[k, I_PIDX]]
                v = vf[k, F_SPD]
                x = vf[k, F_POS]
                net_vsum[r] += v
                net_nsum[r] += 1
                s0 = li[l, LI_SEG0]
                for s in range(s0, s0 + li[l, LI_NSEG]):
                    if seg_bounds[s, 0] <= x < seg_bounds[s, 1]:
                        seg_sum[s, r] += v
                        seg_cnt[s, r] += 1
                        break
                if lf[l, LF_CYCLE] > 0.0 and v < QUEUE_SPEED:
                    qcount[l] += 1
                    if x < 10.0 and vi[k, I_PIDX] > 0:
                        spill[l] = 1
            for l in range(L):
                if lf[l, LF_CYCLE] > 0.0:
                    q_sum[l] += qcount[l]
                    q_steps[l] += 1
                    if qcount[l] > q_max[l]:
                        q_max[l] = qcount[l]
        state[S_STEP] = step + 1
    return 0
