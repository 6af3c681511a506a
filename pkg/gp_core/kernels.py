#!/usr/bin/env python3
"""
Compiled sparse kernels: left-looking threshold incomplete Cholesky and the
triangular solves with its factor.

Factors are stored in CSC form with the diagonal entry first in each column
and row indices sorted ascending. All loops run in a fixed order, so results
are bitwise reproducible.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def ichol_csc(n, a_ptr, a_idx, a_val, col_norm, drop_tol, diag_shift):
    """Incomplete Cholesky of the lower triangle of a symmetric matrix.

    a_ptr/a_idx/a_val hold the lower triangle (rows >= column) in CSC with
    sorted rows. Entries with |L_ij| < drop_tol * col_norm[j] are dropped;
    diag_shift is added to the diagonal before factoring.

    Returns (status, column, l_ptr, l_idx, l_val). status is 0 on success
    and -1 on a nonpositive pivot in `column`.
    """
    cap = max(2 * a_val.shape[0], n + 1)
    l_ptr = np.zeros(n + 1, dtype=np.int64)
    l_idx = np.empty(cap, dtype=np.int64)
    l_val = np.empty(cap, dtype=np.float64)

    work = np.zeros(n, dtype=np.float64)
    mark = np.full(n, -1, dtype=np.int64)
    rows = np.empty(n, dtype=np.int64)
    # head[j]: first factor column with a pending entry in row j; link chains them
    head = np.full(n, -1, dtype=np.int64)
    link = np.full(n, -1, dtype=np.int64)
    cursor = np.zeros(n, dtype=np.int64)

    nnz = 0
    for j in range(n):
        count = 0
        mark[j] = j
        work[j] = diag_shift[j]
        rows[count] = j
        count += 1
        for p in range(a_ptr[j], a_ptr[j + 1]):
            i = a_idx[p]
            if mark[i] != j:
                mark[i] = j
                work[i] = 0.0
                rows[count] = i
                count += 1
            work[i] += a_val[p]

        k = head[j]
        while k != -1:
            next_k = link[k]
            pos = cursor[k]
            ljk = l_val[pos]
            for p in range(pos, l_ptr[k + 1]):
                i = l_idx[p]
                if mark[i] != j:
                    mark[i] = j
                    work[i] = 0.0
                    rows[count] = i
                    count += 1
                work[i] -= l_val[p] * ljk
            pos += 1
            cursor[k] = pos
            if pos < l_ptr[k + 1]:
                r = l_idx[pos]
                link[k] = head[r]
                head[r] = k
            k = next_k
        head[j] = -1

        pivot = work[j]
        if not (pivot > 0.0):
            return -1, j, l_ptr, l_idx[:nnz], l_val[:nnz]
        ljj = np.sqrt(pivot)

        if nnz + count > cap:
            new_cap = max(2 * cap, nnz + count)
            grown_idx = np.empty(new_cap, dtype=np.int64)
            grown_val = np.empty(new_cap, dtype=np.float64)
            grown_idx[:nnz] = l_idx[:nnz]
            grown_val[:nnz] = l_val[:nnz]
            l_idx = grown_idx
            l_val = grown_val
            cap = new_cap

        l_idx[nnz] = j
        l_val[nnz] = ljj
        nnz += 1
        threshold = drop_tol * col_norm[j]
        sorted_rows = np.sort(rows[:count])
        for t in range(count):
            i = sorted_rows[t]
            if i == j:
                continue
            value = work[i] / ljj
            if value != 0.0 and abs(value) >= threshold:
                l_idx[nnz] = i
                l_val[nnz] = value
                nnz += 1
        l_ptr[j + 1] = nnz

        first = l_ptr[j] + 1
        cursor[j] = first
        if first < nnz:
            r = l_idx[first]
            link[j] = head[r]
            head[r] = j

    return 0, n, l_ptr, l_idx[:nnz], l_val[:nnz]


@njit(cache=True)
def forward_solve(l_ptr, l_idx, l_val, b):
    """Solve L y = b, L lower triangular in CSC with diagonal first."""
    n = l_ptr.shape[0] - 1
    y = b.copy()
    for j in range(n):
        start = l_ptr[j]
        yj = y[j] / l_val[start]
        y[j] = yj
        for p in range(start + 1, l_ptr[j + 1]):
            y[l_idx[p]] -= l_val[p] * yj
    return y


@njit(cache=True)
def backward_solve(l_ptr, l_idx, l_val, y):
    """Solve L^T x = y with the same storage."""
    n = l_ptr.shape[0] - 1
    x = np.empty(n, dtype=np.float64)
    for j in range(n - 1, -1, -1):
        start = l_ptr[j]
        s = y[j]
        for p in range(start + 1, l_ptr[j + 1]):
            s -= l_val[p] * x[l_idx[p]]
        x[j] = s / l_val[start]
    return x


@njit(cache=True)
def lower_matvec(l_ptr, l_idx, l_val, v):
    """y = L v"""
    n = l_ptr.shape[0] - 1
    y = np.zeros(n, dtype=np.float64)
    for j in range(n):
        vj = v[j]
        for p in range(l_ptr[j], l_ptr[j + 1]):
            y[l_idx[p]] += l_val[p] * vj
    return y


@njit(cache=True)
def lower_transpose_matvec(l_ptr, l_idx, l_val, v):
    """y = L^T v"""
    n = l_ptr.shape[0] - 1
    y = np.zeros(n, dtype=np.float64)
    for j in range(n):
        s = 0.0
        for p in range(l_ptr[j], l_ptr[j + 1]):
            s += l_val[p] * v[l_idx[p]]
        y[j] = s
    return y


@njit(cache=True)
def _flip(i):
    return -i - 2


@njit(cache=True)
def _wclear(mark, lemax, w, n):
    if mark < 2 or mark + lemax < 0:
        for k in range(n):
            if w[k] != 0:
                w[k] = 1
        mark = 2
    return mark


@njit(cache=True)
def _tdfs(j, k, head, next_, post, stack):
    top = 0
    stack[0] = j
    while top >= 0:
        p = stack[top]
        i = head[p]
        if i == -1:
            top -= 1
            post[k] = p
            k += 1
        else:
            head[p] = next_[i]
            top += 1
            stack[top] = i
    return k


@njit(cache=True)
def amd_order(n, c_ptr, c_idx):
    """Approximate minimum degree ordering on a quotient graph.

    c_ptr/c_idx is the CSC pattern of a symmetric matrix without its
    diagonal. Element absorption, mass elimination, supernode detection
    by hashing and aggressive absorption; rows denser than
    max(16, 10 sqrt(n)) are ordered last. Returns the elimination order.
    """
    cnz = c_ptr[n]
    nzmax = cnz + cnz // 5 + 2 * n
    Cp = np.empty(n + 1, dtype=np.int64)
    Cp[:] = c_ptr
    Ci = np.zeros(max(nzmax, 1), dtype=np.int64)
    Ci[:cnz] = c_idx[:cnz]

    dense = max(16, int(10.0 * np.sqrt(float(n))))
    dense = min(n - 2, dense)

    P = np.empty(n + 1, dtype=np.int64)
    length = np.empty(n + 1, dtype=np.int64)
    nv = np.empty(n + 1, dtype=np.int64)
    next_ = np.empty(n + 1, dtype=np.int64)
    head = np.empty(n + 1, dtype=np.int64)
    elen = np.empty(n + 1, dtype=np.int64)
    degree = np.empty(n + 1, dtype=np.int64)
    w = np.empty(n + 1, dtype=np.int64)
    hhead = np.empty(n + 1, dtype=np.int64)
    last = P

    for k in range(n):
        length[k] = Cp[k + 1] - Cp[k]
    length[n] = 0
    for i in range(n + 1):
        head[i] = -1
        last[i] = -1
        next_[i] = -1
        hhead[i] = -1
        nv[i] = 1
        w[i] = 1
        elen[i] = 0
        degree[i] = length[i]
    mark = _wclear(0, 0, w, n)
    elen[n] = -2
    Cp[n] = -1
    w[n] = 0

    nel = 0
    mindeg = 0
    lemax = 0
    for i in range(n):
        d = degree[i]
        if d == 0:
            elen[i] = -2
            nel += 1
            Cp[i] = -1
            w[i] = 0
        elif d > dense:
            nv[i] = 0
            elen[i] = -1
            nel += 1
            Cp[i] = _flip(n)
            nv[n] += 1
        else:
            if head[d] != -1:
                last[head[d]] = i
            next_[i] = head[d]
            head[d] = i

    while nel < n:
        # pivot of minimum approximate degree
        k = -1
        while mindeg < n:
            k = head[mindeg]
            if k != -1:
                break
            mindeg += 1
        if next_[k] != -1:
            last[next_[k]] = -1
        head[mindeg] = next_[k]
        elenk = elen[k]
        nvk = nv[k]
        nel += nvk

        # compact Ci when the new element may not fit
        if elenk > 0 and cnz + mindeg >= nzmax:
            for j in range(n):
                p = Cp[j]
                if p >= 0:
                    Cp[j] = Ci[p]
                    Ci[p] = _flip(j)
            q = 0
            p = 0
            while p < cnz:
                j = _flip(Ci[p])
                p += 1
                if j >= 0:
                    Ci[q] = Cp[j]
                    Cp[j] = q
                    q += 1
                    for _ in range(length[j] - 1):
                        Ci[q] = Ci[p]
                        q += 1
                        p += 1
            cnz = q

        # new element Lk
        dk = 0
        nv[k] = -nvk
        p = Cp[k]
        pk1 = p if elenk == 0 else cnz
        pk2 = pk1
        for k1 in range(1, elenk + 2):
            if k1 > elenk:
                e = k
                pj = p
                ln = length[k] - elenk
            else:
                e = Ci[p]
                p += 1
                pj = Cp[e]
                ln = length[e]
            for _ in range(ln):
                i = Ci[pj]
                pj += 1
                nvi = nv[i]
                if nvi <= 0:
                    continue
                dk += nvi
                nv[i] = -nvi
                Ci[pk2] = i
                pk2 += 1
                if next_[i] != -1:
                    last[next_[i]] = last[i]
                if last[i] != -1:
                    next_[last[i]] = next_[i]
                else:
                    head[degree[i]] = next_[i]
            if e != k:
                Cp[e] = _flip(k)
                w[e] = 0
        if elenk != 0:
            cnz = pk2
        degree[k] = dk
        Cp[k] = pk1
        length[k] = pk2 - pk1
        elen[k] = -2

        # |Le \ Lk| for every element adjacent to Lk
        mark = _wclear(mark, lemax, w, n)
        for pk in range(pk1, pk2):
            i = Ci[pk]
            eln = elen[i]
            if eln <= 0:
                continue
            nvi = -nv[i]
            wnvi = mark - nvi
            for p in range(Cp[i], Cp[i] + eln):
                e = Ci[p]
                if w[e] >= mark:
                    w[e] -= nvi
                elif w[e] != 0:
                    w[e] = degree[e] + wnvi

        # approximate degree update
        for pk in range(pk1, pk2):
            i = Ci[pk]
            p1 = Cp[i]
            p2 = p1 + elen[i] - 1
            pn = p1
            h = 0
            d = 0
            for p in range(p1, p2 + 1):
                e = Ci[p]
                if w[e] != 0:
                    dext = w[e] - mark
                    if dext > 0:
                        d += dext
                        Ci[pn] = e
                        pn += 1
                        h += e
                    else:
                        Cp[e] = _flip(k)
                        w[e] = 0
            elen[i] = pn - p1 + 1
            p3 = pn
            p4 = p1 + length[i]
            for p in range(p2 + 1, p4):
                j = Ci[p]
                nvj = nv[j]
                if nvj <= 0:
                    continue
                d += nvj
                Ci[pn] = j
                pn += 1
                h += j
            if d == 0:
                # mass elimination
                Cp[i] = _flip(k)
                nvi = -nv[i]
                dk -= nvi
                nvk += nvi
                nel += nvi
                nv[i] = 0
                elen[i] = -1
            else:
                degree[i] = min(degree[i], d)
                Ci[pn] = Ci[p3]
                Ci[p3] = Ci[p1]
                Ci[p1] = k
                length[i] = pn - p1 + 1
                h = abs(h) % n
                next_[i] = hhead[h]
                hhead[h] = i
                last[i] = h
        degree[k] = dk
        lemax = max(lemax, dk)
        mark = _wclear(mark + lemax, lemax, w, n)

        # supernodes: nodes with identical adjacency share a hash bucket
        for pk in range(pk1, pk2):
            i = Ci[pk]
            if nv[i] >= 0:
                continue
            h = last[i]
            i = hhead[h]
            hhead[h] = -1
            while i != -1 and next_[i] != -1:
                ln = length[i]
                eln = elen[i]
                for p in range(Cp[i] + 1, Cp[i] + ln):
                    w[Ci[p]] = mark
                jlast = i
                j = next_[i]
                while j != -1:
                    ok = length[j] == ln and elen[j] == eln
                    p = Cp[j] + 1
                    while ok and p <= Cp[j] + ln - 1:
                        if w[Ci[p]] != mark:
                            ok = False
                        p += 1
                    if ok:
                        Cp[j] = _flip(i)
                        nv[i] += nv[j]
                        nv[j] = 0
                        elen[j] = -1
                        j = next_[j]
                        next_[jlast] = j
                    else:
                        jlast = j
                        j = next_[j]
                i = next_[i]
                mark += 1

        # finalize Lk and put its nodes back in the degree lists
        p = pk1
        for pk in range(pk1, pk2):
            i = Ci[pk]
            nvi = -nv[i]
            if nvi <= 0:
                continue
            nv[i] = nvi
            d = degree[i] + dk - nvi
            d = min(d, n - nel - nvi)
            if head[d] != -1:
                last[head[d]] = i
            next_[i] = head[d]
            last[i] = -1
            head[d] = i
            mindeg = min(mindeg, d)
            degree[i] = d
            Ci[p] = i
            p += 1
        nv[k] = nvk
        length[k] = p - pk1
        if length[k] == 0:
            Cp[k] = -1
            w[k] = 0
        if elenk != 0:
            cnz = p

    # postorder the assembly tree
    for i in range(n):
        Cp[i] = _flip(Cp[i])
    for j in range(n + 1):
        head[j] = -1
    for j in range(n, -1, -1):
        if nv[j] > 0:
            continue
        next_[j] = head[Cp[j]]
        head[Cp[j]] = j
    for e in range(n, -1, -1):
        if nv[e] <= 0:
            continue
        if Cp[e] != -1:
            next_[e] = head[Cp[e]]
            head[Cp[e]] = e
    k = 0
    for i in range(n + 1):
        if Cp[i] == -1:
            k = _tdfs(i, k, head, next_, P, w)
    return P[:n].copy()
