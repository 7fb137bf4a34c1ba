"""Independent reference implementations shared by the test modules.

These deliberately use plain Python loops and math.exp so they share no
code path with the implementations they check.
"""

import math

import numpy as np


def matmul_loops(a, b):
    m, p = a.shape
    _, n = b.shape
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(p):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def dense_read_loops(kq, vq, km, vm):
    """Per-query softmax-weighted memory mix, walked elementwise."""
    ck, nq = kq.shape
    cv, nm = vm.shape[0], km.shape[1]
    read = np.zeros((cv, nq), dtype=kq.dtype)
    for q in range(nq):
        s = []
        for p in range(nm):
            acc = 0.0
            for c in range(ck):
                acc += kq[c, q] * km[c, p]
            s.append(acc)
        mx = max(s)
        e = [math.exp(v - mx) for v in s]
        z = sum(e)
        for p in range(nm):
            for c in range(cv):
                read[c, q] += (e[p] / z) * vm[c, p]
    return np.concatenate([vq, read], axis=0)


def topk_read_loops(kq, vq, km, vm, omega, stage, geom):
    """Gather-softmax reference walked per query pixel."""
    r = 2 ** (4 - stage)
    hi, wi = geom.stage_hw(stage)
    cv = vm.shape[0]
    read = np.zeros((cv, hi * wi), dtype=kq.dtype)
    for x in range(hi):
        for y in range(wi):
            q = x * wi + y
            cell = (x // r) * geom.w4 + (y // r)
            idx = omega[cell]
            s = [float(kq[:, q] @ km[:, p]) for p in idx]
            mx = max(s)
            e = [math.exp(v - mx) for v in s]
            z = sum(e)
            for weight, p in zip(e, idx):
                read[:, q] += (weight / z) * vm[:, p]
    return np.concatenate([vq, read], axis=0)
