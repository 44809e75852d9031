"""Compiled parallel loops shared by cube synthesis, CFAR and accumulation.

Every kernel parallelizes over an output axis with ``prange`` so each output
element is written by exactly one thread, and the inner loops visit their
inputs in a fixed order. Results are therefore bit-identical for any thread
count.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator

import numba
import numpy as np
from numba import njit, prange


@contextmanager
def thread_limit(threads: int) -> Iterator[int]:
    """
    Run the enclosed kernels on at most ``threads`` numba threads.

    The request is clamped to ``[1, NUMBA_NUM_THREADS]``.

    Yields:
        The thread count actually in effect.
    """
    previous = numba.get_num_threads()
    count = max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(count)
    try:
        yield count
    finally:
        numba.set_num_threads(previous)


@njit(parallel=True, cache=True)
def segment_sums(values: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Sum of ``values[starts[s]:ends[s]]`` per segment, added left to right."""
    out = np.zeros(starts.shape[0])
    for s in prange(starts.shape[0]):
        acc = 0.0
        for j in range(starts[s], ends[s]):
            acc += values[j]
        out[s] = acc
    return out


@njit(parallel=True, cache=True)
def splat_targets(cube, windows, amp, k_r, r_off, k_e, e_off, k_a, a_off) -> None:
    """
    Add separable target responses to ``cube`` in place.

    Target ``t`` covers range bins ``windows[t, 0]:windows[t, 1]``, elevation
    bins ``windows[t, 2]:windows[t, 3]`` and azimuth bins
    ``windows[t, 4]:windows[t, 5]``; its kernel values start at ``r_off[t]``,
    ``e_off[t]`` and ``a_off[t]`` in the flat ``k_r``, ``k_e`` and ``k_a``.
    Range bins are split across threads, targets are visited in index order.
    """
    for ii in prange(cube.shape[0]):
        i = np.int64(ii)  # prange indices may be unsigned
        for t in range(amp.shape[0]):
            r0 = windows[t, 0]
            if i < r0 or i >= windows[t, 1]:
                continue
            kr = k_r[r_off[t] + i - r0]
            e0, z0 = windows[t, 2], windows[t, 4]
            for e in range(e0, windows[t, 3]):
                ke = kr * k_e[e_off[t] + e - e0]
                for z in range(z0, windows[t, 5]):
                    cube[i, e, z] += amp[t] * (ke * k_a[a_off[t] + z - z0])


@njit(cache=True)
def _box(table, a0, b0, a1, b1, a2, b2) -> float:
    return (table[b0, b1, b2] - table[a0, b1, b2] - table[b0, a1, b2] - table[b0, b1, a2]
            + table[a0, a1, b2] + table[a0, b1, a2] + table[b0, a1, a2] - table[a0, a1, a2])


@njit(parallel=True, cache=True)
def cfar_hits(power, table, guard, training, pfa) -> np.ndarray:
    """
    Cell-averaging CFAR decision per bin.

    ``table`` is the zero-padded summed-area table of ``power``. Windows are
    clamped at the cube edges, so the training cell count varies there.
    """
    n0, n1, n2 = power.shape
    hits = np.zeros(power.shape, dtype=np.bool_)
    w0, w1, w2 = guard[0] + training[0], guard[1] + training[1], guard[2] + training[2]
    for ii in prange(n0):
        i = np.int64(ii)
        oa0, ob0 = max(i - w0, 0), min(i + w0, n0 - 1) + 1
        ia0, ib0 = max(i - guard[0], 0), min(i + guard[0], n0 - 1) + 1
        for j in range(n1):
            oa1, ob1 = max(j - w1, 0), min(j + w1, n1 - 1) + 1
            ia1, ib1 = max(j - guard[1], 0), min(j + guard[1], n1 - 1) + 1
            for k in range(n2):
                oa2, ob2 = max(k - w2, 0), min(k + w2, n2 - 1) + 1
                ia2, ib2 = max(k - guard[2], 0), min(k + guard[2], n2 - 1) + 1
                total = (_box(table, oa0, ob0, oa1, ob1, oa2, ob2)
                         - _box(table, ia0, ib0, ia1, ib1, ia2, ib2))
                count = float((ob0 - oa0) * (ob1 - oa1) * (ob2 - oa2)
                              - (ib0 - ia0) * (ib1 - ia1) * (ib2 - ia2))
                alpha = count * (pfa ** (-1.0 / count) - 1.0)
                hits[i, j, k] = power[i, j, k] > alpha * (total / count)
    return hits
