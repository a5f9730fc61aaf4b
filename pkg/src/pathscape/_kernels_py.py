"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

import sys

import numpy as np

KIND, KW, KH, SW, SH, DW, DH, PW, PH, CIN, COUT, INW, INH = range(13)


def enumerate_chain(stages: np.ndarray, c: int, w: int, h: int, counts: np.ndarray) -> int:
    rows = [tuple(int(v) for v in row) for row in stages]
    n = len(rows)
    visited = 0
    sys.setrecursionlimit(max(sys.getrecursionlimit(), 4 * n + 100))

    def descend(depth, c, w, h):
        nonlocal visited
        if depth == n:
            counts[c, w, h] += 1
            visited += 1
            return
        row = rows[depth]
        if row[KIND] == 1:
            area = row[INW] * row[INH]
            descend(depth + 1, c // area, (c % area) // row[INH], c % row[INH])
            return
        if c >= row[COUT]:
            return
        for kw in range(row[KW]):
            nw = w * row[SW] + kw * row[DW] - row[PW]
            if nw < 0 or nw >= row[INW]:
                continue
            for kh in range(row[KH]):
                nh = h * row[SH] + kh * row[DH] - row[PH]
                if nh < 0 or nh >= row[INH]:
                    continue
                for ci in range(row[CIN]):
                    descend(depth + 1, ci, nw, nh)

    descend(0, c, w, h)
    return visited


def scatter_add(src: np.ndarray, index: np.ndarray, size: int) -> np.ndarray:
    nb, nm = src.shape
    keep = index >= 0
    flat = (np.arange(nb)[:, None] * size + index[None, keep]).ravel()
    out = np.bincount(flat, weights=src[:, keep].ravel(), minlength=nb * size)
    return out.reshape(nb, size)
