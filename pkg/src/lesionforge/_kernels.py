"""Hot loops with a numba path and a pure numpy/scipy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``LESIONFORGE_DISABLE_JIT`` is unset (or "0").  Both paths are
always importable under ``_numba_*`` / ``_numpy_*`` names so tests and
benchmarks can compare them directly.
"""
import os

import numpy as np
from scipy import ndimage

from .errors import ParameterError

_flag = os.environ.get("LESIONFORGE_DISABLE_JIT", "0").strip().lower()
try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and _flag in ("", "0", "false", "no")


def _identity_njit(*args, **kwargs):
    if args and callable(args[0]):
        return args[0]
    return lambda f: f


njit = numba.njit if HAVE_NUMBA else _identity_njit


# ---------------------------------------------------------------------------
# Window accumulation: out[y - h + dy, x - h + dx] += values[k, dy, dx]
# ---------------------------------------------------------------------------

@njit(cache=True)
def _numba_accumulate_windows(out, values, ys, xs):
    n, p, _ = values.shape
    h = p // 2
    for k in range(n):
        y0 = ys[k] - h
        x0 = xs[k] - h
        for dy in range(p):
            row = y0 + dy
            for dx in range(p):
                out[row, x0 + dx] += values[k, dy, dx]
    return out


def _numpy_accumulate_windows(out, values, ys, xs):
    n, p, _ = values.shape
    h = p // 2
    for dy in range(p):
        rows = ys - h + dy
        for dx in range(p):
            # centers are distinct, so indices within one offset never collide
            out[rows, xs - h + dx] += values[:, dy, dx]
    return out


def accumulate_windows(out, values, ys, xs):
    """Add each ``p x p`` block in ``values`` into ``out`` around its center.

    ``out`` is a float64 2D array modified in place; ``ys``/``xs`` are the
    block centers and must be distinct.
    """
    ys = np.ascontiguousarray(ys, dtype=np.int64)
    xs = np.ascontiguousarray(xs, dtype=np.int64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if USE_NUMBA:
        return _numba_accumulate_windows(out, values, ys, xs)
    return _numpy_accumulate_windows(out, values, ys, xs)


# ---------------------------------------------------------------------------
# Connected components on a (nz, ny, nx) mask, labels ordered by first voxel
# in x-fastest scan order.
# ---------------------------------------------------------------------------

@njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@njit(cache=True)
def _numba_label_components(mask, full):
    nz, ny, nx = mask.shape
    flat = mask.ravel()
    n = flat.size
    parent = np.arange(n)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                i = (z * ny + y) * nx + x
                if not flat[i]:
                    continue
                # visit the already-scanned half of the neighbourhood
                for dz in range(-1, 1):
                    zz = z + dz
                    if zz < 0:
                        continue
                    for dy in range(-1, 2):
                        yy = y + dy
                        if yy < 0 or yy >= ny:
                            continue
                        for dx in range(-1, 2):
                            xx = x + dx
                            if xx < 0 or xx >= nx:
                                continue
                            j = (zz * ny + yy) * nx + xx
                            if j >= i:
                                continue
                            if not full and abs(dz) + abs(dy) + abs(dx) != 1:
                                continue
                            if flat[j]:
                                ri = _find(parent, i)
                                rj = _find(parent, j)
                                if ri != rj:
                                    if ri < rj:
                                        parent[rj] = ri
                                    else:
                                        parent[ri] = rj
    labels = np.zeros(n, dtype=np.int32)
    root_label = np.zeros(n, dtype=np.int32)
    count = 0
    for i in range(n):
        if flat[i]:
            r = _find(parent, i)
            if root_label[r] == 0:
                count += 1
                root_label[r] = count
            labels[i] = root_label[r]
    return labels.reshape(mask.shape), count


def _numpy_label_components(mask, full):
    structure = ndimage.generate_binary_structure(3, 3 if full else 1)
    labels, count = ndimage.label(mask, structure=structure)
    if count == 0:
        return labels.astype(np.int32), 0
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first, kind="stable")]
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order] = np.arange(1, count + 1, dtype=np.int32)
    return remap[labels], int(count)


def label_components(mask, connectivity=26):
    """Label a 3D boolean mask; returns (labels int32, count)."""
    if connectivity not in (6, 26):
        raise ParameterError(f"connectivity must be 6 or 26, got {connectivity}")
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    full = connectivity == 26
    if USE_NUMBA:
        labels, count = _numba_label_components(mask, full)
        return labels, int(count)
    return _numpy_label_components(mask, full)
