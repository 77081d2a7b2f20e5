"""Reconstruction-error maps from the novelty detector and their binarization."""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DataError, DegenerateError, ParameterError, ShapeError
from .nn_core import predict
from .patches import ND_SEQUENCES, _check_p, _gather, grid_centers

MAX_ROWS = 8192


@dataclass
class ErrorMap:
    values: np.ndarray  # [z, y, x] float32, >= 0
    valid: np.ndarray  # [z, y, x] bool
    kind: str
    patch_size: int
    stride: int = 1
    meta: dict = field(default_factory=dict)

    def valid_values(self):
        return self.values[self.valid]


def patch_error(F, T, RF, RT):
    """Elementwise (RF - F)^2 + (RT - T)^2."""
    arrays = [np.asarray(a, dtype=np.float64) for a in (F, T, RF, RT)]
    if len({a.shape for a in arrays}) != 1:
        raise ShapeError("patch_error inputs must share one shape")
    F, T, RF, RT = arrays
    return (RF - F) ** 2 + (RT - T) ** 2


def _check_nd(study, nd_net, p, sequences):
    if nd_net.role != "nd":
        raise ParameterError(f"expected a novelty detector, got role {nd_net.role!r}")
    missing = [s for s in sequences if s not in study.sequences]
    if missing:
        raise DataError(f"study {study.study_id!r} is missing {missing} needed by the detector")
    if nd_net.input_dim != len(sequences) * p * p:
        raise ShapeError(f"detector input {nd_net.input_dim} does not match "
                         f"{len(sequences)} x {p}^2")


def slice_errors(nd_net, stack_slice, ys, xs, p):
    """Patch-error arrays E, shape (n, p, p), for the given centers of one slice."""
    n_seq = stack_slice.shape[0]
    out = np.empty((len(ys), p, p), dtype=np.float64)
    for start in range(0, len(ys), MAX_ROWS):
        sl = slice(start, start + MAX_ROWS)
        rows = _gather(stack_slice, ys[sl], xs[sl], p)
        recon = predict(nd_net.layers, rows)
        sq = np.square(recon.astype(np.float64) - rows).reshape(-1, n_seq, p, p)
        out[sl] = sq.sum(axis=1)
    return out


def nd_map(study, nd_net, p=21, stride=1, sequences=ND_SEQUENCES):
    """Mean patch error assigned to each patch center (border band invalid)."""
    _check_nd(study, nd_net, p, sequences)
    stack = study.stack(sequences)
    _check_p(p, stack.shape[1:])
    _, nz, ny, nx = stack.shape
    gy, gx = np.meshgrid(grid_centers(ny, p, stride), grid_centers(nx, p, stride), indexing="ij")
    ys, xs = gy.ravel(), gx.ravel()
    values = np.zeros((nz, ny, nx), dtype=np.float32)
    valid = np.zeros((nz, ny, nx), dtype=bool)
    n_terms = len(sequences) * p * p
    for z in range(nz):
        E = slice_errors(nd_net, stack[:, z], ys, xs, p)
        values[z, ys, xs] = E.reshape(len(ys), -1).sum(axis=1) / n_terms
        valid[z, ys, xs] = True
    return ErrorMap(values, valid, "nd", p, stride)


def cnd_map(study, nd_net, p=21, sequences=ND_SEQUENCES):
    """Cumulative patch error: every voxel sums E from all windows containing it.

    Voxels covered by at least one window are valid; with the window
    fitting the slice that is every in-plane voxel.
    """
    _check_nd(study, nd_net, p, sequences)
    stack = study.stack(sequences)
    _check_p(p, stack.shape[1:])
    _, nz, ny, nx = stack.shape
    gy, gx = np.meshgrid(grid_centers(ny, p, 1), grid_centers(nx, p, 1), indexing="ij")
    ys, xs = gy.ravel(), gx.ravel()
    values = np.zeros((nz, ny, nx), dtype=np.float32)
    for z in range(nz):
        acc = np.zeros((ny, nx), dtype=np.float64)
        for start in range(0, len(ys), MAX_ROWS):
            sl = slice(start, start + MAX_ROWS)
            E = slice_errors(nd_net, stack[:, z], ys[sl], xs[sl], p)
            _kernels.accumulate_windows(acc, E, ys[sl], xs[sl])
        values[z] = acc
    valid = np.ones((nz, ny, nx), dtype=bool)
    return ErrorMap(values, valid, "cnd", p, 1)


def otsu_threshold(values, bins=256):
    """Threshold maximizing between-class variance of a ``bins``-bin histogram.

    Candidates are the upper edges of bins 0..bins-1; the first maximum wins.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 2:
        raise DegenerateError("Otsu needs at least two values")
    lo, hi = values.min(), values.max()
    if not hi > lo:
        raise DegenerateError("Otsu threshold undefined for a constant map")
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w = counts / counts.sum()
    w0 = np.cumsum(w)
    m0 = np.cumsum(w * centers)
    total = m0[-1]
    n0 = np.cumsum(counts)
    w1 = (counts.sum() - n0) / counts.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (total * w0 - m0) ** 2 / (w0 * w1)
    between[(n0 == 0) | (n0 == counts.sum())] = 0.0
    k = int(np.argmax(between))
    return float(edges[k + 1])


def otsu_binarize(emap, bins=256):
    """(threshold, mask) with mask = value > threshold over valid voxels."""
    vals = emap.valid_values()
    t = otsu_threshold(vals, bins)
    return t, (emap.values > t) & emap.valid


def sigma_binarize(emap, k=1.0):
    """Mask of valid voxels above mean + k * std (population) of valid values."""
    vals = emap.valid_values().astype(np.float64)
    if vals.size < 2:
        raise DegenerateError("sigma thresholding needs at least two valid voxels")
    if not np.isfinite(k):
        if k > 0:
            return np.zeros(emap.values.shape, dtype=bool)
        raise ParameterError("k must be finite or +inf")
    t = vals.mean() + k * vals.std()
    return (emap.values > t) & emap.valid
