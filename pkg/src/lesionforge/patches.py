"""2D axial multi-sequence patches: extraction, vectorization and rotation.

A patch row is the concatenation, in sequence order, of row-major
``p x p`` windows taken from one axial slice.  Centers are stored as
``(x, y, z)`` voxel coordinates.
"""
import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, ParameterError, ShapeError
from .preprocess import SEQUENCES

log = logging.getLogger(__name__)

ND_SEQUENCES = ("FLAIR", "T2")
ANGLES = (90, -90, 180, 45, -45)
POLICIES = {
    "st_one_of_three": (90, -90, 180),
    "lt_all_three": (90, -90, 180),
    "lgg_five": (90, -90, 180, 45, -45),
}


@dataclass
class PatchBatch:
    data: np.ndarray  # (n, n_sequences * p * p) float32
    patch_size: int
    n_sequences: int
    labels: np.ndarray = None  # (n,) int64
    centers: np.ndarray = None  # (n, 3) int64 as (x, y, z)
    empty_reason: str = ""

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != self.vec_len:
            raise ShapeError(f"patch data {self.data.shape} does not match "
                             f"{self.n_sequences} x {self.patch_size}^2")
        if self.labels is not None and len(self.labels) != len(self.data):
            raise ShapeError("labels length differs from patch count")
        if self.centers is not None and len(self.centers) != len(self.data):
            raise ShapeError("centers length differs from patch count")

    @property
    def vec_len(self):
        return self.n_sequences * self.patch_size ** 2

    def __len__(self):
        return len(self.data)

    def images(self):
        """View as (n, n_sequences, p, p)."""
        p = self.patch_size
        return self.data.reshape(len(self.data), self.n_sequences, p, p)

    def subset(self, index):
        return PatchBatch(self.data[index], self.patch_size, self.n_sequences,
                          None if self.labels is None else self.labels[index],
                          None if self.centers is None else self.centers[index])

    @classmethod
    def concat(cls, batches):
        batches = list(batches)
        if not batches:
            raise ParameterError("nothing to concatenate")
        first = batches[0]
        labels = None if any(b.labels is None for b in batches) else \
            np.concatenate([b.labels for b in batches])
        centers = None if any(b.centers is None for b in batches) else \
            np.concatenate([b.centers for b in batches])
        return cls(np.concatenate([b.data for b in batches]), first.patch_size,
                   first.n_sequences, labels, centers)

    @classmethod
    def empty(cls, p, n_sequences, labeled=False, reason=""):
        return cls(np.zeros((0, n_sequences * p * p), np.float32), p, n_sequences,
                   np.zeros(0, np.int64) if labeled else None, np.zeros((0, 3), np.int64),
                   empty_reason=reason)


def vectorize(patch):
    """(n_seq, p, p) -> flat vector; inverse of :func:`devectorize`."""
    return np.ascontiguousarray(patch).reshape(-1)


def devectorize(vec, p, n_sequences):
    return np.asarray(vec).reshape(n_sequences, p, p)


def _check_p(p, shape):
    if p < 1 or p % 2 == 0:
        raise ParameterError(f"patch size must be a positive odd integer, got {p}")
    _, ny, nx = shape
    if p > ny or p > nx:
        raise ParameterError(f"patch size {p} exceeds slice extent {nx}x{ny}")


def grid_centers(n, p, stride):
    """Centers along one axis whose p-wide window fits, spaced by stride."""
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    h = p // 2
    return np.arange(h, n - h, stride)


def valid_center_mask(shape, p):
    """Boolean [z, y, x] mask of voxels whose full in-plane window fits."""
    h = p // 2
    mask = np.zeros(shape, dtype=bool)
    _, ny, nx = shape
    if p <= ny and p <= nx:
        mask[:, h:ny - h, h:nx - h] = True
    return mask


def _gather(stack_slice, ys, xs, p):
    """Rows for centers (ys, xs) from a (n_seq, ny, nx) slice stack."""
    h = p // 2
    win = sliding_window_view(stack_slice, (p, p), axis=(1, 2))
    rows = win[:, ys - h, xs - h]  # (n_seq, n, p, p)
    return np.ascontiguousarray(rows.transpose(1, 0, 2, 3)).reshape(len(ys), -1)


def _collect(stack, p, select, labels=None):
    """Walk slices, let ``select(z)`` choose (ys, xs) centers, gather rows."""
    n_seq, nz, _, _ = stack.shape
    data, centers, labs = [], [], []
    for z in range(nz):
        ys, xs = select(z)
        if len(ys) == 0:
            continue
        data.append(_gather(stack[:, z], ys, xs, p))
        centers.append(np.stack([xs, ys, np.full_like(xs, z)], axis=1))
        if labels is not None:
            labs.append(labels[z, ys, xs].astype(np.int64))
    if not data:
        return None
    return (np.concatenate(data).astype(np.float32, copy=False), np.concatenate(centers),
            np.concatenate(labs) if labels is not None else None)


def extract_systematic(study, p=21, stride=10, sequences=SEQUENCES):
    """Unlabeled patches on a stride grid of fitting centers, every axial slice."""
    stack = study.stack(sequences)
    _check_p(p, stack.shape[1:])
    _, _, ny, nx = stack.shape
    gy, gx = np.meshgrid(grid_centers(ny, p, stride), grid_centers(nx, p, stride), indexing="ij")
    ys, xs = gy.ravel(), gx.ravel()
    got = _collect(stack, p, lambda z: (ys, xs))
    if got is None:
        return PatchBatch.empty(p, len(sequences))
    data, centers, _ = got
    return PatchBatch(data, p, len(sequences), None, centers)


def extract_vicinity(study, margin=10, p=21, stride=1, sequences=SEQUENCES):
    """Labeled patches whose centers fall in each slice's dilated lesion bounding box."""
    if study.labels is None:
        raise DataError("vicinity extraction needs a label volume")
    stack = study.stack(sequences)
    _check_p(p, stack.shape[1:])
    labels = study.labels
    _, _, ny, nx = stack.shape
    gy_all = grid_centers(ny, p, stride)
    gx_all = grid_centers(nx, p, stride)

    def select(z):
        yy, xx = np.nonzero(labels[z])
        if yy.size == 0:
            return (), ()
        gy = gy_all[(gy_all >= yy.min() - margin) & (gy_all <= yy.max() + margin)]
        gx = gx_all[(gx_all >= xx.min() - margin) & (gx_all <= xx.max() + margin)]
        my, mx = np.meshgrid(gy, gx, indexing="ij")
        return my.ravel(), mx.ravel()

    got = _collect(stack, p, select, labels)
    if got is None:
        log.warning("study %r has no labeled voxels; vicinity batch is empty", study.study_id)
        return PatchBatch.empty(p, len(sequences), labeled=True, reason="no labeled voxels")
    data, centers, labs = got
    return PatchBatch(data, p, len(sequences), labs, centers)


def extract_nonlesion(study, p=21, stride=10, sequences=ND_SEQUENCES, min_brain=0.5):
    """Grid patches whose whole window is lesion-free and mostly inside the brain."""
    if study.labels is None:
        raise DataError("non-lesion extraction needs a label volume")
    stack = study.stack(sequences)
    _check_p(p, stack.shape[1:])
    _, _, ny, nx = stack.shape
    gy, gx = np.meshgrid(grid_centers(ny, p, stride), grid_centers(nx, p, stride), indexing="ij")
    gy, gx = gy.ravel(), gx.ravel()
    h = p // 2
    lesion = study.labels != 0
    brain = np.any(stack != 0, axis=0)

    def window_sum(plane):
        # summed-area table: total over each p x p window at every fitting center
        s = np.pad(np.cumsum(np.cumsum(plane, 0, dtype=np.int64), 1), ((1, 0), (1, 0)))
        return s[p:, p:] - s[:-p, p:] - s[p:, :-p] + s[:-p, :-p]

    def select(z):
        dirty = window_sum(lesion[z])[gy - h, gx - h] > 0
        inside = window_sum(brain[z])[gy - h, gx - h] >= min_brain * p * p
        keep = ~dirty & inside
        return gy[keep], gx[keep]

    got = _collect(stack, p, select)
    if got is None:
        return PatchBatch.empty(p, len(sequences))
    data, centers, _ = got
    return PatchBatch(data, p, len(sequences), None, centers)


def _rotation_sources(p, angle):
    """Source (row, col) coordinates sampled by an output grid rotated by ``angle``.

    Positive angles turn the same way as ``numpy.rot90`` on (row, col) axes.
    """
    c = (p - 1) / 2.0
    theta = np.deg2rad(angle)
    u, v = np.meshgrid(np.arange(p) - c, np.arange(p) - c, indexing="ij")
    rows = u * np.cos(theta) + v * np.sin(theta) + c
    cols = -u * np.sin(theta) + v * np.cos(theta) + c
    return rows, cols


def bilinear_rotate(patch, angle, fill=0.0):
    """Rotate the last two axes by any angle, sampling bilinearly; outside -> ``fill``."""
    patch = np.asarray(patch)
    p = patch.shape[-1]
    rows, cols = _rotation_sources(p, angle)
    rows = np.round(rows, 9)
    cols = np.round(cols, 9)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros(patch.shape, dtype=np.float64)
    weight_in = np.zeros((p, p))
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr = r0 + dr
        cc = c0 + dc
        ok = (rr >= 0) & (rr < p) & (cc >= 0) & (cc < p) & (w > 0)
        w = np.where(ok, w, 0.0)
        out += w * patch[..., np.clip(rr, 0, p - 1), np.clip(cc, 0, p - 1)]
        weight_in += w
    out += (1.0 - weight_in) * fill
    return out.astype(patch.dtype if patch.dtype.kind == "f" else np.float32)


def rotate_patch(patch, angle, fill=0.0):
    """Rotate a patch (last two axes are the square p x p window).

    Right angles are exact index permutations; +/-45 degrees use bilinear
    interpolation about the center with out-of-support positions set to
    ``fill``.
    """
    patch = np.asarray(patch)
    if patch.ndim < 2 or patch.shape[-1] != patch.shape[-2]:
        raise ShapeError(f"patch must be square in its last two axes, got {patch.shape}")
    if angle == 90:
        return np.rot90(patch, 1, axes=(-2, -1)).copy()
    if angle == -90:
        return np.rot90(patch, -1, axes=(-2, -1)).copy()
    if angle == 180:
        return np.rot90(patch, 2, axes=(-2, -1)).copy()
    if angle in (45, -45):
        return bilinear_rotate(patch, angle, fill)
    raise ParameterError(f"unsupported rotation angle {angle}; choose from {ANGLES}")


def _rotated_copy(batch, index, angle, fill):
    imgs = batch.images()[index]
    rot = rotate_patch(imgs, angle, fill).reshape(len(imgs), -1)
    return PatchBatch(rot.astype(np.float32, copy=False), batch.patch_size, batch.n_sequences,
                      batch.labels[index],
                      None if batch.centers is None else batch.centers[index])


def augment(batch, policy, rng=None, fill=0.0):
    """Append label-preserving rotated copies after the original rows.

    ``st_one_of_three`` adds one copy per patch at an angle drawn from
    {90, -90, 180}; ``lt_all_three`` adds all three; ``lgg_five`` adds
    {90, -90, 180, 45, -45}, giving six times the input with originals.
    """
    if policy not in POLICIES:
        raise ParameterError(f"unknown augmentation policy {policy!r}")
    if batch.labels is None:
        raise DataError("augmentation expects a labeled batch")
    angles = POLICIES[policy]
    everyone = np.arange(len(batch))
    parts = [batch]
    if policy == "st_one_of_three":
        if rng is None:
            raise ParameterError("st_one_of_three needs an rng to choose angles")
        choice = rng.integers(0, len(angles), size=len(batch))
        rotated = np.empty_like(batch.data)
        for k, angle in enumerate(angles):
            idx = everyone[choice == k]
            if idx.size:
                rotated[idx] = _rotated_copy(batch, idx, angle, fill).data
        parts.append(PatchBatch(rotated, batch.patch_size, batch.n_sequences,
                                batch.labels.copy(),
                                None if batch.centers is None else batch.centers.copy()))
    else:
        parts.extend(_rotated_copy(batch, everyone, a, fill) for a in angles)
    return PatchBatch.concat(parts)
