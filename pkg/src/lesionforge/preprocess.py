"""Intensity normalization: histogram matching and per-sequence z-scoring.

Volumes are plain numpy arrays indexed ``[z, y, x]`` so that x varies
fastest in memory.  Intensity volumes are float32, label volumes uint8.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, NormalizationError, ParameterError, ShapeError

log = logging.getLogger(__name__)

SEQUENCES = ("FLAIR", "T2", "T1", "T1c")
LABEL_VALUES = (0, 1, 2, 3, 4)
DEFAULT_LEVELS = 1024


def dims_of(volume):
    """(nx, ny, nz) of a ``[z, y, x]`` array."""
    nz, ny, nx = volume.shape
    return nx, ny, nz


@dataclass
class Study:
    """Co-registered sequences (ordered FLAIR, T2, T1, T1c) plus optional labels."""
    sequences: dict
    labels: np.ndarray = None
    study_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.sequences) - set(SEQUENCES)
        if unknown:
            raise ParameterError(f"unknown sequence names {sorted(unknown)}")
        self.sequences = {name: self.sequences[name] for name in SEQUENCES if name in self.sequences}
        shapes = {v.shape for v in self.sequences.values()}
        if self.labels is not None:
            shapes.add(self.labels.shape)
            bad = np.setdiff1d(np.unique(self.labels), LABEL_VALUES)
            if bad.size:
                raise DataError(f"label volume contains values outside 0-4: {bad.tolist()}")
        if len(shapes) > 1:
            raise ShapeError(f"study volumes have different shapes: {sorted(shapes)}")
        for v in self.sequences.values():
            if v.ndim != 3:
                raise ShapeError(f"volumes must be 3D, got shape {v.shape}")

    @property
    def shape(self):
        if self.sequences:
            return next(iter(self.sequences.values())).shape
        return self.labels.shape

    def stack(self, names=SEQUENCES):
        """(n_seq, nz, ny, nx) float32 array of the named sequences."""
        missing = [n for n in names if n not in self.sequences]
        if missing:
            raise DataError(f"study {self.study_id!r} is missing sequences {missing}")
        return np.stack([self.sequences[n] for n in names]).astype(np.float32, copy=False)

    def with_sequences(self, sequences):
        return replace(self, sequences=dict(sequences), meta=dict(self.meta))


def _included(volume, include):
    if include == "nonzero":
        return volume != 0
    if include == "all":
        return np.ones(volume.shape, dtype=bool)
    raise ParameterError(f"include must be 'nonzero' or 'all', got {include!r}")


def histogram_match(src, ref, levels=DEFAULT_LEVELS, include="nonzero"):
    """Map ``src`` intensities so their distribution follows ``ref``.

    Quantiles of the included voxels of both volumes are taken at
    ``levels`` evenly spaced probabilities and ``src`` is mapped through
    the piecewise-linear curve joining them.  Excluded (zero) voxels stay 0.
    """
    if levels < 2:
        raise ParameterError("levels must be >= 2")
    src = np.asarray(src)
    ref = np.asarray(ref)
    src_mask = _included(src, include)
    ref_vals = ref[_included(ref, include)].astype(np.float64)
    if np.unique(ref_vals).size < 2:
        raise DataError("reference needs at least two distinct included values")
    out = np.zeros(src.shape, dtype=np.float32)
    src_vals = src[src_mask].astype(np.float64)
    if src_vals.size == 0:
        return out
    probs = np.linspace(0.0, 1.0, levels)
    ref_q = np.quantile(ref_vals, probs)
    if src_vals.min() == src_vals.max():
        log.warning("source is constant over included voxels; mapping to reference median")
        out[src_mask] = np.median(ref_vals)
        return out
    src_q = np.quantile(src_vals, probs)
    # equal source quantiles (plateaus) share one target: the mean over the run
    knots, inverse = np.unique(src_q, return_inverse=True)
    targets = np.bincount(inverse, weights=ref_q) / np.bincount(inverse)
    out[src_mask] = np.interp(src_vals, knots, targets)
    return out


def zscore(volume, include="nonzero"):
    """Zero mean, unit population std over the included voxels; others stay 0."""
    volume = np.asarray(volume)
    mask = _included(volume, include)
    vals = volume[mask].astype(np.float64)
    if vals.size == 0:
        raise NormalizationError("no voxels to normalize")
    mean = vals.mean()
    std = vals.std()
    if not std > 1e-12 * max(1.0, abs(mean)):
        raise NormalizationError("zero variance over included voxels")
    out = np.zeros(volume.shape, dtype=np.float32)
    out[mask] = (vals - mean) / std
    return out


def normalize_study(study, reference=None, levels=DEFAULT_LEVELS, include="nonzero"):
    """Histogram-match every sequence to ``reference`` (a Study), then z-score it."""
    seqs = {}
    for name, vol in study.sequences.items():
        if reference is not None:
            if name not in reference.sequences:
                raise DataError(f"reference study has no {name} sequence")
            vol = histogram_match(vol, reference.sequences[name], levels=levels, include=include)
        seqs[name] = zscore(vol, include=include)
    out = study.with_sequences(seqs)
    out.meta["normalized"] = True
    return out
