"""Synthetic multi-sequence studies with planted, shell-structured lesions.

Each lesion is an ellipsoid split into concentric shells, outermost
first: edema (2), a tumor shell shared by non-enhancing (3) and enhancing
(4) tissue, and a necrotic core (1).  Within the shared shell the two
classes form random blobs, so nothing but T1c tells them apart.  Contrast
offsets are in units of the noise std per sequence (FLAIR, T2, T1, T1c).
"""
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .nn_core import make_rng
from .preprocess import SEQUENCES, Study

HGG_CONTRAST = {
    2: (7.0, 6.0, -1.5, 0.0),
    3: (3.5, 7.5, -3.5, 0.0),
    4: (3.5, 7.5, -3.5, 7.0),
    1: (1.5, 10.0, -6.0, -1.5),
}
# (outer radius fraction, class or (class, class) split into blobs), outermost first
HGG_SHELLS = ((1.0, 2), (0.7, (3, 4)), (0.35, 1))

# contrast-shifted family: dimmer edema, larger non-enhancing core, no enhancement
LGG_CONTRAST = {
    2: (4.5, 7.0, -0.5, 0.0),
    3: (6.0, 9.0, -2.5, 1.0),
    4: (6.0, 9.0, -2.5, 5.0),
    1: (2.5, 11.0, -5.0, 0.0),
}
LGG_SHELLS = ((1.0, 2), (0.75, 3), (0.3, 1))

BASE_INTENSITY = (30.0, 30.0, 40.0, 40.0)
TEXTURE_SIGN = (1.0, 1.0, -1.0, -1.0)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 24)  # (nx, ny, nz)
    n_lesions: int = 1
    radius_range: tuple = (8.0, 9.0)
    z_ratio: float = 0.6
    shells: tuple = HGG_SHELLS
    contrast: dict = field(default_factory=lambda: dict(HGG_CONTRAST))
    noise_std: float = 1.0
    texture_amplitude: float = 0.8
    texture_smoothing: float = 4.0
    texture_shared: float = 0.2
    blob_smoothing: float = 3.0
    brain_fraction: float = 0.47
    edge_margin: int = 10
    gain_jitter: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ParameterError(f"bad phantom dims {self.dims}")
        if self.n_lesions < 0:
            raise ParameterError("n_lesions must be >= 0")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ParameterError(f"bad radius range {self.radius_range}")
        nx, ny, nz = self.dims
        if self.n_lesions:
            room_xy = min(nx, ny) - 2 * (self.edge_margin + int(np.ceil(hi)))
            room_z = nz - 2 * int(np.ceil(hi * self.z_ratio))
            if room_xy < 1 or room_z < 1:
                raise ParameterError(f"lesions of radius {hi} do not fit in {self.dims} "
                                     f"with edge margin {self.edge_margin}")
        for cls in self.classes():
            if cls not in self.contrast:
                raise ParameterError(f"no contrast given for class {cls}")
        if not 0.0 <= self.texture_shared <= 1.0:
            raise ParameterError("texture_shared must be in [0, 1]")

    def classes(self):
        out = set()
        for _, cls in self.shells:
            out.update(cls if isinstance(cls, tuple) else (cls,))
        return out


def hgg_spec(**overrides):
    return PhantomSpec(**overrides)


def lgg_spec(**overrides):
    base = dict(shells=LGG_SHELLS, contrast=dict(LGG_CONTRAST))
    base.update(overrides)
    return PhantomSpec(**base)


def _smooth_field(shape, sigma, rng):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=(sigma / 2, sigma, sigma),
                                mode="reflect")
    return f / (f.std() + 1e-12)


def generate(spec, study_id=""):
    """Build a Study (four sequences + truth labels) deterministically from ``spec``."""
    rng = make_rng(spec.seed)
    nx, ny, nz = spec.dims
    shape = (nz, ny, nx)
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    cy, cx = (ny - 1) / 2, (nx - 1) / 2
    brain = ((y - cy) / (spec.brain_fraction * ny)) ** 2 + \
            ((x - cx) / (spec.brain_fraction * nx)) ** 2 <= 1.0

    # normalized radius of the closest lesion at each voxel
    rnorm = np.full(shape, np.inf)
    lesions = []
    for _ in range(spec.n_lesions):
        r = rng.uniform(*spec.radius_range)
        rz = r * spec.z_ratio
        m = spec.edge_margin + int(np.ceil(spec.radius_range[1]))
        mz = int(np.ceil(spec.radius_range[1] * spec.z_ratio))
        c = (rng.integers(mz, nz - mz), rng.integers(m, ny - m), rng.integers(m, nx - m))
        d = np.sqrt(((z - c[0]) / rz) ** 2 + ((y - c[1]) / r) ** 2 + ((x - c[2]) / r) ** 2)
        rnorm = np.minimum(rnorm, d)
        lesions.append({"center_zyx": [int(v) for v in c], "radius": float(r)})

    labels = np.zeros(shape, dtype=np.uint8)
    for outer, cls in spec.shells:
        inside = rnorm <= outer
        if isinstance(cls, tuple):
            blobs = _smooth_field(shape, spec.blob_smoothing, rng)
            labels[inside & (blobs < 0)] = cls[0]
            labels[inside & (blobs >= 0)] = cls[1]
        else:
            labels[inside] = cls
    labels[~brain] = 0

    shared = _smooth_field(shape, spec.texture_smoothing, rng)
    seqs = {}
    for k, name in enumerate(SEQUENCES):
        sd = spec.noise_std
        own = _smooth_field(shape, spec.texture_smoothing, rng)
        texture = np.sqrt(spec.texture_shared) * shared + np.sqrt(1 - spec.texture_shared) * own
        vol = BASE_INTENSITY[k] + TEXTURE_SIGN[k] * spec.texture_amplitude * sd * texture
        for cls, offsets in spec.contrast.items():
            vol = vol + np.where(labels == cls, offsets[k] * sd, 0.0)
        vol = vol + sd * rng.standard_normal(shape)
        gain = 1.0 + rng.uniform(-spec.gain_jitter, spec.gain_jitter)
        vol = np.clip(vol * gain, 1e-3, None)
        vol[~brain] = 0.0
        seqs[name] = vol.astype(np.float32)
    meta = {"lesions": lesions, "seed": spec.seed,
            "lesion_fraction": float(np.mean(labels > 0))}
    return Study(seqs, labels, study_id=study_id or f"phantom{spec.seed}", meta=meta)


def generate_cohort(spec, n, first_seed=0, prefix="phantom"):
    return [generate(replace(spec, seed=first_seed + i), f"{prefix}{first_seed + i:03d}")
            for i in range(n)]


def class_fractions(labels):
    counts = np.bincount(np.asarray(labels).ravel(), minlength=5)
    return counts / counts.sum()
