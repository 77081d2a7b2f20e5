"""Voxel-wise inference, false-positive rejection and Dice evaluation."""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DataError, LesionForgeError, ParameterError, ShapeError
from .novelty import nd_map, cnd_map, otsu_binarize, sigma_binarize
from .nn_core import predict
from .patches import _check_p, _gather, grid_centers
from .preprocess import SEQUENCES

log = logging.getLogger(__name__)

REGIONS = {"WT": (1, 2, 3, 4), "TC": (1, 3, 4), "AT": (4,)}
MAX_ROWS = 8192


@dataclass
class LabelMap:
    labels: np.ndarray  # [z, y, x] uint8
    provenance: dict = field(default_factory=dict)


def predict_volume(net, study, p=21, sequences=SEQUENCES):
    """Classify every valid center voxel; the border band stays class 0.

    Argmax ties resolve to the lowest class index.
    """
    if net.role != "sdae_classifier":
        raise ParameterError("prediction needs an sdae_classifier network")
    stack = study.stack(sequences)
    _check_p(p, stack.shape[1:])
    if net.input_dim != len(sequences) * p * p:
        raise ShapeError(f"network input {net.input_dim} does not match "
                         f"{len(sequences)} x {p}^2 patches")
    _, nz, ny, nx = stack.shape
    gy, gx = np.meshgrid(grid_centers(ny, p, 1), grid_centers(nx, p, 1), indexing="ij")
    ys, xs = gy.ravel(), gx.ravel()
    out = np.zeros((nz, ny, nx), dtype=np.uint8)
    for z in range(nz):
        for start in range(0, len(ys), MAX_ROWS):
            sl = slice(start, start + MAX_ROWS)
            probs = predict(net.layers, _gather(stack[:, z], ys[sl], xs[sl], p))
            out[z, ys[sl], xs[sl]] = np.argmax(probs, axis=1)
    return LabelMap(out, {"network": net.digest(), "postprocess": None})


def drop_sequence(study, name, fill="zero"):
    """Copy of ``study`` with one sequence blanked (zeros, or its included mean)."""
    if name not in study.sequences:
        raise ParameterError(f"study has no sequence {name!r}")
    vol = study.sequences[name]
    if fill == "zero":
        blank = np.zeros_like(vol)
    elif fill == "mean":
        nz = vol[vol != 0]
        blank = np.full_like(vol, nz.mean() if nz.size else 0.0)
    else:
        raise ParameterError(f"unknown fill {fill!r}")
    seqs = dict(study.sequences)
    seqs[name] = blank
    out = study.with_sequences(seqs)
    out.meta.setdefault("dropped", [])
    if name not in out.meta["dropped"]:
        out.meta["dropped"] = list(out.meta["dropped"]) + [name]
    return out


def connected_components(mask, connectivity=26):
    """Label a binary [z, y, x] mask; labels follow first voxel in x-fastest scan."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        labels, count = _kernels.label_components(mask[None], connectivity)
        return labels[0], count
    return _kernels.label_components(mask, connectivity)


def reject_false_positives(pred, nd_mask, connectivity=26, per_slice=False):
    """Keep only lesion components of ``pred`` that touch ``nd_mask``."""
    labels = pred.labels if isinstance(pred, LabelMap) else np.asarray(pred)
    nd_mask = np.asarray(nd_mask, dtype=bool)
    if labels.shape != nd_mask.shape:
        raise ShapeError(f"prediction {labels.shape} vs mask {nd_mask.shape}")
    out = labels.copy()
    lesion = labels != 0
    if per_slice:
        for z in range(labels.shape[0]):
            comp, count = connected_components(lesion[z:z + 1], connectivity)
            _clear_untouched(out[z:z + 1], comp, count, nd_mask[z:z + 1])
    else:
        comp, count = connected_components(lesion, connectivity)
        _clear_untouched(out, comp, count, nd_mask)
    prov = dict(pred.provenance) if isinstance(pred, LabelMap) else {}
    prov["postprocess"] = "nd_mask_intersection"
    return LabelMap(out, prov)


def _clear_untouched(out, comp, count, mask):
    if count == 0:
        return
    touched = np.zeros(count + 1, dtype=bool)
    touched[np.unique(comp[mask & (comp > 0)])] = True
    touched[0] = True
    out[~touched[comp]] = 0


def dice(pred, truth, region):
    """Dice of a region's class set; None when both sets are empty."""
    if region not in REGIONS:
        raise ParameterError(f"unknown region {region!r}")
    pred = pred.labels if isinstance(pred, LabelMap) else np.asarray(pred)
    truth = truth.labels if isinstance(truth, LabelMap) else np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    classes = REGIONS[region]
    p = np.isin(pred, classes)
    g = np.isin(truth, classes)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return None
    return 2.0 * int(np.sum(p & g)) / total


def _stats(values):
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return {"mean": None, "std": None, "median": None, "n": 0}
    return {"mean": float(vals.mean()), "std": float(vals.std()),
            "median": float(np.median(vals)), "n": int(vals.size)}


@dataclass
class DiceReport:
    """Per-study WT/TC/AT dice and their mean, population std and median.

    Undefined (empty/empty) scores are stored as None and left out of the
    aggregates.
    """
    per_study: dict  # study id -> {region: dice or None}
    errors: dict = field(default_factory=dict)  # study id -> message
    label: str = ""

    def aggregate(self):
        return {r: _stats([s[r] for s in self.per_study.values()]) for r in REGIONS}

    def to_table(self):
        """Tab-separated region x (mean, std, median) table."""
        agg = self.aggregate()
        lines = ["region\tmean\tstd\tmedian\tn"]
        for r in REGIONS:
            a = agg[r]
            cells = ["*" if a[k] is None else f"{a[k]:.4f}" for k in ("mean", "std", "median")]
            lines.append("\t".join([r, *cells, str(a["n"])]))
        return "\n".join(lines) + "\n"

    def to_detail(self):
        lines = ["study\tWT\tTC\tAT\terror"]
        for sid, scores in self.per_study.items():
            cells = ["*" if scores[r] is None else f"{scores[r]:.4f}" for r in REGIONS]
            lines.append("\t".join([sid, *cells, ""]))
        for sid, msg in self.errors.items():
            lines.append("\t".join([sid, "*", "*", "*", msg.replace("\t", " ")]))
        return "\n".join(lines) + "\n"


@dataclass
class EvalOptions:
    patch_size: int = 21
    nd_patch_size: int = 21
    postprocess: bool = True
    report_raw: bool = False
    map_kind: str = "nd"
    threshold: str = "otsu"
    sigma_k: float = 1.0
    connectivity: int = 26
    per_slice: bool = False


def postprocess_mask(study, nd_net, opts):
    emap = nd_map(study, nd_net, opts.nd_patch_size) if opts.map_kind == "nd" else \
        cnd_map(study, nd_net, opts.nd_patch_size)
    if opts.threshold == "otsu":
        return otsu_binarize(emap)[1], emap
    if opts.threshold == "sigma":
        return sigma_binarize(emap, opts.sigma_k), emap
    raise ParameterError(f"unknown threshold method {opts.threshold!r}")


def evaluate_cohort(studies, net, nd_net=None, options=None):
    """Predict, post-process and score every study.

    Returns ``{"post": DiceReport, "raw": DiceReport}`` keys as requested:
    ``raw`` is produced when post-processing is off or ``report_raw`` is
    set; ``post`` when post-processing is on.  A failing study is recorded
    in the report's ``errors`` and the cohort continues.
    """
    opts = options or EvalOptions()
    if opts.postprocess and nd_net is None:
        raise ParameterError("post-processing needs a novelty detector")
    want_raw = opts.report_raw or not opts.postprocess
    reports = {}
    if want_raw:
        reports["raw"] = DiceReport({}, label="raw")
    if opts.postprocess:
        reports["post"] = DiceReport({}, label="post")
    for k, study in enumerate(studies):
        sid = study.study_id or f"study{k}"
        try:
            if study.labels is None:
                raise DataError(f"study {sid!r} has no truth labels")
            pred = predict_volume(net, study, opts.patch_size)
            if want_raw:
                reports["raw"].per_study[sid] = {r: dice(pred, study.labels, r) for r in REGIONS}
            if opts.postprocess:
                mask, _ = postprocess_mask(study, nd_net, opts)
                post = reject_false_positives(pred, mask, opts.connectivity, opts.per_slice)
                reports["post"].per_study[sid] = {r: dice(post, study.labels, r) for r in REGIONS}
        except LesionForgeError as exc:
            log.error("study %s failed: %s", sid, exc)
            for rep in reports.values():
                rep.errors[sid] = f"{exc.kind}: {exc}"
    return reports
