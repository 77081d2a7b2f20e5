"""The standard training recipe wired from config values.

Shared by the CLI and the acceptance suite so both exercise one code path.
"""
import logging

import numpy as np

from . import autoencoder as ae
from . import patches as pt
from .config import defaults, training_config
from .errors import DataError
from .nn_core import LayerSpec, make_rng, xavier_init

log = logging.getLogger(__name__)


def _cfg(cfg):
    return defaults() if cfg is None else cfg


def pretrain_patches(studies, cfg=None):
    cfg = _cfg(cfg)
    return pt.PatchBatch.concat([pt.extract_systematic(s, cfg["patch.size"],
                                                       cfg["patch.pretrain_stride"])
                                 for s in studies])


def finetune_patches(studies, cfg=None, rng_seed=None):
    """Lesion-vicinity patches of ``studies``, augmented per ``patch.augment``."""
    cfg = _cfg(cfg)
    batch = pt.PatchBatch.concat([pt.extract_vicinity(s, cfg["patch.vicinity_margin"],
                                                      cfg["patch.size"],
                                                      cfg["patch.vicinity_stride"])
                                  for s in studies])
    if len(batch) == 0:
        raise DataError("no lesion-vicinity patches in the fine-tuning studies")
    if cfg["patch.augment"] != "none":
        seed = cfg["run.seed"] if rng_seed is None else rng_seed
        batch = pt.augment(batch, cfg["patch.augment"], make_rng(seed))
    return batch


def validation_patches(studies, cfg=None):
    cfg = _cfg(cfg)
    if not studies:
        raise DataError("fine-tuning needs at least one validation study")
    batch = pt.PatchBatch.concat([pt.extract_vicinity(s, cfg["patch.val_margin"],
                                                      cfg["patch.size"], cfg["patch.val_stride"])
                                  for s in studies])
    if len(batch) == 0:
        raise DataError("validation studies contain no lesion-vicinity patches")
    return batch


def pretrain(studies, cfg=None):
    """Greedy layer-wise pretraining on systematic patches; returns (encoders, histories)."""
    cfg = _cfg(cfg)
    data = pretrain_patches(studies, cfg)
    log.info("pretraining on %d patches", len(data))
    widths = cfg["pretrain.widths"]
    if widths[0] != data.vec_len:
        raise DataError(f"first width {widths[0]} must equal patch length {data.vec_len}")
    return ae.stack_and_pretrain(list(widths), data.data, training_config(cfg, "pretrain"))


def finetune(encoders, train, val, cfg=None, on_epoch=None):
    cfg = _cfg(cfg)
    labeled = finetune_patches(train, cfg)
    log.info("fine-tuning on %d patches", len(labeled))
    net = ae.attach_classifier(encoders)
    return ae.finetune(net, labeled, validation_patches(val, cfg),
                       training_config(cfg, "finetune"), on_epoch=on_epoch)


def scratch_network(widths, seed=0):
    """Xavier-initialized classifier with the same shape as a pretrained one."""
    rng = make_rng(seed)
    layers = [xavier_init(LayerSpec(a, b, "sigmoid"), rng) for a, b in zip(widths, widths[1:])]
    return ae.attach_classifier(layers)


def transfer(pretrained, train, val, cfg=None, on_epoch=None):
    cfg = _cfg(cfg)
    labeled = finetune_patches(train, cfg)
    return ae.transfer_finetune(pretrained, labeled, validation_patches(val, cfg),
                                training_config(cfg, "transfer"), on_epoch=on_epoch)


def train_nd(train, val, cfg=None):
    """Novelty detector on lesion-free FLAIR/T2 windows; returns (net, history)."""
    cfg = _cfg(cfg)
    p = cfg["nd.patch_size"]
    data = pt.PatchBatch.concat([pt.extract_nonlesion(s, p, cfg["nd.stride"],
                                                      min_brain=cfg["nd.min_brain"])
                                 for s in train])
    if len(data) == 0:
        raise DataError("no lesion-free windows for the novelty detector")
    val_data = None
    if val:
        vb = pt.PatchBatch.concat([pt.extract_nonlesion(s, p, cfg["nd.val_stride"],
                                                        min_brain=cfg["nd.min_brain"])
                                   for s in val])
        val_data = vb.data if len(vb) else None
    log.info("novelty detector on %d patches", len(data))
    return ae.train_novelty_detector(data.data, cfg["nd.hidden"], training_config(cfg, "nd"),
                                     val_data)


def final_val_loss(history):
    vals = [r.val_loss for r in history if np.isfinite(r.val_loss)]
    return vals[-1] if vals else float("inf")
