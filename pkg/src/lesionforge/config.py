"""Flat ``section.key = value`` run configuration.

Every key must appear in SCHEMA; misspellings are errors rather than
silently falling back to a default.  Lines starting with ``#`` are comments.
"""
import ast

from .autoencoder import TrainingConfig
from .errors import ConfigError


def _ints(text):
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _train_section(epochs, lr, decay, masking, dropout, optimizer, batch=128, input_dropout=True,
                   patience=10):
    return {
        "epochs": (int, epochs),
        "lr": (float, lr),
        "lr_decay": (float, decay),
        "lr_schedule": (str, "inverse_time"),
        "masking": (float, masking),
        "dropout": (float, dropout),
        "input_dropout": (_bool, input_dropout),
        "batch_size": (int, batch),
        "optimizer": (str, optimizer),
        "momentum": (float, 0.9),
        "rmsprop_decay": (float, 0.9),
        "l2": (float, 1e-4),
        "patience": (int, patience),
    }


def _flatten(sections):
    return {f"{sec}.{key}": v for sec, keys in sections.items() for key, v in keys.items()}


# key -> (parser, default)
SCHEMA = _flatten({
    "run": {"seed": (int, 0), "threads": (int, 0)},
    "phantom": {
        "family": (str, "hgg"), "train": (int, 8), "val": (int, 2), "test": (int, 2),
        "first_seed": (int, 100), "nx": (int, 64), "ny": (int, 64), "nz": (int, 24),
        "n_lesions": (int, 1), "noise_std": (float, 1.0),
    },
    "preprocess": {"levels": (int, 1024), "reference": (str, "")},
    "patch": {
        "size": (int, 21), "pretrain_stride": (int, 4), "vicinity_margin": (int, 25),
        "vicinity_stride": (int, 3), "val_margin": (int, 10), "val_stride": (int, 3),
        "augment": (str, "lt_all_three"),
    },
    "pretrain": {"widths": (_ints, (1764, 256, 128, 64, 32)),
                 **_train_section(5, 0.001, 0.0, 0.25, 0.0, "rmsprop")},
    "finetune": _train_section(15, 0.1, 0.001, 0.0, 0.25, "sgd_momentum", 64, False),
    "transfer": _train_section(3, 0.05, 0.001, 0.0, 0.35, "sgd_momentum", 64, False),
    "nd": {"patch_size": (int, 21), "hidden": (int, 256), "stride": (int, 4),
           "val_stride": (int, 6), "min_brain": (float, 0.5),
           **_train_section(20, 0.001, 0.0, 0.2, 0.0, "rmsprop")},
    "post": {"map": (str, "nd"), "threshold": (str, "otsu"), "sigma_k": (float, 1.0),
             "connectivity": (int, 26), "per_slice": (_bool, False), "enabled": (_bool, True),
             "report_raw": (_bool, True)},
    "ablate": {"fill": (str, "zero"), "sizes": (_ints, (2, 4, 8))},
    "search": {"budget": (int, 4), "epochs": (int, 2), "lr": (str, "0.01,0.2"),
               "dropout": (str, "0.1,0.5"), "batch_size": (str, "32|64|128")},
})

CHOICES = {
    "phantom.family": ("hgg", "lgg"),
    "post.map": ("nd", "cnd"),
    "post.threshold": ("otsu", "sigma"),
    "post.connectivity": (6, 26),
    "ablate.fill": ("zero", "mean"),
    "patch.augment": ("none", "st_one_of_three", "lt_all_three", "lgg_five"),
}


def defaults():
    return {k: v[1] for k, v in SCHEMA.items()}


def set_value(cfg, key, raw, where="override"):
    key = key.strip()
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r} ({where})")
    parser = SCHEMA[key][0]
    try:
        value = parser(raw.strip()) if isinstance(raw, str) else parser(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key} ({where}): {exc}") from None
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key} must be one of {CHOICES[key]}, got {value!r}")
    cfg[key] = value


def parse(text, base=None):
    """Parse config text on top of ``base`` (the defaults when None)."""
    cfg = dict(base) if base is not None else defaults()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, raw = line.split("=", 1)
        set_value(cfg, key, raw, f"line {n}")
    return cfg


def dumps(cfg):
    """Render every key, sorted, in the same text format parse() reads."""
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def training_config(cfg, section, seed=None):
    """TrainingConfig from one ``<section>.*`` block."""
    g = lambda k: cfg[f"{section}.{k}"]
    try:
        return TrainingConfig(
            epochs=g("epochs"), initial_lr=g("lr"), lr_decay=g("lr_decay"),
            lr_schedule=g("lr_schedule"), masking_fraction=g("masking"), dropout=g("dropout"),
            input_dropout=g("input_dropout"), batch_size=g("batch_size"),
            optimizer=g("optimizer"), momentum=g("momentum"),
            rmsprop_decay=g("rmsprop_decay"), l2=g("l2"), patience=g("patience"),
            seed=cfg["run.seed"] if seed is None else seed)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def search_space(cfg):
    """``lo,hi`` strings become ranges and ``a|b|c`` strings become choices."""
    space = {}
    for name in ("lr", "dropout", "batch_size"):
        raw = cfg[f"search.{name}"]
        try:
            if "|" in raw:
                space[name] = [ast.literal_eval(v) for v in raw.split("|")]
            else:
                lo, hi = (ast.literal_eval(v) for v in raw.split(","))
                space[name] = (lo, hi)
        except (ValueError, SyntaxError):
            raise ConfigError(f"bad search range for {name}: {raw!r}") from None
    return space
