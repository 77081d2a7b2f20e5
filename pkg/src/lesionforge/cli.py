"""``lesionforge`` command-line entry point.

Every command reads one key=value config (``--config``, plus ``--set``
overrides), writes its outputs into ``--out`` together with a copy of the
resolved config and a provenance record, and exits 0 on success.  Failures
print one JSON error line to stderr and exit with the error's code.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from . import config as config_mod
from . import io, patches as pt, phantom, pipeline as pl, workflow
from .autoencoder import random_search
from .errors import ConfigError, DataError, LesionForgeError, ParameterError
from .manifest import Manifest
from .novelty import cnd_map, nd_map, otsu_binarize, sigma_binarize
from .preprocess import SEQUENCES, normalize_study

log = logging.getLogger("lesionforge")

IO_EXIT = 5


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Output directory plus its provenance record."""

    def __init__(self, out, command, cfg, argv):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.record = {"command": command, "argv": list(argv), "version": __version__,
                       "jit": _kernels.USE_NUMBA, "seed": cfg["run.seed"], "seeds": {},
                       "inputs": {}, "outputs": []}
        (self.dir / "config.txt").write_text(config_mod.dumps(cfg))

    def path(self, name):
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.record["outputs"].append(str(p.relative_to(self.dir)))
        return p

    def input(self, path):
        path = Path(path)
        if path.exists() and path.is_file():
            self.record["inputs"][str(path)] = file_digest(path)
        return path

    def inputs_of(self, manifest, ids):
        for sid in ids:
            for f in manifest.files(sid):
                self.input(f)

    def finish(self, started):
        self.record["seconds"] = round(time.time() - started, 3)
        (self.dir / "provenance.json").write_text(json.dumps(self.record, indent=2) + "\n")


# ---- shared argument handling ----

def _manifest(run, args):
    return Manifest.load(run.input(args.manifest))


def _drop(args):
    drop = tuple(args.drop or ())
    bad = [d for d in drop if d not in SEQUENCES]
    if bad:
        raise ParameterError(f"unknown sequence(s) to drop: {bad}")
    return drop


def _studies(run, args):
    """Studies named by --manifest/--cohort/--study or by --seq NAME=PATH."""
    drop = _drop(args)
    fill = run.cfg["ablate.fill"]
    if args.seq:
        paths = {}
        for item in args.seq:
            name, _, p = item.partition("=")
            if name not in SEQUENCES or not p:
                raise ParameterError(f"--seq expects NAME=PATH with NAME in {SEQUENCES}")
            paths[name] = str(run.input(p))
        raw = {"studies": {args.study or "study": {"sequences": paths,
                                                   "labels": args.labels_in}}}
        m = Manifest.from_dict(raw)
        ids = list(m.studies)
    elif args.manifest:
        m = _manifest(run, args)
        ids = [args.study] if args.study else m.cohort(args.cohort)
    else:
        raise ParameterError("give --manifest (with --cohort or --study) or --seq NAME=PATH")
    m.check_files(ids)
    run.inputs_of(m, ids)
    return [m.load_study(sid, drop, fill) for sid in ids]


def _network(run, path, role):
    if not Path(path).is_file():
        raise DataError(f"network checkpoint {path} not found")
    return io.load_network(run.input(path), role)


def _eval_options(cfg, nd_given):
    post = cfg["post.enabled"] and nd_given
    return pl.EvalOptions(patch_size=cfg["patch.size"], nd_patch_size=cfg["nd.patch_size"],
                          postprocess=post, report_raw=cfg["post.report_raw"] or not post,
                          map_kind=cfg["post.map"], threshold=cfg["post.threshold"],
                          sigma_k=cfg["post.sigma_k"], connectivity=cfg["post.connectivity"],
                          per_slice=cfg["post.per_slice"])


def _write_reports(run, reports, stem):
    summary = {}
    for kind, rep in reports.items():
        run.path(f"{stem}_{kind}.tsv").write_text(rep.to_table())
        run.path(f"{stem}_{kind}_detail.tsv").write_text(rep.to_detail())
        summary[kind] = rep.aggregate()
        for line in rep.to_table().splitlines()[1:]:
            log.info("%s %s %s", stem, kind, line.replace("\t", " "))
    return summary


def _log_epoch(name):
    return lambda r: log.info("%s epoch %d train %.5f val %.5f acc %.4f", name, r.epoch,
                              r.train_loss, r.val_loss, r.val_accuracy)


def _save_net(run, net, name, history=None):
    io.save_network(net, run.path(name))
    run.record["outputs"].append(name + ".json")
    if history is not None:
        io.write_training_log(history, run.path(name.rsplit(".", 1)[0] + ".tsv"))


# ---- commands ----

def cmd_phantom(run, args):
    cfg = run.cfg
    make = phantom.hgg_spec if cfg["phantom.family"] == "hgg" else phantom.lgg_spec
    spec = make(dims=(cfg["phantom.nx"], cfg["phantom.ny"], cfg["phantom.nz"]),
                n_lesions=cfg["phantom.n_lesions"], noise_std=cfg["phantom.noise_std"])
    counts = [cfg["phantom.train"], cfg["phantom.val"], cfg["phantom.test"]]
    studies = phantom.generate_cohort(spec, sum(counts), cfg["phantom.first_seed"],
                                      cfg["phantom.family"])
    entries = {}
    for s in studies:
        seq_paths, label_path = io.save_study(s, run.dir / "studies" / s.study_id)
        rel = lambda p: str(Path(p).relative_to(run.dir))
        entries[s.study_id] = {"sequences": {k: rel(v) for k, v in seq_paths.items()},
                               "labels": rel(label_path)}
        run.record["seeds"][s.study_id] = s.meta["seed"]
    ids = [s.study_id for s in studies]
    a, b = counts[0], counts[0] + counts[1]
    m = Manifest.from_dict({"studies": entries,
                            "cohorts": {"pretrain": ids[:a], "finetune": ids[:a],
                                        "validation": ids[a:b], "test": ids[b:]},
                            "overlap": [["pretrain", "finetune"]]}, run.dir)
    m.save(run.path("manifest.json"))
    run.record["outputs"].append("studies/")


def cmd_preprocess(run, args):
    m = _manifest(run, args)
    m.check_files()
    run.inputs_of(m, m.studies)
    ref_id = run.cfg["preprocess.reference"] or \
        (m.cohorts.get("pretrain") or list(m.studies))[0]
    if ref_id not in m.studies:
        raise ConfigError(f"preprocess.reference names unknown study {ref_id!r}")
    reference = m.load_study(ref_id)
    run.record["reference"] = ref_id
    entries = {}
    for sid in m.studies:
        s = normalize_study(m.load_study(sid), reference, run.cfg["preprocess.levels"])
        seq_paths, label_path = io.save_study(s, run.dir / "studies" / sid)
        rel = lambda p: str(Path(p).relative_to(run.dir))
        entries[sid] = {"sequences": {k: rel(v) for k, v in seq_paths.items()},
                        "labels": rel(label_path) if label_path else None}
    out = Manifest.from_dict({"studies": entries, "cohorts": m.cohorts,
                              "overlap": [list(p) for p in m.overlap]}, run.dir)
    out.save(run.path("manifest.json"))


def cmd_extract(run, args):
    studies = _studies(run, args)
    cfg = run.cfg
    if args.kind == "systematic":
        batch = workflow.pretrain_patches(studies, cfg)
    elif args.kind == "vicinity":
        batch = workflow.finetune_patches(studies, cfg)
    else:
        batch = pt.PatchBatch.concat([pt.extract_nonlesion(s, cfg["nd.patch_size"],
                                                           cfg["nd.stride"],
                                                           min_brain=cfg["nd.min_brain"])
                                      for s in studies])
    arrays = {"data": batch.data, "patch_size": batch.patch_size,
              "n_sequences": batch.n_sequences}
    if batch.labels is not None:
        arrays["labels"] = batch.labels
    if batch.centers is not None:
        arrays["centers"] = batch.centers
    np.savez(run.path("patches.npz"), **arrays)
    log.info("extracted %d %s patches", len(batch), args.kind)


def _training_cohorts(run, args):
    m = _manifest(run, args)
    train_ids = m.cohort("finetune")
    if getattr(args, "subset", None):
        if args.subset > len(train_ids):
            raise DataError(f"subset {args.subset} exceeds {len(train_ids)} fine-tuning studies")
        train_ids = train_ids[:args.subset]
    val_ids = m.cohort("validation")
    m.check_files(train_ids + val_ids)
    run.inputs_of(m, train_ids + val_ids)
    return [m.load_study(s) for s in train_ids], [m.load_study(s) for s in val_ids]


def cmd_pretrain(run, args):
    m = _manifest(run, args)
    ids = m.cohort("pretrain")
    m.check_files(ids)
    run.inputs_of(m, ids)
    studies = [m.load_study(s) for s in ids]
    encoders, histories = workflow.pretrain(studies, run.cfg)
    from .autoencoder import TrainedNetwork
    net = TrainedNetwork(encoders, "encoder", {"pretrain": config_mod.dumps(run.cfg)})
    _save_net(run, net, "encoder.nnw")
    for k, h in enumerate(histories):
        io.write_training_log(h, run.path(f"pretrain_layer{k + 1}.tsv"))


def cmd_finetune(run, args):
    encoder = _network(run, args.encoder, "encoder")
    train, val = _training_cohorts(run, args)
    net, history = workflow.finetune(encoder.layers, train, val, run.cfg, _log_epoch("finetune"))
    _save_net(run, net, "classifier.nnw", history)


def cmd_transfer(run, args):
    base = _network(run, args.network, "sdae_classifier")
    train, val = _training_cohorts(run, args)
    net, history = workflow.transfer(base, train, val, run.cfg, _log_epoch("transfer"))
    _save_net(run, net, "classifier.nnw", history)


def cmd_ndtrain(run, args):
    train, val = _training_cohorts(run, args)
    net, history = workflow.train_nd(train, val, run.cfg)
    _save_net(run, net, "nd.nnw", history)


def cmd_predict(run, args):
    net = _network(run, args.network, "sdae_classifier")
    for s in _studies(run, args):
        pred = pl.predict_volume(net, s, run.cfg["patch.size"])
        io.mvol_write(pred.labels, run.path(f"{s.study_id}.labels.mvol"))


def _map_command(run, args, kind):
    net = _network(run, args.network, "nd")
    p = run.cfg["nd.patch_size"]
    for s in _studies(run, args):
        emap = nd_map(s, net, p) if kind == "nd" else cnd_map(s, net, p)
        io.write_error_map(emap, run.path(f"{s.study_id}.{kind}.mvol"), net.digest())
        run.record["outputs"].extend([f"{s.study_id}.{kind}.valid.mvol",
                                      f"{s.study_id}.{kind}.mvol.json"])


def cmd_ndmap(run, args):
    _map_command(run, args, "nd")


def cmd_cndmap(run, args):
    _map_command(run, args, "cnd")


def cmd_postprocess(run, args):
    labels = io.mvol_read(run.input(args.labels))
    emap = io.read_error_map(run.input(args.map))
    if run.cfg["post.threshold"] == "otsu":
        t, mask = otsu_binarize(emap)
        run.record["threshold"] = t
    else:
        mask = sigma_binarize(emap, run.cfg["post.sigma_k"])
    out = pl.reject_false_positives(labels, mask, run.cfg["post.connectivity"],
                                    run.cfg["post.per_slice"])
    stem = Path(args.labels).name.split(".")[0]
    io.mvol_write(out.labels.astype(np.uint8), run.path(f"{stem}.post.mvol"))
    io.mvol_write(mask.astype(np.uint8), run.path(f"{stem}.mask.mvol"))


def _eval_inputs(run, args):
    net = _network(run, args.network, "sdae_classifier")
    nd = _network(run, args.nd_network, "nd") if args.nd_network else None
    if run.cfg["post.enabled"] and nd is None:
        log.warning("no --nd-network given; reporting raw predictions only")
    return net, nd


def cmd_evaluate(run, args):
    net, nd = _eval_inputs(run, args)
    studies = _studies(run, args)
    reports = pl.evaluate_cohort(studies, net, nd, _eval_options(run.cfg, nd is not None))
    summary = _write_reports(run, reports, "report")
    run.path("summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def cmd_ablate_sequence(run, args):
    net, nd = _eval_inputs(run, args)
    m = _manifest(run, args)
    ids = [args.study] if args.study else m.cohort(args.cohort)
    m.check_files(ids)
    run.inputs_of(m, ids)
    summary = {}
    for name in SEQUENCES:
        studies = [m.load_study(sid, (name,), run.cfg["ablate.fill"]) for sid in ids]
        reports = pl.evaluate_cohort(studies, net, nd, _eval_options(run.cfg, nd is not None))
        summary[name] = _write_reports(run, reports, f"drop_{name}")
    run.path("summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def cmd_ablate_trainsize(run, args):
    encoder = _network(run, args.encoder, "encoder")
    nd = _network(run, args.nd_network, "nd") if args.nd_network else None
    sizes = config_mod.SCHEMA["ablate.sizes"][0](args.sizes) if args.sizes \
        else run.cfg["ablate.sizes"]
    m = _manifest(run, args)
    pool = m.cohort("finetune")
    if max(sizes) > len(pool):
        raise DataError(f"size {max(sizes)} exceeds the {len(pool)} fine-tuning studies")
    val_ids, test_ids = m.cohort("validation"), m.cohort(args.cohort)
    m.check_files(pool + val_ids + test_ids)
    run.inputs_of(m, pool + val_ids + test_ids)
    val = [m.load_study(s) for s in val_ids]
    test = [m.load_study(s) for s in test_ids]
    summary = {}
    for n in sizes:
        train = [m.load_study(s) for s in pool[:n]]
        net, history = workflow.finetune(encoder.layers, train, val, run.cfg,
                                         _log_epoch(f"n={n}"))
        _save_net(run, net, f"classifier_n{n}.nnw", history)
        reports = pl.evaluate_cohort(test, net, nd, _eval_options(run.cfg, nd is not None))
        summary[str(n)] = _write_reports(run, reports, f"trainsize_{n}")
    run.path("summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def cmd_search(run, args):
    encoder = _network(run, args.encoder, "encoder")
    train, val = _training_cohorts(run, args)
    cfg = run.cfg
    space = config_mod.search_space(cfg)

    def evaluate(params, trial_seed):
        trial = dict(cfg)
        trial["finetune.lr"] = float(params["lr"])
        trial["finetune.dropout"] = float(params["dropout"])
        trial["finetune.batch_size"] = int(params["batch_size"])
        trial["finetune.epochs"] = cfg["search.epochs"]
        trial["run.seed"] = trial_seed
        _, history = workflow.finetune(encoder.layers, train, val, trial)
        return workflow.final_val_loss(history)

    ranked = random_search(space, cfg["search.budget"], evaluate, seed=cfg["run.seed"],
                           n_jobs=max(1, run.record.get("threads") or 1))
    lines = ["rank\tval_loss\tlr\tdropout\tbatch_size"]
    for k, (score, params) in enumerate(ranked, 1):
        lines.append(f"{k}\t{score:.6g}\t{params['lr']:.6g}\t{params['dropout']:.4g}\t"
                     f"{params['batch_size']}")
    run.path("search.tsv").write_text("\n".join(lines) + "\n")


COMMANDS = {
    "phantom": (cmd_phantom, "generate a synthetic cohort and its manifest"),
    "preprocess": (cmd_preprocess, "histogram-match and z-score every study"),
    "extract": (cmd_extract, "write a patch set to patches.npz"),
    "pretrain": (cmd_pretrain, "greedy layer-wise DAE pretraining"),
    "finetune": (cmd_finetune, "attach the softmax head and fine-tune"),
    "transfer": (cmd_transfer, "fine-tune an existing classifier on a new cohort"),
    "ndtrain": (cmd_ndtrain, "train the novelty detector"),
    "predict": (cmd_predict, "voxel-wise class labels"),
    "ndmap": (cmd_ndmap, "novelty error map"),
    "cndmap": (cmd_cndmap, "cumulative novelty error map"),
    "postprocess": (cmd_postprocess, "drop components the error mask does not touch"),
    "evaluate": (cmd_evaluate, "Dice reports for a cohort"),
    "ablate-sequence": (cmd_ablate_sequence, "one report per blanked sequence"),
    "ablate-trainsize": (cmd_ablate_trainsize, "one report per fine-tuning set size"),
    "search": (cmd_search, "random search over fine-tuning hyper-parameters"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--threads", type=int, help="thread bound (else LESIONFORGE_THREADS)")
    common.add_argument("--out", required=True, help="run directory")
    common.add_argument("-q", "--quiet", action="store_true")

    studies = argparse.ArgumentParser(add_help=False)
    studies.add_argument("--manifest")
    studies.add_argument("--cohort", default="test")
    studies.add_argument("--study", help="single study id")
    studies.add_argument("--seq", action="append", metavar="NAME=PATH",
                         help="sequence volume given directly (repeatable)")
    studies.add_argument("--labels-in", help="truth labels for --seq input")
    studies.add_argument("--drop", action="append", metavar="SEQ",
                         help="blank a sequence instead of requiring it")

    parser = argparse.ArgumentParser(prog="lesionforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        parents = [common]
        if name in ("extract", "predict", "ndmap", "cndmap", "evaluate"):
            parents.append(studies)
        p = sub.add_parser(name, parents=parents, help=help_text)
        if name in ("preprocess", "pretrain", "finetune", "transfer", "ndtrain",
                    "ablate-sequence", "ablate-trainsize", "search"):
            p.add_argument("--manifest", required=True)
        if name in ("finetune", "transfer", "ndtrain", "search"):
            p.add_argument("--subset", type=int, help="use the first N fine-tuning studies")
        if name == "extract":
            p.add_argument("--kind", choices=("systematic", "vicinity", "nonlesion"),
                           default="systematic")
        if name in ("finetune", "ablate-trainsize", "search"):
            p.add_argument("--encoder", required=True, help="pretrained encoder (NNW1)")
        if name in ("transfer", "predict", "ndmap", "cndmap", "evaluate", "ablate-sequence"):
            p.add_argument("--network", required=True, help="NNW1 checkpoint")
        if name in ("evaluate", "ablate-sequence", "ablate-trainsize"):
            p.add_argument("--nd-network", help="novelty detector for post-processing")
        if name in ("ablate-sequence", "ablate-trainsize"):
            p.add_argument("--cohort", default="test")
            if name == "ablate-sequence":
                p.add_argument("--study")
        if name == "ablate-trainsize":
            p.add_argument("--sizes", help="comma-separated fine-tuning set sizes")
        if name == "postprocess":
            p.add_argument("--labels", required=True, help="label MVOL")
            p.add_argument("--map", required=True, help="error map MVOL (with sidecars)")
    return parser


def resolve_config(args):
    cfg = config_mod.defaults()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        cfg = config_mod.parse(text, cfg)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        config_mod.set_value(cfg, key, value, "--set")
    return cfg


def resolve_threads(args, cfg):
    if args.threads is not None:
        n = args.threads
    elif os.environ.get("LESIONFORGE_THREADS"):
        try:
            n = int(os.environ["LESIONFORGE_THREADS"])
        except ValueError:
            raise ConfigError("LESIONFORGE_THREADS must be an integer") from None
    else:
        n = cfg["run.threads"]
    if n < 0:
        raise ConfigError("thread count must be >= 0")
    return n or None


def _limit_threads(n):
    # the JIT kernels are serial; the bound applies to BLAS and search workers
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def error_line(exc):
    kind = getattr(exc, "kind", "io")
    code = getattr(exc, "exit_code", IO_EXIT)
    return json.dumps({"error": kind, "exit_code": code, "message": str(exc)})


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cfg = resolve_config(args)
        threads = resolve_threads(args, cfg)
        run = Run(args.out, args.command, cfg, argv)
        run.record["threads"] = threads
        if args.config:
            run.input(args.config)
        with _limit_threads(threads):
            COMMANDS[args.command][0](run, args)
        run.finish(started)
    except LesionForgeError as exc:
        print(error_line(exc), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(error_line(exc), file=sys.stderr)
        return IO_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
