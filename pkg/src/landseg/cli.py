"""Command line entry point: train, predict, refine, evaluate and demo.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every command writes its artifacts and a ``run.json`` manifest (resolved
configuration plus artifact list) into the run directory given by ``--out``.
"""

import argparse
import contextlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import CLASSES, __version__
from . import io as lio
from . import metrics as M
from .densecrf import CrfParams, meanfield_infer, unary_from_probs
from .nn import build_network, default_spec, load_checkpoint, toy_spec
from .tensor import TensorFormatError
from .tiling import TileScheme, extract_training_patches, tile_predict
from .train import TrainConfig, train_loop

log = logging.getLogger("landseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


DEMO_WIDTHS = (8, 16)
DEMO_ATROUS = 2
DEMO_PATCH = 64
DEMO_EPOCHS = 30
DEMO_LR = 3e-3
# milder than the library defaults: the synthetic scenes carry about 20
# intensity units of per-band noise, and their objects are only a few pixels
# wide, so the colour bandwidth is widened and the spatial ones narrowed
DEMO_CRF = CrfParams(w1=0.1, w2=0.3, sigma_alpha=5.0, sigma_beta=40.0, sigma_gamma=1.0, iterations=5)


def _csv_ints(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _class_index(text):
    if text.isdigit():
        return int(text)
    if text in CLASSES:
        return CLASSES.index(text)
    raise argparse.ArgumentTypeError(f"unknown class {text!r}; use an index or one of {', '.join(CLASSES)}")


def _add_crf_flags(p, d=CrfParams()):
    p.add_argument("--w1", type=float, default=d.w1, help="appearance kernel weight")
    p.add_argument("--w2", type=float, default=d.w2, help="smoothness kernel weight")
    p.add_argument("--sa", type=float, default=d.sigma_alpha, help="appearance spatial bandwidth (pixels)")
    p.add_argument("--sb", type=float, default=d.sigma_beta, help="appearance colour bandwidth (8-bit units)")
    p.add_argument("--sg", type=float, default=d.sigma_gamma, help="smoothness spatial bandwidth (pixels)")
    p.add_argument("--iters", type=int, default=d.iterations, help="mean-field iterations")
    p.add_argument("--method", choices=("lattice", "exact"), default="lattice")
    p.add_argument("--shifts", type=int, default=4, help="lattice shifts averaged per filter")
    p.add_argument("--include-ndsm", action="store_true", help="append nDSM to the colour feature")


def build_parser():
    parser = _Parser(prog="landseg", description="Aerial land-cover segmentation with CRF refinement.")
    parser.add_argument("--version", action="version", version=f"landseg {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a network on a tile manifest")
    p.add_argument("--manifest", required=True, help="tab-separated tile manifest")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON file with training and network settings")
    p.add_argument("--variant", choices=("AC", "SC"))
    p.add_argument("--widths", type=_csv_ints, help="encoder widths, e.g. 32,64,128")
    p.add_argument("--atrous-blocks", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--patch-size", type=int, help="training patch size (default 128)")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--no-ndsm", action="store_true", help="train on IRRG only")
    p.add_argument("--float32", action="store_true", help="train in single precision")

    p = sub.add_parser("predict", help="tiled inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="predict every test tile of a manifest")
    src.add_argument("--image", help="single IRRG image")
    p.add_argument("--ndsm", help="nDSM for --image")
    p.add_argument("--no-ndsm", action="store_true")
    p.add_argument("--patch", type=int, default=256)
    p.add_argument("--core", type=int, default=128)
    p.add_argument("--batch-size", type=int, default=4)

    p = sub.add_parser("refine", help="dense CRF refinement of stored probability maps")
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="refine every test tile; probabilities read from --probs-dir")
    src.add_argument("--probs", help="single probability map (RT01)")
    p.add_argument("--probs-dir", help="directory holding <tile>.probs.rt01 files")
    p.add_argument("--image", help="IRRG image matching --probs")
    p.add_argument("--ndsm", help="nDSM image, needed with --include-ndsm")
    _add_crf_flags(p)

    p = sub.add_parser("evaluate", help="confusion matrix, F1 and overall accuracy")
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="evaluate every test tile; predictions read from --pred-dir")
    src.add_argument("--pred", nargs="+", help="predicted label PNGs")
    p.add_argument("--ref", nargs="+", help="reference label PNGs, paired with --pred")
    p.add_argument("--pred-dir", help="directory holding <tile><suffix> label PNGs")
    p.add_argument("--suffix", default=".labels.png")
    p.add_argument("--erode", type=int, default=0, help="ignore pixels within this radius of a boundary")
    p.add_argument("--ignore-class", type=_class_index, help="drop reference pixels of this class")
    p.add_argument("--report-exclude", type=_class_index, default=0,
                   help="class left out of the F1 table and normalized matrix (default background)")
    p.add_argument("--label", default="model", help="row label in the F1 table")

    p = sub.add_parser("demo", help="synthetic end-to-end run: train, predict, refine, evaluate")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-scenes", type=int, default=6)
    p.add_argument("--test-scenes", type=int, default=2)
    p.add_argument("--scene-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    _add_crf_flags(p, DEMO_CRF)
    return parser


class Run:
    """Run directory bookkeeping: resolved config and artifact list."""

    def __init__(self, out, command, config):
        self.out = out
        self.command = command
        self.config = config
        self.artifacts = []
        self.started = time.time()
        os.makedirs(out, exist_ok=True)
        log.info("%s config: %s", command, json.dumps(config, sort_keys=True, default=str))

    def path(self, name):
        p = os.path.join(self.out, name)
        self.artifacts.append(name)
        return p

    def finish(self, **extra):
        doc = {"command": self.command, "version": __version__, "config": self.config,
               "artifacts": self.artifacts, "seconds": round(time.time() - self.started, 3), **extra}
        with open(os.path.join(self.out, "run.json"), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, default=str)


def _tile_name(path):
    return os.path.splitext(os.path.basename(path))[0]


def _predict_fn(net):
    net.eval()

    def fn(batch):
        return net.forward(batch)
    return fn


def _crf_params(args):
    return CrfParams(w1=args.w1, w2=args.w2, sigma_alpha=args.sa, sigma_beta=args.sb,
                     sigma_gamma=args.sg, iterations=args.iters)


# train ---------------------------------------------------------------------

def cmd_train(args):
    file_cfg = {}
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
    net_cfg = {"variant": "AC", "widths": [32, 64, 128], "atrous_blocks": 4, "patch_size": 128,
               "use_ndsm": True, "float32": False}
    for key in list(net_cfg):
        if key in file_cfg:
            net_cfg[key] = file_cfg.pop(key)
    train_cfg = TrainConfig.from_dict(file_cfg).to_dict()

    overrides = {"variant": args.variant, "widths": list(args.widths) if args.widths else None,
                 "atrous_blocks": args.atrous_blocks, "patch_size": args.patch_size}
    net_cfg.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_ndsm:
        net_cfg["use_ndsm"] = False
    if args.float32:
        net_cfg["float32"] = True
    overrides = {"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr, "seed": args.seed}
    train_cfg.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_augment:
        train_cfg["augment"] = False
    train_cfg["checkpoint_dir"] = os.path.join(args.out, "checkpoint")
    config = TrainConfig.from_dict(train_cfg)

    run = Run(args.out, "train", {"network": net_cfg, "training": config.to_dict(), "manifest": args.manifest})
    in_ch = 4 if net_cfg["use_ndsm"] else 3
    spec = default_spec(net_cfg["variant"], tuple(net_cfg["widths"]), net_cfg["atrous_blocks"], in_channels=in_ch,
                        classes=len(CLASSES))
    records = [r for r in lio.read_manifest(args.manifest) if r.split == "train"]
    if not records:
        raise lio.DataError(f"{args.manifest}: no tiles tagged 'train'")
    dtype = np.float32 if net_cfg["float32"] else np.float64
    patches = []
    for rec in records:
        x, y = lio.load_tile(rec, use_ndsm=net_cfg["use_ndsm"])
        for img, lab, _ in extract_training_patches(x[0].astype(dtype), y, net_cfg["patch_size"]):
            patches.append((img, lab))
    log.info("training on %d patches from %d tiles", len(patches), len(records))
    net = build_network(spec, seed=config.seed, dtype=dtype)
    net, history = train_loop(config, spec, patches, net=net)
    run.artifacts += ["checkpoint", "checkpoint/history.csv"]
    run.finish(epochs=len(history), final=history.rows[-1] if len(history) else None)
    return EXIT_OK


# predict --------------------------------------------------------------------

def _predict_one(net, x, scheme, batch_size):
    probs = tile_predict(x, _predict_fn(net), scheme, batch_size=batch_size)
    if not np.all(np.isfinite(probs)):
        raise FloatingPointError("network produced non-finite probabilities")
    return probs


def cmd_predict(args):
    try:
        scheme = TileScheme(patch=args.patch, core=args.core)
    except ValueError as e:
        raise UsageError(f"predict: {e}") from e
    net = load_checkpoint(args.checkpoint)
    use_ndsm = net.spec.in_channels == 4 and not args.no_ndsm
    if net.spec.in_channels == 4 and args.no_ndsm:
        raise lio.DataError("the checkpoint expects 4 input channels; it cannot run with --no-ndsm")
    run = Run(args.out, "predict", {"checkpoint": args.checkpoint, "patch": args.patch, "core": args.core,
                                    "use_ndsm": use_ndsm, "manifest": args.manifest, "image": args.image,
                                    "ndsm": args.ndsm})
    if args.manifest:
        jobs = [(r, _tile_name(r.image)) for r in lio.read_manifest(args.manifest) if r.split == "test"]
    else:
        if use_ndsm and not args.ndsm:
            raise UsageError("predict: the checkpoint needs --ndsm (or pass --no-ndsm with a 3-band model)")
        jobs = [(lio.TileRecord(args.image, args.ndsm or "-", "", "test"), _tile_name(args.image))]
    for rec, name in jobs:
        irrg = lio.load_raster(rec.image)
        x = lio.stack_inputs(irrg, lio.load_raster(rec.ndsm) if use_ndsm else None)
        probs = _predict_one(net, x, scheme, args.batch_size)
        lio.save_raster(probs, run.path(f"{name}.probs.rt01"))
        lio.save_labels(np.argmax(probs[0], axis=0), run.path(f"{name}.labels.png"))
        log.info("predicted %s (%dx%d)", name, x.shape[2], x.shape[3])
    run.finish(tiles=len(jobs))
    return EXIT_OK


# refine ---------------------------------------------------------------------

def cmd_refine(args):
    params = _crf_params(args)
    run = Run(args.out, "refine", {"crf": params.to_dict(), "method": args.method, "shifts": args.shifts,
                                   "include_ndsm": args.include_ndsm, "manifest": args.manifest,
                                   "probs": args.probs, "probs_dir": args.probs_dir, "image": args.image})
    if args.manifest:
        if not args.probs_dir:
            raise UsageError("refine: --manifest needs --probs-dir")
        jobs = []
        for r in lio.read_manifest(args.manifest):
            if r.split == "test":
                name = _tile_name(r.image)
                jobs.append((os.path.join(args.probs_dir, f"{name}.probs.rt01"), r.image, r.ndsm, name))
    else:
        if not args.image:
            raise UsageError("refine: --probs needs --image")
        jobs = [(args.probs, args.image, args.ndsm or "-", _tile_name(args.image))]
    for probs_path, image_path, ndsm_path, name in jobs:
        probs = lio.load_raster(probs_path)
        image = lio.load_raster(image_path)
        if args.include_ndsm:
            if ndsm_path == "-":
                raise lio.DataError(f"{image_path}: --include-ndsm needs an nDSM")
            image = lio.stack_inputs(image, lio.load_raster(ndsm_path))
        q, labels = meanfield_infer(unary_from_probs(probs), image, params, method=args.method,
                                    shifts=args.shifts, include_ndsm=args.include_ndsm)
        lio.save_raster(q, run.path(f"{name}.crf.probs.rt01"))
        lio.save_labels(labels, run.path(f"{name}.crf.labels.png"))
        log.info("refined %s", name)
    run.finish(tiles=len(jobs))
    return EXIT_OK


# evaluate -------------------------------------------------------------------

def evaluate_pairs(pairs, erode=0, ignore_class=None):
    """Accumulated confusion matrix over (reference, prediction) label maps."""
    mats = []
    for ref, pred in pairs:
        if ref.shape != pred.shape:
            raise lio.DataError(f"reference {ref.shape} and prediction {pred.shape} sizes differ")
        mask = M.erode_boundaries(ref, erode) if erode else None
        mats.append(M.confusion(ref, pred, len(CLASSES), ignore_mask=mask, ignore_class=ignore_class))
    return M.accumulate(mats)


def write_reports(run, cm, exclude, label):
    names = list(CLASSES)
    M.write_metrics_csv(run.path("metrics.csv"), cm, names, exclude)
    M.write_confusion_csv(run.path("confusion.csv"), cm, names)
    text = M.format_f1_table(cm, names, exclude, label) + "\n" + M.format_confusion_table(cm, names, exclude)
    with open(run.path("report.txt"), "w") as fh:
        fh.write(text)
    return text


def cmd_evaluate(args):
    exclude = () if args.report_exclude is None else (args.report_exclude,)
    run = Run(args.out, "evaluate", {"erode": args.erode, "ignore_class": args.ignore_class,
                                     "report_exclude": exclude, "manifest": args.manifest,
                                     "pred_dir": args.pred_dir, "suffix": args.suffix})
    if args.manifest:
        if not args.pred_dir:
            raise UsageError("evaluate: --manifest needs --pred-dir")
        pairs = []
        for r in lio.read_manifest(args.manifest):
            if r.split == "test":
                pred = os.path.join(args.pred_dir, _tile_name(r.image) + args.suffix)
                pairs.append((r.labels, pred))
    else:
        if not args.ref or len(args.ref) != len(args.pred):
            raise UsageError("evaluate: --pred and --ref need the same number of files")
        pairs = list(zip(args.ref, args.pred))
    if not pairs:
        raise lio.DataError("nothing to evaluate")
    cm = evaluate_pairs([(lio.load_labels(r), lio.load_labels(p)) for r, p in pairs], args.erode, args.ignore_class)
    text = write_reports(run, cm, exclude, args.label)
    print(text)
    run.finish(overall_accuracy=M.overall_accuracy(cm), tiles=len(pairs))
    return EXIT_OK


# demo -----------------------------------------------------------------------

def run_demo(out, seed=0, train_scenes=6, test_scenes=2, scene_size=128, epochs=None, lr=None,
             crf=DEMO_CRF, method="lattice", shifts=4):
    """Synthetic end-to-end pipeline.  Returns a dict with raw and refined confusion matrices."""
    from .synthetic import make_scene

    epochs = DEMO_EPOCHS if epochs is None else epochs
    lr = DEMO_LR if lr is None else lr
    config = TrainConfig(batch_size=8, lr=lr, epochs=epochs, seed=seed,
                         checkpoint_dir=os.path.join(out, "checkpoint"))
    run = Run(out, "demo", {"training": config.to_dict(), "widths": DEMO_WIDTHS, "atrous_blocks": DEMO_ATROUS,
                            "patch": DEMO_PATCH, "scene_size": scene_size, "train_scenes": train_scenes,
                            "test_scenes": test_scenes, "crf": crf.to_dict(), "method": method,
                            "shifts": shifts})
    scenes = [make_scene(scene_size, seed=seed * 1000 + i) for i in range(train_scenes + test_scenes)]
    stacks = [np.concatenate([irrg, ndsm]).astype(np.float32) for irrg, ndsm, _ in scenes]
    patches = []
    for x, (_, _, lab) in zip(stacks[:train_scenes], scenes[:train_scenes]):
        patches += [(img, y) for img, y, _ in extract_training_patches(x, lab, DEMO_PATCH)]
    spec = toy_spec("AC", widths=DEMO_WIDTHS, atrous_blocks=DEMO_ATROUS)
    net = build_network(spec, seed=seed, dtype=np.float32)
    t0 = time.time()
    net, history = train_loop(config, spec, patches, net=net)
    log.info("demo training: %d epochs in %.1f s", len(history), time.time() - t0)
    net = load_checkpoint(config.checkpoint_dir, dtype=np.float32)
    history.to_csv(run.path("history.csv"))

    scheme = TileScheme(patch=DEMO_PATCH, core=DEMO_PATCH // 2)
    raw_pairs, crf_pairs = [], []
    for i in range(train_scenes, train_scenes + test_scenes):
        irrg, _, lab = scenes[i]
        probs = _predict_one(net, stacks[i][None], scheme, batch_size=8).astype(np.float64)
        raw = np.argmax(probs[0], axis=0)
        _, refined = meanfield_infer(unary_from_probs(probs), irrg, crf, method=method, shifts=shifts)
        lio.save_labels(lab, run.path(f"scene{i}.ref.png"))
        lio.save_labels(raw, run.path(f"scene{i}.labels.png"))
        lio.save_labels(refined, run.path(f"scene{i}.crf.labels.png"))
        raw_pairs.append((lab, raw))
        crf_pairs.append((lab, refined))
    cm_raw = evaluate_pairs(raw_pairs)
    cm_crf = evaluate_pairs(crf_pairs)
    text = ("raw network\n" + write_reports(run, cm_raw, (0,), "AC")
            + "\nafter CRF\n" + M.format_f1_table(cm_crf, list(CLASSES), (0,), "AC-CRF"))
    M.write_metrics_csv(run.path("metrics_crf.csv"), cm_crf, list(CLASSES), (0,))
    oa_raw, oa_crf = M.overall_accuracy(cm_raw), M.overall_accuracy(cm_crf)
    run.finish(oa_raw=oa_raw, oa_crf=oa_crf)
    return {"cm_raw": cm_raw, "cm_crf": cm_crf, "oa_raw": oa_raw, "oa_crf": oa_crf, "report": text,
            "seconds": time.time() - run.started}


def cmd_demo(args):
    res = run_demo(args.out, seed=args.seed, train_scenes=args.train_scenes, test_scenes=args.test_scenes,
                   scene_size=args.scene_size, epochs=args.epochs, lr=args.lr, crf=_crf_params(args),
                   method=args.method, shifts=args.shifts)
    print(res["report"])
    print(f"overall accuracy: raw {res['oa_raw']:.4f}, after CRF {res['oa_crf']:.4f}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "refine": cmd_refine, "evaluate": cmd_evaluate,
            "demo": cmd_demo}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return EXIT_OK if not e.code else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("landseg: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    limits = contextlib.nullcontext()
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limits = threadpool_limits(limits=args.threads)
    with limits:
        try:
            return COMMANDS[args.command](args)
        except UsageError as e:
            print(e, file=sys.stderr)
            return EXIT_USAGE
        except FloatingPointError as e:
            log.error("numeric failure: %s", e)
            return EXIT_NUMERIC
        except (lio.DataError, TensorFormatError, FileNotFoundError, IsADirectoryError, ValueError) as e:
            log.error("data error: %s", e)
            return EXIT_DATA


def main():
    sys.exit(run())
