"""Command line interface: ``lunar-restore <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (TOML). Keys mirror the long
flags with dashes or underscores; a table named after the subcommand
overrides top-level keys, and explicit flags override the file. The fully
resolved configuration, seeds and input/output hashes are written to a
run-record JSON beside the outputs; ``lunar-restore replay`` re-executes a
record and checks the outputs hash-identical.

Exit codes: 0 ok, 1 I/O, 2 validation, 3 numeric failure.
"""

import argparse
import hashlib
import json
import logging
import os
import sys

from . import __version__
from .errors import LunarRestoreError, NoStripesError, ValidationError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger("lunar_restore")

RUN_RECORD_SCHEMA = 1

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3

# name -> (type, default); None default means required unless noted optional
COMMANDS = {
    "crop": {
        "mosaic": (str, None),
        "geo_json": (str, ""),
        "lon": (float, None),
        "lat": (float, None),
        "size_px": (int, 256),
        "resize": (int, 0),
        "out": (str, None),
    },
    "detect": {
        "in": (list, None),
        "zero_thresh": (float, 1.0 / 255.0),
        "col_frac": (float, 0.5),
        "template_out": (str, None),
    },
    "synth": {
        "clean_dir": (str, None),
        "templates": (str, None),
        "n_train": (int, 200),
        "n_val": (int, 40),
        "n_test": (int, 40),
        "seed": (int, 0),
        "crop_size": (int, 64),
        "max_coverage": (float, 0.02),
        "out_dir": (str, None),
    },
    "train": {
        "manifest": (str, None),
        "out_dir": (str, None),
        "depth": (int, 2),
        "base_channels": (int, 8),
        "learning_rate": (float, 1e-3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "epsilon": (float, 1e-8),
        "batch_size": (int, 4),
        "epochs": (int, 10),
        "seed": (int, 0),
        "checkpoint_every": (int, 10),
        "dtype": (str, "float64"),
        "masked_loss": (bool, False),
        "resume": (str, ""),
    },
    "eval": {
        "manifest": (str, None),
        "ckpt": (str, ""),
        "stub": (str, ""),
        "split": (str, "test"),
        "report": (str, None),
        "triptych_dir": (str, ""),
        "raw": (bool, False),
    },
    "restore": {
        "mosaic": (str, None),
        "geo_json": (str, ""),
        "rect": (str, None),
        "ckpt": (str, ""),
        "stub": (str, ""),
        "out": (str, None),
        "zero_thresh": (float, 1.0 / 255.0),
        "col_frac": (float, 0.5),
        "raw": (bool, False),
    },
    "make-mosaic": {
        "out": (str, None),
        "px_per_degree": (float, 4.0),
        "seed": (int, 0),
        "stripe_lon": (list, []),
        "stripe_width": (int, 1),
    },
}

# keys holding filesystem paths, resolved to absolute paths in the record
PATH_KEYS = {
    "mosaic", "geo_json", "out", "in", "template_out", "clean_dir", "templates",
    "out_dir", "manifest", "resume", "ckpt", "report", "triptych_dir",
}

HELP = {
    "crop": "cut a crater window centred on a lon/lat from a mosaic",
    "detect": "detect stripes in striped crops and write a template file",
    "synth": "build a clean/corrupted/mask dataset with a manifest",
    "train": "train the U-Net on a dataset manifest",
    "eval": "score a checkpoint on a dataset split",
    "restore": "restore the stripes of a geodetic region of a mosaic",
    "make-mosaic": "write a procedural whole-Moon fixture mosaic",
}


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser():
    parser = argparse.ArgumentParser(prog="lunar-restore", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in COMMANDS.items():
        p = sub.add_parser(cmd, help=HELP[cmd])
        p.add_argument("--config", help="TOML file with defaults for any flag")
        for name, (typ, default) in opts.items():
            flag = _flag(name)
            if typ is bool:
                p.add_argument(flag, dest=name, action="store_const", const=True, default=None)
            elif typ is list:
                p.add_argument(flag, dest=name, action="extend", nargs="+", default=None,
                               type=float if name == "stripe_lon" else str)
            else:
                p.add_argument(flag, dest=name, type=typ, default=None)
    rp = sub.add_parser("replay", help="re-run a run-record and compare output hashes")
    rp.add_argument("record", help="run-record JSON written by a previous run")
    rp.add_argument("--out", required=True, help="new output target (directory)")
    return parser


def _load_config_file(path, command):
    with open(path, "rb") as f:
        try:
            doc = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: invalid TOML: {exc}") from None
    flat = {k.replace("-", "_"): v for k, v in doc.items() if not isinstance(v, dict)}
    section = doc.get(command, {})
    flat.update({k.replace("-", "_"): v for k, v in section.items()})
    return flat


def resolve_config(command, args):
    """Defaults, then the config file, then explicit flags."""
    opts = COMMANDS[command]
    cfg = {name: default for name, (_, default) in opts.items()}
    if args.get("config"):
        file_cfg = _load_config_file(args["config"], command)
        unknown = sorted(set(file_cfg) - set(opts))
        if unknown:
            raise ValidationError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        for k, v in file_cfg.items():
            typ = opts[k][0]
            if typ is list and not isinstance(v, list):
                v = [v]
            cfg[k] = v if typ in (list, bool) or v is None else typ(v)
    for k in opts:
        if args.get(k) is not None:
            cfg[k] = args[k]
    missing = [k for k in opts if cfg[k] is None]
    if missing:
        raise ValidationError(
            f"{command}: missing required option(s): {', '.join(_flag(k) for k in missing)}"
        )
    for k in PATH_KEYS & set(cfg):
        if isinstance(cfg[k], list):
            cfg[k] = [os.path.abspath(v) for v in cfg[k]]
        elif cfg[k] and not str(cfg[k]).startswith("stub:"):
            cfg[k] = os.path.abspath(cfg[k])
    return cfg


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths):
    out = {}
    for p in paths:
        if not p or str(p).startswith("stub:"):
            continue
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                fp = os.path.join(p, name)
                if os.path.isfile(fp):
                    out[fp] = file_sha256(fp)
        elif os.path.isfile(p):
            out[p] = file_sha256(p)
    return out


def _hash_tree(root, files=None, exclude=()):
    """``relative path -> sha256`` for ``files`` (relative to ``root``) or the whole tree."""
    if files is None:
        files = []
        for d, _, names in os.walk(root):
            for n in names:
                files.append(os.path.relpath(os.path.join(d, n), root))
    return {
        rel.replace(os.sep, "/"): file_sha256(os.path.join(root, rel))
        for rel in sorted(files)
        if rel not in exclude
    }


def _write_run_record(path, command, cfg, inputs, outputs_root, outputs, seeds):
    record = {
        "schema_version": RUN_RECORD_SCHEMA,
        "tool_version": __version__,
        "command": command,
        "config": cfg,
        "seeds": seeds,
        "inputs": inputs,
        "outputs_root": outputs_root,
        "outputs": outputs,
    }
    with open(path, "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")
    return record


def _record_path_for_file(out):
    return os.path.splitext(out)[0] + ".run.json"


# -- subcommands -----------------------------------------------------------------


def cmd_crop(cfg):
    from .mosaic_io import GeoPoint, MosaicSource, PixelRect, geo_to_pixel, resize_bilinear, write_image

    with MosaicSource.open(cfg["mosaic"], cfg["geo_json"] or None) as src:
        c = geo_to_pixel(src.header, GeoPoint(cfg["lon"], cfg["lat"]))
        size = cfg["size_px"]
        rect = PixelRect(c.x - size // 2, c.y - size // 2, size, size)
        img = src.read_window(rect)
    if cfg["resize"]:
        img = resize_bilinear(img, cfg["resize"], cfg["resize"])
    _ensure_parent(cfg["out"])
    write_image(img, cfg["out"])
    logger.info("wrote %s (%dx%d) from pixel rect %s", cfg["out"], img.shape[1], img.shape[0], tuple(rect))
    return _file_outputs(cfg["out"]), {}


def cmd_detect(cfg):
    from .mosaic_io import read_image
    from .stripes import detect_stripes, extract_template, mask_coverage, save_templates

    templates, sources = [], []
    for path in cfg["in"]:
        mask = detect_stripes(read_image(path), cfg["zero_thresh"], cfg["col_frac"])
        if not mask.any():
            logger.warning("%s: no stripes found, skipped", path)
            continue
        templates.append(extract_template(mask))
        sources.append(os.path.basename(path))
        logger.info("%s: %d run(s), coverage %.4f", path, len(templates[-1].runs), mask_coverage(mask))
    if not templates:
        raise NoStripesError("no stripes found in any input image")
    _ensure_parent(cfg["template_out"])
    save_templates(templates, cfg["template_out"], sources=sources)
    return _file_outputs(cfg["template_out"]), {}


def cmd_synth(cfg):
    from .dataset import build_dataset

    m = build_dataset(
        cfg["clean_dir"], cfg["templates"], cfg["n_train"], cfg["n_val"], cfg["n_test"],
        cfg["seed"], cfg["out_dir"], crop_size=cfg["crop_size"], max_coverage=cfg["max_coverage"],
    )
    logger.info("built %s samples into %s", m.counts, cfg["out_dir"])
    return _dir_outputs(cfg["out_dir"]), {"master_seed": cfg["seed"]}


def cmd_train(cfg):
    from .dataset import DatasetManifest
    from .trainer import TrainConfig, fit, load_checkpoint
    from .unet import UNetConfig

    manifest = DatasetManifest.load(cfg["manifest"])
    ucfg = UNetConfig(depth=cfg["depth"], base_channels=cfg["base_channels"])
    tcfg = TrainConfig(
        learning_rate=cfg["learning_rate"], beta1=cfg["beta1"], beta2=cfg["beta2"],
        epsilon=cfg["epsilon"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
        seed=cfg["seed"], checkpoint_every=cfg["checkpoint_every"], dtype=cfg["dtype"],
        masked_loss=bool(cfg["masked_loss"]),
    )
    resume = load_checkpoint(cfg["resume"]) if cfg["resume"] else None
    ckpt = fit(manifest, ucfg, tcfg, cfg["out_dir"], resume=resume)
    logger.info("trained %d epochs, final train loss %.6g", ckpt.epoch, ckpt.loss_history[-1]["train_loss"])
    return _dir_outputs(cfg["out_dir"]), {"train_seed": cfg["seed"]}


def _model_from(cfg):
    from .restorer import as_model

    if cfg["stub"] and cfg["ckpt"]:
        raise ValidationError("give either --ckpt or --stub, not both")
    if cfg["stub"]:
        if cfg["stub"] not in ("identity",) and not cfg["stub"].startswith("constant"):
            raise ValidationError("--stub must be 'identity' or 'constant[:value]'")
        return as_model("stub:" + cfg["stub"])
    if not cfg["ckpt"]:
        raise ValidationError("one of --ckpt or --stub is required")
    return as_model(cfg["ckpt"])


def cmd_eval(cfg):
    from .dataset import DatasetManifest
    from .evaluator import evaluate

    manifest = DatasetManifest.load(cfg["manifest"])
    model = _model_from(cfg)
    report = evaluate(model, manifest, cfg["split"], composite=not cfg["raw"],
                      triptych_dir=cfg["triptych_dir"] or None)
    _ensure_parent(cfg["report"])
    report.save_json(cfg["report"])
    csv_path = os.path.splitext(cfg["report"])[0] + ".csv"
    report.save_csv(csv_path)
    a = report.aggregates
    logger.info("%s: n=%d mean PSNR corrupted %.3f dB, restored %.3f dB, improved %.1f%%",
                cfg["split"], a["n"], a["mean_psnr_corrupted_dB"], a["mean_psnr_restored_dB"],
                100 * a["fraction_improved"])
    root = os.path.dirname(cfg["report"])
    files = [os.path.basename(cfg["report"]), os.path.basename(csv_path)]
    if cfg["triptych_dir"]:
        tdir = os.path.relpath(cfg["triptych_dir"], root)
        files += [os.path.join(tdir, n) for n in sorted(os.listdir(cfg["triptych_dir"]))]
    return (root, files), {}


def cmd_restore(cfg):
    from .mosaic_io import GeoPoint, MosaicSource
    from .restorer import restore_region, sidecar_for

    try:
        lon1, lat1, lon2, lat2 = (float(v) for v in cfg["rect"].split(","))
    except ValueError:
        raise ValidationError("--rect must be 'lon1,lat1,lon2,lat2'") from None
    model = _model_from(cfg)
    with MosaicSource.open(cfg["mosaic"], cfg["geo_json"] or None) as src:
        _ensure_parent(cfg["out"])
        side = restore_region(src, GeoPoint(lon1, lat1), GeoPoint(lon2, lat2), model, cfg["out"],
                              cfg["zero_thresh"], cfg["col_frac"], composite=not cfg["raw"])
    logger.info("restored %s, coverage %.4f, stripes found: %s", cfg["out"], side["coverage"], side["stripes_found"])
    root = os.path.dirname(cfg["out"])
    return (root, [os.path.basename(cfg["out"]), os.path.basename(sidecar_for(cfg["out"]))]), {}


def cmd_make_mosaic(cfg):
    from .mosaic_io import sidecar_path
    from .synthetic import make_mosaic

    _ensure_parent(cfg["out"])
    h = make_mosaic(cfg["out"], cfg["px_per_degree"], cfg["seed"], tuple(cfg["stripe_lon"]), cfg["stripe_width"])
    logger.info("wrote %s (%dx%d)", cfg["out"], h.width_px, h.height_px)
    root = os.path.dirname(cfg["out"])
    return (root, [os.path.basename(cfg["out"]), os.path.basename(sidecar_path(cfg["out"]))]), {"seed": cfg["seed"]}


HANDLERS = {
    "crop": cmd_crop,
    "detect": cmd_detect,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "restore": cmd_restore,
    "make-mosaic": cmd_make_mosaic,
}


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _file_outputs(path):
    return os.path.dirname(path), [os.path.basename(path)]


def _dir_outputs(out_dir):
    return out_dir, None


def run(command, cfg):
    """Execute a resolved configuration and write its run-record; returns the record."""
    root, files = None, None
    (root, files), seeds = HANDLERS[command](cfg)
    if files is None:
        record_path = os.path.join(root, "run_record.json")
        outputs = _hash_tree(root, exclude=("run_record.json",))
    else:
        anchor = cfg.get("out") or cfg.get("template_out") or cfg.get("report")
        record_path = _record_path_for_file(anchor)
        outputs = _hash_tree(root, files)
    input_paths = []
    for k in ("mosaic", "geo_json", "clean_dir", "templates", "manifest", "resume", "ckpt"):
        if cfg.get(k):
            input_paths.append(cfg[k])
    input_paths += cfg.get("in") or []
    if command in ("crop", "restore") and not cfg.get("geo_json"):
        from .mosaic_io import sidecar_path

        input_paths.append(sidecar_path(cfg["mosaic"]))
    return _write_run_record(record_path, command, cfg, _hash_inputs(input_paths), root, outputs, seeds)


def _retarget(command, cfg, target):
    cfg = dict(cfg)
    target = os.path.abspath(target)
    if "out_dir" in cfg:
        cfg["out_dir"] = target
    for k in ("out", "template_out", "report"):
        if cfg.get(k):
            cfg[k] = os.path.join(target, os.path.basename(cfg[k]))
    if cfg.get("triptych_dir"):
        cfg["triptych_dir"] = os.path.join(target, os.path.basename(cfg["triptych_dir"]))
    return cfg


def replay(record_path, target):
    """Re-run a record into ``target``; returns ``(ok, mismatches)``."""
    with open(record_path) as f:
        record = json.load(f)
    if record.get("schema_version") != RUN_RECORD_SCHEMA:
        raise ValidationError(f"unsupported run-record schema {record.get('schema_version')!r}")
    command = record["command"]
    for path, digest in record["inputs"].items():
        if not os.path.isfile(path) or file_sha256(path) != digest:
            raise ValidationError(f"input changed or missing since the recorded run: {path}")
    cfg = _retarget(command, record["config"], target)
    new = run(command, cfg)
    mismatches = sorted(
        k for k in set(record["outputs"]) | set(new["outputs"])
        if record["outputs"].get(k) != new["outputs"].get(k)
    )
    return not mismatches, mismatches


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stdout,
    )
    try:
        if args.command == "replay":
            ok, mismatches = replay(args.record, args.out)
            if not ok:
                print(f"error: replay outputs differ: {', '.join(mismatches)}", file=sys.stderr)
                return EXIT_IO
            logger.info("replay reproduced all outputs")
            return EXIT_OK
        cfg = resolve_config(args.command, vars(args))
        run(args.command, cfg)
        return EXIT_OK
    except LunarRestoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
