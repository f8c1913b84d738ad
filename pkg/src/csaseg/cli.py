"""Command-line entry point: ``csaseg <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` with flat ``key=value`` lines;
explicit flags override file values.  All flags are parsed and every config
object is built before any file is read or written.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import config as config_io
from .errors import ConfigError, CsaSegError
from .volume import LabelVolume, SyntheticSpec, read_volume, write_volume

log = logging.getLogger("csaseg")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

IMAGE_SUFFIX = "_image.vol"
LABEL_SUFFIX = "_label.vol"
PRED_SUFFIX = "_pred.vol"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ----------------------------------------------------------------------------------

def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _gather(args, keys: dict[str, str]) -> dict:
    """Config-file values overlaid with the flags the user actually gave."""
    values = config_io.read_kv(args.config) if args.config else {}
    for dest, key in keys.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[key] = v
    return values


def _route(values: dict, targets: dict, extra: dict | None = None) -> dict[str, dict]:
    """Send every key to each dataclass that declares it; unclaimed keys are an error."""
    extra = extra or {}
    out = {name: {} for name in targets}
    out["extra"] = dict(extra)
    for key, v in values.items():
        claimed = False
        for name, cls in targets.items():
            if key in _fields(cls):
                out[name][key] = v
                claimed = True
        if key in extra:
            out["extra"][key] = v
            claimed = True
        if not claimed:
            raise ConfigError(f"unknown config key '{key}'")
    return out


def _need_file(path, what):
    if not Path(path).is_file():
        raise UsageError(f"{what} {path} does not exist")


def _need_dir(path, what):
    if not Path(path).is_dir():
        raise UsageError(f"{what} {path} is not a directory")


def _writable_target(path, what):
    """Output path check: the nearest existing ancestor must be a writable directory."""
    p = Path(path).resolve()
    parent = p if p.is_dir() else p.parent
    while not parent.exists():
        parent = parent.parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise UsageError(f"{what} {path} is not writable")


def _case_id(path: Path) -> str:
    name = path.name
    for suffix in (IMAGE_SUFFIX, LABEL_SUFFIX, PRED_SUFFIX, ".vol"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def _pairs(directory) -> list[tuple[str, Path, Path | None]]:
    """(case_id, image, label-or-None) for every ``*_image.vol`` in ``directory``."""
    d = Path(directory)
    out = []
    for img in sorted(d.glob("*" + IMAGE_SUFFIX)):
        cid = _case_id(img)
        lab = d / (cid + LABEL_SUFFIX)
        out.append((cid, img, lab if lab.exists() else None))
    if not out:
        raise CsaSegError(f"no *{IMAGE_SUFFIX} files in {directory}")
    return out


def _label_files(directory) -> dict[str, Path]:
    out = {}
    for p in sorted(Path(directory).glob("*.vol")):
        if p.name.endswith(IMAGE_SUFFIX):
            continue
        out[_case_id(p)] = p
    return out


def _floats3(text):
    try:
        vals = [float(v) for v in str(text).replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 numbers, got {text!r}") from None
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 numbers, got {text!r}")
    return ",".join(repr(v) for v in vals)


def _add_config(p):
    p.add_argument("--config", metavar="FILE",
                   help="(path) flat key=value file; explicit flags override its values")


def _add_preprocess_flags(p):
    p.add_argument("--hu-min", type=float, help="(HU) lower clamp of the intensity window [-200]")
    p.add_argument("--hu-max", type=float, help="(HU) upper clamp of the intensity window [800]")
    p.add_argument("--target-spacing", type=_floats3, metavar="MM",
                   help="(mm) resampling spacing, one value or D,H,W [0.8]")


_PREPROCESS_KEYS = {"hu_min": "hu_min", "hu_max": "hu_max", "target_spacing": "target_spacing"}


# -- subcommands ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .volume import generate_synthetic
    values = _gather(args, {"seed": "seed", "count": "count"})
    routed = _route(values, {"spec": SyntheticSpec}, extra={"count": 25})
    count = config_io.coerce("count", routed["extra"]["count"], int)
    if count < 1:
        raise ConfigError("count must be >= 1")
    base = config_io.build(SyntheticSpec, routed["spec"])
    base.validate()
    _writable_target(args.out_dir, "output directory")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# case_id seed image label", "# spec"]
    lines += ["# " + line for line in config_io.dump(base).splitlines()]
    for i in range(count):
        spec = dataclasses.replace(base, seed=base.seed + i)
        vol, lab = generate_synthetic(spec)
        cid = f"case{i:03d}"
        write_volume(vol, out / (cid + IMAGE_SUFFIX))
        write_volume(lab, out / (cid + LABEL_SUFFIX))
        lines.append(f"{cid} {spec.seed} {cid + IMAGE_SUFFIX} {cid + LABEL_SUFFIX}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {count} volume/label pairs to {out}")
    return 0


def cmd_preprocess(args) -> int:
    from .preprocess import PreprocessConfig, preprocess_pair, preprocess_volume
    values = _gather(args, _PREPROCESS_KEYS)
    cfg = config_io.build(PreprocessConfig, _route(values, {"pre": PreprocessConfig})["pre"])
    _need_dir(args.in_dir, "input directory")
    _writable_target(args.out_dir, "output directory")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = _pairs(args.in_dir)
    for cid, img, lab in pairs:
        vol = read_volume(img)
        if lab is not None:
            vol, label = preprocess_pair(vol, read_volume(lab), cfg)
            write_volume(label, out / (cid + LABEL_SUFFIX))
        else:
            vol = preprocess_volume(vol, cfg)
        write_volume(vol, out / (cid + IMAGE_SUFFIX))
    print(f"preprocessed {len(pairs)} case(s) into {out}")
    return 0


def cmd_sdt(args) -> int:
    from .losses import signed_distance
    if args.config:
        _route(config_io.read_kv(args.config), {})
    _need_file(args.mask, "mask file")
    _writable_target(args.out, "output file")
    mask = read_volume(args.mask)
    if not isinstance(mask, LabelVolume):
        raise CsaSegError(f"{args.mask}: expected a u8 label volume")
    write_volume(signed_distance(mask).to_volume(), args.out)
    return 0


def _load_cases(directory, pcfg, preprocessed: bool):
    from .preprocess import preprocess_pair
    from .trainer import Case
    cases = []
    for cid, img, lab in _pairs(directory):
        if lab is None:
            raise CsaSegError(f"case {cid} has no {LABEL_SUFFIX} file")
        vol, label = read_volume(img), read_volume(lab)
        if not preprocessed:
            vol, label = preprocess_pair(vol, label, pcfg)
        cases.append(Case(cid, vol, label))
    return cases


_TRAIN_KEYS = {
    "loss_mode": "loss_mode", "seed": "seed", "max_epochs": "max_epochs", "batch_size": "batch_size",
    "initial_lr": "initial_lr", "lam": "lam", "patch_size": "patch_size", "base_width": "base_width",
    "csa_levels": "csa_levels", "val_ratio": "val_ratio", **_PREPROCESS_KEYS,
}


def cmd_train(args) -> int:
    from .model import Network, NetworkConfig
    from .preprocess import PreprocessConfig
    from .trainer import Dataset, TrainConfig, train
    from .volume import split_dataset
    values = _gather(args, _TRAIN_KEYS)
    routed = _route(values, {"train": TrainConfig, "net": NetworkConfig, "pre": PreprocessConfig},
                    extra={"val_ratio": 0.8})
    tcfg = config_io.build(TrainConfig, routed["train"])
    ncfg = config_io.build(NetworkConfig, routed["net"])
    pre = dict(routed["pre"])
    pre["patch_size"] = tcfg.patch_size
    pcfg = config_io.build(PreprocessConfig, pre)
    ratio = config_io.coerce("val_ratio", routed["extra"]["val_ratio"], float)
    if not 0.0 < ratio <= 1.0:
        raise ConfigError("val_ratio must lie in (0, 1]")
    _need_dir(args.data_dir, "data directory")
    _writable_target(args.out_dir, "output directory")

    cases = _load_cases(args.data_dir, pcfg, args.preprocessed)
    by_id = {c.case_id: c for c in cases}
    if ratio < 1.0 and len(cases) > 1:
        tr, va = split_dataset(sorted(by_id), ratio, tcfg.seed)
    else:
        tr, va = sorted(by_id), []
    dataset = Dataset([by_id[i] for i in sorted(tr)], [by_id[i] for i in sorted(va)])
    out = Path(args.out_dir)
    net = Network(ncfg, seed=tcfg.seed)

    def progress(epoch, rec):
        log.info("epoch %d lr %.6g loss %.6g", epoch, rec.lr_trace[-1], rec.epoch_losses[-1])

    record = train(net, dataset, tcfg, checkpoint_dir=out, infer_cfg=pcfg, progress=progress)
    record.save(out)
    print(f"trained {tcfg.max_epochs} epoch(s) on {len(dataset.train)} case(s); "
          f"final loss {record.epoch_losses[-1]:.6g}; outputs in {out}")
    return 0


def cmd_infer(args) -> int:
    from .model import Network
    from .preprocess import PreprocessConfig
    from .trainer import infer
    values = _gather(args, {"patch_size": "patch_size", "patch_overlap": "patch_overlap", **_PREPROCESS_KEYS})
    pcfg = config_io.build(PreprocessConfig, _route(values, {"pre": PreprocessConfig})["pre"])
    _need_file(args.checkpoint, "checkpoint")
    _need_dir(args.in_dir, "input directory")
    _writable_target(args.out_dir, "output directory")

    net = Network.load(args.checkpoint)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = _pairs(args.in_dir)
    for cid, img, _ in pairs:
        pred = infer(net, read_volume(img), pcfg, preprocessed=args.preprocessed)
        write_volume(pred, out / (cid + PRED_SUFFIX))
    print(f"wrote {len(pairs)} prediction(s) to {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import aggregate, evaluate_case
    if args.config:
        _route(config_io.read_kv(args.config), {})
    _need_dir(args.pred_dir, "prediction directory")
    _need_dir(args.truth_dir, "truth directory")
    _writable_target(args.out, "output file")

    preds, truths = _label_files(args.pred_dir), _label_files(args.truth_dir)
    missing = sorted(set(truths) - set(preds))
    if missing:
        raise CsaSegError(f"no prediction for case(s): {', '.join(missing)}")
    if not truths:
        raise CsaSegError(f"no label volumes in {args.truth_dir}")
    cases = []
    for cid in sorted(truths):
        pred, truth = read_volume(preds[cid]), read_volume(truths[cid])
        if not (isinstance(pred, LabelVolume) and isinstance(truth, LabelVolume)):
            raise CsaSegError(f"case {cid}: expected u8 label volumes")
        cases.append(evaluate_case(pred, truth, cid))
    report = aggregate(cases)
    Path(args.out).write_text(report.to_csv())
    print(report.to_csv(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import OP_CHECKS, TOLERANCES, run_suite
    values = _gather(args, {"seed": "seed", "ops": "ops"})
    routed = _route(values, {}, extra={"seed": 0, "ops": ""})
    seed = config_io.coerce("seed", routed["extra"]["seed"], int)
    names = [n for n in str(routed["extra"]["ops"]).replace(",", " ").split() if n] or None
    unknown = sorted(set(names or ()) - set(OP_CHECKS))
    if unknown:
        raise UsageError(f"unknown op(s): {', '.join(unknown)}; choose from {', '.join(OP_CHECKS)}")
    results = run_suite(names, seed=seed)
    failed = []
    for name, (err, ok) in results.items():
        print(f"{name:<18} worst rel err {err:.3e}  tol {TOLERANCES[name]:.0e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


# -- parser -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="csaseg", description="Volumetric bone segmentation toolkit.")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="(level) logging verbosity")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write synthetic fractured-bone volume/label pairs")
    p.add_argument("--spec", "--config", dest="config", metavar="FILE",
                   help="(path) key=value generator spec; keys are SyntheticSpec fields plus count")
    p.add_argument("--out-dir", required=True, help="(path) directory for the VOL1 pairs and manifest.txt")
    p.add_argument("--count", type=int, help="(volumes) number of pairs to write [25]")
    p.add_argument("--seed", type=int, help="(integer) seed of the first pair; pair i uses seed+i [0]")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="clamp, window and resample *_image.vol / *_label.vol pairs")
    _add_config(p)
    p.add_argument("--in-dir", required=True, help="(path) directory of raw HU volumes")
    p.add_argument("--out-dir", required=True, help="(path) directory for the preprocessed volumes")
    _add_preprocess_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("sdt", help="signed distance map of a label volume, in mm")
    _add_config(p)
    p.add_argument("--mask", required=True, help="(path) u8 VOL1 label volume")
    p.add_argument("--out", required=True, help="(path) f32 VOL1 output of signed distances in mm")
    p.set_defaults(func=cmd_sdt)

    p = sub.add_parser("train", help="train a network on *_image.vol / *_label.vol pairs")
    _add_config(p)
    p.add_argument("--data-dir", required=True, help="(path) directory of training pairs")
    p.add_argument("--out-dir", required=True,
                   help="(path) checkpoints, run_manifest.txt and loss_trace.csv go here")
    p.add_argument("--loss-mode", choices=["dice-only", "surface-only", "combined"],
                   help="(name) training loss [combined]")
    p.add_argument("--seed", type=int, help="(integer) seed for weights, patch sampling and split [0]")
    p.add_argument("--max-epochs", type=int, help="(epochs) training length [200]")
    p.add_argument("--batch-size", type=int, help="(patches) patches per optimizer step [2]")
    p.add_argument("--initial-lr", type=float, help="(learning rate) Adam step size at epoch 0 [0.01]")
    p.add_argument("--lam", type=float, help="(weight) Dice term weight in the combined loss [1]")
    p.add_argument("--patch-size", type=int, help="(voxels) cubic patch edge, multiple of 8 [32]")
    p.add_argument("--base-width", type=int, help="(channels) level-1 width; doubles per level [8]")
    p.add_argument("--csa-levels", help="(levels) comma list from {2,3}; empty string for plain skips [2,3]")
    p.add_argument("--val-ratio", type=float,
                   help="(fraction) share of cases used for training; the rest validate; 1 disables [0.8]")
    p.add_argument("--preprocessed", action="store_true",
                   help="(switch) inputs are already windowed and resampled")
    _add_preprocess_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict label volumes with a trained checkpoint")
    _add_config(p)
    p.add_argument("--checkpoint", required=True, help="(path) checkpoint written by train")
    p.add_argument("--in-dir", required=True, help="(path) directory of *_image.vol inputs")
    p.add_argument("--out-dir", required=True, help="(path) directory for *_pred.vol label outputs")
    p.add_argument("--patch-size", type=int, help="(voxels) inference tile edge, multiple of 8 [64]")
    p.add_argument("--patch-overlap", type=int, help="(voxels) overlap between tiles [0]")
    p.add_argument("--preprocessed", action="store_true",
                   help="(switch) inputs are already windowed and resampled")
    _add_preprocess_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="DSC, ASSD and 95HD of predictions against truth labels")
    _add_config(p)
    p.add_argument("--pred-dir", required=True, help="(path) directory of predicted label volumes")
    p.add_argument("--truth-dir", required=True, help="(path) directory of reference label volumes")
    p.add_argument("--out", required=True, help="(path) CSV report; distances in mm")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    _add_config(p)
    p.add_argument("--ops", help="(names) comma list of ops to check [all]")
    p.add_argument("--seed", type=int, help="(integer) seed for the random test problems [0]")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CsaSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
