"""``segtool`` command line.

Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
3 predictor failure, 4 I/O error.

Any option may also come from ``--config FILE``: ``key = value`` lines
whose keys are option names (``patch-size`` or ``patch_size``). Options
given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, apply_augment
from .ensemble import DEFAULT_ZOOM, EnsembleConfig, two_step_ensemble
from .formats import (
    MODALITIES, FormatError, LabelCoding, LabelCodingError, ManifestError, check_manifest, load_case, read_manifest,
    remap_labels, write_manifest, write_nifti, write_raw_tensor,
)
from .losses import LOSS_KINDS, finite_difference_gradient, loss_gradient, loss_value, relative_error, softmax
from .metrics import evaluate_cohort
from .patches import DEFAULT_PATCH_SIZE, ordered_map, sliding_window_predict
from .predictors import (
    ConstantPredictor, EquivariantPredictor, NoisyOraclePredictor, PredictorError, SubprocessPredictor,
)
from .rng import make_generator, split_seed
from .volume import LabelSchema, LabelVolume, ScalarVolume, SchemaError

log = logging.getLogger("segtool")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_PREDICTOR, EXIT_IO = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


def _triple(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) != 3 or any(p <= 0 for p in parts):
        raise ConfigError(f"expected three positive integers, got {text!r}")
    return tuple(parts)


def _tta(text: str) -> tuple[str, ...]:
    items = tuple(t.strip() for t in text.split(",") if t.strip() and t.strip() != "none")
    if set(items) - {"flip", "zoom"}:
        raise ConfigError(f"unknown test-time augmentation in {text!r}; use flip, zoom or none")
    return items


def _jobs_default() -> int:
    return os.cpu_count() or 1


# option name -> (converter, default); defaults live here so that the
# command line, the config file and the built-in value can be layered
OPTIONS = {
    "manifest": (Path, None),
    "output_dir": (Path, None),
    "mode": (str, "two-step"),
    "predictor": (lambda s: [p.strip() for p in s.splitlines() if p.strip()], None),
    "patch_size": (_triple, DEFAULT_PATCH_SIZE),
    "tta": (_tta, ("flip", "zoom")),
    "zoom_ratio": (float, DEFAULT_ZOOM),
    "save_probs": (lambda s: s.strip().lower() in ("1", "true", "yes", "on"), False),
    "workdir": (Path, None),
    "timeout": (float, 300.0),
    "schema": (Path, None),
    "seed": (lambda s: int(s, 0), 0),
    "jobs": (int, None),
    "pred_dir": (Path, None),
    "gt_dir": (Path, None),
    "case": (str, None),
    "aug_config": (Path, None),
    "trials": (int, 20),
    "max_dim": (int, 4),
}


def _opt(parser, *flags, help, **kw):
    dest = kw.pop("dest", flags[0].lstrip("-").replace("-", "_"))
    default = OPTIONS[dest][1]
    shown = "cpu count" if dest == "jobs" else default
    if isinstance(shown, tuple):
        shown = ",".join(str(s) for s in shown) or "none"
    parser.add_argument(*flags, dest=dest, default=None, help=f"{help} (default: {shown})", **kw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segtool", description="Volumetric segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="key = value file supplying defaults for any option")
        _opt(sp, "--seed", type=lambda s: int(s, 0), help="master random seed")
        _opt(sp, "--jobs", type=int, help="parallel workers for cases and patches")
        _opt(sp, "--schema", type=Path, help="label schema JSON; BraTS schema if omitted")

    pr = sub.add_parser("predict", help="segment the cases of a manifest")
    common(pr)
    _opt(pr, "--manifest", type=Path, help="case manifest (INI)")
    _opt(pr, "--output-dir", type=Path, help="where segmentations are written")
    _opt(pr, "--mode", choices=("sliding", "two-step"), help="single-model sliding window or two-step ensemble")
    _opt(pr, "--predictor", action="append",
         help="predictor spec, repeatable: constant:z0,z1,..  equivariant  oracle[:seed=S,noise=N,scale=A]  cmd:COMMAND")
    _opt(pr, "--patch-size", type=_triple, help="patch size as X,Y,Z")
    _opt(pr, "--tta", type=_tta, help="test-time augmentations for the ensemble step: flip,zoom or none")
    _opt(pr, "--zoom-ratio", type=float, help="zoom ratio of the zoom augmentation")
    _opt(pr, "--save-probs", action="store_const", const=True, help="also write <case>_probs.volt")
    _opt(pr, "--workdir", type=Path, help="scratch directory for subprocess predictors (output-dir/_work)")
    _opt(pr, "--timeout", type=float, help="seconds to wait for one subprocess prediction")

    ev = sub.add_parser("evaluate", help="score predicted label maps against ground truth")
    common(ev)
    _opt(ev, "--pred-dir", type=Path, help="directory of predicted <case>.nii.gz")
    _opt(ev, "--gt-dir", type=Path, help="directory of ground-truth <case>.nii.gz")
    _opt(ev, "--output-dir", type=Path, help="where report.json and report.csv go")

    au = sub.add_parser("augment", help="apply the random training augmentations to cases")
    common(au)
    _opt(au, "--manifest", type=Path, help="case manifest (INI)")
    _opt(au, "--case", help="only this case id")
    _opt(au, "--aug-config", type=Path, help="augmentation key = value file")
    _opt(au, "--output-dir", type=Path, help="where augmented volumes go")

    gc = sub.add_parser("gradcheck", help="compare analytic loss gradients with finite differences")
    common(gc)
    _opt(gc, "--trials", type=int, help="random volumes per loss")
    _opt(gc, "--max-dim", type=int, help="largest side length of the random volumes")
    return p


def _read_config(path: Path) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string("[segtool]\n" + path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except configparser.Error as e:
        raise ConfigError(f"malformed config {path}: {e}") from e
    out = {}
    for key, raw in parser["segtool"].items():
        dest = key.replace("-", "_")
        if dest not in OPTIONS:
            raise ConfigError(f"{path}: unknown option {key!r}")
        conv = OPTIONS[dest][0]
        try:
            value = conv(raw)
        except ValueError as e:
            raise ConfigError(f"{path}: bad value for {key}: {e}") from e
        if isinstance(value, Path) and not value.is_absolute():
            value = path.parent / value
        out[dest] = value
    return out


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Layer command line over config file over built-in defaults."""
    conf = _read_config(args.config) if getattr(args, "config", None) else {}
    for dest, (_, default) in OPTIONS.items():
        if not hasattr(args, dest):
            continue
        if getattr(args, dest) is None:
            setattr(args, dest, conf.get(dest, default))
    if getattr(args, "jobs", 1) is None:
        args.jobs = _jobs_default()
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    return args


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise ConfigError(f"--{n.replace('_', '-')} is required")


def _schema(args) -> LabelSchema:
    if args.schema is None:
        return LabelSchema.brats()
    try:
        return LabelSchema.from_dict(json.loads(Path(args.schema).read_text(encoding="utf-8")))
    except OSError as e:
        raise ConfigError(f"cannot read schema {args.schema}: {e}") from e
    except (ValueError, KeyError) as e:
        raise ConfigError(f"invalid schema {args.schema}: {e}") from e


def parse_predictor(spec: str, index: int, args, gt: LabelVolume | None, schema: LabelSchema):
    kind, _, rest = spec.partition(":")
    kind = kind.strip()
    if kind == "constant":
        try:
            logits = [float(v) for v in rest.split(",")]
        except ValueError as e:
            raise ConfigError(f"bad constant predictor {spec!r}") from e
        if len(logits) != schema.num_classes:
            raise ConfigError(f"constant predictor needs {schema.num_classes} logits, got {len(logits)}")
        return ConstantPredictor(logits, name=f"constant-{index}")
    if kind == "equivariant":
        if schema.num_classes != 4:
            raise ConfigError("the equivariant phantom predictor assumes 4 classes")
        return EquivariantPredictor(name=f"equivariant-{index}")
    if kind == "oracle":
        params = {"seed": split_seed(args.seed, index), "noise": 1.0, "scale": 4.0}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            k, _, v = item.partition("=")
            if k not in params:
                raise ConfigError(f"unknown oracle parameter {k!r} in {spec!r}")
            params[k] = int(v, 0) if k == "seed" else float(v)
        if gt is None:
            raise ConfigError("oracle predictors need a 'seg' entry in the manifest")
        return NoisyOraclePredictor(gt, schema.num_classes, params["noise"], params["seed"], params["scale"],
                                    schema.background, name=f"oracle-{index}")
    if kind == "cmd":
        if not rest.strip():
            raise ConfigError("cmd predictor needs a command line")
        workdir = (args.workdir or args.output_dir / "_work") / f"predictor_{index}"
        return SubprocessPredictor(rest, workdir, args.timeout, name=f"cmd-{index}")
    raise ConfigError(f"unknown predictor kind {kind!r} in {spec!r}")


def cmd_predict(args) -> int:
    _require(args, "manifest", "output_dir")
    if not args.predictor:
        raise ConfigError("at least one --predictor is required")
    schema = _schema(args)
    cases = read_manifest(args.manifest)
    for case in cases:
        check_manifest(case)
    args.output_dir.mkdir(parents=True, exist_ok=True)
    coding = LabelCoding()
    for case in cases:
        image, gt = load_case(case, coding)
        predictors = [parse_predictor(s, i, args, gt, schema) for i, s in enumerate(args.predictor)]
        try:
            if args.mode == "sliding":
                probs = sliding_window_predict(predictors[0], image, schema, flip_tta="flip" in args.tta,
                                               patch_size=args.patch_size, jobs=args.jobs)
                labels = LabelVolume(np.argmax(probs.data, axis=0).astype(np.uint8), image.spacing)
            else:
                cfg = EnsembleConfig(predictors, args.patch_size, args.tta, args.zoom_ratio, schema, args.jobs)
                result = two_step_ensemble(image, cfg)
                probs, labels = result.probabilities, result.labels
                log.info("%s: patch origin %s (center %s%s)", case.case_id, result.patch.origin, result.center,
                         ", fallback" if result.used_fallback else "")
        finally:
            for p in predictors:
                p.close()
        write_nifti(remap_labels(labels, coding, "to_disk"), args.output_dir / f"{case.case_id}.nii.gz", np.uint8)
        if args.save_probs:
            write_raw_tensor(probs, args.output_dir / f"{case.case_id}_probs.volt")
        log.info("%s: done", case.case_id)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require(args, "pred_dir", "gt_dir")
    report = evaluate_cohort(args.pred_dir, args.gt_dir, _schema(args))
    if args.output_dir is not None:
        args.output_dir.mkdir(parents=True, exist_ok=True)
        (args.output_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
        (args.output_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.table())
    return EXIT_OK


def cmd_augment(args) -> int:
    _require(args, "manifest", "output_dir")
    cfg = AugmentConfig()
    if args.aug_config is not None:
        try:
            cfg = AugmentConfig.from_text(Path(args.aug_config).read_text(encoding="utf-8"))
        except ValueError as e:
            raise ConfigError(f"{args.aug_config}: {e}") from e
    cases = read_manifest(args.manifest)
    if args.case is not None:
        cases = [c for c in cases if c.case_id == args.case]
        if not cases:
            raise ConfigError(f"case {args.case!r} not in {args.manifest}")
    for case in cases:
        check_manifest(case)
    args.output_dir.mkdir(parents=True, exist_ok=True)
    coding = LabelCoding()
    all_ids = [c.case_id for c in read_manifest(args.manifest)]

    def run(case):
        seed = split_seed(args.seed, all_ids.index(case.case_id))
        image, gt = load_case(case, coding)
        img, lab, record = apply_augment(image, gt, cfg, seed)
        out = {}
        for m, ch in zip(MODALITIES, img.data):
            out[m] = args.output_dir / f"{case.case_id}_{m}.nii.gz"
            write_nifti(ScalarVolume(ch, img.spacing), out[m], np.float32)
        seg = None
        if lab is not None:
            seg = args.output_dir / f"{case.case_id}_seg.nii.gz"
            write_nifti(remap_labels(lab, coding, "to_disk"), seg, np.uint8)
        (args.output_dir / f"{case.case_id}_augment.txt").write_text(record.to_text(), encoding="utf-8")
        return type(case)(case.case_id, seg=seg, **out)

    written = list(ordered_map(run, cases, args.jobs))
    write_manifest(written, args.output_dir / "manifest.ini")
    return EXIT_OK


def gradcheck_report(seed: int, trials: int = 20, max_dim: int = 4) -> tuple[list[str], bool]:
    """Finite-difference check of every loss kind; returns printable lines and overall success."""
    schema = LabelSchema.brats()
    gen = make_generator(seed)
    worst = {(k, s): 0.0 for k in LOSS_KINDS for s in ("prob", "logit")}
    for _ in range(trials):
        dims = tuple(int(d) for d in gen.integers(1, max_dim + 1, 3))
        labels = gen.integers(0, schema.num_classes, dims)
        gt = (labels[None] == np.arange(schema.num_classes)[:, None, None, None]).astype(np.float64)
        # logits in [-0.8, 0.8] keep probabilities inside [0.05, 0.95]
        z = gen.uniform(-0.8, 0.8, (schema.num_classes,) + dims)
        p = softmax(z)
        for kind in LOSS_KINDS:
            a = loss_gradient(kind, p, gt, schema)
            n = finite_difference_gradient(lambda q: loss_value(kind, q, gt, schema), p, 1e-4)
            worst[kind, "prob"] = max(worst[kind, "prob"], relative_error(a, n))
            a = loss_gradient(kind, z, gt, schema, through_softmax=True)
            n = finite_difference_gradient(lambda q: loss_value(kind, softmax(q), gt, schema), z, 1e-3)
            worst[kind, "logit"] = max(worst[kind, "logit"], relative_error(a, n))
    lines, ok = [], True
    for (kind, space), err in worst.items():
        passed = err < 1e-4
        ok &= passed
        lines.append(f"{kind:<8} {space:<6} max_rel_err={err:.3e} {'PASS' if passed else 'FAIL'}")
    return lines, ok


def cmd_gradcheck(args) -> int:
    lines, ok = gradcheck_report(args.seed, args.trials, args.max_dim)
    print("\n".join(lines))
    print("gradcheck:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_GRADCHECK


COMMANDS = {"predict": cmd_predict, "evaluate": cmd_evaluate, "augment": cmd_augment, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        resolve(args)
        return COMMANDS[args.command](args)
    except LabelCodingError as e:
        print(f"segtool: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ManifestError, SchemaError) as e:
        print(f"segtool: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PredictorError as e:
        print(f"segtool: {e}", file=sys.stderr)
        return EXIT_PREDICTOR
    except (OSError, FormatError) as e:
        print(f"segtool: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"segtool: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
