"""``connseg`` command line: data generation, codec, training, prediction, evaluation, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import FormatError, load_weights
from .codec import ConnectivityCube, decode, encode
from .config import RunConfig, load_config, save_config, worker_count
from .data import (
    DataError,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_image,
    load_mask,
    load_saliency,
    read_cube,
    read_manifest,
    save_mask,
    save_saliency,
    write_cube,
)
from .grid import Pattern
from .metrics import evaluate_dataset, threshold_grid
from .model import ConnNetMini, ModelError, PredictorConfig
from .train import DivergenceError, train
from .tta import FusionPlan, fused_prediction, model_predict_fn

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
GRADCHECK_LIMIT = 1e-5
# widths small enough for an exhaustive check in a couple of minutes
GRADCHECK_MODEL = dict(widths=(4, 8, 8, 8), fusion_width=8, reduce_width=8)

log = logging.getLogger("connseg")


class UsageError(Exception):
    pass


class VerificationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}") from None


def _run_config(path) -> RunConfig:
    try:
        return load_config(path)
    except OSError as e:
        raise DataError(str(e)) from None
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None


# gen-data ------------------------------------------------------------------------

def cmd_gen_data(args):
    d = _read_json(args.spec) if args.spec else {}
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        spec = SyntheticSpec.from_dict(d)
    except (TypeError, ValueError) as e:
        raise DataError(f"bad synthetic spec: {e}") from None
    records = generate_synthetic(spec, args.out)
    log.info("wrote %d images and %s", len(records), Path(args.out) / "manifest.csv")


# encode / decode -----------------------------------------------------------------

def cmd_encode(args):
    write_cube(args.out, encode(load_mask(args.mask), Pattern.parse(args.pattern)))


def cmd_decode(args):
    if not 0 < args.t < 1:
        raise UsageError(f"--t must lie in (0, 1), got {args.t}")
    cube = read_cube(args.cube)
    if not 1 <= args.k <= cube.pattern.channels:
        raise UsageError(f"--k must lie in [1, {cube.pattern.channels}] for {cube.pattern.name}")
    save_mask(args.out, decode(cube, args.t, args.k))


# train ---------------------------------------------------------------------------

def cmd_train(args):
    cfg = _run_config(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in ("epochs", "max_steps", "batch_size",
                                               "freeze_backbone_steps") if getattr(args, k) is not None}
    if args.seed is not None:
        cfg.seed = args.seed
    for k, v in overrides.items():
        setattr(cfg.train, k, v)
    try:
        cfg = RunConfig.from_dict(cfg.to_dict())
    except ValueError as e:
        raise UsageError(str(e)) from None
    records = read_manifest(args.data)
    if args.val:
        val_records = read_manifest(args.val)
    else:
        n_val = int(round(len(records) * args.val_fraction))
        if n_val >= len(records):
            raise UsageError("--val-fraction leaves no training images")
        val_records, records = records[len(records) - n_val:], records[:len(records) - n_val]
    images, masks = load_dataset(records)
    val_images, val_masks = load_dataset(val_records) if val_records else (None, None)
    for img, m in zip(images, masks):
        if min(m.shape) < cfg.train.train_size and not cfg.train.augment:
            raise DataError(f"image {m.shape} smaller than the training size {cfg.train.train_size}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "run_config.json", cfg)
    result = train(images, masks, cfg.train, out, val_images, val_masks, log=log.info)
    summary = {"steps": len(result.losses), "final_loss": result.losses[-1],
               "best_val_maxF": result.best_val_maxF, "seconds": round(result.seconds, 1)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("done: %s", summary)


# predict -------------------------------------------------------------------------

def _model_config(args) -> RunConfig:
    if args.config:
        return _run_config(args.config)
    here = Path(args.checkpoint).parent / "run_config.json"
    if here.is_file():
        return _run_config(here)
    return RunConfig()


def cmd_predict(args):
    cfg = _model_config(args)
    plan = cfg.fusion
    if args.fusion:
        try:
            plan = FusionPlan.from_dict(_read_json(args.fusion))
        except (TypeError, ValueError) as e:
            raise DataError(f"{args.fusion}: {e}") from None
    model = ConnNetMini(cfg.model, load_weights(args.checkpoint))
    image_path, out = Path(args.image), Path(args.out)
    if image_path.is_dir():
        sources = sorted(image_path.glob("*.png"))
        if not sources:
            raise DataError(f"no PNG images in {image_path}")
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / p.name for p in sources]
    else:
        sources, targets = [image_path], [out]
    fn = model_predict_fn(model)
    for src, dst in zip(sources, targets):
        fused = fused_prediction(load_image(src), fn, plan)
        if isinstance(fused, ConnectivityCube):
            save_mask(dst, decode(fused, plan.t, plan.k))
            if args.save_cube:
                write_cube(dst.with_suffix(".ccub"), ConnectivityCube(fused.values.astype(np.float32),
                                                                     fused.pattern))
        else:
            save_mask(dst, fused > plan.t)
            if args.save_cube:
                save_saliency(dst.with_name(dst.stem + "_saliency.png"), fused)
    log.info("wrote %d prediction(s)", len(sources))


# eval ----------------------------------------------------------------------------

def _prediction_for(pred_dir: Path, stem: str):
    """A soft ``.ccub`` cube if present, else a ``_saliency.png`` map, else a mask PNG."""
    cube = pred_dir / f"{stem}.ccub"
    if cube.is_file():
        return read_cube(cube)
    for name in (f"{stem}_saliency.png", f"{stem}.png"):
        p = pred_dir / name
        if p.is_file():
            return load_saliency(p)
    raise DataError(f"no prediction for {stem} in {pred_dir}")


def cmd_eval(args):
    cfg = _run_config(args.config) if args.config else RunConfig()
    steps = args.grid_steps or cfg.metrics.grid_steps
    k = args.k or cfg.metrics.k
    records = read_manifest(args.gt_manifest)
    pred_dir = Path(args.pred_dir)
    if not pred_dir.is_dir():
        raise DataError(f"prediction directory {pred_dir} does not exist")
    names = [r.mask.stem for r in records]

    def load(i):
        r = records[i]
        gt = load_mask(r.mask)
        pred = _prediction_for(pred_dir, names[i])
        shape = pred.shape[:2] if isinstance(pred, ConnectivityCube) else pred.shape
        if tuple(shape) != gt.shape:
            raise DataError(f"{names[i]}: prediction {tuple(shape)} vs ground truth {gt.shape}")
        if isinstance(pred, ConnectivityCube) and not 1 <= k <= pred.pattern.channels:
            raise UsageError(f"--k must lie in [1, {pred.pattern.channels}]")
        return pred, gt

    with ThreadPoolExecutor(worker_count()) as pool:
        pairs = list(pool.map(load, range(len(records))))
    report = evaluate_dataset([p for p, _ in pairs], [g for _, g in pairs], threshold_grid(steps),
                              cfg.metrics.beta2, k, names)
    report = {"dataset": str(args.gt_manifest), "beta2": cfg.metrics.beta2, "grid_steps": steps,
              "k": k, **report}
    Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
    if args.pr_csv:
        with open(args.pr_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "precision", "recall", "f_beta"])
            for pt in report["per_threshold"]:
                w.writerow([f"{pt['threshold']:.6f}", f"{pt['precision']:.6f}",
                            f"{pt['recall']:.6f}", f"{pt['f_beta']:.6f}"])
    log.info("maxF %.4f at t=%.4f over %d images", report["maxF"], report["best_t"], report["count"])


# gradcheck -----------------------------------------------------------------------

def cmd_gradcheck(args):
    from .gradcheck import check_network, check_ops

    seed = args.seed if args.seed is not None else 0
    if args.config:
        base = _run_config(args.config).model
        models = [(f"network (use_nonlocal={base.use_nonlocal})", base)]
    else:
        models = [(f"network (use_nonlocal={nl})",
                   PredictorConfig(use_nonlocal=nl, **GRADCHECK_MODEL)) for nl in (True, False)]
    rows = []
    for name, rep in check_ops(seed=seed).items():
        rows.append((f"op {name}", rep.max_rel_error, rep.max_rel_error_elementwise, ""))
    for name, model_cfg in models:
        rep, used = check_network(model_cfg, seed=seed, sample=args.sample)
        rows.append((name, rep.max_rel_error, rep.max_rel_error_elementwise,
                     f"seed {used}, {rep.checked_entries} entries"))
    worst = max(r[1] for r in rows)
    width = max(len(r[0]) for r in rows)
    print(f"{'case':<{width}}  rel_error  max_entry_ratio  note")
    for name, err, elem, note in rows:
        flag = "" if err < GRADCHECK_LIMIT else "  FAIL"
        print(f"{name:<{width}}  {err:9.2e}  {elem:15.2e}  {note}{flag}")
    print(f"max relative error {worst:.3e} (limit {GRADCHECK_LIMIT:.0e})")
    if worst >= GRADCHECK_LIMIT:
        raise VerificationError(f"relative error {worst:.3e} >= {GRADCHECK_LIMIT:.0e}")


# entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="connseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset and its manifest")
    g.add_argument("--spec", help="JSON synthetic spec (defaults apply when omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    e = sub.add_parser("encode", help="mask PNG -> CCUB connectivity cube")
    e.add_argument("--mask", required=True)
    e.add_argument("--pattern", required=True, type=str.lower, choices=["n4", "n8", "n12"])
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="CCUB cube -> mask PNG")
    d.add_argument("--cube", required=True)
    d.add_argument("--t", type=float, default=0.5)
    d.add_argument("--k", type=int, default=1)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decode)

    t = sub.add_parser("train", help="train ConnNet-mini on a manifest")
    t.add_argument("--config", help="RunConfig JSON")
    t.add_argument("--data", required=True, help="training manifest CSV")
    t.add_argument("--val", help="validation manifest (default: hold out --val-fraction)")
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--freeze-backbone-steps", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="fused prediction for an image (or a directory of images)")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--fusion", help="FusionPlan JSON (default: the run config's plan)")
    r.add_argument("--config", help="RunConfig JSON (default: run_config.json beside the checkpoint)")
    r.add_argument("--out", required=True)
    r.add_argument("--save-cube", action="store_true", help="also write the fused soft prediction")
    r.set_defaults(func=cmd_predict)

    v = sub.add_parser("eval", help="max-F report for a prediction directory")
    v.add_argument("--pred-dir", required=True)
    v.add_argument("--gt-manifest", required=True)
    v.add_argument("--report", required=True)
    v.add_argument("--pr-csv")
    v.add_argument("--grid-steps", type=int)
    v.add_argument("--k", type=int)
    v.add_argument("--config")
    v.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and the network")
    c.add_argument("--config", help="check this RunConfig's model instead of the small default")
    c.add_argument("--seed", type=int)
    c.add_argument("--sample", type=int, help="entries differenced per tensor (default: all)")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        worker_count()
        for name in ("grid_steps", "k", "sample", "epochs", "max_steps", "batch_size"):
            if getattr(args, name, None) is not None and getattr(args, name) < 1:
                raise UsageError(f"--{name.replace('_', '-')} must be >= 1")
        args.func(args)
    except UsageError as e:
        print(f"connseg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationError as e:
        print(f"connseg: verification failed: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except (DataError, FormatError, ModelError, DivergenceError, OSError) as e:
        print(f"connseg: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        # worker_count and config validation report bad settings as ValueError
        print(f"connseg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
