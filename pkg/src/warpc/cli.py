"""Command-line interface.

Exit codes: 0 on success, 1 on a usage error, 2 on a data error (missing
file, malformed input, invalid configuration).
"""

import argparse
import json
import os
import sys

import numpy as np

from . import io, losses, metrics, toytrain, warpgen
from .flowcore import FieldError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

LOSS_ALIASES = {
    "photometric": "photometric",
    "forward-backward": "forward_backward",
    "fb": "forward_backward",
    "warp-sup": "warp_supervision",
    "warp-supervision": "warp_supervision",
    "ipj-bipath": "ipj_bipath",
    "ji-bipath": "ji_bipath",
    "w-bipath": "w_bipath",
    "w-bipath-vis": "w_bipath_visibility",
    "cycle-i": "cycle_i",
    "cycle-ip": "cycle_ip",
    "cycle-j": "cycle_j",
    "warpc": "warpc",
}

_FLOW_FLAGS = {"F_ij": "f_ij", "F_ji": "f_ji", "F_ipj": "f_ipj", "F_jip": "f_jip",
               "F_ipi": "f_ipi", "W": "w"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{what}: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{what}: {path} is not valid JSON ({exc})") from None


def _write_json(path, payload):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _read_flow(path, flag):
    if not os.path.exists(path):
        raise DataError(f"--{flag}: file not found: {path}")
    try:
        return io.read_flo(path).astype(np.float64)
    except io.FormatError as exc:
        raise DataError(f"--{flag}: {exc}") from None


def _read_image(path, flag):
    if not os.path.exists(path):
        raise DataError(f"--{flag}: file not found: {path}")
    try:
        return io.read_png(path)
    except io.FormatError as exc:
        raise DataError(f"--{flag}: {exc}") from None


def _warp_config(path, seed):
    cfg = warpgen.WarpDistributionConfig() if path is None else None
    if path is not None:
        data = _load_json(path, "--config")
        try:
            cfg = warpgen.WarpDistributionConfig.from_dict(data)
        except (warpgen.ConfigError, ValueError, TypeError) as exc:
            raise DataError(f"--config {path}: {exc}") from None
    seed = seed if seed is not None else cfg.seed
    if seed is None:
        raise UsageError("a seed is required: pass --seed or set \"seed\" in the config")
    return cfg, seed


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_warp(args):
    cfg, seed = _warp_config(args.config, args.seed)
    W = warpgen.sample_warp(cfg, args.height, args.width, np.random.default_rng(seed))
    io.write_flo(args.out, W)
    if args.preview:
        io.write_png(args.preview, io.flow_preview(W))
    return EXIT_OK


def cmd_make_triplet(args):
    cfg, seed = _warp_config(args.config, args.seed)
    I = _read_image(args.image_i, "image-i")
    J = _read_image(args.image_j, "image-j")
    if I.shape != J.shape:
        raise DataError(f"--image-i and --image-j differ in shape: {I.shape} vs {J.shape}")
    try:
        trip = warpgen.build_triplet(I, J, cfg, args.resize, args.crop,
                                     np.random.default_rng(seed), jitter=not args.no_jitter)
    except FieldError as exc:
        raise DataError(str(exc)) from None
    os.makedirs(args.out_dir, exist_ok=True)
    io.write_png(os.path.join(args.out_dir, "I.png"), trip.I)
    io.write_png(os.path.join(args.out_dir, "I_prime.png"), trip.I_prime)
    io.write_png(os.path.join(args.out_dir, "J.png"), trip.J)
    io.write_flo(os.path.join(args.out_dir, "W.flo"), trip.W)
    io.write_mask_png(os.path.join(args.out_dir, "valid.png"), trip.valid)
    _write_json(os.path.join(args.out_dir, "triplet.json"),
                {"seed": seed, "resize": args.resize, "crop": args.crop,
                 "jitter": not args.no_jitter, "config": cfg.to_dict()})
    return EXIT_OK


def cmd_eval_loss(args):
    loss_id = LOSS_ALIASES[args.loss]
    cfg = losses.LossConfig()
    if args.config:
        try:
            cfg = losses.LossConfig.from_dict(_load_json(args.config, "--config"))
        except (ValueError, TypeError) as exc:
            raise DataError(f"--config {args.config}: {exc}") from None
    inputs = {}
    for name in losses.loss_inputs(loss_id):
        if name in ("I", "J"):
            flag = "image-" + name.lower()
            path = getattr(args, "image_" + name.lower())
            if path is None:
                raise UsageError(f"--loss {args.loss} needs --{flag}")
            inputs[name] = _read_image(path, flag)
        else:
            attr = _FLOW_FLAGS[name]
            path = getattr(args, attr)
            flag = attr.replace("_", "-")
            if path is None:
                raise UsageError(f"--loss {args.loss} needs --{flag}")
            inputs[name] = _read_flow(path, flag)
    try:
        result = losses.loss_gradient(loss_id, inputs, cfg)
    except FieldError as exc:
        raise DataError(str(exc)) from None
    report = {"loss": loss_id, "value": result.loss.value, "count": result.loss.count,
              "config": cfg.to_dict()}
    if "lambda" in result.loss.parts:
        report["lambda"] = result.loss.parts["lambda"]
        report["parts"] = {k: v for k, v in result.loss.parts.items() if k != "lambda"}
    if args.dump_residual and result.loss.residual.shape[-1] == 2:
        io.write_flo(args.dump_residual, result.loss.residual)
    if args.dump_grad_dir:
        os.makedirs(args.dump_grad_dir, exist_ok=True)
        for name, g in result.grads.items():
            io.write_flo(os.path.join(args.dump_grad_dir, f"grad_{name}.flo"), g)
    _write_json(args.out, report)
    return EXIT_OK


def cmd_experiment(args):
    data = _load_json(args.config, "--config")
    if args.seed is not None:
        data = dict(data, seed=args.seed)
    try:
        config = toytrain.ExperimentConfig.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise DataError(f"--config {args.config}: {exc}") from None
    table = toytrain.compare_objectives(config)
    text = table.to_text()
    print(text)
    if args.table:
        with open(args.table, "w") as fh:
            fh.write(text + "\n")
    if args.out:
        table.to_json(args.out)
    if args.dump_dir:
        _dump_queries(table, config, args.dump_dir)
    return EXIT_OK


def _dump_queries(table, config, out_dir):
    from .flowcore import warp

    os.makedirs(out_dir, exist_ok=True)
    scenes = {s: toytrain.make_scene(s, config.height, config.width, config.strength)
              for s in config.scene_seeds}
    for name, report in table.reports.items():
        for run in report.runs:
            scene = scenes[run.seed]
            source = scene.I if toytrain.evaluation_direction(name) == "ji" else scene.J
            warped, _ = warp(source, run.flow)
            io.write_png(os.path.join(out_dir, f"{name}_scene{run.seed}.png"), warped)


def cmd_metrics(args):
    thresholds = args.thresholds
    if args.keypoints:
        if not os.path.exists(args.keypoints):
            raise DataError(f"--keypoints: file not found: {args.keypoints}")
        try:
            src, tgt = io.read_keypoints_csv(args.keypoints)
        except io.FormatError as exc:
            raise DataError(f"--keypoints: {exc}") from None
        try:
            if args.pred:
                report = metrics.pck_dense(_read_flow(args.pred, "pred"), src, tgt, thresholds)
            elif args.pred_keypoints:
                _, pred_tgt = io.read_keypoints_csv(args.pred_keypoints)
                report = metrics.pck(pred_tgt, tgt, thresholds)
            else:
                raise UsageError("--keypoints needs --pred (dense flow) or --pred-keypoints")
        except (metrics.EmptyInputError, FieldError) as exc:
            raise DataError(str(exc)) from None
    else:
        if not (args.pred and args.gt):
            raise UsageError("metrics needs --pred and --gt flows, or --keypoints")
        pred = _read_flow(args.pred, "pred")
        gt = _read_flow(args.gt, "gt")
        valid = None
        if args.valid:
            if not os.path.exists(args.valid):
                raise DataError(f"--valid: file not found: {args.valid}")
            valid = io.read_mask_png(args.valid)
        try:
            report = metrics.flow_report(pred, gt, valid, thresholds)
        except (metrics.EmptyInputError, FieldError) as exc:
            raise DataError(str(exc)) from None
    _write_json(args.out, report.to_dict())
    return EXIT_OK


def cmd_bias_check(args):
    cfg = losses.LossConfig()
    if args.config:
        try:
            cfg = losses.LossConfig.from_dict(_load_json(args.config, "--config"))
        except (ValueError, TypeError) as exc:
            raise DataError(f"--config {args.config}: {exc}") from None
    F_jip = _read_flow(args.f_jip, "f-jip")
    F_ji = _read_flow(args.f_ji, "f-ji")
    W = _read_flow(args.w, "w")
    try:
        measured, bound = losses.ji_bias_bound_check(F_jip, F_ji, W, args.bias, cfg)
    except FieldError as exc:
        raise DataError(str(exc)) from None
    _write_json(args.out, {"bias": list(args.bias), "measured": measured, "bound": bound,
                           "within_bound": bool(measured <= 1.1 * bound)})
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="warpc", description="Synthetic warps, consistency losses and metrics.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-warp", help="sample a synthetic warp W as a .flo file")
    p.add_argument("--config", help="warp distribution JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--height", type=int, default=520)
    p.add_argument("--width", type=int, default=520)
    p.add_argument("--out", required=True)
    p.add_argument("--preview", help="optional colour-coded PNG")
    p.set_defaults(func=cmd_gen_warp)

    p = sub.add_parser("make-triplet", help="build (I, I', J) from an image pair")
    p.add_argument("--image-i", required=True)
    p.add_argument("--image-j", required=True)
    p.add_argument("--config", help="warp distribution JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--resize", type=int, default=750)
    p.add_argument("--crop", type=int, default=520)
    p.add_argument("--no-jitter", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_make_triplet)

    p = sub.add_parser("eval-loss", help="evaluate a loss on stored flows")
    p.add_argument("--loss", required=True, choices=sorted(LOSS_ALIASES))
    for flag in ("f-ij", "f-ji", "f-ipj", "f-jip", "f-ipi", "w"):
        p.add_argument("--" + flag)
    p.add_argument("--image-i")
    p.add_argument("--image-j")
    p.add_argument("--config", help="loss configuration JSON")
    p.add_argument("--out", help="report path (stdout if omitted)")
    p.add_argument("--dump-residual")
    p.add_argument("--dump-grad-dir")
    p.set_defaults(func=cmd_eval_loss)

    p = sub.add_parser("experiment", help="compare training objectives on toy scenes")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="JSON report")
    p.add_argument("--table", help="plain-text table")
    p.add_argument("--dump-dir", help="PNGs of queries warped by each prediction")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("metrics", help="AEPE / PCK")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--valid", help="mask PNG")
    p.add_argument("--keypoints", help="CSV of x,y,x',y' ground-truth correspondences")
    p.add_argument("--pred-keypoints", help="CSV of predicted correspondences")
    p.add_argument("--thresholds", type=float, nargs="*", default=[1.0, 3.0, 5.0])
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("bias-check", help="JI-bipath bias sensitivity vs its bound")
    p.add_argument("--f-jip", required=True)
    p.add_argument("--f-ji", required=True)
    p.add_argument("--w", required=True)
    p.add_argument("--bias", type=float, nargs=2, default=[2.0, 2.0])
    p.add_argument("--config", help="loss configuration JSON")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bias_check)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
