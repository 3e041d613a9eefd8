"""Command-line entry point: ``spectrasweep <subcommand> [--config FILE] ...``.

Exit status is 0 on success, 2 for configuration or usage errors and 3 when a
processing stage fails. Every successful run writes a manifest JSON next to its
main output (``<out>.manifest.json``; ``manifest.json`` inside the pipeline
directory).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("spectrasweep")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 as well; keep the message on stderr
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _manifest_path(out) -> Path:
    return Path(f"{out}.manifest.json")


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _require(path, what: str) -> None:
    if not os.path.isfile(path):
        raise UsageError(f"{what} {os.fspath(path)!r} does not exist")


# ---------------------------------------------------------------------------
# subcommands; each returns (inputs, outputs, extra manifest fields)


def cmd_synth(args, cfg):
    from .core import write_cube
    from .pipeline import scene_for, stage
    with stage("synth"):
        write_cube(scene_for(cfg), args.out)
    return [], [args.out], {}


def cmd_simulate(args, cfg):
    from .core import read_cube, write_stack
    from .forward import simulate_stack
    from .pipeline import stage
    _require(args.input, "input cube")
    with stage("simulate"):
        cube = read_cube(args.input)
        stack = simulate_stack(cube, cfg.lens, cfg.geometry, cfg.schedule(cube.bands), noise=cfg.noise,
                               emit_unaligned=cfg.magnify, psf=cfg.solver.psf)
        write_stack(stack, args.out)
    return [args.input], [args.out], {}


def cmd_preprocess(args, cfg):
    from .core import read_stack, write_stack, write_tensor
    from .pipeline import stage
    from .preprocess import align_stack, preprocess_pipeline
    _require(args.input, "input stack")
    outputs = [args.out]
    extra = {}
    with stage("preprocess"):
        stack = read_stack(args.input)
        if cfg.align:
            stack, transforms, err = align_stack(stack)
            extra["alignment"] = {"reprojection_rms_px": float(err),
                                  "scale": [float(T.scale()) for T in transforms]}
            if args.aligned_out:
                write_stack(stack, args.aligned_out)
                outputs.append(args.aligned_out)
        write_tensor(preprocess_pipeline(stack, align=False, signed_gradients=args.signed,
                                         raw_frames=args.raw or cfg.raw_frames), args.out)
    return [args.input], outputs, extra


def cmd_register(args, cfg):
    from .core import read_cube, read_stack, write_cube
    from .pipeline import stage
    from .registration import register_label
    _require(args.input, "input cube")
    _require(args.reference, "reference stack")
    with stage("register"):
        cube = read_cube(args.input)
        ref = read_stack(args.reference)
        k = len(ref) // 2 if args.frame is None else args.frame
        if not 0 <= k < len(ref):
            raise ValueError(f"frame {k} outside the {len(ref)}-frame stack")
        warped, _, diag = register_label(cube, ref.frames[k])
        write_cube(warped, args.out)
    return [args.input, args.reference], [args.out], {"registration": diag}


def cmd_reconstruct(args, cfg):
    from .core import BandGrid, read_stack, read_tensor, write_cube
    from .pipeline import stage
    from .reconstruct import load_params, predict, variational_reconstruct
    _require(args.input, "input")
    bands = cfg.bands
    if args.method == "variational":
        with stage("reconstruct"):
            stack = read_stack(args.input)
            res = variational_reconstruct(stack, cfg.lens, cfg.geometry, cfg.schedule(bands), bands,
                                          config=cfg.solver)
            write_cube(res.cube, args.out)
        extra = {"iterations": res.iterations, "objective": res.objective[-1], "converged": res.converged}
        return [args.input], [args.out], extra
    ckpt = args.checkpoint or cfg.checkpoint
    if not ckpt:
        raise UsageError("--method net needs --checkpoint (or 'checkpoint' in the config)")
    _require(ckpt, "checkpoint")
    with stage("reconstruct"):
        x, _ = read_tensor(args.input)
        params = load_params(ckpt)
        grid = bands if len(bands) == params.config.c_out else BandGrid.uniform(params.config.c_out)
        write_cube(predict(params, x, grid), args.out)
    return [args.input, ckpt], [args.out], {}


def cmd_train(args, cfg):
    from .core import read_cube, read_tensor
    from .pipeline import stage
    from .reconstruct import NetConfig, save_params, train
    from .reconstruct.train import AugmentConfig
    if len(args.inputs) != len(args.targets):
        raise UsageError(f"{len(args.inputs)} --input files but {len(args.targets)} --target files")
    for p in args.inputs + args.targets:
        _require(p, "training file")
    with stage("train"):
        data = [(read_tensor(i)[0], read_cube(t).data) for i, t in zip(args.inputs, args.targets)]
        c_in, c_out = data[0][0].shape[0], data[0][1].shape[0]
        net = NetConfig(c_in, c_out, cfg.net.base_width, cfg.net.depth, cfg.net.seed)
        t = cfg.train
        aug = AugmentConfig.all_on(seed=t.seed) if args.augment else None
        params, curve = train(data, net, t.weights, t.epochs, t.lr, t.seed, aug,
                              lr_final=t.lr_final, restart_every=t.restart_every)
        save_params(params, args.out)
    return args.inputs + args.targets, [args.out], {"loss_curve": curve}


def cmd_eval(args, cfg):
    from .core import read_cube
    from .losses import evaluate
    from .pipeline import stage
    if len(args.pred) != len(args.truth):
        raise UsageError(f"{len(args.pred)} --pred files but {len(args.truth)} --truth files")
    for p in args.pred + args.truth:
        _require(p, "cube")
    with stage("eval"):
        report = evaluate([read_cube(p) for p in args.pred], [read_cube(t) for t in args.truth])
        Path(args.out).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    print(report.table())
    return args.pred + args.truth, [args.out], {}


def cmd_plot(args, cfg):
    from .core import read_cube
    from .pipeline import plot_signature, stage
    _require(args.pred, "prediction cube")
    _require(args.truth, "truth cube")
    pred, truth = read_cube(args.pred), read_cube(args.truth)
    x, y = args.pixel
    H, W = truth.data.shape[1:]
    if not (0 <= x < W and 0 <= y < H):
        raise UsageError(f"pixel ({x}, {y}) outside the {W}x{H} image")
    with stage("plot"):
        csv_path, svg_path = plot_signature(pred, truth, (x, y), args.out)
    return [args.pred, args.truth], [csv_path, svg_path], {}


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="spectrasweep", description="Focal-sweep multispectral imaging pipeline.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, out_help="output file"):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="run configuration JSON (toy defaults when omitted)")
        p.add_argument("--out", required=True, help=out_help)
        return p

    add("synth", "generate a synthetic scene cube")
    p = add("simulate", "render the focal-sweep stack of a cube")
    p.add_argument("--in", dest="input", required=True)
    p = add("preprocess", "align a stack and build the model input tensor")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--signed", action="store_true", help="difference Gx and Gy instead of edge magnitude")
    p.add_argument("--raw", action="store_true", help="output the aligned frames, skipping edges and differencing")
    p.add_argument("--aligned-out", help="also write the aligned stack here")
    p = add("register", "warp a reference cube into a camera frame")
    p.add_argument("--in", dest="input", required=True, help="cube to warp")
    p.add_argument("--reference", required=True, help="stack holding the reference frame")
    p.add_argument("--frame", type=int, help="reference frame index (default: middle)")
    p = add("reconstruct", "reconstruct a cube from a stack (variational) or an input tensor (net)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--method", choices=("variational", "net"), default="variational")
    p.add_argument("--checkpoint")
    p = add("train", "train the network", "checkpoint file")
    p.add_argument("--input", dest="inputs", action="append", required=True, help="input tensor (repeatable)")
    p.add_argument("--target", dest="targets", action="append", required=True, help="target cube (repeatable)")
    p.add_argument("--augment", action="store_true", help="random shift/rotate/crop/flip per sample")
    p = add("eval", "score predictions against ground truth", "report JSON")
    p.add_argument("--pred", action="append", required=True)
    p.add_argument("--truth", action="append", required=True)
    p = add("plot", "spectral signature of one pixel as CSV and SVG", "output prefix")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--pixel", type=int, nargs=2, metavar=("X", "Y"), required=True)
    p = add("pipeline", "synth, simulate, preprocess, reconstruct and eval in one run", "output directory")
    p.add_argument("--replay", help="re-run a recorded pipeline manifest and compare outputs")
    return ap


COMMANDS = {"synth": cmd_synth, "simulate": cmd_simulate, "preprocess": cmd_preprocess,
            "register": cmd_register, "reconstruct": cmd_reconstruct, "train": cmd_train,
            "eval": cmd_eval, "plot": cmd_plot}


def _check_threads() -> None:
    v = os.environ.get("SPECTRASWEEP_THREADS")
    if v is not None and not (v.strip().isdigit() and int(v) > 0):
        raise ConfigError(f"SPECTRASWEEP_THREADS must be a positive integer, got {v!r}")


def main(argv=None) -> int:
    from .pipeline import StageError, replay, run_pipeline, write_manifest
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        _check_threads()
        if args.command == "pipeline":
            if args.replay:
                _require(args.replay, "manifest")
                _, same = replay(args.replay, args.out)
                print("replay: outputs identical" if same else "replay: outputs DIFFER")
                return EXIT_OK if same else EXIT_STAGE
            run_pipeline(_config(args), args.out, argv)
            print(f"wrote {args.out}")
            return EXIT_OK
        cfg = _config(args)
        inputs, outputs, extra = COMMANDS[args.command](args, cfg)
        write_manifest(_manifest_path(args.out), args.command, argv, cfg, inputs, outputs, extra)
        return EXIT_OK
    except ConfigError as exc:
        print(f"spectrasweep: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"spectrasweep: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
