"""Command-line driver: simulate, reconstruct, train, eval, export-band,
dump-scan-order.

Exit codes: 0 success, 1 runtime error (bad files, dimension mismatches),
2 usage error.  Every run is bit-reproducible given the same seeds.
"""

from __future__ import annotations

import argparse
import sys

from . import cassi, fileio, metrics, scans, training, unfolding
from .denoiser import UNetConfig


def _build_net_config(opts: dict, bands: int) -> UNetConfig:
    return UNetConfig(
        bands=bands,
        base_channels=opts.get("base_channels", 28),
        levels=opts.get("levels", 2),
        blocks_per_level=opts.get("blocks", 1),
        patch=opts.get("patch", 4),
        cube=opts.get("cube", (2, 2, 4)),
        state_size=opts.get("state_size", 16),
        expansion=opts.get("expansion", 2),
    )


def _load_operator(mask_path: str, bands: int, shift_step: int) -> cassi.SensingOperator:
    mask, _ = fileio.load_cube(mask_path, expect_kind=fileio.KIND_MASK)
    return cassi.SensingOperator(mask[0], shift_step, bands)


def _cmd_simulate(args) -> int:
    cube, _ = fileio.load_cube(args.cube, expect_kind=fileio.KIND_CUBE)
    op = _load_operator(args.mask, cube.shape[0], args.d)
    meas = cassi.forward_project(cube, op)
    if args.noise_bits > 0:
        meas = cassi.add_shot_noise(meas, args.noise_bits, args.seed)
    fileio.save_cube(args.out, meas[None], kind=fileio.KIND_MEASUREMENT)
    print(f"wrote measurement {meas.shape[0]}x{meas.shape[1]} to {args.out}")
    return 0


def _infer_shift_step(meas_width: int, mask_width: int, bands: int) -> int:
    if bands == 1:
        if meas_width != mask_width:
            raise ValueError(
                f"single-band measurement width {meas_width} does not match mask width {mask_width}")
        return 0
    span = meas_width - mask_width
    if span < 0 or span % (bands - 1):
        raise ValueError(
            f"measurement width {meas_width} is not mask width {mask_width} "
            f"plus a whole shift step per band ({bands} bands)")
    return span // (bands - 1)


def _cmd_reconstruct(args) -> int:
    meas, _ = fileio.load_cube(args.meas, expect_kind=fileio.KIND_MEASUREMENT)
    model = fileio.load_weights(args.weights)
    config = model.config
    arrays = model.arrays
    if args.stages is not None and args.stages != config.stages:
        if not config.share_weights:
            print("error: --stages can only override shared-weights models", file=sys.stderr)
            return 1
        config = unfolding.UnfoldConfig(stages=args.stages, net=config.net,
                                        share_weights=True)
        # stage scalars beyond the new count are dropped; missing ones keep
        # their documented initialization
        arrays = {k: v for k, v in arrays.items()
                  if not k.startswith("est/") or int(k.rsplit("raw", 1)[1]) < args.stages}
    mask, _ = fileio.load_cube(args.mask, expect_kind=fileio.KIND_MASK)
    d = args.d if args.d is not None else _infer_shift_step(
        meas.shape[2], mask.shape[2], config.net.bands)
    op = cassi.SensingOperator(mask[0], d, config.net.bands)
    weights = unfolding.init_weights(config, seed=0)
    weights.load_arrays(arrays)
    cube = unfolding.reconstruct(meas[0], op, weights, config,
                                 feature_mask=model.feature_mask)
    fileio.save_cube(args.out, cube, kind=fileio.KIND_CUBE)
    print(f"wrote cube {cube.shape[0]}x{cube.shape[1]}x{cube.shape[2]} to {args.out}")
    return 0


def _cmd_train(args) -> int:
    if args.cube:
        scenes = [fileio.load_cube(p, expect_kind=fileio.KIND_CUBE)[0] for p in args.cube]
    else:
        scenes = fileio.ingest_dataset(args.scenes, crop=args.crop, bands=args.bands,
                                       mode="random", seed=args.seed)
    opts = fileio.parse_config_file(args.config) if args.config else {}
    bands = scenes[0].shape[0]
    net = _build_net_config(opts, bands)
    config = unfolding.UnfoldConfig(
        stages=args.stages if args.stages is not None else opts.get("stages", 3),
        net=net,
        share_weights=bool(opts.get("share_weights", 1)),
    )
    op = _load_operator(args.mask, bands, args.d)
    for scene in scenes:
        op.check_cube(scene)
    weights = unfolding.init_weights(config, seed=args.seed)
    train_cfg = training.TrainConfig(
        learning_rate=args.lr,
        steps=args.steps,
        zero_ratio=opts.get("mask_ratio", args.mask_ratio),
        mask_seed=opts.get("mask_seed", args.mask_seed),
        masked=args.masked,
        noise_bits=args.noise_bits,
        noise_seed=args.seed,
    )
    batch = [(scene, op) for scene in scenes]
    state = training.train(batch, weights, config, train_cfg)
    mask = None
    if args.masked:
        h, w = op.mask.shape
        mask = training.generate_mask(h, w, train_cfg.zero_ratio, train_cfg.mask_seed)
    fileio.save_weights(args.out, weights, config, feature_mask=mask)
    first = state.losses[0] if state.losses else float("nan")
    last = state.losses[-1] if state.losses else float("nan")
    print(f"trained {args.steps} steps: loss {first:.6g} -> {last:.6g}")
    print(f"wrote weights to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ref, _ = fileio.load_cube(args.ref, expect_kind=fileio.KIND_CUBE)
    test, _ = fileio.load_cube(args.test, expect_kind=fileio.KIND_CUBE)
    report = metrics.evaluate(ref, test)
    for i, (p, s) in enumerate(zip(report.band_psnr, report.band_ssim)):
        print(f"psnr_band_{i}={p:.6f}")
        print(f"ssim_band_{i}={s:.6f}")
    print(f"psnr_mean={report.psnr_mean:.6f}")
    print(f"ssim_mean={report.ssim_mean:.6f}")
    print(f"data_range={report.data_range:.6f}")
    return 0


def _cmd_export_band(args) -> int:
    cube, _ = fileio.load_cube(args.cube)
    fileio.export_band(cube, args.band, args.out)
    print(f"wrote band {args.band} to {args.out}")
    return 0


def _cmd_dump_scan_order(args) -> int:
    kind = args.kind
    if kind in ("global", "global-reverse"):
        order = scans.global_order(args.height, args.width, kind.endswith("reverse"))
    elif kind in ("local", "local-reverse"):
        order = scans.local_patch_order(args.height, args.width, args.patch,
                                        kind.endswith("reverse"))
    elif kind == "cross":
        h, w, c = args.cube
        spec = scans.CubeSpec(args.patch, h, w, c)
        order = scans.cross_cube_order(args.height, args.width, args.channels, spec)
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(kind)
    report = scans.validate_order(order)
    print(f"# {order.descriptor} length={order.length} "
          f"bijection={report.is_bijection} max_jump={report.max_neighbor_distance}")
    fwd = order.forward
    for start in range(0, order.length, 16):
        print(" ".join(str(int(v)) for v in fwd[start:start + 16]))
    return 0


def _cube_dims(text: str):
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"cube must be HxWxC, got {text!r}")
    return tuple(int(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cassi-ssm",
                                     description="CASSI simulation and reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="project a cube into a coded measurement")
    p.add_argument("--cube", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--d", type=int, default=2, help="dispersion shift step per band")
    p.add_argument("--noise-bits", type=int, default=0, help="shot-noise bit depth, 0 = noiseless")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("reconstruct", help="reconstruct a cube from a measurement")
    p.add_argument("--meas", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--stages", type=int, default=None,
                   help="override the stage count of a shared-weights model")
    p.add_argument("--d", type=int, default=None,
                   help="shift step; inferred from the measurement width when omitted")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("train", help="fit the unfolding model on scenes")
    p.add_argument("--cube", action="append", default=[], help="scene file (repeatable)")
    p.add_argument("--scenes", default=None, help="directory of .hsic scenes")
    p.add_argument("--crop", type=int, default=32)
    p.add_argument("--bands", type=int, default=4)
    p.add_argument("--mask", required=True)
    p.add_argument("--config", default=None, help="key=value network profile")
    p.add_argument("--stages", type=int, default=None)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--masked", action="store_true", help="enable masked training")
    p.add_argument("--mask-ratio", type=float, default=0.5)
    p.add_argument("--mask-seed", type=int, default=0)
    p.add_argument("--noise-bits", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM of a reconstruction against a reference")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export-band", help="write one band as a PGM image")
    p.add_argument("--cube", required=True)
    p.add_argument("--band", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_band)

    p = sub.add_parser("dump-scan-order", help="print the forward indices of a scan order")
    p.add_argument("--kind", required=True,
                   choices=["global", "global-reverse", "local", "local-reverse", "cross"])
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--cube", type=_cube_dims, default=(2, 2, 4), help="cube dims HxWxC")
    p.set_defaults(func=_cmd_dump_scan_order)

    return parser


def parse_and_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(parse_and_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
