"""Command-line frontend tying the library together.

Subcommands cover pose ingestion, auxiliary view selection, epipolar
sanity checks, synthetic scene generation, training, inference, attention
visualisation, metric evaluation, and the attention cost benchmark.

Exit codes: 0 success, 1 user error (one-line diagnostic on stderr),
2 internal error. Nothing is written to stderr on success.

numpy is imported lazily so that ``--threads`` can cap the BLAS worker
pools through the environment before the first import happens.
"""

import argparse
import os
import sys

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

_DEF_K_EPI = "64,32,16"


class UsageError(Exception):
    """Bad flags or bad input; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage problems; the 0/1/2 contract
    # reserves 2 for internal errors, so route them through UsageError
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _cap_threads(argv) -> None:
    """Apply --threads to the BLAS env caps before numpy loads."""
    value = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
    if value is None:
        return
    try:
        n = int(value)
    except ValueError:
        return  # argparse reports the bad value later
    if n >= 1:
        for var in _THREAD_VARS:
            os.environ[var] = str(n)


def _int_list(text: str):
    text = text.strip()
    if not text:
        return []
    try:
        return [int(tok) for tok in text.split(",")]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="mvsr",
                     description="multi-view super-resolution toolkit")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker pools (set before numpy loads)")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="subcommand")

    p = sub.add_parser("parse-colmap", formatter_class=fmt,
                       help="convert a COLMAP sparse model to poses.json")
    p.add_argument("sparse_dir", help="directory holding cameras/images files")
    p.add_argument("-o", "--output", default="poses.json",
                   help="manifest path, - for stdout")
    p.add_argument("--format", choices=("text", "binary"), default="text",
                   help="model file encoding")
    p.set_defaults(func=_cmd_parse_colmap)

    p = sub.add_parser("select", formatter_class=fmt,
                       help="pick auxiliary views for a target")
    p.add_argument("--poses", required=True, help="poses.json manifest")
    p.add_argument("--target", type=int, default=None,
                   help="target view id; all views when omitted")
    p.add_argument("--n-ref", type=int, default=4,
                   help="number of auxiliary views")
    p.add_argument("--stride", type=int, default=2,
                   help="take every stride-th ranked candidate")
    p.add_argument("--lambda-pos", type=float, default=0.5,
                   help="position weight in the mixed distance")
    p.add_argument("--strategy", choices=("auxiliary", "nearest", "random"),
                   default="auxiliary", help="candidate ranking rule")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for the random strategy")
    p.add_argument("-o", "--output", default=None,
                   help="write a selection table instead of printing ids")
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("epi-check", formatter_class=fmt,
                       help="print the epipolar line for one pixel")
    p.add_argument("--poses", required=True)
    p.add_argument("--pair", type=int, nargs=2, metavar=("I", "J"),
                   required=True, help="source and destination view ids")
    p.add_argument("--point", type=float, nargs=2, metavar=("U", "V"),
                   required=True, help="pixel in the source view")
    p.set_defaults(func=_cmd_epi_check)

    p = sub.add_parser("gen-scene", formatter_class=fmt,
                       help="generate a synthetic plane scene")
    p.add_argument("--kind",
                   choices=("ring_inward", "arc", "random_hemisphere"),
                   default="ring_inward", help="camera rig layout")
    p.add_argument("--cams", type=int, default=16, help="number of cameras")
    p.add_argument("--hr", type=int, default=256,
                   help="high-resolution image side")
    p.add_argument("--factor", type=int, choices=(2, 4), default=2,
                   help="downsampling factor for the LR images")
    p.add_argument("--radius", type=float, default=4.0, help="rig radius")
    p.add_argument("--elevation", type=float, default=1.0,
                   help="camera height above the textured plane")
    p.add_argument("--seed", type=int, default=0, help="texture and rig seed")
    p.add_argument("-o", "--output", required=True, help="scene directory")
    p.set_defaults(func=_cmd_gen_scene)

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train the SR network on a scene")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--out", required=True,
                   help="run directory (checkpoint + metrics.csv)")
    p.add_argument("--channels", type=int, default=32,
                   help="base feature channels")
    p.add_argument("--n-ref", type=int, default=4,
                   help="auxiliary views per target")
    p.add_argument("--k-epi", default=_DEF_K_EPI,
                   help="epipolar samples per scale, finest first")
    p.add_argument("--heads", type=int, default=1, help="attention heads")
    p.add_argument("--lambda-per", type=float, default=0.0,
                   help="weight of the gradient-magnitude loss term")
    p.add_argument("--batch", type=int, default=2,
                   help="target views per update")
    p.add_argument("--lr-start", type=float, default=1e-4,
                   help="cosine schedule start")
    p.add_argument("--lr-end", type=float, default=1e-7,
                   help="cosine schedule end")
    p.add_argument("--checkpoint-every", type=int, default=100,
                   help="iterations between checkpoints")
    p.add_argument("--holdout", default="",
                   help="comma-separated view ids excluded from training")
    p.add_argument("--no-est", action="store_true",
                   help="ablation: drop the epipolar branch")
    p.add_argument("--seed", type=int, default=0,
                   help="init and batch-order seed")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sr", formatter_class=fmt,
                       help="super-resolve one view with a checkpoint")
    p.add_argument("--scene", required=True)
    p.add_argument("--ckpt", required=True,
                   help="run directory or checkpoint directory")
    p.add_argument("--target", type=int, required=True)
    p.add_argument("-o", "--output", required=True,
                   help="PNG path, - for stdout")
    p.set_defaults(func=_cmd_sr)

    p = sub.add_parser("attn-map", formatter_class=fmt,
                       help="export one query's attention as a PGM heat map")
    p.add_argument("--scene", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--aux", type=int, required=True,
                   help="auxiliary view id to visualise")
    p.add_argument("--query", type=int, nargs=2, metavar=("U", "V"),
                   required=True, help="query pixel in the LR target")
    p.add_argument("--block", type=int, choices=(0, 1, 2), default=0,
                   help="network scale to probe")
    p.add_argument("--head", type=int, default=0,
                   help="attention head to export")
    p.add_argument("-o", "--output", required=True,
                   help="PGM path, - for stdout")
    p.set_defaults(func=_cmd_attn_map)

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="PSNR/SSIM between two grayscale images")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench-attn", formatter_class=fmt,
                       help="time epipolar vs full cross attention")
    p.add_argument("--sizes", default="16,32,64",
                   help="comma-separated square feature sizes")
    p.add_argument("--k", type=int, default=32,
                   help="epipolar samples per query")
    p.add_argument("--channels", type=int, default=16,
                   help="feature channels")
    p.add_argument("--n-ref", type=int, default=4,
                   help="auxiliary views")
    p.add_argument("--repeat", type=int, default=3,
                   help="timing repetitions; best run counts")
    p.add_argument("--seed", type=int, default=0,
                   help="rig and feature seed")
    p.set_defaults(func=_cmd_bench_attn)

    return parser


def _cmd_parse_colmap(args) -> int:
    from pathlib import Path

    from . import colmap_io

    ext = ".txt" if args.format == "text" else ".bin"
    d = Path(args.sparse_dir)
    if not d.is_dir():
        raise UsageError(f"{d}: not a directory")
    cams = colmap_io.parse_cameras(d / f"cameras{ext}", format=args.format)
    imgs = colmap_io.parse_images(d / f"images{ext}", format=args.format)
    manifest = colmap_io.build_manifest(cams, imgs)
    colmap_io.write_manifest(manifest, args.output)
    return 0


def _cmd_select(args) -> int:
    from . import colmap_io, view_select

    manifest = colmap_io.read_manifest(args.poses)
    cfg = view_select.SelectionConfig(
        lambda_pos=args.lambda_pos, n_ref=args.n_ref, stride_l=args.stride,
        strategy=args.strategy, random_seed=args.seed)
    targets = manifest.view_ids() if args.target is None else [args.target]
    results = [view_select.select_auxiliary(manifest, t, cfg)
               for t in targets]
    if args.output is not None:
        view_select.write_selection_table(results, cfg, args.output)
        return 0
    for r in results:
        ids = " ".join(str(v) for v in r.auxiliaries)
        print(ids if len(results) == 1 else f"{r.target}: {ids}")
    return 0


def _cmd_epi_check(args) -> int:
    from pathlib import Path

    from . import colmap_io, geometry, synthscene

    manifest = colmap_io.read_manifest(args.poses)
    i, j = args.pair
    f = geometry.fundamental(manifest.get(i), manifest.get(j),
                             manifest.scene_scale)
    if not f.valid:
        raise UsageError("degenerate pair")
    line = geometry.epipolar_line(f, args.point)
    # + 0.0 turns a signed zero into plain 0 before formatting
    print(" ".join(f"{c + 0.0:g}" for c in line))
    scene_dir = Path(args.poses).resolve().parent
    if (scene_dir / "meta.json").exists():
        scene = synthscene.read_scene(scene_dir)
        gt = synthscene.gt_correspondence(scene, i, args.point, j)
        if gt is None:
            print("residual unavailable")
        else:
            print(f"residual {geometry.point_line_distance(line, gt):.6e}")
    return 0


def _cmd_gen_scene(args) -> int:
    from . import synthscene

    scene = synthscene.build_scene(
        kind=args.kind, n=args.cams, radius=args.radius, seed=args.seed,
        width=args.hr, height=args.hr, factor=args.factor,
        elevation=args.elevation)
    synthscene.write_scene(scene, args.output)
    return 0


def _cmd_train(args) -> int:
    from . import srnet, synthscene

    scene = synthscene.read_scene(args.scene)
    k_epi = _int_list(args.k_epi)
    net_cfg = srnet.NetworkConfig(
        base_channels=args.channels, n_ref=args.n_ref, upscale=scene.factor,
        lambda_per=args.lambda_per, seed=args.seed, n_heads=args.heads,
        k_epi=tuple(k_epi), use_est=not args.no_est)
    train_cfg = srnet.TrainConfig(
        iters=args.iters, batch=args.batch, lr_start=args.lr_start,
        lr_end=args.lr_end, checkpoint_every=args.checkpoint_every)
    srnet.train(scene, net_cfg, train_cfg, args.out,
                holdout=_int_list(args.holdout))
    return 0


def _find_checkpoint(path):
    from pathlib import Path

    p = Path(path)
    if (p / "manifest.json").exists():
        return p
    if (p / "checkpoint" / "manifest.json").exists():
        return p / "checkpoint"
    raise UsageError(f"{p}: no checkpoint manifest found")


def _write_png(img, out) -> None:
    """8-bit grayscale PNG to a path or, for '-', to stdout."""
    import numpy as np
    from PIL import Image

    pil = Image.fromarray(
        (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8), mode="L")
    if str(out) == "-":
        import io

        buf = io.BytesIO()
        pil.save(buf, format="PNG")
        sys.stdout.buffer.write(buf.getvalue())
        sys.stdout.buffer.flush()
        return
    pil.save(out)


def _scene_view_data(scene, net_cfg, target):
    from . import srnet

    data, _, _ = srnet.scene_training_data(scene, net_cfg)
    if target not in data:
        raise UsageError(f"view {target} not in scene")
    return data


def _cmd_sr(args) -> int:
    from . import srnet, synthscene

    scene = synthscene.read_scene(args.scene)
    net = srnet.net_from_checkpoint(_find_checkpoint(args.ckpt))
    data = _scene_view_data(scene, net.cfg, args.target)
    d = data[args.target]
    out = net.super_resolve(d["lr"], [data[a]["lr"] for a in d["aux"]],
                            d["grids"], d["operators"])
    _write_png(out, args.output)
    return 0


def _cmd_attn_map(args) -> int:
    from . import epiattn, srnet, synthscene

    scene = synthscene.read_scene(args.scene)
    net = srnet.net_from_checkpoint(_find_checkpoint(args.ckpt))
    if not net.cfg.use_est:
        raise UsageError("checkpoint was trained without the epipolar branch")
    if not 0 <= args.head < net.cfg.n_heads:
        raise UsageError(f"head must lie in [0, {net.cfg.n_heads})")
    data = _scene_view_data(scene, net.cfg, args.target)
    d = data[args.target]
    if args.aux not in d["aux"]:
        raise UsageError(
            f"view {args.aux} is not an auxiliary of {args.target}; "
            f"selected: {' '.join(str(a) for a in d['aux'])}")
    view_index = d["aux"].index(args.aux)
    _, weights = net.forward(d["lr"], [data[a]["lr"] for a in d["aux"]],
                             d["grids"], d["operators"], want_weights=True)
    grid = d["grids"][args.block]
    stride = net.cfg.strides[args.block]
    qu, qv = args.query[0] // stride, args.query[1] // stride
    if not (0 <= qu < grid.feat_w and 0 <= qv < grid.feat_h):
        raise UsageError(
            f"query maps to ({qu}, {qv}), outside the "
            f"{grid.feat_w}x{grid.feat_h} feature grid of block {args.block}")
    query_index = qv * grid.feat_w + qu
    if str(args.output) == "-":
        import tempfile
        from pathlib import Path

        with tempfile.NamedTemporaryFile(suffix=".pgm") as tmp:
            epiattn.export_attention_pgm(tmp.name, grid, weights[args.block],
                                         query_index, view_index, args.head)
            sys.stdout.buffer.write(Path(tmp.name).read_bytes())
            sys.stdout.buffer.flush()
        return 0
    epiattn.export_attention_pgm(args.output, grid, weights[args.block],
                                 query_index, view_index, args.head)
    return 0


def _load_gray(path):
    import numpy as np
    from PIL import Image

    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def _cmd_eval(args) -> int:
    from . import srnet

    pred = _load_gray(args.pred)
    gt = _load_gray(args.gt)
    p = srnet.psnr(pred, gt)
    s = srnet.ssim(pred, gt)
    print(f"PSNR {round(p, 6)} SSIM {round(s, 6)}")
    return 0


def _cmd_bench_attn(args) -> int:
    import time

    import numpy as np

    from . import epiattn, synthscene
    from .autodiff import Tensor

    sizes = _int_list(args.sizes)
    if not sizes:
        raise UsageError("--sizes needs at least one entry")
    for size in sizes:
        rig = synthscene.gen_rig("ring_inward", n=args.n_ref + 1, radius=4.0,
                                 seed=args.seed, width=size, height=size)
        ids = rig.view_ids()
        target, aux = ids[0], ids[1:]
        grid = epiattn.build_sample_grid(
            rig.get(target), [rig.get(a) for a in aux], size, size, 1,
            args.k, rig.scene_scale)
        operators = [
            epiattn.gather_operator(size, size, grid.coords[:, v])
            .astype(np.float32)
            for v in range(len(aux))]
        cfg = epiattn.AttentionConfig(k_epi=args.k, channels=args.channels)
        rng = np.random.default_rng(args.seed)
        est = epiattn.EpiAttention(cfg, rng)
        q = Tensor(rng.uniform(size=(size * size, args.channels))
                   .astype(np.float32))
        feats = [Tensor(rng.uniform(size=(size, size, args.channels))
                        .astype(np.float32)) for _ in aux]

        def best_of(fn):
            best = float("inf")
            for _ in range(max(1, args.repeat)):
                t0 = time.perf_counter()
                fn()
                best = min(best, time.perf_counter() - t0)
            return best

        est.mac_count = 0
        t_epi = best_of(lambda: est.epi_attend(q, feats, grid, operators))
        epi_macs = est.mac_count // max(1, args.repeat)
        est.mac_count = 0
        t_cross = best_of(lambda: est.full_cross_attend(q, feats))
        cross_macs = est.mac_count // max(1, args.repeat)
        n_q = size * size
        print(f"size {size} "
              f"epi {t_epi / n_q:.3e} s/query {epi_macs // n_q} mac/query "
              f"cross {t_cross / n_q:.3e} s/query {cross_macs // n_q} "
              f"mac/query")
    return 0


def _user_error_types():
    from . import autodiff, colmap_io, epiattn, geometry, srnet, view_select

    return (
        OSError,
        ValueError,
        KeyError,
        colmap_io.MalformedFileError,
        colmap_io.UnsupportedModelError,
        colmap_io.NonUnitQuaternionError,
        colmap_io.DanglingCameraRefError,
        colmap_io.DuplicateViewIdError,
        colmap_io.SchemaVersionMismatchError,
        view_select.UnknownViewError,
        view_select.NotEnoughViewsError,
        geometry.SingularIntrinsicsError,
        geometry.DegeneratePairError,
        geometry.ZeroLineError,
        geometry.EmptySegmentError,
        autodiff.ShapeMismatchError,
        autodiff.TensorFileError,
        epiattn.BudgetExceededError,
        srnet.NonFiniteLossError,
    )


def _diagnostic(exc) -> str:
    if isinstance(exc, KeyError) and exc.args:
        msg = str(exc.args[0])
    else:
        msg = str(exc) or type(exc).__name__
    return msg.splitlines()[0]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _cap_threads(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except _user_error_types() as exc:
        print(_diagnostic(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # the 0/1/2 contract needs a catch-all
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
