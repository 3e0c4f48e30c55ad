"""Command-line entry point: ``ditic <subcommand> ...``.

Failures print a single ``error: <kind>: <message>`` line on stderr and exit
nonzero; the kind is the exception class name.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .tensor import set_deterministic

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _cmd_train(a):
    from .config import TrainConfig, load_config
    from .trainer import train

    cfg = load_config(a.config) if a.config else TrainConfig()
    cfg.stage = a.stage
    if a.out:
        cfg.out = a.out
    if a.stage == 2 and not a.resume:
        raise UsageError("stage 2 needs --resume CKPT")
    path = train(cfg, parent=a.resume, out=cfg.out)
    print(json.dumps({"checkpoint": str(path)}))


def _cmd_encode(a):
    from .harness import encode_file

    st = encode_file(a.inp, a.ckpt, a.out)
    print(json.dumps({"bpp_actual": st.bpp_actual, "bpp_estimated": st.bpp_estimated,
                      "bytes": st.n_bytes}))


def _cmd_decode(a):
    from .harness import decode_file

    img = decode_file(a.inp, a.ckpt, a.out)
    print(json.dumps({"height": img.shape[1], "width": img.shape[2]}))


def _cmd_eval(a):
    from .harness import evaluate_checkpoint, load_images
    from .metrics import write_rd_csv
    from .checkpoint import meta_path, read_meta

    r = evaluate_checkpoint(a.ckpt, load_images(a.dataset))
    meta = read_meta(meta_path(a.ckpt)) if meta_path(a.ckpt).exists() else {}
    row = dict(method=a.method, bpp=r.bpp, psnr=r.psnr, msssim=r.msssim,
               **{"lambda": float(meta.get("lambda", "nan"))})
    if a.csv:
        write_rd_csv(a.csv, [row])
    print(json.dumps(row))


def _cmd_bdrate(a):
    from .metrics import bd_rate, curves_from_rows, read_rd_csv

    anchor = curves_from_rows(read_rd_csv(a.anchor), a.metric)
    test = curves_from_rows(read_rd_csv(a.test), a.metric)
    if len(anchor) != 1 or len(test) != 1:
        raise ValueError("each CSV must hold exactly one method")
    (ca,), (ct,) = anchor.values(), test.values()
    print(json.dumps({"anchor": ca.method, "test": ct.method, "metric": a.metric,
                      "bd_rate_percent": bd_rate(ca, ct)}))


def _cmd_gen(a):
    from .data import gen_dataset, write_dataset

    images, keys = gen_dataset(a.seed, a.n, a.size)
    write_dataset(a.out, images, keys)
    print(json.dumps({"out": str(a.out), "n": a.n}))


def _cmd_ablate(a):
    from .config import TrainConfig, load_config
    from .harness import default_test_images, run_ablation
    from .trainer import train

    cfg = load_config(a.config) if a.config else TrainConfig()
    out = Path(a.out)
    parent = a.parent
    if parent is None:
        s1 = load_config(a.config) if a.config else TrainConfig()
        s1.stage = 1
        parent = train(s1, out=out)
    images = default_test_images()
    outcomes = run_ablation(a.suite, parent, cfg, images, seeds=a.seeds, iters=a.iters, out_dir=out)
    for o in outcomes:
        print(json.dumps({"suite": o.suite, "seed": o.seed, "psnr_gain_db": o.psnr_gain,
                          "rate_ratio": o.rate_ratio, "matched": o.matched}))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ditic", description="Toy one-step latent diffusion image codec")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train one stage")
    s.add_argument("--config")
    s.add_argument("--stage", type=int, choices=(1, 2), default=1)
    s.add_argument("--resume", help="stage-1 checkpoint to start stage 2 from")
    s.add_argument("--out")
    s.set_defaults(fn=_cmd_train)

    s = sub.add_parser("encode", help="compress an image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_encode)

    s = sub.add_parser("decode", help="decompress a container")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_decode)

    s = sub.add_parser("eval", help="bpp / PSNR / MS-SSIM over a dataset directory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--csv")
    s.add_argument("--method", default="ditic")
    s.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("bdrate", help="BD-rate of test vs anchor RD CSVs")
    s.add_argument("--anchor", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--metric", choices=("psnr", "msssim"), default="psnr")
    s.set_defaults(fn=_cmd_bdrate)

    s = sub.add_parser("gen", help="write a synthetic dataset")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_gen)

    s = sub.add_parser("ablate", help="run an ablation suite")
    s.add_argument("--suite", choices=("flow", "distill", "cond"), required=True)
    s.add_argument("--config")
    s.add_argument("--parent", help="shared stage-1 checkpoint (trained if omitted)")
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--iters", type=int)
    s.add_argument("--out", default="runs/ablate")
    s.set_defaults(fn=_cmd_ablate)
    return p


def main(argv=None) -> int:
    set_deterministic()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.fn(args)
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
