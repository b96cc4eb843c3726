"""``mrefsr`` command line: dataset building, fusion, evaluation, gradient check, toy training, bench.

Machine-readable output is line-delimited JSON on stdout (or ``--out``
where a subcommand writes files). Exit status: 0 success, 1 contract
violation (bad input, failed check, divergence), 2 I/O failure.
Log verbosity comes from ``MREFSR_LOG`` (error, info, debug).
"""

import argparse
import ast
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import ContractViolation

log = logging.getLogger("mrefsr")

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2
GRADCHECK_TOL = 1e-5


def _emit(record, fh=None):
    print(json.dumps(record, sort_keys=True), file=fh or sys.stdout)


def _psnr_json(value):
    return "inf" if math.isinf(value) else value


def _load_model(args, required=True):
    from .model import ModelConfig, MrefsrModel

    if args.checkpoint:
        return MrefsrModel.load(args.checkpoint, precision=args.precision)
    if required:
        raise ContractViolation("--checkpoint is required for this method")
    return MrefsrModel(ModelConfig(channels=8, res_blocks=1, seed=args.seed, precision=args.precision or "f64"))


# -- build-dataset ------------------------------------------------------------
def cmd_build_dataset(args):
    from .lmr.builder import BuildConfig, build_dataset
    from .lmr.manifest import load_manifest

    manifests = [load_manifest(p) for p in args.manifests]
    cfg = BuildConfig(seed=args.seed, cap=args.cap, groups_per_target=args.groups_per_target,
                      workers=args.threads)
    reports = build_dataset(manifests, args.out, cfg)
    for r in reports:
        _emit(r)
    total = sum(r["groups_emitted"] for r in reports)
    if args.cap > 0 and total == 0:
        log.error("no groups emitted")
        return EXIT_CONTRACT
    return EXIT_OK


# -- fuse ---------------------------------------------------------------------
def cmd_fuse(args):
    from .align import match_offsets
    from .metrics import load_png, save_png
    from .pipeline import RefGroupSample, forward_sr

    model = _load_model(args, required=False)
    lr = load_png(args.lr)
    refs = [load_png(p) for p in args.refs]
    for p, r in zip(args.refs, refs):
        if r.shape[0] % 4 or r.shape[1] % 4:
            raise ContractViolation(f"{p}: reference size {r.shape[1]}x{r.shape[0]} is not divisible by 4")
    offsets = [match_offsets(lr, r, block=512) for r in refs] if args.match else None
    out = forward_sr(RefGroupSample(lr, refs, offsets=offsets), model)
    save_png(args.out, out)
    _emit({"out": args.out, "n_refs": len(refs), "width": out.shape[1], "height": out.shape[0]})
    return EXIT_OK


# -- eval ---------------------------------------------------------------------
def _predict(sample, n, method, model):
    from .model import bicubic_base
    from .metrics import quantize
    from .pipeline import forward_sr

    if method == "oracle":
        return sample.hr
    if method == "bicubic":
        return quantize(bicubic_base(sample.lr))
    return forward_sr(sample.first(n), model)


def cmd_eval(args):
    from .lmr.dataset import load_samples
    from .metrics import mean_finite, y_metrics

    model = _load_model(args) if args.method == "model" else None
    samples, skipped = load_samples(args.dataset, match=args.match)
    if not samples:
        raise ContractViolation(f"{args.dataset}: no readable groups")
    n_list = list(range(1, 6)) if args.sweep else [args.n_refs]
    out = open(args.out, "w") if args.out else None
    try:
        for n in n_list:
            def one(sample):
                return y_metrics(_predict(sample, n, args.method, model), sample.hr)

            if args.threads > 1:
                with ThreadPoolExecutor(args.threads) as pool:
                    results = list(pool.map(one, samples))
            else:
                results = [one(s) for s in samples]
            for s, (p, q) in zip(samples, results):
                _emit({"kind": "group", "group": os.path.basename(s.name), "method": args.method, "n_refs": n,
                       "psnr_db": _psnr_json(p), "ssim": q}, out)
            mean_p, n_inf = mean_finite([p for p, _ in results])
            _emit({"kind": "mean", "method": args.method, "n_refs": n, "psnr_db": _psnr_json(mean_p),
                   "ssim": float(np.mean([q for _, q in results])), "n_inf": n_inf, "groups": len(results),
                   "skipped": skipped}, out)
    finally:
        if out:
            out.close()
    return EXIT_OK


# -- gradcheck ----------------------------------------------------------------
def cmd_gradcheck(args):
    from .gradcheck import tiny_model_check

    def corrupt(name, g):
        return g + 1e-3 if name == args.corrupt else g

    errors = tiny_model_check(seed=args.seed, lr_size=args.lr_size, corrupt=corrupt if args.corrupt else None)
    if args.corrupt and args.corrupt not in errors:
        raise ContractViolation(f"--corrupt: unknown parameter {args.corrupt!r}")
    for name, err in errors.items():
        _emit({"param": name, "max_rel_err": float(err)})
    worst = float(max(errors.values()))
    ok = bool(worst <= GRADCHECK_TOL)
    _emit({"summary": True, "max_rel_err": worst, "params": len(errors), "tol": GRADCHECK_TOL, "ok": ok})
    return EXIT_OK if ok else EXIT_CONTRACT


# -- train-toy ----------------------------------------------------------------
TRAIN_DEFAULTS = {
    "channels": 8, "res_blocks": 1, "ref_blocks": 1, "restore_blocks": 1,
    "groups": 1, "lr_size": 12, "complementary": False, "batch_size": 1, "lr": 1e-4,
}


def read_kv_config(path):
    """``key = value`` lines; ``#`` starts a comment; values are Python literals or bare strings."""
    cfg = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractViolation(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                cfg[key] = ast.literal_eval(value)
            except (ValueError, SyntaxError):
                cfg[key] = value
    return cfg


def cmd_train_toy(args):
    from .lmr.dataset import load_samples
    from .model import ModelConfig, MrefsrModel
    from .pipeline import OptConfig, train
    from .synthetic import make_groups

    cfg = dict(TRAIN_DEFAULTS)
    if args.config:
        cfg.update(read_kv_config(args.config))
    unknown = set(cfg) - set(TRAIN_DEFAULTS) - set(ModelConfig.__dataclass_fields__)
    if unknown:
        raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
    if args.synthetic == bool(args.data):
        raise ContractViolation("give exactly one of --synthetic or --data")
    if args.synthetic:
        samples = make_groups(args.seed, int(cfg["groups"]), lr_size=int(cfg["lr_size"]),
                              complementary=bool(cfg["complementary"]))
    else:
        samples, _ = load_samples(args.data)
        if not samples:
            raise ContractViolation(f"{args.data}: no readable groups")
    model_keys = {k: v for k, v in cfg.items() if k in ModelConfig.__dataclass_fields__}
    model_keys.setdefault("seed", args.seed)
    if args.precision:
        model_keys["precision"] = args.precision
    model = MrefsrModel(ModelConfig(**model_keys))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "loss.jsonl"), "w") as fh:
        def log_fn(rec):
            _emit(rec, fh)
            fh.flush()

        train(model, samples, args.steps, batch_size=int(cfg["batch_size"]), opt=OptConfig(lr=float(cfg["lr"])),
              seed=args.seed, log_fn=log_fn)
    ckpt = os.path.join(args.out, "model.mrck")
    model.save(ckpt, {"steps": args.steps})
    _emit({"checkpoint": ckpt, "steps": args.steps})
    return EXIT_OK


# -- bench --------------------------------------------------------------------
def cmd_bench(args):
    from .bench import run_bench

    model = _load_model(args, required=False)
    n_list = [int(v) for v in args.n_refs.split(",")]
    out = open(args.out, "w") if args.out else None
    try:
        run_bench(model, n_list, repeats=args.repeats, seed=args.seed, lr_size=args.lr_size,
                  stitch=not args.no_stitch, log_fn=lambda rec: _emit(rec, out))
    finally:
        if out:
            out.close()
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-scene / per-group work")
    common.add_argument("--precision", choices=("f32", "f64"), default=None,
                        help="override the model precision (default: checkpoint's, else f64)")

    parser = argparse.ArgumentParser(prog="mrefsr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", parents=[common], help="build H/M/L patch groups from scene manifests")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--cap", type=int, default=0, help="maximum groups (0: unlimited)")
    p.add_argument("--groups-per-target", type=int, default=1)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("fuse", parents=[common], help="x4 super-resolve one LR image with any number of references")
    p.add_argument("lr")
    p.add_argument("refs", nargs="*")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--no-match", dest="match", action="store_false", help="use identity offsets")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", parents=[common], help="Y-channel PSNR/SSIM over a group dataset")
    p.add_argument("dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=("model", "bicubic", "oracle"), default="model")
    p.add_argument("--n-refs", type=int, default=5)
    p.add_argument("--sweep", action="store_true", help="evaluate n_refs = 1..5")
    p.add_argument("--no-match", dest="match", action="store_false")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the reduced network")
    p.add_argument("--corrupt", metavar="PARAM", help="perturb one analytic gradient (checker self-test)")
    p.add_argument("--lr-size", type=int, default=8, help="LR side of the check input (default 8)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", parents=[common], help="small-scale training run")
    p.add_argument("--synthetic", action="store_true", help="train on procedurally generated groups")
    p.add_argument("--data", help="group dataset directory")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--config", help="key = value file (model widths, groups, lr_size, batch_size, lr)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("bench", parents=[common], help="time and peak allocation versus N, with stitching baseline")
    p.add_argument("--checkpoint")
    p.add_argument("--n-refs", default="1,2,3,4,5", help="comma-separated list")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--lr-size", type=int, default=24)
    p.add_argument("--no-stitch", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    level = os.environ.get("MREFSR_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONTRACT
    try:
        return args.func(args)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RuntimeError as exc:  # training divergence
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
