"""Command-line entry point: ``equigrasp {gen-data,train,sample,eval,verify}``.

Every run-config key is also a flag (``--grasps-per-object 10``); flags
override values loaded with ``--config``.  Exit codes: 0 success, 1 usage or
input error, 2 verification failure, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import RunConfig
from .io import read_cloud, read_grasps, write_grasps
from .train import DivergenceError

EXIT_OK, EXIT_USAGE, EXIT_SUITE, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("equigrasp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


_ARG_TYPES = {"int": int, "float": float, "bool": _bool, "str": str}


def _add_config_flags(p: argparse.ArgumentParser, seed_required: bool) -> None:
    p.add_argument("--config", type=Path, help="key = value run config file")
    group = p.add_argument_group("run config overrides")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "seed":
            group.add_argument(flag, type=int, required=seed_required, default=None, help="random seed")
        else:
            group.add_argument(flag, dest=f.name, type=_ARG_TYPES[f.type], default=None, metavar=f.name.upper())


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name, None) is not None}
    return cfg.with_overrides(**overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="equigrasp", description="Equivariant grasp diffusion at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="synthesize objects and filtered ground-truth grasps")
    _add_config_flags(p, seed_required=True)

    p = sub.add_parser("train", help="train the denoiser on a generated dataset")
    _add_config_flags(p, seed_required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset directory from gen-data")
    p.add_argument("--checkpoint", type=Path, help="output checkpoint (default: <out>/model.ckpt)")

    p = sub.add_parser("sample", help="draw grasps for one point cloud")
    _add_config_flags(p, seed_required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--cloud", type=Path, required=True, help="point-cloud file (.cld)")
    p.add_argument("-n", "--num", type=int, default=10, help="number of grasps")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="guidance scale (default: guidance_lambda)")
    p.add_argument("--output", type=Path, help="grasp file (default: stdout)")
    p.add_argument("--trace", type=Path, help="per-step guidance trace table")

    p = sub.add_parser("eval", help="success rate and diversity of a grasp file")
    _add_config_flags(p, seed_required=False)
    p.add_argument("--grasps", type=Path, required=True)
    p.add_argument("--clouds", type=Path, required=True, help="directory of .cld files or a single .cld")
    p.add_argument("--report", type=Path, help="report file (default: stdout)")
    p.add_argument("--table", type=Path, help="tab-delimited per-grasp table")

    p = sub.add_parser("verify", help="run the property-suite ledger")
    _add_config_flags(p, seed_required=False)
    p.add_argument("--checkpoint", type=Path, help="also run sampler/OOD/refinement suites on trained weights")
    p.add_argument("--data", type=Path, help="dataset directory whose test clouds feed the OOD/refinement suites")
    p.add_argument("--quick", action="store_true", help="fewer random motors")
    return parser


# --- verbs -------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    from .pipeline import gen_data

    out = Path(cfg.out)
    start = time.perf_counter()
    splits = gen_data(cfg, out)
    n = len(splits["train"].grasps)
    print(f"wrote {len(splits['train'].clouds)} training objects, {n} grasps, "
          f"{len(splits['test'].clouds)} test clouds to {out} in {time.perf_counter() - start:.1f}s")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .pipeline import load_dataset, train_model

    ds = load_dataset(args.data / "train")
    if not ds.grasps:
        raise UsageError(f"{args.data}: dataset has no grasps")
    ckpt = args.checkpoint or Path(cfg.out) / "model.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    try:
        result = train_model(cfg, ds, log_every=100 if args.verbose else 0)
    except DivergenceError as exc:
        curve = ckpt.with_suffix(".losses.tsv")
        _write_losses(curve, exc.losses)
        print(f"training diverged at step {exc.step}: {exc}; loss curve in {curve}", file=sys.stderr)
        return EXIT_DIVERGED
    result.net.save(ckpt)
    cfg.save(ckpt.with_suffix(".config.txt"))
    _write_losses(ckpt.with_suffix(".losses.tsv"), result.losses)
    first, last = result.losses[0], float(np.mean(result.losses[-min(100, len(result.losses)):]))
    print(f"trained {len(result.losses)} steps in {result.seconds:.1f}s: L_eps {first:.4f} -> {last:.4f}; "
          f"checkpoint {ckpt}")
    return EXIT_OK


def _write_losses(path: Path, losses) -> None:
    path.write_text("step\tL_eps\n" + "".join(f"{i}\t{v!r}\n" for i, v in enumerate(losses)))


def cmd_sample(args, cfg: RunConfig) -> int:
    from .diffusion import write_trace
    from .pipeline import load_checkpoint, sample_grasps

    if args.num < 0:
        raise UsageError("--num must be non-negative")
    net = load_checkpoint(cfg, args.checkpoint)
    cloud = read_cloud(args.cloud)
    trace = [] if args.trace else None
    records = sample_grasps(cfg, net, cloud, args.num, seed=cfg.seed, lam=args.lam,
                            object_name=args.cloud.stem, trace=trace)
    if args.output:
        write_grasps(args.output, records)
    else:
        from .io import format_grasp

        for r in records:
            print(format_grasp(r))
    if args.trace:
        write_trace(args.trace, trace)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    from .physics import success_params
    from .pipeline import eval_grasps

    records = read_grasps(args.grasps)
    if args.clouds.is_dir():
        clouds = {p.stem: read_cloud(p) for p in sorted(args.clouds.glob("*.cld"))}
    else:
        clouds = {args.clouds.stem: read_cloud(args.clouds)}
    records = [r if r.object else _with_object(r, args.clouds.stem) for r in records]
    report = eval_grasps(records, clouds, cfg.hand(), params=success_params(cfg.contact()))
    if args.report:
        args.report.write_text(report.text())
    else:
        sys.stdout.write(report.text())
    if args.table:
        args.table.write_text(report.table())
    return EXIT_OK


def _with_object(rec, name):
    from dataclasses import replace

    return replace(rec, object=name)


def cmd_verify(args, cfg: RunConfig) -> int:
    from . import verify
    from .pipeline import load_checkpoint, load_dataset

    net = load_checkpoint(cfg, args.checkpoint) if args.checkpoint else None
    clouds = None
    if args.data:
        clouds = [c.points for c in load_dataset(args.data / "test").clouds.values()]
    start = time.perf_counter()
    results = verify.run_all(cfg, net=net, clouds=clouds, quick=args.quick)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} suites ok in {time.perf_counter() - start:.1f}s")
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_SUITE
    return EXIT_OK


VERBS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        return VERBS[args.verb](args, cfg)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ValueError, OSError, RuntimeError) as exc:  # config, format and input errors are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
