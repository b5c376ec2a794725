"""Command-line entry point: ``binarch {search,train,eval,cost,selftest}``.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 selftest failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config (may set \"preset\": \"desk\" | \"full\")")
    common.add_argument("--preset", choices=("desk", "full"), default=None, help="base settings (default desk)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. search.epochs=0 (repeatable)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--mode", choices=("bin-proposed", "bin-full", "bin-w-real-a", "real"), default=None)
    common.add_argument("--data-dir", default=None, help="CIFAR-10 binary batch directory")
    common.add_argument("--synthetic", action="store_true", help="use the synthetic toy task (no files needed)")
    common.add_argument("--threads", type=int, default=None, help="BLAS/numba threads (default 1)")
    common.add_argument("--out", default=None, help="output directory (or file for cost)")

    p = _Parser(prog="binarch", description="Binary-domain cell search, training and cost accounting.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("search", parents=[common], help="run the staged search, write genotype + metrics")
    t = sub.add_parser("train", parents=[common], help="train a genotype (binary activations), write checkpoint")
    t.add_argument("--genotype", required=True)
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--binarize-weights", action="store_true", help="binarize weights before evaluating")
    c = sub.add_parser("cost", parents=[common], help="FLOPs/BOPs per layer as CSV")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--genotype")
    src.add_argument("--cost-preset", dest="cost_preset", choices=("resnet18-stem", "reference-imagenet", "reference-cifar"))
    c.add_argument("--input-size", type=int, default=None, help="input resolution for --genotype (default 32)")
    sub.add_parser("selftest", parents=[common], help="kernel bit-exactness and gradient checks")
    return p


def _set_threads(n: int) -> None:
    # must run before numpy/numba load their thread pools; the numba kernels themselves are serial
    for var in THREAD_VARS:
        os.environ[var] = str(n)


def _load_config(args):
    from .config import RunConfig
    base = RunConfig.full() if args.preset == "full" else RunConfig.desk()
    cfg = RunConfig.load(args.config, base) if args.config else base
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.mode is not None:
        overrides.append(f"mode=\"{args.mode}\"")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    if args.synthetic:
        overrides.append("data.preset=\"toy\"")
    return cfg.with_overrides(overrides) if overrides else cfg


def _out_dir(args, default: str) -> str:
    path = args.out or default
    os.makedirs(path, exist_ok=True)
    return path


def _write(path: str, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _eprint(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _read_genotype(path: str):
    from .genotype import parse
    with open(path) as fh:
        return parse(fh.read())


def cmd_search(cfg, args) -> int:
    from .genotype import serialize
    from .search import metrics_csv, run_search
    search_ds, _, _ = cfg.datasets(None if args.synthetic else args.data_dir)
    out = _out_dir(args, "search_out")
    res = run_search(cfg.search_config(search_ds.num_classes), search_ds, cfg.domain, cfg.seed,
                     log=lambda r: _eprint(f"stage {r['stage']} epoch {r['epoch']} {r['split']}: "
                                           f"loss {r['loss']:.4f} acc {r['acc']:.4f}"))
    _write(os.path.join(out, "genotype.json"), serialize(res.genotype))
    _write(os.path.join(out, "metrics.csv"), metrics_csv(res.metrics))
    _write(os.path.join(out, "arch.json"), json.dumps(res.arch.to_dict(), indent=1, sort_keys=True) + "\n")
    _write(os.path.join(out, "config.json"), json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    print(serialize(res.genotype))
    return EXIT_OK


def _build(genotype, cfg, num_classes: int, mode_name: str, seed: int):
    import numpy as np
    from .genotype import EvalNetwork
    from .ops import MODES
    from .tensor import default_dtype
    with default_dtype(cfg.dtype):
        return EvalNetwork(genotype, cfg.network_config(num_classes).with_(mode=MODES[mode_name]),
                           np.random.default_rng(seed))


def cmd_train(cfg, args) -> int:
    import numpy as np
    from .genotype import serialize
    from .train import evaluate, fit, prepare
    from .tensor import default_dtype
    genotype = _read_genotype(args.genotype)
    _, train, test = cfg.datasets(None if args.synthetic else args.data_dir)
    out = _out_dir(args, "train_out")
    tcfg = cfg.train_config()
    net = _build(genotype, cfg, train.num_classes, cfg.mode, cfg.seed)
    x, y = prepare(train, tcfg.downsample)
    xt, yt = prepare(test, tcfg.downsample)
    rng = np.random.default_rng(cfg.seed)
    rows = []

    def log(ep, loss, acc):
        rows.append((ep, loss, acc))
        _eprint(f"epoch {ep}: loss {loss:.4f} acc {acc:.4f}")

    with default_dtype(tcfg.dtype):
        fit(net, x, y, train.num_classes, tcfg, rng, log=log)
        test_loss, test_acc = evaluate(net, xt, yt)
    meta = {"genotype": json.loads(serialize(genotype)), "mode": cfg.mode, "num_classes": train.num_classes,
            "config": cfg.to_dict()}
    np.savez(os.path.join(out, "checkpoint.npz"), __meta__=np.array(json.dumps(meta, sort_keys=True)),
             **net.state_dict())
    lines = ["epoch,loss,acc"] + [f"{e},{repr(round(l, 10))},{repr(round(a, 10))}" for e, l, a in rows]
    lines.append(f"test,{repr(round(test_loss, 10))},{repr(round(test_acc, 10))}")
    _write(os.path.join(out, "metrics.csv"), "\n".join(lines) + "\n")
    print(json.dumps({"test_acc": test_acc, "test_loss": test_loss}))
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    import numpy as np
    from .config import RunConfig
    from .genotype import Genotype, parse
    from .train import binarize_network_weights, evaluate, prepare, recalibrate_bn
    from .tensor import default_dtype
    with np.load(args.checkpoint) as z:
        meta = json.loads(str(z["__meta__"]))
        state = {k: z[k] for k in z.files if k != "__meta__"}
    ck_cfg = RunConfig.from_dict({k: v for k, v in meta["config"].items()})
    genotype: Genotype = parse(json.dumps(meta["genotype"]))
    net = _build(genotype, ck_cfg, meta["num_classes"], meta["mode"], 0)
    net.load_state_dict(state)
    _, train, test = cfg.datasets(None if args.synthetic else args.data_dir)
    tcfg = ck_cfg.train_config()
    xt, yt = prepare(test, tcfg.downsample)
    report = {"mode": meta["mode"], "binarized_weights": False}
    with default_dtype(tcfg.dtype):
        _, report["acc"] = evaluate(net, xt, yt)
        if args.binarize_weights:
            binarize_network_weights(net)
            if tcfg.recalibrate_bn:
                recalibrate_bn(net, prepare(train, tcfg.downsample)[0])
            report["acc_before_binarization"] = report["acc"]
            _, report["acc"] = evaluate(net, xt, yt)
            report["binarized_weights"] = True
            report["gap_points"] = 100.0 * (report["acc_before_binarization"] - report["acc"])
    text = json.dumps(report, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "eval.json"), text + "\n")
    print(text)
    return EXIT_OK


def cmd_cost(cfg, args) -> int:
    from . import cost
    if args.cost_preset:
        report = cost.PRESETS[args.cost_preset]()
    else:
        size = args.input_size or 32
        report = cost.count_genotype(_read_genotype(args.genotype), cfg.network_config(), (3, size, size))
    text = report.to_csv()
    if args.out:
        _write(args.out, text)
    print(text, end="")
    return EXIT_OK


def cmd_selftest(cfg, args) -> int:
    from . import selftest
    return EXIT_OK if selftest.run() else EXIT_SELFTEST


COMMANDS = {"search": cmd_search, "train": cmd_train, "eval": cmd_eval, "cost": cmd_cost, "selftest": cmd_selftest}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        _eprint(str(e))
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    _set_threads(args.threads or 1)
    from .config import ConfigError
    try:
        cfg = _load_config(args)
    except (ConfigError, OSError) as e:
        _eprint(f"binarch: config error: {e}")
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        _eprint(f"binarch: {e}")
        return EXIT_USAGE
    except (ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as e:
        _eprint(f"binarch: error: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
