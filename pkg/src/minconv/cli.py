"""Command-line front end.

    minconv analyze corr|sweep-k|sweep-v ...
    minconv train --net lenet --dataset mnist --mode approx,approx ...
    minconv eval --ckpt run/model.ckpt --net lenet --dataset mnist
    minconv mulcount --net lenet --mode all-approx

Options may also come from ``--config FILE`` (``key=value`` lines, keys
spelled like the long flags); flags given on the command line win.
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from minconv import kernels, simlab
from minconv.approx import INFER
from minconv.data import LOADERS, default_data_dir, subset
from minconv.errors import IncompatibleCheckpointError, MinConvError
from minconv.nn import BUILDERS, ConvBlock, Network
from minconv.train import TrainConfig, evaluate, fit, load_checkpoint, read_checkpoint, transfer_init

log = logging.getLogger("minconv")

DATASET_SHAPES = {"mnist": (1, 28, 28), "cifar10": (3, 32, 32)}

# option -> (type, default); None defaults mean "not set"
TRAIN_OPTIONS = {
    "net": (str, "lenet"),
    "dataset": (str, None),
    "mode": (str, None),
    "epochs": (int, 5),
    "batch_size": (int, 64),
    "lr": (float, 0.01),
    "momentum": (float, 0.9),
    "optimizer": (str, "sgd"),
    "gamma": (float, 0.99),
    "seed": (int, 0),
    "init": (str, None),
    "data_dir": (str, None),
    "out_dir": (str, "runs/latest"),
    "subset": (int, None),
    "test_subset": (int, None),
    "calib_batches": (int, None),
    "ckpt": (str, None),
    "split": (str, "test"),
}


class UsageError(Exception):
    pass


def read_config(path):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def resolve(args, keys):
    """Merge command-line flags over the config file over defaults."""
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    unknown = set(cfg) - set(TRAIN_OPTIONS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    out = {}
    for k in keys:
        typ, default = TRAIN_OPTIONS[k]
        val = getattr(args, k, None)
        if val is None and k in cfg:
            val = typ(cfg[k])
        out[k] = default if val is None else val
    if "dataset" in out and out["dataset"] is None:
        out["dataset"] = "mnist" if out.get("net", "lenet") == "lenet" else "cifar10"
    return argparse.Namespace(**out)


def _grid(text):
    try:
        if ":" in text:
            start, stop, step = (float(t) for t in text.split(":"))
            return list(np.round(np.arange(start, stop + step * 1e-6, step), 10))
        return [float(t) for t in text.split(",")]
    except ValueError as e:
        raise UsageError(f"bad grid {text!r}; use start:stop:step or a comma list") from e


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# --- analyze ---------------------------------------------------------------


def cmd_analyze(args):
    out = _out_dir(args.out_dir)
    if args.what == "corr":
        if args.samples < 2:
            raise UsageError("--samples must be at least 2")
        if args.x or args.w:
            try:
                dx = simlab.parse_distribution(args.x or "N(0,1)")
                dw = simlab.parse_distribution(args.w or "N(0,1)")
            except ValueError as e:
                raise UsageError(str(e)) from e
            ops = [args.op] if args.op else list(simlab.CANDIDATES)
            for op in ops:
                if op not in simlab.OPERATORS:
                    raise UsageError(f"unknown operator {op!r}; choose from {', '.join(simlab.OPERATORS)}")
            rows = [(dx, dw, (float("nan"),) * 3)]
            table = simlab.correlation_table(args.samples, args.seed, rows)
            table = [r for r in table if r["operator"] in ops]
        else:
            table = simlab.correlation_table(args.samples, args.seed)
        path = out / "correlation.csv"
        simlab.write_table_csv(path, table)
        for r in table:
            print(f"{r['x']:>9} {r['w']:>9} {r['operator']:>13} rho={r['rho']:.4f} ref={r['reference']:.3f}")
        print(f"wrote {path}")
        return 0
    if args.samples < 1:
        raise UsageError("--samples must be at least 1")
    if args.what == "sweep-k":
        grid = _grid(args.grid) if args.grid else simlab.default_k_grid()
        res = simlab.sweep_L_over_k(args.v, grid, args.samples, args.epsilon, args.seed)
        path = out / f"sweep_k_v{args.v:g}.csv"
    else:
        grid = _grid(args.grid) if args.grid else simlab.default_v_grid()
        res = simlab.sweep_L_over_v(args.k, grid, args.samples, args.epsilon, args.seed, args.hold_x_standard)
        path = out / f"sweep_v_k{args.k:g}.csv"
    res.to_csv(path)
    msg = f"argmin param={res.argmin_param:.6g} L={res.argmin_value:.6g}"
    if args.what == "sweep-v":
        msg += f" mean_abs_w={res.mean_abs_w:.6g}"
    print(msg)
    print(f"wrote {path}")
    return 0


# --- train / eval ----------------------------------------------------------


def build_network(net_name, dataset, mode, seed=0):
    if net_name not in BUILDERS:
        raise UsageError(f"unknown network {net_name!r}; choose from lenet, mini-cifar")
    if dataset not in DATASET_SHAPES:
        raise UsageError(f"unknown dataset {dataset!r}; choose from mnist, cifar10")
    try:
        spec = BUILDERS[net_name](mode, input_shape=DATASET_SHAPES[dataset])
    except ValueError as e:
        raise UsageError(str(e)) from e
    return Network(spec, seed=seed)


def load_data(dataset, data_dir, n_train=None, n_test=None, seed=0):
    directory = Path(data_dir) if data_dir else default_data_dir()
    if not directory.is_dir():
        raise UsageError(f"data directory {directory} does not exist (set --data-dir or MINCONV_DATA_DIR)")
    train, test = LOADERS[dataset](directory)
    return subset(train, n_train, seed), subset(test, n_test, seed)


def cmd_train(args):
    o = resolve(args, TRAIN_OPTIONS)
    net = build_network(o.net, o.dataset, o.mode or "all-exact", o.seed)
    train, test = load_data(o.dataset, o.data_dir, o.subset, o.test_subset, o.seed)
    cfg = TrainConfig(batch_size=o.batch_size, epochs=o.epochs, optimizer=o.optimizer, lr=o.lr, momentum=o.momentum,
                      gamma=o.gamma, seed=o.seed, init=o.init or "random")
    net.set_gamma(o.gamma)
    if o.init:
        transfer_init(net, o.init, train, o.batch_size, o.seed, o.calib_batches)
        print(f"initialised from {o.init}")
    out = _out_dir(o.out_dir)

    def report(m, rows):
        test_row = rows[-1] if rows[-1]["split"] == "test" else None
        print(f"epoch {m.epoch}: loss={m.loss:.4f} train_top1={m.top1:.4f}"
              + (f" test_top1={test_row['top1']:.4f}" if test_row else ""), flush=True)

    rows = fit(net, train, test, cfg, out_dir=out, on_epoch=report)
    print(f"final test top1={rows[-1]['top1']:.4f}")
    print(f"wrote {out / 'model.ckpt'} and {out / 'metrics.csv'}")
    return 0


def cmd_eval(args):
    o = resolve(args, TRAIN_OPTIONS)
    if not o.ckpt:
        raise UsageError("--ckpt is required")
    meta, _ = read_checkpoint(o.ckpt)
    net = build_network(o.net, o.dataset, o.mode or "all-exact", o.seed)
    if meta["digest"] != net.spec.digest():
        raise IncompatibleCheckpointError(
            f"checkpoint holds a {meta['spec']['name']} network that does not match {o.net} on {o.dataset}")
    if not o.mode:
        net.set_modes(meta["modes"])
    train, test = load_data(o.dataset, o.data_dir, o.subset, o.test_subset, o.seed)
    if net.modes != meta["modes"]:
        transfer_init(net, o.ckpt, train, o.batch_size, o.seed, o.calib_batches)
    else:
        load_checkpoint(o.ckpt, net)
    ds = test if o.split == "test" else train
    acc = evaluate(net, ds)
    print(f"{o.split} top1={acc:.4f}")
    return 0


# --- mulcount --------------------------------------------------------------


def count_ops(net: Network, x):
    """Per-conv-layer operation counts for one forward pass of ``x``."""
    rows = []
    ci = 0
    with kernels.counting() as total:
        for b in net.layers:
            before = total.snapshot()
            x = b.forward(x, INFER)
            if isinstance(b, ConvBlock):
                after = total.snapshot()
                c = b.layer
                _, oh, ow = x.shape[1:]
                rows.append({
                    "layer": f"conv{ci}",
                    "mode": c.mode,
                    "conv_mul": after[0] - before[0],
                    "smin": after[1] - before[1],
                    "scalar_mul": after[2] - before[2],
                    "exact_equivalent": x.shape[0] * oh * ow * c.out_channels * c.weights[0].size,
                    "filter_size": c.weights[0].size,
                })
                ci += 1
    return rows


def cmd_mulcount(args):
    o = resolve(args, ["net", "dataset", "mode", "seed"])
    net = build_network(o.net, o.dataset, o.mode or "all-exact", o.seed)
    for c in net.conv_layers:
        c.stats.mu_x_running = 1.0
    x = np.random.default_rng(o.seed).standard_normal((1,) + tuple(net.spec.input_shape)).astype(np.float32)
    rows = count_ops(net, x)
    print("layer,mode,conv_mul,smin,scalar_mul,exact_equivalent,eliminated_per_output")
    for r in rows:
        elim = r["filter_size"] if r["mode"] != "exact" else 0
        print(f"{r['layer']},{r['mode']},{r['conv_mul']},{r['smin']},{r['scalar_mul']},{r['exact_equivalent']},{elim}")
    tot = {k: sum(r[k] for r in rows) for k in ("conv_mul", "smin", "scalar_mul", "exact_equivalent")}
    print(f"total,,{tot['conv_mul']},{tot['smin']},{tot['scalar_mul']},{tot['exact_equivalent']},")
    return 0


# --- parser ----------------------------------------------------------------


def _add_run_flags(p, eval_only=False):
    p.add_argument("--config", help="key=value file; command-line flags override it")
    p.add_argument("--net", help="lenet | mini-cifar")
    p.add_argument("--dataset", help="mnist | cifar10")
    p.add_argument("--mode", help="comma list of exact|approx per conv, or all-exact / all-approx")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir", help="dataset directory (default $MINCONV_DATA_DIR or ./data)")
    p.add_argument("--subset", type=int, help="use the first N training images after a seeded shuffle")
    p.add_argument("--test-subset", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--calib-batches", type=int, help="limit the statistics calibration pass after a transfer")
    if eval_only:
        p.add_argument("--ckpt", help="checkpoint to evaluate")
        p.add_argument("--split", choices=["train", "test"])
        return
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--gamma", type=float, help="running-mean momentum")
    p.add_argument("--init", help="checkpoint to warm-start from (transfer learning)")
    p.add_argument("--out-dir")


def make_parser():
    parser = argparse.ArgumentParser(prog="minconv", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="operator similarity and relative-error studies")
    a.add_argument("what", choices=["corr", "sweep-k", "sweep-v"])
    a.add_argument("--samples", type=int, default=simlab.DEFAULT_SAMPLES)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--epsilon", type=float, default=simlab.DEFAULT_EPSILON)
    a.add_argument("--out-dir", default="runs/analysis")
    a.add_argument("--x", help="input distribution for a single corr row, e.g. N(0,1)")
    a.add_argument("--w", help="weight distribution for a single corr row, e.g. U(0,10)")
    a.add_argument("--op", help="restrict corr to one operator")
    a.add_argument("--v", type=float, default=1.0, help="scale (std) for sweep-k")
    a.add_argument("--k", type=float, default=0.0, help="mean for sweep-v")
    a.add_argument("--grid", help="start:stop:step or comma list")
    a.add_argument("--hold-x-standard", action="store_true", help="sweep-v: keep x ~ N(0,1)")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("train", help="train a network")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_run_flags(e, eval_only=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mulcount", help="count multiplications in one forward pass")
    m.add_argument("--config")
    m.add_argument("--net")
    m.add_argument("--dataset")
    m.add_argument("--mode")
    m.add_argument("--seed", type=int)
    m.set_defaults(func=cmd_mulcount)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"minconv {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (MinConvError, FileNotFoundError, ValueError) as e:
        print(f"minconv {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
