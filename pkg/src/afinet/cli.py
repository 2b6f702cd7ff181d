"""Command-line entry point: ``afinet <subcommand> [flags]``.

Configuration precedence, lowest to highest: built-in defaults, the JSON
file given by ``--config``, then explicit flags.  Every subcommand that
writes files also writes the fully-resolved configuration to
``<output-dir>/config.json``.

Exit codes: 0 success, 2 configuration error (including bad flags),
3 data or file-format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, gradcheck, interpret, ode
from .architectures import PRESETS, NetworkConfig, build_network
from .data import VARIANTS, load_cifar, synthetic_dataset
from .errors import ConfigError, ContractError, DataError, NumericError
from .trainer import SCHEDULES, TrainConfig, Trainer, _thread_limit, evaluate, load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "model": {"depth": 32, "preset": "table-2", "afi_stages": [1, 2, 3], "r": 4, "num_classes": None},
    "train": {"epochs": 300, "batch": 64, "base_lr": 0.1, "momentum": 0.9, "weight_decay": 1e-4,
              "seed": 0, "schedule": "cifar", "augment": True},
    "data": {"variant": "synthetic", "path": None, "eval_path": None,
             "synthetic": {"n": 256, "k_classes": 4, "seed": 0, "noise": 0.5}},
    "output_dir": None,
    "threads": 1,
}


# ----------------------------------------------------------------------------
# configuration


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where + key!r} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def parse_stages(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        items = list(text)
    elif str(text).strip().lower() in ("", "none", "[]"):
        items = []
    else:
        items = [s for s in str(text).replace(" ", "").split(",") if s]
    try:
        stages = sorted({int(s) for s in items})
    except ValueError:
        raise ConfigError(f"afi stages must be integers in 1..3, got {text!r}") from None
    if any(s not in (1, 2, 3) for s in stages):
        raise ConfigError(f"afi stages must lie in 1..3, got {stages}")
    return stages


def validate(cfg: dict, command: str = "train") -> dict:
    """Check values and fill derived defaults in place.

    ``model.num_classes`` left as null follows the data: the CIFAR variant,
    the synthetic class count, or 10 for ``analyze``.
    """
    m, t, d = cfg["model"], cfg["train"], cfg["data"]
    m["afi_stages"] = parse_stages(m["afi_stages"])
    if m["preset"] not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}, got {m['preset']!r}")
    if t["schedule"] not in SCHEDULES:
        raise ConfigError(f"schedule must be one of {SCHEDULES}, got {t['schedule']!r}")
    if d["variant"] not in ("synthetic", *VARIANTS):
        raise ConfigError(f"data variant must be synthetic, cifar10 or cifar100, got {d['variant']!r}")
    for key in ("epochs", "batch"):
        if not isinstance(t[key], int) or t[key] < 1:
            raise ConfigError(f"train.{key} must be a positive integer")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("threads must be a positive integer")
    if command == "analyze":
        data_classes = 10
    elif d["variant"] == "synthetic":
        data_classes = int(d["synthetic"]["k_classes"])
    else:
        if not d["path"]:
            raise ConfigError(f"data.path is required for {d['variant']}")
        data_classes = VARIANTS[d["variant"]][1]
    if m["num_classes"] is None:
        m["num_classes"] = data_classes
    elif command != "analyze" and m["num_classes"] != data_classes:
        raise ConfigError(f"model.num_classes={m['num_classes']} but the data has {data_classes} classes")
    network_config(cfg)  # raises on invalid depth / r
    return cfg


def network_config(cfg: dict) -> NetworkConfig:
    m = cfg["model"]
    return NetworkConfig.from_depth(int(m["depth"]), num_classes=int(m["num_classes"]), r=int(m["r"]),
                                    preset=m["preset"], afi_stages=frozenset(m["afi_stages"]),
                                    seed=int(cfg["train"]["seed"]))


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], batch=t["batch"], base_lr=float(t["base_lr"]),
                       momentum=float(t["momentum"]), weight_decay=float(t["weight_decay"]),
                       seed=int(t["seed"]), schedule=t["schedule"], augment=bool(t["augment"]),
                       threads=cfg["threads"])


# flag dest -> config path
FLAG_PATHS = {
    "depth": ("model", "depth"), "preset": ("model", "preset"), "afi_stages": ("model", "afi_stages"),
    "r": ("model", "r"), "classes": ("model", "num_classes"),
    "epochs": ("train", "epochs"), "batch": ("train", "batch"), "base_lr": ("train", "base_lr"),
    "momentum": ("train", "momentum"), "weight_decay": ("train", "weight_decay"),
    "seed": ("train", "seed"), "schedule": ("train", "schedule"), "augment": ("train", "augment"),
    "variant": ("data", "variant"), "data_path": ("data", "path"), "eval_path": ("data", "eval_path"),
    "synthetic_n": ("data", "synthetic", "n"), "synthetic_classes": ("data", "synthetic", "k_classes"),
    "synthetic_seed": ("data", "synthetic", "seed"),
    "output_dir": ("output_dir",), "threads": ("threads",),
}


def resolve(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, loaded)
    for dest, path in FLAG_PATHS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        node = cfg
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    return validate(cfg, args.command)


def _out_dir(cfg: dict, default: str | None) -> Path | None:
    out = cfg["output_dir"] or default
    if out is None:
        return None
    cfg["output_dir"] = str(out)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path


def load_data(cfg: dict):
    """Training set and evaluation set (None when no evaluation data is configured)."""
    d = cfg["data"]
    if d["variant"] == "synthetic":
        s = d["synthetic"]
        ds = synthetic_dataset(int(s["n"]), int(s["k_classes"]), int(s["seed"]), float(s["noise"]))
        return ds, ds
    try:
        train = load_cifar(d["path"], d["variant"], "train")
        test = load_cifar(d["eval_path"], d["variant"], "test", train.stats) if d["eval_path"] else None
    except OSError as exc:
        raise DataError(f"cannot read dataset: {exc}") from None
    return train, test


# ----------------------------------------------------------------------------
# subcommands


def cmd_analyze(args, cfg) -> int:
    afi_cfg = network_config(cfg)
    base_cfg = afi_cfg.with_(afi_stages=frozenset())
    if not afi_cfg.afi_stages:
        raise ConfigError("analyze compares a ResNet against an AFI configuration; give --afi-stages")
    raw, human = analysis.compare_report(base_cfg, afi_cfg, args.flops_batch, args.ledger)
    print(f"# a = {analysis.model_name(base_cfg)}, b = {analysis.model_name(afi_cfg)} ({afi_cfg.preset}), "
          f"batch {args.flops_batch}, {analysis.CONVENTION} counting, {args.ledger} ledger")
    print(raw, end="")
    print(human, end="")
    notes = []
    for c in (base_cfg, afi_cfg):
        notes += analysis.discrepancy_notes(c, analysis.cost_table(c, args.flops_batch, args.ledger))
    for note in notes:
        print(note)
    out = _out_dir(cfg, None)
    if out is not None:
        (out / "costs_raw.csv").write_text(raw)
        (out / "costs_human.csv").write_text(human)
        (out / "notes.txt").write_text("".join(n + "\n" for n in notes))
    return EXIT_OK


def _restore(cfg: dict, checkpoint):
    """Network built from the config, with weights from ``checkpoint`` if given.

    The checkpoint's own model section, when present, takes precedence.
    """
    if checkpoint:
        try:
            ckpt = load_checkpoint(checkpoint)
        except OSError as exc:
            raise DataError(f"cannot read checkpoint: {exc}") from None
        saved = ckpt.config.get("model") if isinstance(ckpt.config, dict) else None
        if saved:
            cfg["model"] = _merge(cfg["model"], saved, "model.")
            validate(cfg, "eval")
        net = build_network(network_config(cfg))
        ckpt.apply(net)
        return net
    return build_network(network_config(cfg))


def _echo(cfg: dict) -> dict:
    """Config stored in checkpoints; the output location is left out so reruns elsewhere match bitwise."""
    return {k: v for k, v in cfg.items() if k != "output_dir"}


def cmd_train(args, cfg) -> int:
    train_set, eval_set = load_data(cfg)
    out = _out_dir(cfg, "afinet-run")
    net = build_network(network_config(cfg))
    trainer = Trainer(net, train_config(cfg), train_set, eval_set, out)
    if args.resume:
        trainer.restore(args.resume)
    every = args.checkpoint_every
    while trainer.epoch < trainer.config.epochs:
        row = trainer.fit(epochs=every or trainer.config.epochs)[-1]
        print(f"epoch {row['epoch']:4d}  lr {row['lr']:.4g}  loss {row['train_loss']:.4f}  "
              f"train {row['train_acc']:.4f}  eval {row['eval_acc']:.4f}", flush=True)
        if every:
            trainer.save(out / f"checkpoint_e{trainer.epoch:04d}.afin", _echo(cfg))
    trainer.save(out / "checkpoint.afin", _echo(cfg))
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    train_set, eval_set = load_data(cfg)
    net = _restore(cfg, args.checkpoint)
    out = _out_dir(cfg, "afinet-run")
    rows = [("train", len(train_set), evaluate(net, train_set))]
    if eval_set is not None and eval_set is not train_set:
        rows.append(("test", len(eval_set), evaluate(net, eval_set)))
    lines = ["split,samples,accuracy"] + [f"{s},{n},{acc!r}" for s, n, acc in rows]
    (out / "eval.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _default_tags(net) -> list[str]:
    tags = []
    for s, blocks in enumerate(net.stages, start=1):
        for b, params in enumerate(blocks, start=1):
            tags.append(f"stage{s}.block{b}." + ("afi" if params.afi is not None else "mid"))
    return tags


def cmd_selectivity(args, cfg) -> int:
    train_set, eval_set = load_data(cfg)
    data = eval_set if eval_set is not None else train_set
    net = _restore(cfg, args.checkpoint)
    out = _out_dir(cfg, "afinet-run")
    tags = args.layer or _default_tags(net)
    summary = ["layer,filters,mean_csi"]
    for tag in tags:
        csi = interpret.class_selectivity_index(interpret.collect_activation_stats(net, data, tag))
        (out / f"csi_{tag}.csv").write_text(interpret.csi_csv(csi))
        summary.append(f"{tag},{len(csi)},{float(csi.mean())!r}")
    (out / "csi_summary.csv").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return EXIT_OK


def cmd_gradcam(args, cfg) -> int:
    train_set, eval_set = load_data(cfg)
    data = eval_set if eval_set is not None else train_set
    net = _restore(cfg, args.checkpoint)
    out = _out_dir(cfg, "afinet-run")
    tag = args.layer or _default_tags(net)[-1].rsplit(".", 1)[0] + ".out"
    for i in args.index:
        if not 0 <= i < len(data):
            raise DataError(f"sample index {i} outside [0, {len(data)})")
        target = int(data.labels[i]) if args.target_class is None else args.target_class
        if not 0 <= target < net.config.num_classes:
            raise ConfigError(f"target class {target} outside [0, {net.config.num_classes})")
        heat = interpret.grad_cam(net, data.images[i], target, tag)
        path = out / f"gradcam_{i}_class{target}.pgm"
        interpret.write_pgm(path, heat)
        print(path)
    return EXIT_OK


def cmd_lmm_demo(args, cfg) -> int:
    problem = ode.OdeProblem(lambda x, y: y, 1.0, 0.0, 1.0)
    steps = [2.0 ** -k for k in range(4, 10)]
    scheme = ode.LmmScheme(ode.ADAMS_BASHFORTH_2)
    results = {
        "euler": ode.convergence_order(ode.euler_solve, problem, np.exp, steps),
        "ab2": ode.convergence_order(lambda p: ode.lmm_solve(p, scheme), problem, np.exp, steps),
    }
    out = _out_dir(cfg, None)
    for name, (slope, rows) in results.items():
        print(f"{name}: fitted slope {slope:.4f}")
        if out is not None:
            (out / f"{name}.csv").write_text(ode.convergence_csv(rows))
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    lines = ["check,max_rel_error,pass"]
    ok = True
    for name in gradcheck.PRIMITIVES:
        err = max(gradcheck.primitive_errors(name, args.seeds))
        ok &= err < args.tolerance
        lines.append(f"{name},{err:.3e},{err < args.tolerance}")
    err = gradcheck.network_error(depth=8, samples=args.samples)
    ok &= err < args.tolerance
    lines.append(f"afi-resnet-8,{err:.3e},{err < args.tolerance}")
    print("\n".join(lines))
    out = _out_dir(cfg, None)
    if out is not None:
        (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    if not ok:
        print("gradient check failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _common(p):
    p.add_argument("--config", help="JSON run configuration; flags override its values")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--threads", type=int)


def _model(p):
    p.add_argument("--depth", type=int, help="6n+2 network depth")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--afi-stages", dest="afi_stages", type=parse_stages,
                   help="comma-separated stages holding AFI blocks, or 'none'")
    p.add_argument("--r", type=int, help="AFI reduction ratio")
    p.add_argument("--classes", type=int, help="number of output classes")


def _data(p):
    p.add_argument("--variant", choices=("synthetic", *VARIANTS))
    p.add_argument("--data-path", dest="data_path", help="CIFAR training binary")
    p.add_argument("--eval-path", dest="eval_path", help="CIFAR test binary")
    p.add_argument("--synthetic-n", dest="synthetic_n", type=int)
    p.add_argument("--synthetic-classes", dest="synthetic_classes", type=int)
    p.add_argument("--synthetic-seed", dest="synthetic_seed", type=int)
    p.add_argument("--seed", type=int)


def _train(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--schedule", choices=SCHEDULES)
    p.add_argument("--augment", dest="augment", action="store_true", default=None)
    p.add_argument("--no-augment", dest="augment", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="afinet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="parameter and FLOP tables, ResNet vs AFI-ResNet")
    _common(p)
    _model(p)
    p.add_argument("--batch", dest="flops_batch", type=int, default=32, help="FLOPs are per batch of this size")
    p.add_argument("--ledger", choices=analysis.LEDGERS, default="paper",
                   help="AFI input-count convention for scoring costs")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train a network and write metrics and checkpoints")
    _common(p)
    _model(p)
    _data(p)
    _train(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "top-1 accuracy of a checkpoint"),
                             ("selectivity", cmd_selectivity, "class selectivity index per filter"),
                             ("gradcam", cmd_gradcam, "Grad-CAM heatmaps as PGM images")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _model(p)
        _data(p)
        p.add_argument("--checkpoint", required=(name == "eval"))
        if name == "selectivity":
            p.add_argument("--layer", action="append", help="layer tag (repeatable)")
        if name == "gradcam":
            p.add_argument("--layer", help="layer tag, default: last block output")
            p.add_argument("--index", type=int, nargs="+", default=[0], help="sample indices")
            p.add_argument("--target-class", dest="target_class", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("lmm-demo", help="Euler vs two-step Adams-Bashforth convergence on y' = y")
    _common(p)
    p.set_defaults(func=cmd_lmm_demo)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
        with _thread_limit(cfg["threads"]):
            return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
