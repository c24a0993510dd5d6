"""Command-line front end: ``sonarmatch {synth,genpairs,train,eval,gradcheck}``.

Settings come from three layers, highest first: command-line flags, a
``key=value`` config file (``--config``), built-in defaults.  Keys carry a
section prefix (``synth.``, ``pairs.``, ``split.``, ``train.``,
``gradcheck.``); a bare ``seed`` seeds every section that does not set its
own.  The effective settings are written to ``effective_config.txt`` in every
output directory.

Exit status: 0 on success, 2 for usage errors and missing inputs, 3 for
invalid data or configuration, 4 for internal failures.  Errors are reported
as one line on stderr: ``sonarmatch: error[<kind>]: <message>``.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import baseline_cc, evalkit, netarch, pairgen, synthgen
from . import tensor as T
from .errors import ConfigError, InputError, SonarMatchError

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4

CONFIG_NAME = "effective_config.txt"

log = logging.getLogger("sonarmatch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _section_defaults(prefix, dc):
    return {f"{prefix}.{f.name}": getattr(dc, f.name) for f in fields(dc) if f.name != "seed"}


def default_config() -> dict:
    """Every recognised key with its default value."""
    cfg = {"seed": 0}
    cfg.update(_section_defaults("synth", synthgen.SynthConfig()))
    cfg.update(_section_defaults("pairs", pairgen.PairGenConfig()))
    cfg.update({
        "split.mode": "D",
        "split.train_classes": (),
        "split.test_fraction": 0.25,
        "train.arch": "two-chan-class",
        "train.epochs": 5,
        "train.batch_size": 128,
        "train.alpha": 0.1,
        "train.beta1": 0.9,
        "train.beta2": 0.999,
        "train.epsilon": 1e-8,
        "train.dropout_rate": 0.5,
        "train.augment": True,
        "gradcheck.samples": 6,
        "gradcheck.eps": 1e-3,
        "gradcheck.batch": 1,
    })
    for section in ("synth", "pairs", "train", "split", "gradcheck"):
        cfg[f"{section}.seed"] = None
    return cfg


def _convert(key, text, default):
    text = text.strip()
    try:
        if key.endswith(".seed"):
            return None if text.lower() in ("", "none") else int(text)
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t for t in text.replace(" ", "").split(",") if t]
            if key == "split.train_classes":
                return tuple(int(t) for t in items)
            return tuple(float(t) for t in items)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config_text(text: str, source: str = "config") -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    defaults = default_config()
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        if key not in defaults:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value, defaults[key])
    return out


def format_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        elif v is None:
            v = "none"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        else:
            v = repr(v) if not isinstance(v, str) else v
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def resolve_config(args) -> dict:
    """Merge defaults, the config file and command-line flags."""
    cfg = default_config()
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg.update(parse_config_text(path.read_text(), str(path)))
    flags = {
        "train.arch": getattr(args, "arch", None) if getattr(args, "arch", None) != "all" else None,
        "train.epochs": getattr(args, "epochs", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.alpha": getattr(args, "lr", None),
    }
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep or key.strip() not in cfg:
            raise UsageError(f"--set expects a known key=value, got {item!r}")
        flags[key.strip()] = _convert(key.strip(), value, default_config()[key.strip()])
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if args.seed is not None:
        cfg["seed"] = args.seed
        for section in ("synth", "pairs", "train", "split", "gradcheck"):
            cfg[f"{section}.seed"] = None
    for section in ("synth", "pairs", "train", "split", "gradcheck"):
        if cfg[f"{section}.seed"] is None:
            cfg[f"{section}.seed"] = cfg["seed"]
    return cfg


def _section(cfg, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def synth_config(cfg) -> synthgen.SynthConfig:
    return synthgen.SynthConfig(**_section(cfg, "synth"))


def pairgen_config(cfg) -> pairgen.PairGenConfig:
    return pairgen.PairGenConfig(**_section(cfg, "pairs"))


def train_config(cfg) -> netarch.TrainConfig:
    t = _section(cfg, "train")
    adam = T.AdamConfig(alpha=t["alpha"], beta1=t["beta1"], beta2=t["beta2"],
                        epsilon=t["epsilon"], batch_size=t["batch_size"])
    return netarch.TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], adam=adam,
                               dropout_rate=t["dropout_rate"], seed=t["seed"])


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _require_dir(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory not found: {p}")
    return p


def _require_file(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p


def _out_dir(args, cfg):
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairgen._atomic_write_text(out / CONFIG_NAME, format_config(cfg))
    return out


def _split(dataset, cfg):
    mode = cfg["split.mode"].upper()
    if mode == "D":
        classes = sorted({a.class_id for img in dataset for a in img.annotations})
        train_cls = cfg["split.train_classes"] or tuple(classes[:int(round(2 * len(classes) / 3))])
        test_cls = [c for c in classes if c not in set(train_cls)]
        return pairgen.split_disjoint_classes(dataset, train_cls, test_cls)
    if mode == "S":
        rng = np.random.default_rng(cfg["split.seed"])
        return pairgen.split_shared_classes(dataset, cfg["split.test_fraction"], rng)
    raise ConfigError(f"split.mode must be D or S, got {cfg['split.mode']!r}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg):
    out = _out_dir(args, cfg)
    sc = synth_config(cfg)
    dataset = synthgen.generate_dataset(sc)
    synthgen.write_dataset(out, dataset)
    n_obj = sum(len(img.annotations) for img in dataset)
    print(f"wrote {len(dataset)} images with {n_obj} objects to {out}")


def cmd_genpairs(args, cfg):
    dataset = pairgen.load_dataset(_require_dir(args.dataset, "dataset"))
    out = _out_dir(args, cfg)
    pc = pairgen_config(cfg)
    train_ds, test_ds = _split(dataset, cfg)
    lines = ["split images matches non_matches background_skipped"]
    for i, (name, part) in enumerate((("train", train_ds), ("test", test_ds))):
        rng = np.random.default_rng(np.random.SeedSequence([pc.seed, i]))
        summary = pairgen.PairGenSummary()
        m, nm = pairgen.generate_pairs(part, pc, rng=rng, summary=summary)
        pairgen.write_manifest(out / f"{name}_pairs.csv", m + nm, part)
        lines.append(f"{name} {len(part)} {summary.matches} {summary.non_matches} "
                     f"{summary.background_skipped}")
    pairgen._atomic_write_text(out / "pairs_summary.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_train(args, cfg):
    dataset = pairgen.load_dataset(_require_dir(args.dataset, "dataset"))
    pairs = pairgen.read_manifest(_require_file(args.pairs, "pairs"), dataset)
    out = _out_dir(args, cfg)
    if cfg["train.augment"]:
        pairs = netarch.augment_symmetric(pairs)
    tc = train_config(cfg)
    net = netarch.build(cfg["train.arch"], seed=tc.seed, dropout_rate=tc.dropout_rate)
    net, history = netarch.train(net, pairs, tc)
    netarch.save(net, out / "model.ckpt")
    text = "epoch train_loss\n" + "".join(
        f"{i + 1} {loss!r}\n" for i, loss in enumerate(history.train_loss))
    pairgen._atomic_write_text(out / "loss_history.txt", text)
    steps = "step batch_loss\n" + "".join(
        f"{i + 1} {loss!r}\n" for i, loss in enumerate(history.batch_loss))
    pairgen._atomic_write_text(out / "batch_loss.txt", steps)
    print(f"trained {net.spec.name} for {history.steps} steps; "
          f"final epoch loss {history.train_loss[-1]:.6f}")


def cmd_eval(args, cfg):
    dataset = pairgen.load_dataset(_require_dir(args.dataset, "dataset"))
    pairs = pairgen.read_manifest(_require_file(args.pairs, "pairs"), dataset)
    ckpt = _require_file(args.checkpoint, "checkpoint")
    out = _out_dir(args, cfg)
    net = netarch.load(ckpt)
    scored = evalkit.score_network(net, pairs)
    rep = evalkit.report(scored)
    evalkit.export_roc(evalkit.roc_curve(scored), out / "roc.txt")
    rows = {net.spec.name: rep}
    text = evalkit.format_report(rep)
    cc_scored, skipped = baseline_cc.score_pairs(pairs)
    if cc_scored:
        try:
            cc_rep = evalkit.report(cc_scored)
        except InputError as exc:
            log.warning("cc baseline not reported: %s", exc)
        else:
            rows["cc"] = cc_rep
            evalkit.export_roc(evalkit.roc_curve(cc_scored), out / "roc_cc.txt")
            text += evalkit.format_report(cc_rep, prefix="cc.")
    text += f"cc.skipped={skipped}\n"
    pairgen._atomic_write_text(out / "report.txt", text)
    table = evalkit.format_table(rows)
    pairgen._atomic_write_text(out / "report_table.txt", table)
    print(table, end="")


def cmd_gradcheck(args, cfg):
    names = netarch.ARCH_NAMES if args.arch in (None, "all") else (cfg["train.arch"],)
    lines = ["arch max_rel_error"]
    worst = 0.0
    for name in names:
        err = netarch.gradient_check_architecture(
            name, seed=cfg["gradcheck.seed"], batch=cfg["gradcheck.batch"],
            samples=cfg["gradcheck.samples"], eps=cfg["gradcheck.eps"])
        worst = max(worst, err)
        lines.append(f"{name} {err!r}")
    text = "\n".join(lines) + "\n"
    if args.out is not None:
        out = _out_dir(args, cfg)
        pairgen._atomic_write_text(out / "gradcheck.txt", text)
    print(text, end="")
    if not math.isfinite(worst):
        raise AssertionError("gradient check produced a non-finite error")


COMMANDS = {
    "synth": cmd_synth,
    "genpairs": cmd_genpairs,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="seed for every section")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="sonarmatch", description="Sonar patch matching pipeline.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    arch = dict(choices=netarch.ARCH_NAMES)

    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p = sub.add_parser("genpairs", parents=[common], help="write train/test pair manifests")
    p.add_argument("--dataset")
    for name, h in (("train", "train a network"), ("eval", "evaluate a checkpoint")):
        p = sub.add_parser(name, parents=[common], help=h)
        p.add_argument("--dataset")
        p.add_argument("--pairs")
        if name == "train":
            p.add_argument("--arch", **arch)
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", type=int)
            p.add_argument("--lr", type=float, help="ADAM step size")
        else:
            p.add_argument("--checkpoint")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--arch", choices=netarch.ARCH_NAMES + ("all",))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
        return 0
    except UsageError as exc:
        _fail("usage", exc)
        return EXIT_USAGE
    except SonarMatchError as exc:
        _fail("data", exc)
        return EXIT_DATA
    except OSError as exc:
        _fail("usage" if isinstance(exc, FileNotFoundError) else "io", exc)
        return EXIT_USAGE if isinstance(exc, FileNotFoundError) else EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort report
        _fail("internal", f"{type(exc).__name__}: {exc}")
        return EXIT_INTERNAL


def _fail(kind, exc):
    msg = " ".join(str(exc).split())
    print(f"sonarmatch: error[{kind}]: {msg}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
