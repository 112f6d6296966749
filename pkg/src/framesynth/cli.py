"""Command-line entry point: ``framesynth {datagen,train,synth,eval}``.

Every option can also come from a ``key = value`` config file (``--config``)
or an ``MSFS_<KEY>`` environment variable.  Precedence: flags > env > file >
defaults.  The effective configuration is echoed to ``config.txt`` in the
output directory.

Exit codes: 0 success, 2 validation error, 3 training divergence / abort.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .data import generate_corpus, load_corpus, load_frame, save_corpus, save_frame, split_corpus
from .errors import FrameSynthError, TrainingDiverged
from .training import TrainConfig, Trainer, load_checkpoint, save_checkpoint, write_curves

log = logging.getLogger("framesynth")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3
ENV_PREFIX = "MSFS_"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config parsing


def parse_bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected true/false, got {text!r}")


def int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v.strip()]


def float_list(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _converter(default) -> Callable[[str], Any]:
    if isinstance(default, bool):
        return parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def format_config(cfg: dict) -> str:
    """``key = value`` lines; the output directory itself is not echoed."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (list, tuple)):
            return ",".join(fmt(x) for x in v)
        return "" if v is None else str(v)
    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in sorted(cfg) if k != "out")


def resolve_config(schema: dict[str, tuple[Any, Callable]], flags: dict[str, Any],
                   config_file: str | None, env=None) -> dict[str, Any]:
    """Merge defaults < file < env < flags, converting strings with ``schema``."""
    env = os.environ if env is None else env
    cfg = {k: default for k, (default, _) in schema.items()}
    if config_file:
        for key, raw in read_config_file(config_file).items():
            if key not in schema:
                raise ConfigError(f"unknown config key {key!r} in {config_file}")
            cfg[key] = schema[key][1](raw)
    for key, (_, conv) in schema.items():
        raw = env.get(ENV_PREFIX + key.upper())
        if raw is not None:
            cfg[key] = conv(raw)
    for key, value in flags.items():
        if value is not None:
            cfg[key] = value
    return cfg


# ---------------------------------------------------------------------------
# command schemas: key -> (default, converter)

DATAGEN = {
    "videos": (32, int),
    "frames": (24, int),
    "size": (64, int),
    "seed": (7, int),
    "max_speed": (3, int),
    "out": (None, str),
}

_TRAIN_EXTRA = {
    "corpus": (None, str),
    "out": (None, str),
    "plot": (False, parse_bool),
}
TRAIN = {f.name: (f.default, _converter(f.default)) for f in fields(TrainConfig)}
TRAIN.update(_TRAIN_EXTRA)

SYNTH = {
    "checkpoint": (None, str),
    "x1": (None, str),
    "x2": (None, str),
    "ratios": ([0.5], float_list),
    "levels": (0, int),
    "out": (None, str),
}

EVAL = {
    "checkpoint": (None, str),
    "corpus": (None, str),
    "intervals": ([1], int_list),
    "levels": ([], int_list),
    "ratio": (0.5, float),
    "oracle": ("", str),
    "max_triplets": (0, int),
    "dataset": ("synthetic", str),
    "out": (None, str),
}

SCHEMAS = {"datagen": DATAGEN, "train": TRAIN, "synth": SYNTH, "eval": EVAL}
ALIASES = {"train": {"variant": "transitive_variant", "levels": "pyramid_levels", "blocks": "blocks_per_subnet"}}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="framesynth", description="Multi-scale frame synthesis toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key = value config file")
        aliases = {v: k for k, v in ALIASES.get(name, {}).items()}
        for key, (default, conv) in schema.items():
            opts = [f"--{key.replace('_', '-')}"]
            if key in aliases:
                opts.append(f"--{aliases[key].replace('_', '-')}")
            p.add_argument(*opts, dest=key, type=conv, default=None, help=f"default: {default}")
    return parser


def _run_dir(out: str | None, command: str) -> Path:
    path = Path(out) if out else Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_datagen(cfg: dict) -> Path:
    if cfg["size"] % 8:
        raise ConfigError(f"--size must be a multiple of 8, got {cfg['size']}")
    if cfg["videos"] < 1 or cfg["frames"] < 3:
        raise ConfigError("need at least one video of at least three frames")
    out = _run_dir(cfg["out"], "datagen")
    videos = generate_corpus(cfg["videos"], cfg["frames"], cfg["size"], cfg["seed"], cfg["max_speed"])
    save_corpus(out, videos)
    (out / "config.txt").write_text(format_config(cfg))
    log.info("wrote %d videos to %s", len(videos), out)
    return out


def cmd_train(cfg: dict) -> Path:
    if not cfg["corpus"]:
        raise ConfigError("--corpus is required")
    videos = load_corpus(cfg["corpus"])
    tcfg = TrainConfig.from_dict({k: v for k, v in cfg.items() if k not in _TRAIN_EXTRA})
    out = _run_dir(cfg["out"], "train")
    (out / "config.txt").write_text(format_config(cfg))
    train, val = split_corpus(videos, tcfg.seed, tcfg.val_fraction)
    trainer = Trainer(tcfg, train, val)
    try:
        trainer.pretrain()
        if tcfg.adversarial and tcfg.epochs_adv > 0:
            trainer.adversarial()
    finally:
        ckpt = trainer.checkpoint()
        save_checkpoint(ckpt, out / "checkpoint.msfs")
        write_curves(ckpt.curves, out / "curves.csv")
    if cfg["plot"]:
        plot_curves(ckpt.curves, out / "curves.png")
    return out


def plot_curves(rows, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    val = [r for r in rows if r["split"] == "val"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r["epoch"] for r in val], [r["psnr"] for r in val], marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_synth(cfg: dict) -> Path:
    from .evaluation import interpolate_sequence

    for key in ("checkpoint", "x1", "x2"):
        if not cfg[key]:
            raise ConfigError(f"--{key} is required")
    model = load_checkpoint(cfg["checkpoint"]).build_generator().eval()
    x1, x2 = load_frame(cfg["x1"]), load_frame(cfg["x2"])
    if x1.shape != x2.shape:
        raise ConfigError(f"input images differ in size: {x1.shape} vs {x2.shape}")
    levels = cfg["levels"] or None
    out = _run_dir(cfg["out"], "synth")
    (out / "config.txt").write_text(format_config(cfg))
    for r, frame in zip(cfg["ratios"], interpolate_sequence(model, x1, x2, cfg["ratios"], levels)):
        save_frame(out / f"ratio_{r:+.4f}.png", frame)
    return out


def cmd_eval(cfg: dict) -> Path:
    from .evaluation import ORACLES, MetricsReport, MetricsRow, depth_sweep, evaluate_dataset

    if not cfg["corpus"]:
        raise ConfigError("--corpus is required")
    corpus = load_corpus(cfg["corpus"])
    out = _run_dir(cfg["out"], "eval")
    (out / "config.txt").write_text(format_config(cfg))
    max_t = cfg["max_triplets"] or None
    if cfg["oracle"]:
        if cfg["oracle"] not in ORACLES:
            raise ConfigError(f"--oracle must be one of {sorted(ORACLES)}")
        rows = []
        for k in cfg["intervals"]:
            p, s = evaluate_dataset(cfg["oracle"], corpus, k, cfg["ratio"], max_triplets=max_t)
            rows.append(MetricsRow(cfg["dataset"], k, cfg["ratio"], 0, p, s))
        report = MetricsReport(rows)
    else:
        if not cfg["checkpoint"]:
            raise ConfigError("--checkpoint or --oracle is required")
        model = load_checkpoint(cfg["checkpoint"]).build_generator().eval()
        levels = cfg["levels"] or [model.cfg.pyramid_levels]
        report = depth_sweep(model, corpus, levels, cfg["intervals"], cfg["ratio"], cfg["dataset"], max_t)
    report.to_csv(out / "report.csv")
    table = report.to_table()
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return out


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "synth": cmd_synth, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    schema = SCHEMAS[args.command]
    flags = {k: v for k, v in vars(args).items() if k in schema}
    try:
        cfg = resolve_config(schema, flags, args.config)
        out = COMMANDS[args.command](cfg)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, FrameSynthError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
