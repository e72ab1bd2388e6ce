"""Command-line entry point: ``nh2st <command> [flags]``.

Commands: synth, train, eval, predict, ablate, export-heatmap.  Errors are
reported on stderr as one line, ``error: <kind>: <message>``; usage errors
exit with 2 and runtime errors with 1.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import logging
import sys
from pathlib import Path

from .config import TrainConfig, read_toml
from .data import STDataset, SynthConfig, load_dataset, save_dataset, select_top_genes, synth_generate
from .metrics import METRICS, cross_validate
from .model import predict
from .numerics import load_checkpoint
from .training import train

CKPT_FILE = "model.ckpt"
CONFIG_FILE = "config.toml"
REPORT_FILE = "train_report.csv"

PRESETS = {
    "neighbors": ["K=4,8,16,25", "L=1,2,3,4"],
    "batch": ["B=4,8,16,32,64"],
    "weights": ["lambda=0:1,1:0,0.5:1,1:0.5,1:1"],
    "temperature": ["tau=0.025,0.05,0.1,0.15,0.2"],
}
GRID_ALIASES = {"B": "batch_size", "tau": "tau_temp", "lambda": ("lambda1", "lambda2")}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_DEFAULTS = TrainConfig()


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("training overrides (take precedence over --config)")
    for f in dataclasses.fields(TrainConfig):
        default = getattr(_DEFAULTS, f.name)
        kind = type(default)
        kwargs = {"type": kind, "default": None, "dest": f"cfg_{f.name}", "help": f"default: {default}"}
        if f.name == "step_unit":
            kwargs["choices"] = ("epoch", "iteration")
        group.add_argument(f"--{f.name.replace('_', '-')}", **kwargs)


def _config_overrides(args) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def _resolve_config(args, ds: STDataset) -> TrainConfig:
    """Defaults, then --config, then flags; P and n follow the dataset unless given."""
    values = read_toml(args.config) if getattr(args, "config", None) else {}
    values.update(_config_overrides(args))
    values.setdefault("P", ds.P)
    values.setdefault("n", ds.n)
    cfg = TrainConfig.from_mapping(values)
    if (cfg.P, cfg.n) != (ds.P, ds.n):
        raise ValueError(f"config expects P={cfg.P}, n={cfg.n} but dataset has P={ds.P}, n={ds.n}")
    return cfg


def _load_normalized(path, top_genes: int) -> STDataset:
    ds = load_dataset(path)
    if not ds.normalized:
        ds = select_top_genes(ds, min(top_genes, ds.n))
    return ds


def _load_model(ckpt_dir):
    root = Path(ckpt_dir)
    cfg = TrainConfig.from_toml(root / CONFIG_FILE)
    return cfg, load_checkpoint(root / CKPT_FILE)


def _write_rows(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    cfg = SynthConfig(grid=args.grid, P=args.patch_dim, n=args.genes, sigma=args.sigma, corr_length=args.corr_length)
    save_dataset(synth_generate(cfg, args.seed), args.out)


def cmd_train(args) -> None:
    ds = _load_normalized(args.data, args.top_genes)
    cfg = _resolve_config(args, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(cfg.to_toml())
    report = train(ds, cfg, checkpoint=out / CKPT_FILE)
    report.write_csv(out / REPORT_FILE)


def cmd_eval(args) -> None:
    cfg, _ = _load_model(args.ckpt)
    ds = _load_normalized(args.data, args.top_genes)
    overrides = _config_overrides(args)
    if overrides:
        cfg = cfg.replace(**overrides)
    report = cross_validate(ds, cfg, args.k, cfg.seed)
    out = Path(args.out) if args.out else Path(args.ckpt) / "eval_report.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)


def cmd_predict(args) -> None:
    cfg, params = _load_model(args.ckpt)
    ds = _load_normalized(args.data, args.top_genes)
    pred = predict(params, cfg, ds.patches)
    genes = ds.gene_names if ds.n == cfg.n else [f"gene_{j}" for j in range(cfg.n)]
    _write_rows(args.out, ["spot_id", *genes],
                ([sid, *map(repr, row.tolist())] for sid, row in zip(ds.spot_ids, pred)))


def cmd_export_heatmap(args) -> None:
    cfg, params = _load_model(args.ckpt)
    ds = _load_normalized(args.data, args.top_genes)
    g = ds.gene_index(args.gene)
    pred = predict(params, cfg, ds.patches)[:, g]
    rows = ([repr(float(x)), repr(float(y)), repr(float(p)), repr(float(lab))]
            for (x, y), p, lab in zip(ds.coords, pred, ds.expr[:, g]))
    _write_rows(args.out, ["x", "y", "pred", "label"], rows)


def _coerce(field: str, text: str):
    kind = type(getattr(_DEFAULTS, field))
    if kind is str:
        return text
    value = float(text)
    if kind is int:
        if not value.is_integer():
            raise UsageError(f"{field} needs an integer, got {text!r}")
        return int(value)
    return value


def parse_grid(tokens: list[str]) -> list[tuple[tuple[str, ...], list[tuple]]]:
    """Parse ``KEY=v1,v2`` tokens into (config fields, value tuples) axes."""
    axes = []
    for token in tokens:
        key, sep, raw = token.partition("=")
        if not sep or not raw:
            raise UsageError(f"grid entry {token!r} is not KEY=v1,v2,...")
        target = GRID_ALIASES.get(key, key)
        fields = target if isinstance(target, tuple) else (target,)
        for f in fields:
            if not hasattr(_DEFAULTS, f):
                raise UsageError(f"unknown grid key {key!r}")
        values = []
        for item in raw.split(","):
            parts = item.split(":")
            if len(parts) != len(fields):
                raise UsageError(f"grid value {item!r} needs {len(fields)} component(s) for {key}")
            try:
                values.append(tuple(_coerce(f, v) for f, v in zip(fields, parts)))
            except ValueError:
                raise UsageError(f"bad grid value {item!r} for {key}") from None
        axes.append((fields, values))
    return axes


def cmd_ablate(args) -> None:
    ds = _load_normalized(args.data, args.top_genes)
    base = _resolve_config(args, ds)
    tokens = list(args.grid or [])
    for name in args.preset or []:
        tokens += PRESETS[name]
    if not tokens:
        raise UsageError("ablate needs --grid or --preset")
    axes = parse_grid(tokens)
    columns = [f for fields, _ in axes for f in fields]
    if len(set(columns)) != len(columns):
        raise UsageError("a config key appears in more than one grid axis")
    header = [*columns] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    rows = []
    for combo in itertools.product(*(values for _, values in axes)):
        changes = {}
        for (fields, _), value in zip(axes, combo):
            changes.update(zip(fields, value))
        cfg = base.replace(**changes)
        cv = cross_validate(ds, cfg, args.k, base.seed)
        stats = [repr(v) for mu, sd in zip(cv.mean, cv.std) for v in (mu, sd)]
        rows.append([str(changes[c]) for c in columns] + stats)
        logging.getLogger(__name__).info("%s -> pcc %.4f", changes, cv.mean[2])
    _write_rows(args.out, header, rows)


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="nh2st", description="Dual-branch spot expression prediction from patch features.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--grid", type=int, default=8, help="grid side; M = grid^2 spots")
    p.add_argument("--genes", type=int, default=32, help="number of genes n")
    p.add_argument("--patch-dim", type=int, default=128, help="patch feature width P")
    p.add_argument("--sigma", type=float, default=0.05, help="noise scale")
    p.add_argument("--corr-length", type=float, default=1.5, help="spatial correlation length of the noise")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    def data_flags(p, ckpt=False):
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--top-genes", type=int, default=250,
                       help="genes kept when the dataset holds raw counts")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="directory written by `train`")

    p = sub.add_parser("train", help="train a model and write a checkpoint", formatter_class=fmt)
    data_flags(p)
    p.add_argument("--config", help="TOML file with TrainConfig keys")
    p.add_argument("--out", required=True, help="output directory for model.ckpt, config.toml, train_report.csv")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="k-fold cross-validation with the checkpoint's config", formatter_class=fmt)
    data_flags(p, ckpt=True)
    p.add_argument("--k", type=int, default=5, help="number of folds")
    p.add_argument("--out", default=None, help="report CSV (default: <ckpt>/eval_report.csv)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict expression for every spot from patches only", formatter_class=fmt)
    data_flags(p, ckpt=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="cross-validate over a hyperparameter grid", formatter_class=fmt)
    data_flags(p)
    p.add_argument("--config", help="TOML file with TrainConfig keys")
    p.add_argument("--grid", nargs="+", metavar="KEY=V1,V2",
                   help="grid axes; keys are config fields or K, L, B, tau, lambda (values l1:l2)")
    p.add_argument("--preset", nargs="+", choices=sorted(PRESETS), help="add a predefined grid")
    p.add_argument("--k", type=int, default=3, help="folds per grid point")
    p.add_argument("--out", default="ablation.csv", help="output CSV")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-heatmap", help="write x,y,pred,label for one gene", formatter_class=fmt)
    data_flags(p, ckpt=True)
    p.add_argument("--gene", required=True, help="gene name")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_export_heatmap)
    return parser


def _one_line(exc: BaseException) -> str:
    msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
    return " ".join(msg.split())


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {_one_line(exc)}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: usage: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
