"""Command-line entry point: ``hcrl {synth,train,eval,export,gradcheck}``.

Exit codes: 0 success, 1 usage, 2 numeric failure, 3 I/O.  Every artifact
written is listed on stdout as ``<kind>\\t<path>``; logs go to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as Da
from . import gradcheck as GC
from . import metrics as Me
from . import model as Mo

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

RUN_KEYS = {"data": str, "labels": str, "data_format": str}
TUPLE_KEYS = {"alpha": float, "hidden": int}

log = logging.getLogger("hcrl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- configuration --------------------------------------------------------------------

def _field_types():
    types = {}
    for f in fields(Mo.ModelConfig):
        if f.name in TUPLE_KEYS:
            types[f.name] = "tuple"
        else:
            types[f.name] = {"int": int, "float": float, "str": str}[str(f.type).split(" ")[0]]
    types.update(RUN_KEYS)
    return types


def _coerce(key, raw, types):
    kind = types[key]
    try:
        if kind == "tuple":
            return tuple(TUPLE_KEYS[key](v) for v in raw.replace(" ", "").split(",") if v)
        return kind(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from None


def parse_config_text(text, source="<config>"):
    """``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    types = _field_types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise UsageError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, raw, types)
    return out


def resolve_config(config_path=None, overrides=(), D=None):
    settings = {}
    if config_path is not None:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        settings.update(parse_config_text(text, str(config_path)))
    settings.update(parse_config_text("\n".join(overrides), "--set"))
    if D is not None:
        if "D" in settings and settings["D"] != D:
            raise UsageError(f"config D={settings['D']} but dataset has D={D}")
        settings["D"] = D
    run = {k: settings.pop(k) for k in list(settings) if k in RUN_KEYS}
    if "D" not in settings:
        raise UsageError("data dimension D unknown")
    try:
        cfg = Mo.ModelConfig(**settings)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return cfg, run


def format_config(cfg, run):
    lines = []
    d = cfg.to_dict()
    for k in sorted(d):
        v = d[k]
        lines.append(f"{k} = {','.join(repr(x) for x in v) if isinstance(v, list) else v}")
    for k in sorted(run):
        lines.append(f"{k} = {run[k]}")
    return "\n".join(lines) + "\n"


# -- helpers ----------------------------------------------------------------------

def _emit(manifest, kind, path):
    manifest.append((kind, str(path)))


def _load_dataset(path, fmt=None, labels=None):
    if path is None:
        raise UsageError("no dataset path given")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"dataset {path} does not exist")
    fmt = fmt or ("idx" if p.suffix in ("", ".idx", ".ubyte") or "ubyte" in p.name else "csv")
    if fmt == "idx":
        return Da.load_idx(p, labels)
    if fmt == "csv":
        ds = Da.load_dense_csv(p)
        if labels is not None:
            ds.labels = _read_label_csv(labels, ds.N)
        return ds
    raise UsageError(f"unknown data_format {fmt!r}")


def _read_label_csv(path, N):
    """Integer label table with a header row (as written by ``synth``)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    try:
        labels = np.array([[int(c) for c in r] for r in rows if r], dtype=np.int64)
    except ValueError as exc:
        raise Da.ParseError(f"{path}: {exc}") from None
    if labels.ndim != 2 or labels.shape[0] != N:
        raise Da.ParseError(f"{path}: {labels.shape[0] if labels.ndim else 0} label rows for {N} instances")
    return labels


def write_history(history, path):
    keys = []
    for row in history:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in history:
            w.writerow([repr(row[k]) if isinstance(row.get(k), float) else row.get(k, "") for k in keys])


# -- commands -----------------------------------------------------------------------

def cmd_synth(args, manifest):
    branching = tuple(int(b) for b in str(args.branching).split(",")) if "," in str(args.branching) \
        else int(args.branching)
    weights = None if args.level_weights is None else tuple(float(w) for w in args.level_weights.split(","))
    try:
        spec = Da.SyntheticSpec(depth=args.depth, branching=branching, decay=args.decay,
                                separation=args.separation, N=args.n, J_ambient=args.dim,
                                seed=args.seed, level_weights=weights)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = Da.gen_synthetic(spec)
    if args.standardize:
        ds.X = Da.standardize(ds.X)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_path = Da.save_dense_csv(ds, out / "data.csv")
    _emit(manifest, "data", data_path)
    _emit(manifest, "sidecar", Da.sidecar_path(data_path))
    lab_path = out / "labels.csv"
    with open(lab_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"level{l + 1}" for l in range(ds.labels.shape[1])])
        w.writerows(ds.labels.tolist())
    _emit(manifest, "labels", lab_path)
    params = {"spec": {"depth": spec.depth, "branching": list(spec.branching), "decay": spec.decay,
                       "separation": spec.separation, "N": spec.N, "J_ambient": spec.J_ambient,
                       "seed": spec.seed, "level_weights": list(spec.level_weights),
                       "standardize": bool(args.standardize)},
              "generating": ds.meta["params"], "gen_level": ds.meta["gen_level"]}
    par_path = out / "params.json"
    par_path.write_text(json.dumps(params, indent=1, sort_keys=True) + "\n")
    _emit(manifest, "params", par_path)


def cmd_train(args, manifest):
    pre_cfg = {}
    if args.config:
        try:
            pre_cfg = parse_config_text(Path(args.config).read_text(), args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    pre_cfg.update(parse_config_text("\n".join(args.set), "--set"))
    data_path = args.data or pre_cfg.get("data")
    ds = _load_dataset(data_path, pre_cfg.get("data_format"), pre_cfg.get("labels"))
    cfg, run = resolve_config(args.config, args.set, D=ds.D)
    run["data"] = str(data_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.txt"
    cfg_path.write_text(format_config(cfg, run))
    _emit(manifest, "config", cfg_path)
    model = Mo.HcrlModel(cfg)
    ckpt = out / "checkpoint.hcrl"
    if cfg.epochs == 0:
        Mo.save_model(model, ckpt)
        _emit(manifest, "checkpoint", ckpt)
        return
    history = []
    try:
        trainer = Mo.train if cfg.hierarchical else Mo.train_vade
        _, history = trainer(model, ds.X, callback=lambda m, row: history.append(row))
    except (Mo.DivergenceError, FloatingPointError) as exc:
        dump = out / "divergence.json"
        diag = getattr(exc, "diagnostics", {"epoch": model.epoch})
        dump.write_text(json.dumps({"error": str(exc), "diagnostics": diag, "history": history},
                                   indent=1, sort_keys=True, default=str) + "\n")
        _emit(manifest, "diagnostics", dump)
        raise
    Mo.save_model(model, ckpt)
    _emit(manifest, "checkpoint", ckpt)
    hist_path = out / "history.csv"
    write_history(history, hist_path)
    _emit(manifest, "history", hist_path)
    if model.tree is not None:
        for fmt in ("json", "dot"):
            p = out / f"tree.{fmt}"
            p.write_text(Me.export_tree(model, fmt, ds.X))
            _emit(manifest, f"tree_{fmt}", p)


def _load_checkpoint(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} does not exist")
    return Mo.load_model(path)


def cmd_eval(args, manifest):
    model = _load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.data, args.data_format, args.labels)
    if ds.D != model.config.D:
        raise UsageError(f"dataset has D={ds.D} but the checkpoint expects D={model.config.D}")
    if args.nll_samples < 1:
        raise UsageError("--nll-samples must be >= 1")
    report = Me.evaluate(model, ds, args.nll_samples)
    report["checkpoint"] = str(args.checkpoint)
    report["data"] = str(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jp, cp = Me.write_report(report, out / "metrics.json", out / "metrics.csv")
    _emit(manifest, "metrics_json", jp)
    _emit(manifest, "metrics_csv", cp)


def cmd_export(args, manifest):
    model = _load_checkpoint(args.checkpoint)
    if model.tree is None:
        raise UsageError("flat models have no hierarchy to export")
    X = None
    if args.data:
        X = _load_dataset(args.data, args.data_format).X
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(Me.export_tree(model, args.format, X))
    _emit(manifest, f"tree_{args.format}", out)


def cmd_gradcheck(args, manifest):
    settings = {}
    if args.config:
        try:
            settings = parse_config_text(Path(args.config).read_text(), args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    settings.update(parse_config_text("\n".join(args.set), "--set"))
    D, J = settings.get("D", 8), settings.get("J", 2)
    if D > 8 or J > 8:
        raise UsageError("gradcheck needs tiny dimensions (D, J <= 8)")
    variants = (settings["variant"],) if "variant" in settings else GC.CHECK_VARIANTS
    report = GC.run_suite(variants, D=D, J=J, L=settings.get("L", 2), K=settings.get("K", 3),
                          N=args.n, seed=args.seed, observation=settings.get("observation", "gaussian"),
                          corrupt=args.corrupt_group)
    failed = False
    for variant, groups in report.items():
        for group, err in groups.items():
            ok = err <= args.tol
            failed |= not ok
            print(f"{variant}\t{group}\t{err:.3e}\t{'PASS' if ok else 'FAIL'}")
    if args.out:
        p = Path(args.out)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        _emit(manifest, "gradcheck", p)
    if failed:
        raise FloatingPointError("gradient check exceeded tolerance")


# -- parser ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="hcrl", description="hierarchically clustered representation learning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic hierarchical dataset")
    s.add_argument("--depth", type=int, default=2)
    s.add_argument("--branching", default="3", help="int or comma list, one per inner level")
    s.add_argument("--decay", type=float, default=0.5)
    s.add_argument("--separation", type=float, default=4.0)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--dim", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--level-weights", default=None)
    s.add_argument("--standardize", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model from a key = value config")
    t.add_argument("--config")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="NLL, reconstruction error and F-score of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--labels")
    e.add_argument("--data-format", choices=("csv", "idx"))
    e.add_argument("--nll-samples", type=int, default=100)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="export the hierarchy as JSON or DOT")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--format", choices=("json", "dot"), default="json")
    x.add_argument("--data", help="annotate node masses using this dataset")
    x.add_argument("--data-format", choices=("csv", "idx"))
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)

    g = sub.add_parser("gradcheck", help="finite-difference check of every gradient group")
    g.add_argument("--config")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=32)
    g.add_argument("--tol", type=float, default=GC.TOLERANCE)
    g.add_argument("--corrupt-group", help=argparse.SUPPRESS)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    manifest = []
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        args.func(args, manifest)
        code = EXIT_OK
    except UsageError as exc:
        print(f"hcrl: error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"hcrl: numeric failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (OSError, Da.ParseError) as exc:
        print(f"hcrl: I/O error: {exc}", file=sys.stderr)
        code = EXIT_IO
    for kind, path in manifest:
        print(f"{kind}\t{path}")
    return code


if __name__ == "__main__":
    sys.exit(main())
