"""Command-line entry point: ``subuda generate | train | eval | scan``.

Every command writes into ``--out`` a ``manifest.json`` (settings, dataset
hash, seed, version, output files) and a ``summary.json``. Failures print
one line ``error: <kind>: <message>`` on stderr and exit with 2 (config),
3 (data) or 4 (numeric).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import ConfigError, Dataset, DatasetParseError, generate_synthetic, load_csv, save_csv, shifted_task_spec
from .evaluation import UndefinedMetricError, consensus_scan, project_2d, write_history, write_rows
from .trainer import TrainConfig, _derived_seed, embed, evaluate_model, fit, label_dataset, split_dataset

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
SCAN_DEFAULTS = {
    "kn": [1, 2, 3, 4, 5, 6, 7, 8],
    "m": [4, 6, 8, 10, 12],
    "tau": [0.0, 0.5, 1.0, 2.0, 4.0],
}

log = logging.getLogger("subuda")


class DataError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v).__name__)


def _clean(metrics: dict) -> dict:
    """NaN is not JSON; report undefined metrics as null."""
    return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in metrics.items()}


def _manifest(out: Path, command: str, cfg: RunConfig, dataset: Dataset | None, outputs: list[str]) -> None:
    _write_json(out / "manifest.json", dict(
        command=command,
        version=__version__,
        seed=cfg.train.seed,
        config=cfg.snapshot(),
        dataset_fingerprint=None if dataset is None else dataset.fingerprint(),
        outputs=sorted(outputs),
    ))


def read_dataset(path, n_classes=None) -> Dataset:
    if path is None:
        raise ConfigError("--dataset is required")
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset not found: {path}")
    return load_csv(path, n_classes=n_classes)


def synthetic_dataset(cfg: RunConfig) -> Dataset:
    try:
        spec = shifted_task_spec(seed=cfg.train.seed, **cfg.generator)
    except TypeError as e:  # pragma: no cover - keys are whitelisted by the parser
        raise ConfigError(str(e)) from None
    return generate_synthetic(spec)


def cmd_generate(cfg: RunConfig, out: Path) -> dict:
    ds = synthetic_dataset(cfg)
    save_csv(ds, out / "dataset.csv")
    summary = dict(
        n_source=int(ds.source_mask.sum()),
        n_target=int(ds.target_mask.sum()),
        n_classes=ds.n_classes,
        dim=ds.input_dim,
    )
    _write_json(out / "summary.json", summary)
    _manifest(out, "generate", cfg, ds, ["dataset.csv", "summary.json"])
    return summary


def cmd_train(cfg: RunConfig, dataset_path, out: Path) -> dict:
    ds = read_dataset(dataset_path)
    outputs = ["metrics.csv", "summary.json", "checkpoint"]
    every = cfg.run.checkpoint_every

    def on_epoch(epoch, state, row):
        log.info("epoch %d acc=%.4f loss=%.4f", epoch, row.acc, row.loss_total)
        if every and epoch % every == 0:
            name = f"checkpoints/epoch_{epoch:04d}"
            save_checkpoint(out / name, state.params, state.bank, cfg.train, epoch)
            outputs.append(name)

    result = fit(ds, cfg.train, on_epoch=on_epoch)
    save_checkpoint(out / "checkpoint", result.params, result.bank, cfg.train, cfg.train.epochs)
    write_history(result.history, out / "metrics.csv")
    final = dataclasses.asdict(result.history[-1]) if result.history else {}
    summary = _clean(dict(final, skipped_classes=result.state.skipped_classes, fallbacks=result.state.fallbacks))
    _write_json(out / "summary.json", summary)
    _manifest(out, "train", cfg, ds, outputs)
    return summary


def _config_from_checkpoint(manifest: dict) -> TrainConfig:
    raw = manifest.get("config")
    if raw is None:
        return TrainConfig()
    raw = dict(raw)
    for key in ("kn", "hidden"):
        if raw.get(key) is not None:
            raw[key] = tuple(raw[key])
    try:
        return TrainConfig(**raw)
    except TypeError as e:
        raise CheckpointError(f"checkpoint config: {e}") from None


def cmd_eval(checkpoint, dataset_path, out: Path, seed=None) -> dict:
    if checkpoint is None:
        raise ConfigError("--checkpoint is required")
    params, bank, manifest = load_checkpoint(checkpoint)
    train_cfg = _config_from_checkpoint(manifest)
    if seed is not None:
        train_cfg.seed = seed
    ds = read_dataset(dataset_path, n_classes=bank.n_classes)
    if ds.input_dim != params.input_dim:
        raise DataError(f"dataset has {ds.input_dim} features, checkpoint expects {params.input_dim}")
    split = split_dataset(ds, train_cfg)
    metrics = evaluate_model(params, bank, ds, split, seed=_derived_seed(train_cfg.seed, 5))
    label_dataset(params, bank, ds, train_cfg)
    xy = project_2d(embed(params, ds.features))
    rows = [dict(x=float(xy[i, 0]), y=float(xy[i, 1]), domain=ds.domain[i], **{"class": int(ds.class_label[i])},
                 subtype=int(ds.subtype_label[i]), pseudo_class=int(ds.pseudo_class[i])) for i in range(len(ds))]
    write_rows(rows, out / "projection.csv")
    summary = _clean(dict(metrics, n_test=int(len(split.target_test)), epoch=manifest.get("epoch")))
    _write_json(out / "summary.json", summary)
    cfg = RunConfig(train=train_cfg)
    _manifest(out, "eval", cfg, ds, ["projection.csv", "summary.json"])
    return summary


def parse_values(target: str, text) -> list:
    if text is None:
        return list(SCAN_DEFAULTS[target])
    kind = float if target == "tau" else int
    try:
        vals = [kind(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values: cannot parse {text!r}") from None
    if not vals:
        raise ConfigError("--values is empty")
    return vals


def run_scan(ds: Dataset, cfg: RunConfig, target: str, values) -> list[dict]:
    """Train once per value and report final metrics; ``kn`` rows add consensus statistics.

    A ``tau`` scan runs the sub-graph scheme, where the selection radius applies.
    """
    target = target.lower()
    if target not in SCAN_DEFAULTS:
        raise ConfigError(f"scan target must be one of {sorted(SCAN_DEFAULTS)}, got {target!r}")
    consensus = {}
    if target == "kn":
        cls = ds.n_classes - 1 if cfg.run.scan_class is None else cfg.run.scan_class
        if not 0 <= cls < ds.n_classes:
            raise ConfigError(f"scan_class {cls} out of range")
        x = ds.features[ds.source_mask & (ds.class_label == cls)]
        ks = sorted(int(k) for k in values if 2 <= k <= len(x) / 2)
        if ks:
            res = consensus_scan(x, ks, n_resamples=cfg.run.consensus_resamples,
                                 subsample_rate=cfg.run.consensus_rate, seed=cfg.train.seed,
                                 threshold=cfg.run.consensus_threshold)
            for row in res.rows():
                row["recommended"] = int(row["k"] == res.recommended)
                consensus[row["k"]] = row
    rows = []
    for v in values:
        if target == "kn":
            tc = dataclasses.replace(cfg.train, kn=(int(v),))
        elif target == "m":
            tc = dataclasses.replace(cfg.train, m=int(v))
        else:
            tc = dataclasses.replace(cfg.train, tau=float(v), kn=None)
        result = fit(ds.subset(np.arange(len(ds))), tc)
        last = result.history[-1] if result.history else None
        row = {target: v}
        for name in ("acc", "auc", "a_dist", "loss_total", "loss_ce", "loss_class", "loss_sub", "clusters"):
            row[name] = getattr(last, name) if last is not None else float("nan")
        row["fallbacks"] = result.state.fallbacks
        if target == "kn":
            c = consensus.get(int(v), {})
            for name in ("cdf_area", "delta_area", "stability", "recommended"):
                row[name] = c.get(name, "")
        rows.append(row)
    return rows


def cmd_scan(cfg: RunConfig, dataset_path, target: str, values, out: Path) -> dict:
    ds = read_dataset(dataset_path)
    vals = parse_values(target.lower(), values)
    rows = run_scan(ds, cfg, target, vals)
    name = f"scan_{target.lower()}.csv"
    write_rows(rows, out / name)
    best = max(rows, key=lambda r: (np.nan_to_num(r["acc"], nan=-1.0)))
    summary = _clean(dict(target=target.lower(), values=vals, best_value=best[target.lower()], best_acc=best["acc"]))
    if target.lower() == "kn":
        rec = [r["kn"] for r in rows if r.get("recommended") == 1]
        summary["consensus_recommended"] = rec[0] if rec else None
    _write_json(out / "summary.json", summary)
    _manifest(out, f"scan {target.lower()}", cfg, ds, [name, "summary.json"])
    return summary


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subuda", description="Subtype-aware domain adaptation runs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat TOML config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("generate", help="write a synthetic dataset CSV"))
    t = sub.add_parser("train", help="train and write metrics and a checkpoint")
    common(t)
    t.add_argument("--dataset", help="dataset CSV")
    e = sub.add_parser("eval", help="evaluate a checkpoint and export a 2-D projection")
    common(e)
    e.add_argument("--dataset", help="dataset CSV")
    e.add_argument("--checkpoint", help="checkpoint directory")
    s = sub.add_parser("scan", help="sensitivity scan over kn, m or tau")
    common(s)
    s.add_argument("target", choices=sorted(SCAN_DEFAULTS), type=str.lower)
    s.add_argument("--dataset", help="dataset CSV")
    s.add_argument("--values", help="comma-separated values, e.g. 1,2,3,4")
    return p


def _one_line(msg: str) -> str:
    return " ".join(str(msg).split())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.train.seed = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with np.errstate(over="ignore", invalid="ignore"):
            if args.command == "generate":
                cmd_generate(cfg, out)
            elif args.command == "train":
                cmd_train(cfg, args.dataset, out)
            elif args.command == "eval":
                cmd_eval(args.checkpoint, args.dataset, out, seed=args.seed)
            else:
                cmd_scan(cfg, args.dataset, args.target, args.values, out)
    except ConfigError as e:
        print(f"error: config: {_one_line(e)}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetParseError, CheckpointError, UndefinedMetricError) as e:
        print(f"error: data: {_one_line(e)}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"error: numeric: {_one_line(e)}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
