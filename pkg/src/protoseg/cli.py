"""Command-line experiment harness.

Verbs::

    protoseg train          --config exp.ini [--seed N] [--out DIR] [--force]
    protoseg eval           CHECKPOINT [--config exp.ini] [--split val]
    protoseg ablate         --config exp.ini [--out DIR] [--force]
    protoseg export-dataset --config exp.ini --out DIR

Config files are INI with three optional sections::

    [experiment]
    variant = full
    seeds = 0, 1, 2
    output_dir = runs/full

    [dataset]
    n_unlabeled = 256

    [train]
    epochs = 4
    tau = 0.8

Keys in ``[dataset]`` and ``[train]`` are the field names of ``DatasetSpec``
and ``TrainConfig``; anything not given keeps its default.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import math
import shutil
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .data import DatasetSpec, export_dataset, load_split
from .metrics import pseudo_label_quality
from .model import SegModel
from .trainer import TrainConfig, evaluate, load_state, pseudo_label, train, warmup

log = logging.getLogger("protoseg")

SCHEMA = 1
VARIANTS = {
    "supervised_only": dict(use_unlabeled=False, use_proto=False),
    "linear_only": dict(use_proto=False),
    "proto_only": dict(use_linear=False, pseudo_source="prototype"),
    "no_proto_update": dict(update_proto=False),
    "full": dict(),
}
K_SWEEP = (1, 2, 4, 8)
TAU_SWEEP = (0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
SUMMARY_METRICS = ("val_mIoU_linear", "val_mIoU_proto", "valid_pixel_fraction", "pseudo_label_accuracy",
                   "intra_var", "inter_var", "disc_ratio")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    variant: str = "full"
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str = "runs"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"experiment.variant: unknown variant {self.variant!r}; "
                              f"choose from {', '.join(VARIANTS)}")
        if not self.seeds:
            raise ConfigError("experiment.seeds: at least one seed is required")
        try:
            self.variant_config(self.seeds[0]).validate()
        except ValueError as e:
            raise ConfigError(f"train: {e}") from None
        try:
            self.dataset.validate()
        except ValueError as e:
            raise ConfigError(f"dataset: {e}") from None

    def variant_config(self, seed: int, **overrides) -> TrainConfig:
        return dataclasses.replace(self.train, seed=seed, **{**VARIANTS[self.variant], **overrides})

    def dataset_for(self, seed: int) -> DatasetSpec:
        # each seed draws its own palette, partition and samples
        return dataclasses.replace(self.dataset, seed=seed)


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def _convert(cls, section: str, key: str, raw: str):
    hints = typing.get_type_hints(cls)
    if key not in hints:
        raise ConfigError(f"{section}.{key}: unknown field")
    tp = hints[key]
    args = typing.get_args(tp)
    optional = type(None) in args
    if optional:
        tp = next(a for a in args if a is not type(None))
    raw = raw.strip()
    if optional and raw.lower() in ("", "none"):
        return None
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return tp(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot read {raw!r} as {tp.__name__}") from None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str    # field names are case sensitive
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    unknown = set(parser.sections()) - {"experiment", "dataset", "train"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    train_kw = {k: _convert(TrainConfig, "train", k, v) for k, v in parser["train"].items()} \
        if parser.has_section("train") else {}
    data_kw = {k: _convert(DatasetSpec, "dataset", k, v) for k, v in parser["dataset"].items()} \
        if parser.has_section("dataset") else {}
    exp = ExperimentConfig(TrainConfig(**train_kw), DatasetSpec(**data_kw))
    if parser.has_section("experiment"):
        sec = parser["experiment"]
        for key in sec:
            if key not in ("variant", "seeds", "output_dir"):
                raise ConfigError(f"experiment.{key}: unknown field")
        exp.variant = sec.get("variant", exp.variant).strip()
        exp.output_dir = sec.get("output_dir", exp.output_dir).strip()
        if "seeds" in sec:
            try:
                exp.seeds = tuple(int(s) for s in sec["seeds"].replace(",", " ").split())
            except ValueError:
                raise ConfigError(f"experiment.seeds: expected integers, got {sec['seeds']!r}") from None
    exp.validate()
    return exp


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def _final_row(history: Sequence[dict]) -> dict:
    row = dict(history[-1])
    intra, inter = row["intra_var"], row["inter_var"]
    row["disc_ratio"] = inter / intra if intra and intra > 0 else math.nan
    return row


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n")


def run_seed(cfg: TrainConfig, spec: DatasetSpec, out: Path, force: bool = False,
             warm: SegModel | None = None) -> dict:
    """Train one (config, seed) cell into ``out``; reuse a finished cell unless ``force``."""
    result = out / "result.json"
    if result.exists() and (out / "final.pseg").exists() and not force:
        log.info("skipping %s (already complete)", out)
        return json.loads(result.read_text())
    if out.exists():
        shutil.rmtree(out)
    _, history = train(cfg, spec, out, warm_student=warm)
    row = _final_row(history)
    _dump_json(result, {"seed": cfg.seed, "final": row, "checkpoint_sha256": ckpt.file_digest(out / "final.pseg")})
    return json.loads(result.read_text())


def summarize(results: Sequence[dict]) -> dict:
    out = {}
    for m in SUMMARY_METRICS:
        vals = [r["final"].get(m) for r in results]
        vals = [math.nan if v is None else float(v) for v in vals]
        arr = np.array(vals)
        finite = arr[np.isfinite(arr)]
        out[m] = {"mean": float(finite.mean()) if finite.size else None,
                  "std": float(finite.std()) if finite.size else None,
                  "per_seed": vals}
    return out


def run_experiment(exp: ExperimentConfig, out_dir: Path, seeds: Sequence[int] | None = None,
                   force: bool = False) -> dict:
    seeds = tuple(exp.seeds if seeds is None else seeds)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for seed in seeds:
        results.append(run_seed(exp.variant_config(seed), exp.dataset_for(seed), out_dir / f"seed_{seed}", force))
    summary = {"schema": SCHEMA, "variant": exp.variant, "seeds": list(seeds),
               "train_config": dataclasses.asdict(exp.train), "dataset_spec": dataclasses.asdict(exp.dataset),
               "metrics": summarize(results)}
    _dump_json(out_dir / "summary.json", summary)
    return summary


def _cells(exp: ExperimentConfig, sweeps: Sequence[str]) -> list[tuple[str, str, str, dict]]:
    """(sweep, cell name, variant, overrides) for every requested sweep."""
    cells = []
    if "variants" in sweeps:
        cells += [("variants", v, v, {}) for v in VARIANTS]
    if "K" in sweeps:
        cells += [("K", f"K={k}", "full", {"K": k}) for k in K_SWEEP]
    if "tau" in sweeps:
        cells += [("tau", f"tau={t}", "full", {"tau": t}) for t in TAU_SWEEP]
    return cells


def ablate(exp: ExperimentConfig, out_dir: Path, force: bool = False,
           sweeps: Sequence[str] = ("variants", "K", "tau")) -> dict[str, list[dict]]:
    """Variant matrix, prototype-count sweep and threshold sweep over every seed.

    A cell that fails is recorded with ``status=partial`` and the error message;
    the remaining cells still run. Returns ``{sweep: rows}`` and writes one CSV
    per sweep.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = _cells(exp, sweeps)
    results: dict[tuple[str, str], dict[int, dict]] = {}
    errors: dict[tuple[str, str], str] = {}
    for seed in exp.seeds:
        spec = exp.dataset_for(seed)
        warm = None
        for sweep, name, variant, over in cells:
            cfg = dataclasses.replace(exp, variant=variant).variant_config(seed, **over)
            cell_dir = out_dir / sweep / name / f"seed_{seed}"
            try:
                if warm is None and not ((cell_dir / "result.json").exists() and not force):
                    # warm-up only sees the labeled split, so every cell of a seed shares it
                    warm = warmup(load_split(spec, "labeled"), cfg, SegModel.create(spec.C, cfg.feat_dim, seed=seed))
                results.setdefault((sweep, name), {})[seed] = run_seed(cfg, spec, cell_dir, force, warm)
            except Exception as e:          # keep the rest of the table
                log.error("cell %s/%s seed %d failed: %s", sweep, name, seed, e)
                errors[(sweep, name)] = f"{type(e).__name__}: {e}"

    tables: dict[str, list[dict]] = {}
    for sweep, name, _, _ in cells:
        per_seed = results.get((sweep, name), {})
        row = {"cell": name, "status": "partial" if (sweep, name) in errors or len(per_seed) < len(exp.seeds)
               else "ok"}
        for m in ("val_mIoU_linear", "val_mIoU_proto", "disc_ratio"):
            vals = [per_seed[s]["final"].get(m) if s in per_seed else None for s in exp.seeds]
            finite = np.array([v for v in vals if v is not None], dtype=float)
            row[f"{m}_mean"] = float(finite.mean()) if finite.size else None
            row[f"{m}_std"] = float(finite.std()) if finite.size else None
            for s, v in zip(exp.seeds, vals):
                row[f"{m}_seed{s}"] = v
        if (sweep, name) in errors:
            row["error"] = errors[(sweep, name)]
        tables.setdefault(sweep, []).append(row)
    for sweep, rows in tables.items():
        _write_table(out_dir / f"ablation_{sweep}.csv", rows)
    _dump_json(out_dir / "summary.json", {"schema": SCHEMA, "seeds": list(exp.seeds), "tables": tables})
    return tables


def _write_table(path: Path, rows: Sequence[dict]) -> None:
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in cols})


def evaluate_checkpoint(path: str | Path, spec: DatasetSpec | None = None, split: str = "val") -> dict:
    state, cfg, stored_spec = load_state(path)
    spec = spec or stored_spec
    samples = load_split(spec, split)
    ev = evaluate(state, samples, cfg)
    report = {"schema": SCHEMA, "checkpoint": str(path), "split": split, "tau": cfg.tau,
              "miou_linear": ev["miou_linear"], "miou_proto": ev["miou_proto"],
              "discrimination": {"intra_trace": ev["intra_var"], "inter_trace": ev["inter_var"],
                                 "ratio": ev["disc_ratio"]}}
    unl = load_split(spec, "unlabeled")
    if unl:
        images = np.stack([s.image for s in unl])
        truth = np.stack([s.label for s in unl])
        pl = pseudo_label(state.teacher, images, cfg)
        q = pseudo_label_quality(pl.labels, pl.valid, truth)
        report["pseudo_labels"] = {"precision": q.precision, "recall": q.recall, "coverage": q.coverage}
    return report


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="protoseg", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train every seed of one experiment")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, help="run only this seed")
    t.add_argument("--out", help="output directory (overrides experiment.output_dir)")
    t.add_argument("--force", action="store_true", help="re-run seeds that already finished")

    e = sub.add_parser("eval", help="evaluate a checkpoint and print JSON")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="take the dataset spec from this config instead of the checkpoint")
    e.add_argument("--seed", type=int, help="dataset seed when --config is given")
    e.add_argument("--split", default="val", choices=("labeled", "unlabeled", "val"))

    a = sub.add_parser("ablate", help="variant matrix plus K and tau sweeps")
    a.add_argument("--config", required=True)
    a.add_argument("--out")
    a.add_argument("--force", action="store_true")
    a.add_argument("--sweeps", default="variants,K,tau", help="comma-separated subset of variants,K,tau")

    x = sub.add_parser("export-dataset", help="write every sample as a binary file")
    x.add_argument("--config", required=True)
    x.add_argument("--seed", type=int)
    x.add_argument("--out", required=True)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "eval":
            return _cmd_eval(args)
        exp = load_config(args.config)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1

    if args.verb == "train":
        out = Path(args.out or exp.output_dir)
        seeds = [args.seed] if args.seed is not None else None
        summary = run_experiment(exp, out, seeds, force=args.force)
        print(json.dumps(_json_safe(summary["metrics"]), indent=2, sort_keys=True))
    elif args.verb == "ablate":
        tables = ablate(exp, Path(args.out or exp.output_dir), force=args.force,
                        sweeps=[s.strip() for s in args.sweeps.split(",") if s.strip()])
        for sweep, rows in tables.items():
            for r in rows:
                print(f"{sweep:9s} {r['cell']:16s} {r['status']:8s} "
                      f"mIoU {_fmt(r['val_mIoU_linear_mean'])} +- {_fmt(r['val_mIoU_linear_std'])}")
        if any(r["status"] != "ok" for rows in tables.values() for r in rows):
            return 1
    elif args.verb == "export-dataset":
        spec = exp.dataset if args.seed is None else exp.dataset_for(args.seed)
        paths = export_dataset(spec, args.out)
        print(f"wrote {len(paths)} samples to {args.out}")
    return 0


def _fmt(x) -> str:
    return "   nan" if x is None else f"{x:.4f}"


def _cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        print(f"error: no such checkpoint: {path}", file=sys.stderr)
        return 2
    spec = None
    if args.config:
        exp = load_config(args.config)
        spec = exp.dataset if args.seed is None else exp.dataset_for(args.seed)
    try:
        report = evaluate_checkpoint(path, spec, args.split)
    except ckpt.CheckpointError as e:
        print(f"error: bad checkpoint {path}: {e}", file=sys.stderr)
        return 1
    print(json.dumps(_json_safe(report), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
