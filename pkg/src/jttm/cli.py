"""Experiment orchestration and the ``jttm`` command line.

Configuration is a single INI document with one ``[experiment]`` section;
every key must appear in :data:`SCHEMA` (unknown keys are rejected).
Command-line flags of the same name (dashes for underscores) override the
file, and ``JTTM_OUTPUT_DIR`` / ``JTTM_WORKERS`` override those two keys only.

Output directory layout::

    manifest.jsonl          one record per (method, seed) run
    errors.jsonl            one record per failed run (only if any failed)
    checkpoints/*.jsonl     model parameters
    scores/*.jsonl          outlier scores of jtt_m runs
    sweep.jsonl             per grid point / seed dev results (sweep only)
    group_accuracy.csv      one row per group per seed per method
    summary.csv             mean / std per method and metric
    report.md               tables derived from the above
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .dataset import (
    Dataset, DatasetError, EmbeddingSchema, GroupKey, SyntheticSpec, all_group_keys,
    canonical_spec, export_embeddings, generate_synthetic, group_partition, load_embeddings,
)
from .eval import (
    AggregateReport, GroupReport, aggregate, evaluate_groups,
)
from .model import load_params, save_params
from .ood import export_scores
from .trainer import METHODS, TrainConfig, TrainedModel, train

logger = logging.getLogger("jttm")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _int_list(s: str) -> List[int]:
    return [int(x) for x in s.replace(",", " ").split()]


def _float_list(s: str) -> List[float]:
    return [float(x) for x in s.replace(",", " ").split()]


def _str_list(s: str) -> List[str]:
    return [x for x in s.replace(",", " ").split()]


def _opt(parse: Callable) -> Callable:
    return lambda s: None if s.strip().lower() in ("", "none") else parse(s)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _group(s: str) -> Tuple[int, int]:
    y, a = _int_list(s)
    return (y, a)


# key -> (parser, default). Train-config keys share names with TrainConfig.
SCHEMA: Dict[str, Tuple[Callable, object]] = {
    "synthetic": (_opt(str), None),            # "canonical" or a JSON file of per-split SyntheticSpecs
    "label_noise_rate": (float, 0.0),          # canonical source only, applied to train
    "train_path": (_opt(str), None),
    "dev_path": (_opt(str), None),
    "test_path": (_opt(str), None),
    "label_names": (_opt(_str_list), None),
    "num_classes": (_opt(int), None),
    "methods": (_str_list, ["erm", "jtt", "jtt_m"]),
    "seeds": (_int_list, [0, 1, 2, 3, 4]),
    "df_grid": (_int_list, [4, 5, 6]),
    "lambda_grid": (_float_list, [1.0, 2.0, 3.0, 4.0]),
    "focal_group": (_opt(_group), None),
    "output_dir": (str, "results"),
    "workers": (int, 1),
    "epochs": (int, 2),
    "batch_size": (int, 32),
    "learning_rate": (float, 1e-2),
    "stage1_learning_rate": (_opt(float), None),
    "stage1_epochs": (_opt(int), None),
    "optimizer_stage1": (str, "sgd"),
    "optimizer_stage2": (str, "adamw"),
    "weight_decay": (float, 0.0),
    "grad_clip": (_opt(float), 1.0),
    "lr_schedule": (str, "linear_decay"),
    "lambda_up": (_opt(float), None),
    "df": (_opt(int), None),
    "alpha": (float, 1e-3),
    "hidden": (_int_list, [16]),
    "ood_statistic": (str, "squared"),
    "stage2_from_stage1": (_bool, False),
}

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


@dataclass
class ExperimentConfig:
    values: Dict[str, object] = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        kw = {k: v for k, v in self.values.items() if k in _TRAIN_KEYS and v is not None}
        kw.update(overrides)
        cfg = TrainConfig(seed=seed, **kw)
        cfg.validate()
        return cfg

    def validate(self, need_hyper: bool = True) -> None:
        v = self.values
        if not v["seeds"] or len(set(v["seeds"])) != len(v["seeds"]):
            raise ConfigError("seeds must be a nonempty list of distinct integers")
        bad = [m for m in v["methods"] if m not in METHODS]
        if bad or not v["methods"]:
            raise ConfigError(f"methods must be a nonempty subset of {METHODS}, got {v['methods']}")
        if v["synthetic"] is None and v["train_path"] is None:
            raise ConfigError("set either 'synthetic' or 'train_path'")
        if v["workers"] < 1:
            raise ConfigError("workers must be >= 1")
        if need_hyper and any(m != "erm" for m in v["methods"]):
            if v["lambda_up"] is None or ("jtt_m" in v["methods"] and v["df"] is None):
                raise ConfigError("lambda_up (and df for jtt_m) must be given explicitly; "
                                  "run 'sweep' on a dev split to choose them")

    def to_dict(self) -> dict:
        return dict(self.values)


def parse_config_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_string(text)
    extra_sections = [s for s in parser.sections() if s != "experiment"]
    if extra_sections:
        raise ConfigError(f"unknown section(s): {extra_sections}")
    cfg = ExperimentConfig()
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            set_value(cfg, key, raw)
    return cfg


def set_value(cfg: ExperimentConfig, key: str, raw: str) -> None:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parse = SCHEMA[key][0]
    try:
        cfg.values[key] = parse(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def apply_environment(cfg: ExperimentConfig, environ=None) -> None:
    environ = os.environ if environ is None else environ
    if environ.get("JTTM_OUTPUT_DIR"):
        cfg.values["output_dir"] = environ["JTTM_OUTPUT_DIR"]
    if environ.get("JTTM_WORKERS"):
        set_value(cfg, "workers", environ["JTTM_WORKERS"])


def canonical_experiment(label_noise_rate: float = 0.0, **overrides) -> ExperimentConfig:
    """Settings of the acceptance experiments on :func:`canonical_spec` data."""
    cfg = ExperimentConfig()
    cfg.values.update(
        synthetic="canonical",
        label_noise_rate=label_noise_rate,
        hidden=[8],
        df=8,
        lambda_up=4.0,
        stage1_learning_rate=0.002,
    )
    cfg.values.update(overrides)
    return cfg


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def load_splits(cfg: ExperimentConfig) -> Dict[str, Dataset]:
    """Datasets for the train / dev / test splits named by the config."""
    if cfg.synthetic == "canonical":
        return {
            "train": generate_synthetic(canonical_spec("train", cfg.label_noise_rate)),
            "dev": generate_synthetic(canonical_spec("dev")),
            "test": generate_synthetic(canonical_spec("test")),
        }
    if cfg.synthetic is not None:
        specs = json.loads(Path(cfg.synthetic).read_text(encoding="utf-8"))
        unknown = set(specs) - {"train", "dev", "test"}
        if unknown or "train" not in specs:
            raise ConfigError("synthetic spec file needs a 'train' entry and only train/dev/test keys")
        return {split: generate_synthetic(SyntheticSpec.from_dict({**d, "split_tag": split}))
                for split, d in specs.items()}
    out = {}
    for split in ("train", "dev", "test"):
        path = cfg.values[f"{split}_path"]
        if path:
            schema = EmbeddingSchema(label_names=cfg.label_names, num_classes=cfg.num_classes, split_tag=split)
            out[split] = load_embeddings(path, schema)
    return out


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def run_name(method: str, seed: int, tag: str = "") -> str:
    return f"{method}{tag}_seed{seed}"


def _run_one(method: str, seed: int, train_cfg: TrainConfig, splits: Dict[str, Dataset]) -> Tuple[TrainedModel, float]:
    start = time.perf_counter()
    model = train(method, splits["train"], train_cfg)
    return model, time.perf_counter() - start


def _job(args):
    method, seed, train_cfg, splits = args
    try:
        return _run_one(method, seed, train_cfg, splits), None
    except Exception as exc:  # reported as a structured error record
        return None, {"method": method, "seed": seed, "error": type(exc).__name__,
                      "message": str(exc), "traceback": traceback.format_exc()}


def _map_jobs(jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_job, jobs))


def ood_counts(model: TrainedModel, train_set: Dataset) -> Optional[List[List[int]]]:
    """[label, attribute, |E in group|, |E in group and out|] per group for a jtt_m run."""
    if model.partition is None:
        return None
    rows = []
    for key, ids in group_partition(train_set).items():
        errs = model.error_ids.intersection(ids)
        rows.append([key.label, key.attribute, len(errs), len(errs & model.partition.s_out)])
    return rows


def write_run(out: Path, model: TrainedModel, seed: int, splits: Dict[str, Dataset],
              seconds: float, tag: str = "") -> dict:
    name = run_name(model.method, seed, tag)
    ckpt = Path("checkpoints") / f"{name}.jsonl"
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    save_params(model.params, out / ckpt, extra={"method": model.method, "seed": seed})
    rec = {
        "method": model.method,
        "seed": seed,
        "config": model.config,
        "error_set_size": model.error_set_size,
        "removed_outliers": model.removed_outliers,
        "checkpoint": str(ckpt),
        "wall_clock_seconds": round(seconds, 3),
        "label_names": splits["train"].label_names,
        "reports": {split: evaluate_groups(model, ds).to_dict()
                    for split, ds in splits.items() if split != "train"},
    }
    if model.partition is not None:
        (out / "scores").mkdir(parents=True, exist_ok=True)
        export_scores(model.partition, out / "scores" / f"{name}.jsonl")
        rec["ood_counts"] = ood_counts(model, splits["train"])
    return rec


def _append_jsonl(path: Path, records) -> None:
    with path.open("a", encoding="utf-8") as handle:
        for rec in records:
            handle.write(json.dumps(rec, sort_keys=True) + "\n")


def _reset(out: Path, names: Sequence[str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for n in names:
        p = out / n
        if p.exists():
            p.unlink()


def run_experiment(cfg: ExperimentConfig, splits: Optional[Dict[str, Dataset]] = None) -> int:
    """Train every (method, seed), write manifests and reports; returns an exit code."""
    cfg.validate()
    splits = splits or load_splits(cfg)
    if "test" not in splits:
        raise ConfigError("run needs a test split")
    out = Path(cfg.output_dir)
    _reset(out, ["manifest.jsonl", "errors.jsonl"])
    jobs = [(m, s, cfg.train_config(s), splits) for m in cfg.methods for s in cfg.seeds]
    failures = 0
    for (method, seed, _, _), (result, err) in zip(jobs, _map_jobs(jobs, cfg.workers)):
        if err is not None:
            failures += 1
            logger.error("run %s seed %d failed: %s", method, seed, err["message"])
            _append_jsonl(out / "errors.jsonl", [err])
            continue
        model, seconds = result
        _append_jsonl(out / "manifest.jsonl", [write_run(out, model, seed, splits, seconds)])
    if failures < len(jobs):
        emit_report(out, focal_group=cfg.focal_group)
    return 1 if failures else 0


@dataclass
class SweepResult:
    # (df, lambda_up) -> seed -> dev worst-group accuracy
    dev_worst: Dict[Tuple[int, float], Dict[int, float]]
    selected: Tuple[int, float]

    def mean(self, point) -> float:
        vals = self.dev_worst[point]
        return sum(vals.values()) / len(vals)


def select_point(dev_worst: Dict[Tuple[int, float], Dict[int, float]]) -> Tuple[int, float]:
    """Grid point with the best mean dev worst-group accuracy.

    Ties go to the smaller lambda_up, then the smaller df.
    """
    if not dev_worst:
        raise ConfigError("empty grid")

    def key(point):
        df, lam = point
        vals = dev_worst[point]
        return (-sum(vals.values()) / len(vals), lam, df)

    return min(dev_worst, key=key)


def run_sweep(cfg: ExperimentConfig, splits: Optional[Dict[str, Dataset]] = None,
              trainer: Callable = train) -> SweepResult:
    """Train jtt_m on every (df, lambda_up) grid point and seed; pick by dev worst-group."""
    cfg.validate(need_hyper=False)
    if not cfg.df_grid or not cfg.lambda_grid:
        raise ConfigError("sweep needs nonempty df_grid and lambda_grid")
    splits = splits or load_splits(cfg)
    if "dev" not in splits:
        raise ConfigError("sweep needs a dev split")
    out = Path(cfg.output_dir)
    _reset(out, ["sweep.jsonl", "manifest.jsonl", "errors.jsonl"])

    dev_worst: Dict[Tuple[int, float], Dict[int, float]] = {}
    models: Dict[Tuple[int, float, int], Tuple[TrainedModel, float]] = {}
    records = []
    for df in cfg.df_grid:
        for lam in cfg.lambda_grid:
            for seed in cfg.seeds:
                tc = cfg.train_config(seed, df=df, lambda_up=lam)
                start = time.perf_counter()
                model = trainer("jtt_m", splits["train"], tc)
                seconds = time.perf_counter() - start
                worst = evaluate_groups(model, splits["dev"]).worst_group[1]
                dev_worst.setdefault((df, lam), {})[seed] = worst
                models[(df, lam, seed)] = (model, seconds)
                records.append({"df": df, "lambda_up": lam, "seed": seed, "dev_worst": worst,
                                "error_set_size": model.error_set_size,
                                "removed_outliers": model.removed_outliers})
    _append_jsonl(out / "sweep.jsonl", records)
    selected = select_point(dev_worst)
    _append_jsonl(out / "sweep.jsonl", [{"selected": {"df": selected[0], "lambda_up": selected[1]}}])

    if "test" in splits:
        for seed in cfg.seeds:
            model, seconds = models[(*selected, seed)]
            _append_jsonl(out / "manifest.jsonl", [write_run(out, model, seed, splits, seconds)])
        emit_report(out, focal_group=cfg.focal_group)
    return SweepResult(dev_worst=dev_worst, selected=selected)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def read_manifest(results_dir) -> List[dict]:
    path = Path(results_dir) / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.jsonl in {results_dir}")
    with path.open("r", encoding="utf-8") as handle:
        recs = [json.loads(line) for line in handle if line.strip()]
    if not recs:
        raise ValueError(f"{path} holds no runs")
    return recs


def _method_order(methods) -> List[str]:
    known = [m for m in METHODS if m in methods]
    return known + sorted(set(methods) - set(known))


def _pct(mean: float, std: float) -> str:
    if std != std:  # single run
        return f"{100 * mean:.1f}"
    return f"{100 * mean:.1f} ± {100 * std:.1f}"


def _marker(agg: AggregateReport, method: str, metric: str, baseline: str) -> str:
    if method == baseline or baseline not in agg.values:
        return ""
    try:
        xs, _ = agg.paired(method, baseline, metric)
    except (ValueError, KeyError):
        return ""
    if len(xs) < 2:
        return ""
    p = agg.significance(method, baseline, metric)
    if p is None:
        return " (n/a)"
    return "*" if p < 0.05 else ""


def _md_table(header: List[str], rows: List[List[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines)


def emit_report(results_dir, focal_group: Optional[Tuple[int, int]] = None, split: str = "test",
                baseline: str = "jtt") -> str:
    """Write report.md, group_accuracy.csv and summary.csv from the manifest; return the Markdown."""
    out = Path(results_dir)
    recs = read_manifest(out)
    recs = [r for r in recs if split in r["reports"]]
    if not recs:
        raise ValueError(f"no runs carry a {split!r} report")
    label_names = recs[0].get("label_names")
    by_method: Dict[str, Dict[int, GroupReport]] = {}
    for r in recs:
        by_method.setdefault(r["method"], {})[int(r["seed"])] = GroupReport.from_dict(r["reports"][split], label_names)
    methods = _method_order(by_method)
    agg = aggregate(by_method)
    num_classes = recs[0]["reports"][split]["num_classes"]
    keys = all_group_keys(num_classes)

    # per group per seed rows
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed", "split", "label", "attribute", "group", "correct", "total", "accuracy"])
    for m in methods:
        for seed, rep in sorted(by_method[m].items()):
            for k in keys:
                s = rep.per_group[k]
                w.writerow([m, seed, split, k.label, k.attribute, k.name(label_names),
                            s.correct, s.total, repr(s.accuracy) if s.total else ""])
    (out / "group_accuracy.csv").write_text(buf.getvalue(), encoding="utf-8")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "metric", "n", "mean", "std"])
    for m in methods:
        for metric in agg.metrics(m):
            mean, std = agg.summary(m, metric)
            n = sum(1 for v in agg.values[m].values() if metric in v)
            w.writerow([m, metric, n, repr(mean), "" if std != std else repr(std)])
    (out / "summary.csv").write_text(buf.getvalue(), encoding="utf-8")

    # method x (avg, worst) table
    header = ["Method", "Avg. (%)", "Worst (%)"]
    focal_metric = None
    if focal_group is not None:
        fk = GroupKey(*focal_group)
        focal_metric = f"group_{fk.label}_{fk.attribute}"
        header.append(f"{fk.name(label_names)} (%)")
    rows = []
    for m in methods:
        row = [m]
        for metric in ("average", "worst") + ((focal_metric,) if focal_metric else ()):
            if metric not in agg.metrics(m):
                row.append("-")
                continue
            row.append(_pct(*agg.summary(m, metric)) + _marker(agg, m, metric, baseline))
        rows.append(row)
    seeds = sorted({int(r["seed"]) for r in recs})
    parts = [
        "# Results",
        f"Split: {split}. Seeds: {', '.join(map(str, seeds))}. Mean ± sample std over seeds; "
        f"`*` marks p < 0.05 in a two-sided paired t-test against {baseline}, `(n/a)` a degenerate test.",
        "## Average and worst-group accuracy",
        _md_table(header, rows),
    ]

    # group x method table
    rows = []
    for k in keys:
        row = [k.name(label_names)]
        for m in methods:
            metric = f"group_{k.label}_{k.attribute}"
            if metric in agg.metrics(m):
                row.append(_pct(*agg.summary(m, metric)) + _marker(agg, m, metric, baseline))
            else:
                row.append("-")
        rows.append(row)
    parts += ["## Accuracy per group", _md_table(["Group"] + methods, rows)]

    # outlier share of each group's error set, jtt_m runs only
    ood_recs = [r for r in recs if r.get("ood_counts")]
    if ood_recs:
        rows = []
        for k in keys:
            fr = []
            n_err = n_out = 0
            for r in ood_recs:
                for y, a, ne, no in r["ood_counts"]:
                    if (y, a) == (k.label, k.attribute):
                        n_err += ne
                        n_out += no
                        if ne:
                            fr.append(no / ne)
            cell = "-" if not fr else _pct(sum(fr) / len(fr), float("nan"))
            rows.append([k.name(label_names), cell, str(n_out), str(n_err)])
        parts += ["## Outliers in the error set (jtt_m)",
                  "Share of each group's stage-1 errors removed as outliers, averaged over seeds "
                  "(`-`: group has no errors).",
                  _md_table(["Group", "Removed (%)", "Removed", "Errors"], rows)]
    text = "\n\n".join(parts) + "\n"
    (out / "report.md").write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with an [experiment] section")
    for key in SCHEMA:
        p.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar="VALUE")


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for key in SCHEMA:
        raw = getattr(args, "cfg_" + key, None)
        if raw is not None:
            set_value(cfg, key, raw)
    apply_environment(cfg)
    return cfg


def _cmd_generate(args) -> int:
    if args.spec:
        spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    else:
        spec = canonical_spec(args.split, args.noise)
    if args.seed is not None:
        spec.seed = args.seed
    ds = generate_synthetic(spec)
    export_embeddings(ds, args.out)
    print(f"wrote {len(ds)} examples to {args.out}")
    return 0


def _cmd_run(args) -> int:
    return run_experiment(_config_from_args(args))


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    cfg.values["methods"] = [args.method]
    cfg.values["seeds"] = [args.seed]
    return run_experiment(cfg)


def _cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    res = run_sweep(cfg)
    df, lam = res.selected
    print(f"selected df={df} lambda_up={lam} (mean dev worst-group {100 * res.mean(res.selected):.1f}%)")
    return 0


def _cmd_evaluate(args) -> int:
    params = load_params(args.checkpoint)
    schema = EmbeddingSchema(label_names=_str_list(args.label_names) if args.label_names else None,
                             num_classes=args.num_classes, split_tag="test")
    ds = load_embeddings(args.data, schema)
    rep = evaluate_groups(params, ds)
    key, worst = rep.worst_group
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["label", "attribute", "group", "correct", "total", "accuracy"])
    for k in all_group_keys(ds.num_classes):
        s = rep.per_group[k]
        w.writerow([k.label, k.attribute, k.name(ds.label_names), s.correct, s.total,
                    f"{s.accuracy:.6f}" if s.total else ""])
    print(f"# average {rep.average_accuracy:.6f}; worst {key.name(ds.label_names)} {worst:.6f}")
    return 0


def _cmd_report(args) -> int:
    text = emit_report(args.results, focal_group=_group(args.focal_group) if args.focal_group else None)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jttm", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset as line-delimited JSON")
    p.add_argument("--spec", help="SyntheticSpec JSON file (default: the canonical benchmark)")
    p.add_argument("--split", default="train", choices=["train", "dev", "test"])
    p.add_argument("--noise", type=float, default=0.0, help="label noise rate (canonical only)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("run", help="all configured methods and seeds, then the report")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("train", help="one method, one seed")
    _add_config_flags(p)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="choose df and lambda_up on the dev split")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("evaluate", help="group accuracies of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--label-names")
    p.add_argument("--num-classes", type=int)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="rebuild tables from a results directory")
    p.add_argument("results")
    p.add_argument("--focal-group", help="label,attribute of the fixed focal group")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, FileNotFoundError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
