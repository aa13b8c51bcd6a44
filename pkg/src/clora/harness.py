"""Experiment orchestration: specs, baselines, multi-seed runs, results files.

A run fine-tunes one method for each seed on a shared dataset bundle and a
shared pretrained backbone, evaluates in-distribution and under shift at
each requested sample count (with and without temperature scaling), and
writes deterministic artifacts: per-seed step logs, checkpoints and report
JSONs, plus an aggregated results CSV. Timestamps live only in a sidecar
metadata file so reruns are byte-identical.

Baselines: map (deterministic point estimate), mcd (map with rank-space
dropout kept on at test time), ensemble (three independently seeded map
runs averaged), blob (mean-field posterior over A), de / fe (free diagonal
/ full core posteriors), clora (contextual posterior).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import evaluation
from .adapters import AdapterConfig, Variant
from .checkpoint import (
    load_backbone,
    save_backbone,
    save_model,
)
from .datasets import DatasetBundle, DatasetSpec, ShiftSpec, generate_dataset
from .model import AdaptedModel, BackboneConfig, forward, pretrain_backbone
from .numerics import SeededRng
from .training import CheckpointState, TrainConfig, TrainData, train

ENV_RESULTS_DIR = "CLORA_RESULTS_DIR"
DEFAULT_RESULTS_DIR = "clora-results"
ENSEMBLE_SIZE = 3
MCD_DROPOUT = 0.1
SCHEMA_VERSION = 1

METHODS = ("map", "mcd", "ensemble", "blob", "de", "fe", "clora")

# method -> (adapter variant, dropout, default eval sample counts)
_METHOD_TABLE = {
    "map": (Variant.MAP, 0.0, (0,)),
    "mcd": (Variant.MAP, MCD_DROPOUT, (10,)),
    "ensemble": (Variant.MAP, 0.0, (0,)),
    "blob": (Variant.BLOB, 0.0, (0, 10)),
    "de": (Variant.DE, 0.0, (0, 10)),
    "fe": (Variant.FE, 0.0, (0, 10)),
    "clora": (Variant.CLORA, 0.0, (0, 10)),
}


class SuiteError(ValueError):
    pass


class ReportError(OSError):
    pass


@dataclass(frozen=True)
class AdapterParams:
    r: int = 8
    alpha: float = 16.0
    hidden_c: int = 64
    omega_init: float = 0.05


@dataclass(frozen=True)
class EvalSpec:
    m_values: Optional[tuple[int, ...]] = None  # None: per-method default
    bins: int = 15
    temperature: bool = True


@dataclass
class ExperimentSpec:
    name: str = "desk"
    method: str = "clora"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterParams = field(default_factory=AdapterParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    dataset_seed: int = 0
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.backbone.d_in != self.dataset.d_in:
            raise ValueError(
                f"backbone d_in={self.backbone.d_in} != dataset d_in={self.dataset.d_in}"
            )

    def adapter_config(self) -> AdapterConfig:
        variant, dropout, _ = _METHOD_TABLE[self.method]
        return AdapterConfig(
            d=self.backbone.d,
            r=self.adapter.r,
            alpha=self.adapter.alpha,
            hidden_c=self.adapter.hidden_c,
            variant=variant,
            dropout=dropout,
            omega_init=self.adapter.omega_init,
        )

    def m_values(self) -> tuple[int, ...]:
        if self.eval.m_values is not None:
            return self.eval.m_values
        return _METHOD_TABLE[self.method][2]


def spec_to_dict(spec: ExperimentSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["schema_version"] = SCHEMA_VERSION
    d["train"]["seeds"] = list(spec.train.seeds)
    if spec.eval.m_values is not None:
        d["eval"]["m_values"] = list(spec.eval.m_values)
    return d


def spec_from_dict(d: dict) -> ExperimentSpec:
    d = dict(d)
    version = d.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported spec schema_version {version}")
    ds = dict(d["dataset"])
    ds["shift_small"] = ShiftSpec(**ds["shift_small"])
    ds["shift_large"] = ShiftSpec(**ds["shift_large"])
    tr = dict(d["train"])
    tr["seeds"] = tuple(tr["seeds"])
    ev = dict(d["eval"])
    if ev.get("m_values") is not None:
        ev["m_values"] = tuple(ev["m_values"])
    return ExperimentSpec(
        name=d["name"],
        method=d["method"],
        dataset=DatasetSpec(**ds),
        backbone=BackboneConfig(**d["backbone"]),
        adapter=AdapterParams(**d["adapter"]),
        train=TrainConfig(**tr),
        eval=EvalSpec(**ev),
        dataset_seed=d["dataset_seed"],
        out_dir=d.get("out_dir"),
    )


@dataclass(frozen=True)
class ResultsRow:
    method: str
    dataset: str
    metric: str
    m: int
    temperature: bool
    mean: float
    std: Optional[float]
    seeds: tuple[int, ...]


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rows: list[ResultsRow]
    run_dir: Path
    bundle_digest: str
    seed_reports: dict[int, dict]


def resolve_out_root(spec: ExperimentSpec | None = None, out_root=None) -> Path:
    if out_root is not None:
        return Path(out_root)
    if spec is not None and spec.out_dir:
        return Path(spec.out_dir)
    return Path(os.environ.get(ENV_RESULTS_DIR, DEFAULT_RESULTS_DIR))


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _write_steps_csv(path: Path, state: CheckpointState) -> None:
    rows = [
        [str(h.step), _fmt(h.nll), _fmt(h.kl), _fmt(h.acc_val), _fmt(h.ece_val), _fmt(h.criterion)]
        for h in state.history
    ]
    _write_csv(path, ["step", "nll", "kl", "acc_val", "ece_val", "criterion"], rows)


def ensure_backbone(spec: ExperimentSpec, bundle: DatasetBundle, exp_dir: Path):
    """Pretrain the shared backbone once per experiment directory, else load it."""
    path = exp_dir / "backbone.ckpt"
    digest = bundle.digest()
    if path.exists():
        backbone, meta = load_backbone(path)
        if meta.get("bundle_digest") != digest:
            raise SuiteError(
                f"{path} was pretrained on a different dataset "
                f"(digest {meta.get('bundle_digest')}, expected {digest})"
            )
        return backbone, path
    rng = SeededRng(spec.dataset_seed).split("backbone")
    backbone = pretrain_backbone(spec.backbone, bundle.source_x, bundle.source_y, rng)
    exp_dir.mkdir(parents=True, exist_ok=True)
    save_backbone(path, backbone, {"bundle_digest": digest})
    return backbone, path


def _fit_temperature_for(models: list[AdaptedModel], bundle, m: int, seed: int) -> float:
    """Fit T on validation logits produced with the same m used at test time."""
    stacks = []
    for j, model in enumerate(models):
        rng = SeededRng(seed).split(f"temp-fit-{j}")
        for i in range(len(bundle.val_x)):
            draws = evaluation.predictive_logit_draws(
                model, bundle.val_x[i], m, rng.split(f"ex{i}")
            )
            if j == 0:
                stacks.append(draws)
            else:
                stacks[i] = np.concatenate([stacks[i], draws])
    stack = np.stack(stacks, axis=1)  # (draws, N, K)
    fit = evaluation.fit_temperature(stack, bundle.val_y)
    return fit.t


def _member_report(
    models: list[AdaptedModel],
    dataset,
    m: int,
    bins: int,
    temperature: Optional[float],
    rng_label: str,
    seed: int,
) -> evaluation.CalibrationReport:
    """Evaluate one model, or an ensemble whose members each contribute draws."""
    xs, ys = dataset
    if len(models) == 1:
        return evaluation.evaluate(
            models[0], dataset, m, bins, temperature, SeededRng(seed).split(rng_label)
        )
    rows = []
    for i in range(len(xs)):
        stacks = []
        for j, model in enumerate(models):
            rng = SeededRng(seed).split(f"{rng_label}-member{j}")
            stacks.append(evaluation.predictive_logit_draws(model, xs[i], m, rng.split(f"ex{i}")))
        stack = np.concatenate(stacks)  # (members*max(m,1), K)
        rows.append(
            evaluation._probs_from_logit_stack(
                stack[:, None, :], 1.0 if temperature is None else temperature
            )[0]
        )
    pset = evaluation.PredictionSet(
        probs=evaluation.RealMatrix(np.stack(rows)), labels=ys
    )
    ece_value, records = evaluation.ece(pset, bins)
    return evaluation.CalibrationReport(
        acc=evaluation.accuracy(pset),
        ece=ece_value,
        nll=evaluation.nll(pset),
        bins=records,
        n=pset.n,
        m=m,
        temperature=temperature,
    )


def run_experiment(spec: ExperimentSpec, out_root=None) -> ExperimentResult:
    """Train and evaluate one method across its seeds; write all artifacts."""
    root = resolve_out_root(spec, out_root)
    exp_dir = root / spec.name
    run_dir = exp_dir / spec.method
    run_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()

    bundle = generate_dataset(spec.dataset, SeededRng(spec.dataset_seed).split("dataset"))
    digest = bundle.digest()
    backbone, _ = ensure_backbone(spec, bundle, exp_dir)
    config = spec.adapter_config()
    data = TrainData(bundle.train_x, bundle.train_y, bundle.val_x, bundle.val_y)

    per_metric: dict[tuple, list[float]] = {}
    seed_reports: dict[int, dict] = {}
    for seed in spec.train.seeds:
        seed_dir = run_dir / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        models: list[AdaptedModel] = []
        checkpoints: list[CheckpointState] = []
        member_count = ENSEMBLE_SIZE if spec.method == "ensemble" else 1
        for j in range(member_count):
            rng = SeededRng(seed)
            if member_count > 1:
                rng = rng.split(f"member{j}")
            model = AdaptedModel.init(backbone, config, spec.dataset.k, rng.split("init"))
            state = train(model, data, spec.train, rng.split("train"))
            models.append(model)
            checkpoints.append(state)
            suffix = f"-member{j}" if member_count > 1 else ""
            _write_steps_csv(seed_dir / f"steps{suffix}.csv", state)
            save_model(
                seed_dir / f"model{suffix}.ckpt",
                model,
                {
                    "method": spec.method,
                    "seed": seed,
                    "bundle_digest": digest,
                    "best_step": state.best_step,
                },
            )

        evaluations = []
        for m in spec.m_values():
            temps: list[Optional[float]] = [None]
            if spec.eval.temperature:
                temps.append(_fit_temperature_for(models, bundle, m, seed))
            for temp in temps:
                for ds_name, ds in bundle.eval_sets():
                    rep = _member_report(
                        models, ds, m, spec.eval.bins, temp,
                        f"eval-{ds_name}-m{m}-{'tmp' if temp is not None else 'raw'}",
                        seed,
                    )
                    evaluations.append({"dataset": ds_name, "m": m,
                                        "temperature": temp, "report": rep.to_dict()})
                    flag = temp is not None
                    for metric, value in (("ACC", rep.acc), ("ECE", rep.ece), ("NLL", rep.nll)):
                        per_metric.setdefault((ds_name, metric, m, flag), []).append(value)

        seed_report = {
            "seed": seed,
            "method": spec.method,
            "bundle_digest": digest,
            "bayes_accuracy": bundle.bayes_accuracy,
            "checkpoints": [
                {
                    "best_step": s.best_step,
                    "best_criterion": s.best_criterion,
                    "best_acc": s.best_acc,
                    "best_ece": s.best_ece,
                }
                for s in checkpoints
            ],
            "evaluations": evaluations,
        }
        (seed_dir / "report.json").write_text(
            json.dumps(seed_report, sort_keys=True, indent=1), encoding="utf-8"
        )
        seed_reports[seed] = seed_report

    rows = []
    for (ds_name, metric, m, flag), values in sorted(per_metric.items()):
        std = float(np.std(values, ddof=1)) if len(values) >= 2 else None
        rows.append(
            ResultsRow(
                method=spec.method,
                dataset=ds_name,
                metric=metric,
                m=m,
                temperature=flag,
                mean=float(np.mean(values)),
                std=std,
                seeds=tuple(spec.train.seeds),
            )
        )
    _write_results_csv(run_dir / "results.csv", rows)
    (run_dir / "config.json").write_text(
        json.dumps(spec_to_dict(spec), sort_keys=True, indent=1), encoding="utf-8"
    )
    (run_dir / "run_meta.json").write_text(
        json.dumps(
            {"started_unix": started, "elapsed_s": time.time() - started,
             "bundle_digest": digest},
            sort_keys=True,
        ),
        encoding="utf-8",
    )
    return ExperimentResult(
        spec=spec, rows=rows, run_dir=run_dir, bundle_digest=digest, seed_reports=seed_reports
    )


RESULTS_HEADER = ["method", "dataset", "metric", "m", "temperature", "mean", "std", "seeds"]


def _write_results_csv(path: Path, rows: list[ResultsRow]) -> None:
    out = [
        [
            r.method,
            r.dataset,
            r.metric,
            str(r.m),
            "on" if r.temperature else "off",
            _fmt(r.mean),
            _fmt(r.std),
            ";".join(str(s) for s in r.seeds),
        ]
        for r in rows
    ]
    _write_csv(path, RESULTS_HEADER, out)


def run_suite(specs: list[ExperimentSpec], out_root=None) -> list[ExperimentResult]:
    """Run several methods against bit-identical data; write the comparison."""
    if not specs:
        raise SuiteError("suite needs at least one spec")
    first = specs[0]
    for spec in specs[1:]:
        if spec.dataset_seed != first.dataset_seed:
            raise SuiteError(
                f"suite specs must share a dataset seed: {spec.dataset_seed} != {first.dataset_seed}"
            )
        if spec.dataset != first.dataset or spec.name != first.name:
            raise SuiteError("suite specs must share the dataset spec and experiment name")

    results = [run_experiment(spec, out_root) for spec in specs]
    digests = {r.bundle_digest for r in results}
    if len(digests) != 1:
        raise SuiteError(f"suite runs saw different data bundles: {sorted(digests)}")

    exp_dir = results[0].run_dir.parent
    merged = [row for r in results for row in r.rows]
    _write_results_csv(exp_dir / "suite_results.csv", merged)
    (exp_dir / "comparison.txt").write_text(_comparison_text(merged), encoding="utf-8")
    return results


def _comparison_text(rows: list[ResultsRow]) -> str:
    lines = []
    keys = sorted({(r.dataset, r.metric, r.m, r.temperature) for r in rows})
    for ds_name, metric, m, temp in keys:
        group = [
            r for r in rows
            if (r.dataset, r.metric, r.m, r.temperature) == (ds_name, metric, m, temp)
        ]
        reverse = metric == "ACC"
        group.sort(key=lambda r: (-r.mean if reverse else r.mean, r.method))
        lines.append(f"== dataset={ds_name} metric={metric} m={m} temperature={'on' if temp else 'off'} ==")
        for rank, r in enumerate(group):
            mark = "  [best]" if rank == 0 else ("  [second]" if rank == 1 else "")
            std = f" +/- {r.std:.6f}" if r.std is not None else ""
            lines.append(f"  {r.method:<9} {r.mean:.6f}{std}{mark}")
        lines.append("")
    return "\n".join(lines)


def report(results_dir) -> dict:
    """Aggregate completed runs into summary.md and per-method bin CSVs."""
    root = Path(results_dir)
    report_paths = sorted(root.glob("**/seed*/report.json"))
    if not report_paths:
        raise ReportError(f"no runs found in {root}")

    runs: dict[tuple[str, str], list[dict]] = {}
    for path in report_paths:
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as err:
            raise ReportError(f"corrupt run file {path}: {err}") from err
        exp_name = path.parent.parent.parent.name
        runs.setdefault((exp_name, payload["method"]), []).append(payload)

    summary_lines = ["# Results summary", ""]
    summary: dict[tuple, dict[str, float]] = {}
    for (exp_name, method), payloads in sorted(runs.items()):
        grouped: dict[tuple, list[dict]] = {}
        for payload in payloads:
            for ev in payload["evaluations"]:
                key = (ev["dataset"], ev["m"], ev["temperature"] is not None)
                grouped.setdefault(key, []).append(ev["report"])
        summary_lines.append(f"## {exp_name} / {method}")
        summary_lines.append("")
        summary_lines.append("| dataset | m | temp | ACC | ECE | NLL | seeds |")
        summary_lines.append("|---|---|---|---|---|---|---|")
        for (ds_name, m, temp_flag), reports in sorted(grouped.items()):
            means = {
                metric: float(np.mean([rep[metric.lower()] for rep in reports]))
                for metric in ("ACC", "ECE", "NLL")
            }
            summary[(exp_name, method, ds_name, m, temp_flag)] = means
            summary_lines.append(
                f"| {ds_name} | {m} | {'on' if temp_flag else 'off'} | "
                f"{means['ACC']:.4f} | {means['ECE']:.4f} | {means['NLL']:.4f} | {len(reports)} |"
            )
            _write_bins_csv(root, exp_name, method, ds_name, m, temp_flag, reports)
        summary_lines.append("")
    (root / "summary.md").write_text("\n".join(summary_lines), encoding="utf-8")
    return {"summary": summary, "runs": {f"{k[0]}/{k[1]}": len(v) for k, v in runs.items()}}


def _write_bins_csv(root, exp_name, method, ds_name, m, temp_flag, reports) -> None:
    n_bins = len(reports[0]["bins"])
    rows = []
    for b in range(n_bins):
        recs = [rep["bins"][b] for rep in reports]
        rows.append(
            [
                str(b),
                _fmt(recs[0]["lo"]),
                _fmt(recs[0]["hi"]),
                _fmt(float(np.mean([r["count"] for r in recs]))),
                _fmt(float(np.mean([r["acc"] for r in recs]))),
                _fmt(float(np.mean([r["conf"] for r in recs]))),
            ]
        )
    name = f"bins_{exp_name}_{method}_{ds_name}_m{m}_{'tmp' if temp_flag else 'raw'}.csv"
    _write_csv(root / name, ["bin", "lo", "hi", "count", "acc", "conf"], rows)
