"""Command-line entry points: pretrain, finetune, eval, suite, report.

Configs are JSON experiment specs (see harness.spec_to_dict). On success
commands print a small JSON summary to stdout and exit 0; any failure
prints a machine-readable error JSON to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import harness
from .checkpoint import load_model
from .datasets import generate_dataset
from .numerics import SeededRng
from .training import TrainConfig


def _load_spec(path: str | None, method: str | None = None) -> harness.ExperimentSpec:
    if path is None:
        spec = harness.ExperimentSpec()
    else:
        spec = harness.spec_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    if method is not None:
        spec = dataclasses.replace(spec, method=method)
    return spec


def _parse_m(value: str) -> tuple[int, ...]:
    return tuple(int(part) for part in value.split(","))


def _apply_eval_flags(spec: harness.ExperimentSpec, args) -> harness.ExperimentSpec:
    ev = spec.eval
    if args.m is not None:
        ev = dataclasses.replace(ev, m_values=_parse_m(args.m))
    if args.bins is not None:
        ev = dataclasses.replace(ev, bins=args.bins)
    if args.temperature is not None:
        ev = dataclasses.replace(ev, temperature=args.temperature == "on")
    return dataclasses.replace(spec, eval=ev)


def cmd_pretrain(args) -> dict:
    spec = _load_spec(args.config)
    root = harness.resolve_out_root(spec, args.out)
    bundle = generate_dataset(spec.dataset, SeededRng(spec.dataset_seed).split("dataset"))
    backbone, path = harness.ensure_backbone(spec, bundle, root / spec.name)
    return {
        "backbone": str(path),
        "source_accuracy": backbone.source_accuracy,
        "bundle_digest": bundle.digest(),
    }


def cmd_finetune(args) -> dict:
    spec = _load_spec(args.config, method=args.variant)
    if args.seed is not None:
        spec = dataclasses.replace(
            spec, train=dataclasses.replace(spec.train, seeds=(args.seed,))
        )
    spec = _apply_eval_flags(spec, args)
    result = harness.run_experiment(spec, args.out)
    return {
        "run_dir": str(result.run_dir),
        "results_csv": str(result.run_dir / "results.csv"),
        "rows": len(result.rows),
        "bundle_digest": result.bundle_digest,
    }


def cmd_eval(args) -> dict:
    from . import evaluation

    spec = _load_spec(args.config)
    spec = _apply_eval_flags(spec, args)
    model, meta = load_model(args.checkpoint)
    bundle = generate_dataset(spec.dataset, SeededRng(spec.dataset_seed).split("dataset"))
    seed = int(meta.get("seed", 0))
    m = args.m_single if args.m_single is not None else spec.m_values()[0]
    temperature = None
    if spec.eval.temperature:
        temperature = harness._fit_temperature_for([model], bundle, m, seed)
    reports = {}
    for ds_name, ds in bundle.eval_sets():
        rep = evaluation.evaluate(
            model, ds, m, spec.eval.bins, temperature,
            SeededRng(seed).split(f"cli-eval-{ds_name}-m{m}"),
        )
        reports[ds_name] = rep.to_dict()
    out_root = harness.resolve_out_root(spec, args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    out_path = out_root / "eval_report.json"
    out_path.write_text(json.dumps(reports, sort_keys=True, indent=1), encoding="utf-8")
    return {"report": str(out_path), "m": m, "temperature": temperature}


def cmd_suite(args) -> dict:
    payload = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if "specs" in payload:
        specs = [harness.spec_from_dict(d) for d in payload["specs"]]
    else:
        base = payload.get("base", {})
        methods = payload.get("methods", list(harness.METHODS))
        specs = []
        for method in methods:
            d = json.loads(json.dumps(base))
            d["method"] = method
            d.setdefault("schema_version", harness.SCHEMA_VERSION)
            specs.append(harness.spec_from_dict(_fill_spec_defaults(d)))
    results = harness.run_suite(specs, args.out)
    exp_dir = results[0].run_dir.parent
    return {
        "suite_results": str(exp_dir / "suite_results.csv"),
        "comparison": str(exp_dir / "comparison.txt"),
        "methods": [r.spec.method for r in results],
    }


def _fill_spec_defaults(d: dict) -> dict:
    """Complete a partial spec dict with dataclass defaults."""
    full = harness.spec_to_dict(harness.ExperimentSpec(method=d.get("method", "clora")))
    for key, value in d.items():
        if isinstance(value, dict) and isinstance(full.get(key), dict):
            full[key].update(value)
        else:
            full[key] = value
    return full


def cmd_report(args) -> dict:
    result = harness.report(args.results)
    return {
        "summary_md": str(Path(args.results) / "summary.md"),
        "runs": result["runs"],
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clora",
        description="Desk-scale contextual low-rank adapter experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="experiment spec JSON file")
        p.add_argument("--out", help="output root (default: $%s or ./%s)"
                       % (harness.ENV_RESULTS_DIR, harness.DEFAULT_RESULTS_DIR))

    p = sub.add_parser("pretrain", help="generate data and pretrain the frozen backbone")
    add_common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune one method and evaluate it")
    add_common(p)
    p.add_argument("--variant", choices=harness.METHODS, help="method to fine-tune")
    p.add_argument("--seed", type=int, help="single training seed (default: spec seeds)")
    p.add_argument("--m", help="comma-separated predictive sample counts, e.g. 0,10")
    p.add_argument("--bins", type=int, help="calibration bin count")
    p.add_argument("--temperature", choices=("on", "off"), help="post-hoc temperature scaling")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p.add_argument("--m", dest="m_single", type=int, help="predictive sample count")
    p.add_argument("--bins", type=int, help="calibration bin count")
    p.add_argument("--temperature", choices=("on", "off"), help="post-hoc temperature scaling")
    p.set_defaults(fn=cmd_eval, m=None)

    p = sub.add_parser("suite", help="run several methods on identical data")
    add_common(p)
    p.set_defaults(fn=cmd_suite)

    p = sub.add_parser("report", help="summarize completed runs")
    p.add_argument("--results", required=True, help="results directory to scan")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        payload = args.fn(args)
    except Exception as err:  # noqa: BLE001 - CLI boundary
        error = {"error": {"type": type(err).__name__, "message": str(err)}}
        print(json.dumps(error, sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps(payload, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
