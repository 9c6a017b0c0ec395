"""Command-line surface: synth, pilot, curate, train, eval, sweep, report.

Every command resolves its settings as flag > config file > built-in
default, writes a manifest.json with the exact resolved configuration, and
produces byte-identical outputs when re-run with the same config and seed.
Exit codes: 0 success, 2 config error, 3 data error, 4 external service
failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    ClassStats,
    ConfigError,
    DataError,
    ExternalServiceError,
    LabelSpace,
    RunConfig,
    read_dataset,
    write_dataset,
)
from .metrics import EvalReport, assign_splits, evaluate, reports_to_csv, write_report
from .model import load_checkpoint, save_checkpoint, train
from .synth import CountProfile, HierarchySpec, make_auxiliary, make_counts, make_hierarchy

__all__ = ["main"]

RATIO_PRESETS = ("1:1:3", "0:1:3", "1:1:1", "1:0.5:1")
SWEEP_OPTIONS = {
    "aux_count": [1, 3, 5, 7, 8],
    "per_class_cap": [10, 30, 50, 100, 150],
    "ratio": list(RATIO_PRESETS),
    "lambda_s": [0.0, 0.1, 0.5, 1.0],
}


def _parse_ratio(text: str) -> tuple[float, float, float] | None:
    if text in ("derive", "auto"):
        return None
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"ratio must look like h:m:t, got {text!r}")
    try:
        ratio = tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"non-numeric ratio component in {text!r}")
    return ratio  # type: ignore[return-value]


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(p) for p in str(text).split(",") if p.strip() != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


def _parse_float_list(text: str) -> list[float]:
    try:
        return [float(p) for p in str(text).split(",") if p.strip() != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}")


def _load_config_file(path: str, command: str | None = None) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}")
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    # a previously written manifest is accepted as a config file, but only
    # by the command that wrote it
    if "config" in obj and "command" in obj:
        if command is not None and obj["command"] != command:
            raise ConfigError(
                f"{p} is a manifest written by '{obj['command']}', "
                f"not a config for '{command}'"
            )
        obj = obj["config"]
    return obj


def _resolve(defaults: dict, args: argparse.Namespace) -> dict:
    """flag > config file > default, with unknown file keys rejected."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config, getattr(args, "command", None))
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _out_dir(args) -> Path:
    out = Path(getattr(args, "out", None) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, cfg: dict) -> None:
    manifest = {"command": command, "version": __version__, "config": cfg}
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def _expand_tags(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        tags = tuple(text)
    elif text == "all":
        tags = ("many", "medium", "few")
    else:
        tags = tuple(t.strip() for t in str(text).split(",") if t.strip())
    bad = set(tags) - {"many", "medium", "few"}
    if bad or not tags:
        raise ConfigError(f"expand must name splits or 'all', got {text!r}")
    return tags


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    defaults = {
        "num_classes": 100,
        "num_superclasses": 10,
        "feature_dim": 64,
        "profile": "exponential",
        "imbalance": 0.01,
        "alpha": 6.0,
        "max_count": 300,
        "test_per_class": 100,
        "sigma_super": 10.0,
        "sigma_fine": 2.5,
        "sigma_sample": 1.0,
        "aux_per_target": 0,
        "samples_per_aux": 120,
        "aux_offset": 3.0,
        "expand": "medium,few",
        "names": None,
        "seed": 0,
    }
    cfg = _resolve(defaults, args)
    out = _out_dir(args)
    profile = CountProfile(
        cfg["profile"],
        cfg["num_classes"],
        cfg["max_count"],
        imbalance=cfg["imbalance"],
        alpha=cfg["alpha"],
    )
    counts = make_counts(profile, cfg["seed"])
    spec = HierarchySpec(
        num_superclasses=cfg["num_superclasses"],
        num_classes=cfg["num_classes"],
        feature_dim=cfg["feature_dim"],
        sigma_super=cfg["sigma_super"],
        sigma_fine=cfg["sigma_fine"],
        sigma_sample=cfg["sigma_sample"],
    )
    train_ds, test_ds = make_hierarchy(spec, counts, cfg["seed"], cfg["test_per_class"])

    names = None
    if cfg["names"]:
        raw = json.loads(Path(cfg["names"]).read_text())
        names = {int(k): str(v) for k, v in raw.items()}
    space = LabelSpace(num_target=cfg["num_classes"], class_names=names)

    meta = {
        "generator": {
            "profile": profile.to_json(),
            "hierarchy": spec.to_json(),
            "seed": cfg["seed"],
        },
        "train_counts": counts.counts.tolist(),
    }
    write_dataset(train_ds, space, out / "train.jsonl", extra_meta=meta)
    write_dataset(test_ds, space, out / "test.jsonl", extra_meta=meta)

    if cfg["aux_per_target"] > 0:
        tags = assign_splits(counts).tags
        targets = [
            c for c in range(cfg["num_classes"]) if tags[c] in _expand_tags(cfg["expand"])
        ]
        aux_ds, merged = make_auxiliary(
            train_ds,
            space,
            per_target=cfg["aux_per_target"],
            samples_per_aux=cfg["samples_per_aux"],
            seed=cfg["seed"],
            targets=targets,
            offset=cfg["aux_offset"],
        )
        write_dataset(aux_ds, merged, out / "aux.jsonl", extra_meta=meta)

    _write_manifest(out, "synth", cfg)
    print(f"wrote {len(train_ds)} train / {len(test_ds)} test samples to {out}")
    return 0


def cmd_pilot(args) -> int:
    from .experiments import run_pilot_grid

    defaults = {
        "superclasses": "5,25",
        "imbalances": "1.0,0.01",
        "seeds": "0,1,2,3,4",
        "num_classes": 100,
        "feature_dim": 64,
        "max_count": 300,
        "test_per_class": 100,
        "sigma_fine": 2.5,
        "jobs": 1,
    }
    cfg = _resolve(defaults, args)
    out = _out_dir(args)
    s_grid = _parse_int_list(cfg["superclasses"])
    b_grid = _parse_float_list(cfg["imbalances"])
    seeds = _parse_int_list(cfg["seeds"])
    if not s_grid or not b_grid or not seeds:
        raise ConfigError("pilot grid needs superclasses, imbalances, and seeds")

    rows = run_pilot_grid(
        s_grid,
        b_grid,
        seeds,
        jobs=cfg["jobs"],
        num_classes=cfg["num_classes"],
        feature_dim=cfg["feature_dim"],
        max_count=cfg["max_count"],
        test_per_class=cfg["test_per_class"],
        sigma_fine=cfg["sigma_fine"],
    )

    lines = ["num_superclasses,imbalance,mean_gap,std_gap,num_seeds"]
    for s in s_grid:
        for b in b_grid:
            gaps = [
                r["rank_gap"]
                for r in rows
                if r["num_superclasses"] == s and r["imbalance"] == b
            ]
            lines.append(
                f"{s},{b},{float(np.mean(gaps))},{float(np.std(gaps))},{len(gaps)}"
            )
    (out / "pilot.csv").write_text("\n".join(lines) + "\n")

    per_run = ["num_superclasses,imbalance,seed,rank_gap,final_loss"]
    for r in rows:
        per_run.append(
            f"{r['num_superclasses']},{r['imbalance']},{r['seed']},"
            f"{float(r['rank_gap'])},{float(r['final_loss'])}"
        )
    (out / "pilot_runs.csv").write_text("\n".join(per_run) + "\n")

    _write_manifest(out, "pilot", cfg)
    print((out / "pilot.csv").read_text(), end="")
    return 0


def cmd_curate(args) -> int:
    from .curation import CurationConfig, FixtureLLMClient, FixtureRetriever, HttpLLMClient, curate

    defaults = {
        "data": None,
        "llm_fixture": None,
        "corpus": None,
        "k": 5,
        "gamma1": 0.7,
        "gamma2": 0.98,
        "expand": "medium,few",
        "retries": 2,
        "jobs": 8,
        "seed": 0,
    }
    cfg = _resolve(defaults, args)
    out = _out_dir(args)
    if not cfg["data"]:
        raise ConfigError("curate needs --data pointing at a dataset manifest")
    dataset, space, _meta = read_dataset(cfg["data"])

    if cfg["llm_fixture"]:
        client = FixtureLLMClient(cfg["llm_fixture"])
    else:
        client = HttpLLMClient()  # uses TAILEXT_LLM_URL / TAILEXT_LLM_KEY
    if not cfg["corpus"]:
        raise ConfigError("no retriever configured: pass --corpus <candidates.jsonl>")
    retriever = FixtureRetriever(cfg["corpus"])

    cur_cfg = CurationConfig(
        k=cfg["k"],
        gamma_low=cfg["gamma1"],
        gamma_high=cfg["gamma2"],
        expand=_expand_tags(cfg["expand"]),
        retries=cfg["retries"],
        concurrency=cfg["jobs"],
    )
    aux, merged, report = curate(space, dataset, client, retriever, cur_cfg)

    if len(aux):
        write_dataset(aux, merged, out / "aux.jsonl", extra_meta={"curation": report})
    (out / "curation_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n"
    )
    _write_manifest(out, "curate", cfg)
    print(
        f"kept {len(aux)} samples in {merged.num_auxiliary} auxiliary classes "
        f"({len(report['empty_targets'])} empty targets)"
    )
    return 0


def _run_config_from(cfg: dict) -> RunConfig:
    ratio = cfg["ratio"]
    if isinstance(ratio, str):
        ratio = _parse_ratio(ratio)
    elif isinstance(ratio, list):
        ratio = tuple(ratio)
    return RunConfig(
        seed=cfg["seed"],
        lambda_s=cfg["lambda_s"],
        gamma1=cfg["gamma1"],
        gamma2=cfg["gamma2"],
        per_class_cap=cfg["cap"],
        aux_ratio=ratio,
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["lr"],
        optimizer=cfg["optimizer"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        hidden_dim=cfg["hidden_dim"],
    )


_TRAIN_DEFAULTS = {
    "data": None,
    "aux": None,
    "seed": 0,
    "lambda_s": 0.1,
    "gamma1": 0.7,
    "gamma2": 0.98,
    "cap": 50,
    "ratio": "derive",
    "epochs": 30,
    "batch_size": 128,
    "lr": 0.15,
    "optimizer": "sgd",
    "momentum": 0.0,
    "weight_decay": 0.0,
    "hidden_dim": None,
}


def cmd_train(args) -> int:
    cfg = _resolve(_TRAIN_DEFAULTS, args)
    out = _out_dir(args)
    if not cfg["data"]:
        raise ConfigError("train needs --data pointing at a dataset manifest")
    train_ds, space, _ = read_dataset(cfg["data"])
    aux_ds = None
    if cfg["aux"]:
        aux_ds, merged, _ = read_dataset(cfg["aux"])
        if merged.num_target != space.num_target:
            raise DataError(
                f"aux manifest targets {merged.num_target} != data targets "
                f"{space.num_target}"
            )
        space = merged

    run_cfg = _run_config_from(cfg)
    state, log = train(train_ds, aux_ds, space, run_cfg)
    save_checkpoint(state, out / "checkpoint.json")
    (out / "train_log.json").write_text(
        json.dumps(log.to_json(), indent=2, sort_keys=True) + "\n"
    )
    _write_manifest(out, "train", cfg)
    print(
        f"trained {space.num_target}+{space.num_auxiliary} classes, "
        f"final mean loss {log.epochs[-1]['mean_loss']:.6f}"
    )
    return 0


def cmd_eval(args) -> int:
    defaults = {
        "checkpoint": None,
        "test": None,
        "data": None,
        "mask_aux": True,
        "seed": 0,
    }
    cfg = _resolve(defaults, args)
    out = _out_dir(args)
    if not cfg["checkpoint"] or not cfg["test"]:
        raise ConfigError("eval needs --checkpoint and --test")
    state = load_checkpoint(cfg["checkpoint"])
    test_ds, _space, test_meta = read_dataset(cfg["test"])

    if cfg["data"]:
        train_ds, _, _ = read_dataset(cfg["data"])
        counts = train_ds.class_counts(state.space.num_target)
    elif "train_counts" in test_meta:
        counts = np.asarray(test_meta["train_counts"], dtype=np.int64)
    else:
        raise ConfigError(
            "eval needs --data for split counts (test manifest has no train_counts)"
        )
    splits = assign_splits(ClassStats(counts))
    report = evaluate(
        state, test_ds, splits, mask=cfg["mask_aux"], seed=cfg["seed"]
    )
    write_report(report, out / "report.json")
    _write_manifest(out, "eval", cfg)
    print(report.to_text())
    return 0


def cmd_sweep(args) -> int:
    from concurrent.futures import ThreadPoolExecutor

    from .experiments import BENCH_CONFIG, build_benchmark
    from .model import train as train_model

    defaults = {
        "axis": None,
        "values": None,
        "seeds": "0,1,2",
        "jobs": 1,
        "num_classes": 100,
        "num_superclasses": 10,
        "feature_dim": 64,
        "max_count": 300,
        "imbalance": 0.01,
        "test_per_class": 100,
        "epochs": 30,
    }
    cfg = _resolve(defaults, args)
    out = _out_dir(args)
    axis = cfg["axis"]
    if axis not in SWEEP_OPTIONS:
        raise ConfigError(
            f"unknown sweep axis {axis!r}; pick one of {sorted(SWEEP_OPTIONS)}"
        )
    if cfg["values"] is not None:
        if axis == "aux_count" or axis == "per_class_cap":
            values = _parse_int_list(cfg["values"])
        elif axis == "lambda_s":
            values = _parse_float_list(cfg["values"])
        else:
            values = [v for v in str(cfg["values"]).split("/") if v]
    else:
        values = SWEEP_OPTIONS[axis]
    seeds = _parse_int_list(cfg["seeds"])

    base_cfg = BENCH_CONFIG.with_overrides(epochs=cfg["epochs"])
    geometry = dict(
        num_classes=cfg["num_classes"],
        num_superclasses=cfg["num_superclasses"],
        feature_dim=cfg["feature_dim"],
        max_count=cfg["max_count"],
        imbalance=cfg["imbalance"],
        test_per_class=cfg["test_per_class"],
    )

    def run_point(value, seed) -> tuple[dict, EvalReport]:
        run_cfg = base_cfg.with_overrides(seed=seed)
        per_target = 5
        if axis == "aux_count":
            per_target = int(value)
        elif axis == "per_class_cap":
            run_cfg = run_cfg.with_overrides(per_class_cap=int(value))
        elif axis == "ratio":
            run_cfg = run_cfg.with_overrides(aux_ratio=_parse_ratio(value))
        elif axis == "lambda_s":
            run_cfg = run_cfg.with_overrides(lambda_s=float(value))
        tr, te, aux, merged = build_benchmark(seed, per_target=per_target, **geometry)
        splits = assign_splits(ClassStats(tr.class_counts(merged.num_target)))
        state, _ = train_model(tr, aux, merged, run_cfg)
        rep = evaluate(state, te, splits, mask=True, seed=seed)
        return {"axis": axis, "value": value}, rep

    points = [(v, s) for v in values for s in seeds]
    if cfg["jobs"] > 1:
        with ThreadPoolExecutor(max_workers=cfg["jobs"]) as pool:
            futures = [pool.submit(run_point, v, s) for v, s in points]
            rows = [f.result() for f in futures]
    else:
        rows = [run_point(v, s) for v, s in points]

    (out / "sweep.csv").write_text(reports_to_csv(rows, ("axis", "value")))
    _write_manifest(out, "sweep", cfg)
    print(f"swept {axis} over {values} x {len(seeds)} seeds -> {out / 'sweep.csv'}")
    return 0


def cmd_report(args) -> int:
    inputs = [Path(p) for p in args.inputs]
    if not inputs:
        raise ConfigError("report needs at least one input file")
    rows: list[tuple[dict, EvalReport]] = []
    for path in inputs:
        if not path.exists():
            raise DataError(f"report input not found: {path}")
        if path.suffix == ".csv":
            print(f"== {path} ==")
            print(path.read_text(), end="")
            continue
        obj = json.loads(path.read_text())
        report = EvalReport.from_json(obj)
        rows.append(({"source": str(path)}, report))
        print(f"== {path} ==")
        print(report.to_text())
    if rows and getattr(args, "out", None):
        out = _out_dir(args)
        (out / "report.csv").write_text(reports_to_csv(rows, ("source",)))
        print(f"wrote {out / 'report.csv'}")
    return 0


# ---------------------------------------------------------------- parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--out", help="output directory (default: current)")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tailext",
        description="Long-tail classification with open-set category extrapolation",
    )
    parser.add_argument("--version", action="version", version=f"tailext {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic long-tail dataset")
    _add_common(p)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--num-superclasses", dest="num_superclasses", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--profile", choices=("exponential", "pareto"))
    p.add_argument("--imbalance", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-count", dest="max_count", type=int)
    p.add_argument("--test-per-class", dest="test_per_class", type=int)
    p.add_argument("--sigma-super", dest="sigma_super", type=float)
    p.add_argument("--sigma-fine", dest="sigma_fine", type=float)
    p.add_argument("--sigma-sample", dest="sigma_sample", type=float)
    p.add_argument("--aux-per-target", dest="aux_per_target", type=int)
    p.add_argument("--samples-per-aux", dest="samples_per_aux", type=int)
    p.add_argument("--aux-offset", dest="aux_offset", type=float)
    p.add_argument("--expand")
    p.add_argument("--names", help="JSON file mapping class id to name")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pilot", help="granularity-vs-imbalance pilot grid")
    _add_common(p)
    p.add_argument("--superclasses")
    p.add_argument("--imbalances")
    p.add_argument("--seeds")
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--max-count", dest="max_count", type=int)
    p.add_argument("--test-per-class", dest="test_per_class", type=int)
    p.add_argument("--sigma-fine", dest="sigma_fine", type=float)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_pilot)

    p = sub.add_parser("curate", help="LLM-driven auxiliary category curation")
    _add_common(p)
    p.add_argument("--data", help="target dataset manifest (needs class names)")
    p.add_argument("--llm-fixture", dest="llm_fixture", help="fixture dir with responses.json")
    p.add_argument("--corpus", help="candidate corpus JSONL for the fixture retriever")
    p.add_argument("--k", type=int)
    p.add_argument("--gamma1", type=float)
    p.add_argument("--gamma2", type=float)
    p.add_argument("--expand")
    p.add_argument("--retries", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train", help="train a classifier on manifests")
    _add_common(p)
    p.add_argument("--data", help="target training manifest")
    p.add_argument("--aux", help="auxiliary manifest (merged label space)")
    p.add_argument("--lambda-s", dest="lambda_s", type=float)
    p.add_argument("--gamma1", type=float)
    p.add_argument("--gamma2", type=float)
    p.add_argument("--cap", type=int)
    p.add_argument("--ratio", help="h:m:t attachment counts, or 'derive'")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adamw"))
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test manifest")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--test")
    p.add_argument("--data", help="training manifest for split counts")
    p.add_argument(
        "--mask-aux",
        dest="mask_aux",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="mask auxiliary rows before predicting (default on)",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="ablation sweeps on the synthetic benchmark")
    _add_common(p)
    p.add_argument("--axis", choices=sorted(SWEEP_OPTIONS))
    p.add_argument("--values", help="override the built-in option set")
    p.add_argument("--seeds")
    p.add_argument("--jobs", type=int)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--num-superclasses", dest="num_superclasses", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--max-count", dest="max_count", type=int)
    p.add_argument("--imbalance", type=float)
    p.add_argument("--test-per-class", dest="test_per_class", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarize eval reports and sweep CSVs")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except ExternalServiceError as exc:
        print(f"external service error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
